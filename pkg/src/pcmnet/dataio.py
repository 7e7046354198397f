"""Feature files, annotations, temporal rescaling/windowing and synthetic data."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensorgrad import interp_weights

FEATURE_MAGIC = b"PCMF"


# ---------------------------------------------------------------------------
# feature files


def write_features(path, X: np.ndarray) -> None:
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"features must be 2-D, got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("features contain non-finite values")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", *X.shape))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    """Read a ``PCMF`` file as a float32 ``(T_raw, C_raw)`` array."""
    buf = Path(path).read_bytes()
    if buf[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}")
    T, C = struct.unpack_from("<II", buf, 4)
    payload = buf[12:]
    if len(payload) != 4 * T * C:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {4 * T * C}")
    X = np.frombuffer(payload, dtype="<f4").reshape(T, C).astype(np.float32)
    if not np.isfinite(X).all():
        raise ValueError(f"{path}: non-finite feature values")
    return X


# ---------------------------------------------------------------------------
# annotations


@dataclass
class Instance:
    start: float
    end: float
    label: str = "action"


@dataclass
class VideoAnnotation:
    video_id: str
    num_frames: int
    instances: List[Instance] = field(default_factory=list)
    fps: float = 1.0

    def __post_init__(self):
        self.instances = [i if isinstance(i, Instance) else Instance(**i) for i in self.instances]
        for inst in self.instances:
            if not 0 <= inst.start < inst.end <= self.num_frames:
                raise ValueError(f"{self.video_id}: instance {inst} outside [0, {self.num_frames}]")
        if self.fps <= 0:
            raise ValueError(f"{self.video_id}: fps must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "VideoAnnotation":
        unknown = set(d) - {"video_id", "num_frames", "instances", "fps"}
        if unknown:
            raise ValueError(f"unknown annotation keys {sorted(unknown)}")
        return cls(str(d["video_id"]), int(d["num_frames"]), list(d.get("instances", [])),
                   float(d.get("fps", 1.0)))

    def to_dict(self) -> dict:
        return asdict(self)

    def intervals(self) -> List[Tuple[float, float]]:
        return [(i.start, i.end) for i in self.instances]


def read_annotations(path) -> List[VideoAnnotation]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [VideoAnnotation.from_dict(d) for d in data]


def write_annotations(path, annotations: Sequence[VideoAnnotation]) -> None:
    Path(path).write_text(json.dumps([a.to_dict() for a in annotations], indent=1))


def frames_to_seconds(frames: float, ann: VideoAnnotation) -> float:
    return float(frames) / ann.fps


# ---------------------------------------------------------------------------
# temporal resampling


def rescale_linear(X_raw: np.ndarray, T: int) -> np.ndarray:
    """Resample ``(T_raw, C)`` features to ``T`` rows spanning ``[0, T_raw-1]``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    X_raw = np.asarray(X_raw)
    T_raw = X_raw.shape[0]
    if T_raw < 1:
        raise ValueError("empty feature sequence")
    pos = np.linspace(0.0, T_raw - 1, T) if T > 1 else np.zeros(1)
    lo, hi, w = interp_weights(pos, T_raw)
    w = w[:, None]
    return ((1.0 - w) * X_raw[lo] + w * X_raw[hi]).astype(X_raw.dtype, copy=False)


def rescale_factor(T_raw: int, T: int) -> float:
    """Multiplier mapping raw frame positions onto the rescaled axis."""
    return (T - 1) / (T_raw - 1) if T_raw > 1 else 0.0


def rescale_annotation(ann: VideoAnnotation, T: int) -> List[Tuple[float, float, str]]:
    f = rescale_factor(ann.num_frames, T)
    return [(i.start * f, i.end * f, i.label) for i in ann.instances]


@dataclass
class Window:
    offset: int
    features: np.ndarray
    instances: List[Tuple[float, float, str]]
    length: int   # number of real (unpadded) frames


def window_offsets(T_raw: int, L: int, overlap: int) -> List[int]:
    if L <= 0:
        raise ValueError("window length must be positive")
    if not 0 <= overlap < L:
        raise ValueError("overlap must be in [0, L)")
    if T_raw <= L:
        return [0]
    stride = L - overlap
    offs = list(range(0, T_raw - L + 1, stride))
    if offs[-1] + L < T_raw:
        offs.append(T_raw - L)
    return offs


def window_split(X_raw: np.ndarray, L: int, overlap: int,
                 instances: Sequence[Tuple[float, float, str]] = ()) -> List[Window]:
    """Cut a long sequence into length-``L`` windows.

    Windows start every ``L - overlap`` frames and the last one is
    right-aligned. Short sequences are zero-padded. Instances are clipped to
    each window and dropped when less than half of them lies inside.
    """
    X_raw = np.asarray(X_raw)
    T_raw = X_raw.shape[0]
    out = []
    for off in window_offsets(T_raw, L, overlap):
        feats = X_raw[off:off + L]
        n = feats.shape[0]
        if n < L:
            feats = np.concatenate([feats, np.zeros((L - n, X_raw.shape[1]), X_raw.dtype)])
        kept = []
        for s, e, *rest in instances:
            lo, hi = max(s, off), min(e, off + n)
            if hi > lo and (hi - lo) >= 0.5 * (e - s):
                kept.append((lo - off, hi - off, rest[0] if rest else "action"))
        out.append(Window(off, feats, kept, n))
    return out


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    num_videos: int = 20
    T: int = 100
    C: int = 64
    actions_per_video: Tuple[int, int] = (1, 2)
    num_classes: int = 2
    min_length: int = 8
    max_length: int = 40
    noise: float = 0.5
    prototype_scale: float = 1.0

    def __post_init__(self):
        lo, hi = self.actions_per_video
        if not 1 <= lo <= hi:
            raise ValueError("actions_per_video must satisfy 1 <= min <= max")
        if not 1 <= self.min_length <= self.max_length < self.T - 1:
            raise ValueError("need 1 <= min_length <= max_length < T - 1")
        if self.noise < 0 or self.num_classes < 1 or self.num_videos < 1:
            raise ValueError("invalid synthetic spec")


@dataclass
class Video:
    annotation: VideoAnnotation
    features: np.ndarray


def synth_dataset(spec: SyntheticSpec, seed: int = 0) -> List[Video]:
    """Gaussian background with class prototypes planted over ``[s, e)``.

    Instances never touch each other (at least one background frame apart)
    and end strictly before the last frame so the ``(s, e)`` cell exists.
    """
    rng = np.random.default_rng(seed)
    background = rng.normal(0.0, spec.prototype_scale, spec.C)
    protos = rng.normal(0.0, spec.prototype_scale, (spec.num_classes, spec.C))
    videos = []
    for v in range(spec.num_videos):
        n_act = int(rng.integers(spec.actions_per_video[0], spec.actions_per_video[1] + 1))
        spans: List[Tuple[int, int]] = []
        for _ in range(n_act):
            for _try in range(100):
                length = int(rng.integers(spec.min_length, spec.max_length + 1))
                s = int(rng.integers(0, spec.T - 1 - length))
                e = s + length
                if all(e + 1 < s2 or e2 + 1 < s for s2, e2 in spans):
                    spans.append((s, e))
                    break
            else:
                raise RuntimeError(f"could not place {n_act} non-overlapping actions in video {v}")
        spans.sort()
        X = background + spec.noise * rng.normal(size=(spec.T, spec.C))
        instances = []
        for s, e in spans:
            c = int(rng.integers(spec.num_classes))
            X[s:e] = protos[c] + spec.noise * rng.normal(size=(e - s, spec.C))
            instances.append(Instance(float(s), float(e), f"class_{c}"))
        ann = VideoAnnotation(f"synth_{v:04d}", spec.T, instances)
        videos.append(Video(ann, X.astype(np.float32)))
    return videos


def write_dataset(root, videos: Sequence[Video]) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    for v in videos:
        write_features(root / "features" / f"{v.annotation.video_id}.pcmf", v.features)
    write_annotations(root / "annotations.json", [v.annotation for v in videos])


def read_dataset(root) -> List[Video]:
    root = Path(root)
    anns = read_annotations(root / "annotations.json")
    return [Video(a, read_features(root / "features" / f"{a.video_id}.pcmf")) for a in anns]
