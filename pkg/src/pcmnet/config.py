"""Run configuration: one JSON file plus ``section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from .infer import SoftNmsConfig
from .metrics import EvalConfig, THUMOS_THRESHOLDS
from .net import PcmNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    lr_decay_epochs: List[int] = field(default_factory=lambda: [7])
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("optim: lr > 0, weight_decay >= 0, 0 < lr_decay_factor <= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("optim: batch_size and epochs must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"optim.dtype must be float32 or float64, got {self.dtype!r}")
        self.lr_decay_epochs = sorted(int(e) for e in self.lr_decay_epochs)

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** drops


@dataclass
class LossConfig:
    lam: float = 10.0
    binarize: float = 0.9
    expansion: float = 0.05

    def __post_init__(self):
        if self.lam < 0 or not 0 < self.binarize <= 1 or self.expansion < 0:
            raise ConfigError("loss: lam >= 0, 0 < binarize <= 1, expansion >= 0")


@dataclass
class InferenceConfig:
    iou_threshold: float = 0.5
    top_k: int = 200
    method: str = "linear"
    sigma: float = 0.4
    use_boundary_probs: bool = False

    def __post_init__(self):
        try:
            self.soft_nms()
        except ValueError as exc:
            raise ConfigError(f"inference: {exc}") from None

    def soft_nms(self) -> SoftNmsConfig:
        return SoftNmsConfig(self.iou_threshold, self.top_k, self.method, self.sigma)


@dataclass
class DataConfig:
    root: Optional[str] = None
    temporal_mode: str = "rescale"
    window: int = 256
    overlap: int = 128

    def __post_init__(self):
        if self.temporal_mode not in ("rescale", "window"):
            raise ConfigError("data.temporal_mode must be 'rescale' or 'window'")
        if not 0 <= self.overlap < self.window:
            raise ConfigError("data: need 0 <= overlap < window")


@dataclass
class EvalSection:
    thresholds: List[float] = field(default_factory=lambda: list(THUMOS_THRESHOLDS))

    def __post_init__(self):
        try:
            EvalConfig(tuple(self.thresholds))
        except ValueError as exc:
            raise ConfigError(f"eval: {exc}") from None

    def eval_config(self) -> EvalConfig:
        return EvalConfig(tuple(self.thresholds))


@dataclass
class RunConfig:
    model: PcmNetConfig = field(default_factory=PcmNetConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.data.temporal_mode == "window" and self.data.window != self.model.T:
            raise ConfigError("window mode needs data.window == model.T")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "model": PcmNetConfig,
    "optim": OptimConfig,
    "loss": LossConfig,
    "inference": InferenceConfig,
    "data": DataConfig,
    "eval": EvalSection,
}


def _build_section(name: str, cls, values: Dict[str, Any]):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(d: Dict[str, Any]) -> RunConfig:
    unknown = set(d) - set(_SECTIONS) - {"out_dir", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {name: _build_section(name, cls, d.get(name, {})) for name, cls in _SECTIONS.items()}
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    return RunConfig(out_dir=str(d.get("out_dir", "runs/default")), seed=seed, **kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``section.key=value`` strings (values parsed as JSON when possible)."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = _parse_value(raw)
    return d


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    d: Dict[str, Any] = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(apply_overrides(d, overrides))
