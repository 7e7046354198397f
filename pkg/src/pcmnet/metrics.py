"""Temporal IoU and detection mAP."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence

import numpy as np

THUMOS_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
ACTIVITYNET_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def tiou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two real intervals ``(start, end)``."""
    a0, a1 = float(a[0]), float(a[1])
    b0, b1 = float(b[0]), float(b[1])
    if a1 <= a0 or b1 <= b0:
        raise ValueError(f"degenerate interval: {a} / {b}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union


def tiou_matrix(segs: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Pairwise tIoU between ``(N, 2)`` and ``(M, 2)`` interval arrays."""
    segs = np.asarray(segs, dtype=np.float64).reshape(-1, 2)
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 2)
    lo = np.maximum(segs[:, None, 0], refs[None, :, 0])
    hi = np.minimum(segs[:, None, 1], refs[None, :, 1])
    inter = np.clip(hi - lo, 0.0, None)
    union = (segs[:, 1] - segs[:, 0])[:, None] + (refs[:, 1] - refs[:, 0])[None, :] - inter
    return inter / union


@dataclass(frozen=True)
class Detection:
    video: str
    start: float
    end: float
    score: float
    label: str = "action"


@dataclass(frozen=True)
class GroundTruth:
    video: str
    start: float
    end: float
    label: str = "action"


@dataclass
class EvalConfig:
    thresholds: tuple = THUMOS_THRESHOLDS

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=float)
        if t.size == 0 or np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) <= 0):
            raise ValueError(f"thresholds must be strictly increasing in (0, 1): {self.thresholds}")
        self.thresholds = tuple(float(x) for x in t)


def _ranked(dets: Iterable[Detection]) -> List[Detection]:
    # stable: equal scores keep (video, start, end) order
    return sorted(dets, key=lambda d: (-d.score, d.video, d.start, d.end))


def average_precision(predictions: Sequence[Detection], ground_truths: Sequence[GroundTruth],
                      threshold: float) -> float:
    """All-point interpolated AP for a single class.

    Predictions are matched greedily in descending score order; each ground
    truth can be matched once, by the unmatched instance of highest tIoU.
    """
    if not ground_truths:
        return 0.0
    preds = _ranked(predictions)
    if not preds:
        return 0.0
    by_video: Dict[str, List[int]] = defaultdict(list)
    for k, g in enumerate(ground_truths):
        by_video[g.video].append(k)
    used = np.zeros(len(ground_truths), dtype=bool)
    tp = np.zeros(len(preds))
    for n, p in enumerate(preds):
        cand = by_video.get(p.video, [])
        best, best_iou = -1, -1.0
        for k in cand:
            if used[k]:
                continue
            g = ground_truths[k]
            iou = tiou((p.start, p.end), (g.start, g.end))
            if iou >= threshold and iou > best_iou:
                best, best_iou = k, iou
        if best >= 0:
            used[best] = True
            tp[n] = 1.0
    return _interpolated_ap(tp, len(ground_truths))


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # monotone envelope, then sum precision * recall increments
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def map_at(predictions: Sequence[Detection], ground_truths: Sequence[GroundTruth],
           config: EvalConfig | None = None) -> dict:
    """mAP per threshold and its mean over thresholds.

    Classes are those present in the ground truth; returns
    ``{"per_threshold": {t: mAP}, "average": float, "per_class": {...}}``.
    """
    config = config or EvalConfig()
    classes = sorted({g.label for g in ground_truths})
    if not classes:
        raise ValueError("no ground-truth classes to evaluate")
    preds_by = defaultdict(list)
    for p in predictions:
        preds_by[p.label].append(p)
    gts_by = defaultdict(list)
    for g in ground_truths:
        gts_by[g.label].append(g)
    per_class = {c: {t: average_precision(preds_by[c], gts_by[c], t) for t in config.thresholds}
                 for c in classes}
    per_t = {t: float(np.mean([per_class[c][t] for c in classes])) for t in config.thresholds}
    return {"per_threshold": per_t, "average": float(np.mean(list(per_t.values()))),
            "per_class": per_class}
