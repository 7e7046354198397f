"""Training targets and the multi-task loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from . import tensorgrad as tg
from .metrics import tiou_matrix
from .ppcm import validity_mask
from .tensorgrad import Tensor

LOSS_EPS = 1e-8
DEFAULT_LAMBDA = 10.0
DEFAULT_BINARIZE = 0.9
DEFAULT_EXPANSION = 0.05


@dataclass
class BoundaryLabels:
    start: np.ndarray
    end: np.ndarray


def _intervals(annotations) -> np.ndarray:
    """Accepts ``(s, e)`` pairs, ``(s, e, label)`` triples or dicts."""
    out = []
    for a in annotations:
        if isinstance(a, dict):
            s, e = a["start"], a["end"]
        else:
            s, e = a[0], a[1]
        if s >= e:
            raise ValueError(f"annotation start {s} is not before end {e}")
        out.append((float(s), float(e)))
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_boundary_labels(annotations, T: int, expansion: float = DEFAULT_EXPANSION) -> BoundaryLabels:
    """Binary start/end targets.

    Frames within ``max(1, round(expansion * duration))`` of a boundary are
    positive, clipped to ``[0, T)``.
    """
    start = np.zeros(T)
    end = np.zeros(T)
    for s, e in _intervals(annotations):
        w = max(1, _round_half_up(expansion * (e - s)))
        for vec, c in ((start, s), (end, e)):
            c = int(round(c))
            lo, hi = max(0, c - w), min(T - 1, c + w)
            if lo <= hi:
                vec[lo:hi + 1] = 1.0
    return BoundaryLabels(start, end)


def make_iou_map(annotations, T: int, D: int | None = None) -> np.ndarray:
    """Max tIoU of each valid ``(i, j)`` cell against the ground truths."""
    valid = validity_mask(T, D)
    gts = _intervals(annotations)
    out = np.zeros((T, T))
    if len(gts) == 0:
        return out
    ii, jj = np.nonzero(valid)
    cells = np.stack([ii, jj], axis=1).astype(np.float64)
    out[ii, jj] = tiou_matrix(cells, gts).max(axis=1)
    return out


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=like.dtype))


def wce_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray | None = None,
             eps: float = LOSS_EPS) -> Tensor:
    """Class-balanced binary cross-entropy.

    ``-(1/n) sum[(n/n+) g log p + (n/n-) (1-g) log(1-p)]`` over the entries
    selected by ``mask``. Without both classes present it is plain mean BCE.
    """
    pred = tg.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} and target {gt.shape} differ")
    sel = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(sel.sum())
    if n == 0:
        raise ValueError("wce_loss over zero entries")
    pos = sel & (gt > 0.5)
    neg = sel & ~(gt > 0.5)
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos and n_neg:
        w_pos, w_neg = n / n_pos, n / n_neg
    else:
        w_pos = w_neg = 1.0
    a = pos * w_pos
    b = neg * w_neg
    log_p = tg.log(pred, eps)
    log_q = tg.log(_const(1.0, pred) - pred, eps)
    total = tg.tsum(log_p * _const(a, pred) + log_q * _const(b, pred))
    return total * _const(-1.0 / n, pred)


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("masked_mse over zero entries")
    diff = (pred - _const(target, pred)) * _const(mask, pred)
    return tg.tsum(diff * diff) * _const(1.0 / n, pred)


@dataclass
class Targets:
    boundary: BoundaryLabels
    iou: np.ndarray
    validity: np.ndarray

    @classmethod
    def build(cls, annotations, T: int, D: int | None = None,
              expansion: float = DEFAULT_EXPANSION) -> "Targets":
        return cls(make_boundary_labels(annotations, T, expansion),
                   make_iou_map(annotations, T, D), validity_mask(T, D))


def total_loss(outputs, targets: Targets, lam: float = DEFAULT_LAMBDA,
               binarize: float = DEFAULT_BINARIZE):
    """Boundary + proposal loss. Returns ``(total, parts)``.

    ``parts`` holds the four terms: ``start``, ``end``, ``cls`` and ``reg``
    (the regression term before multiplying by ``lam``).
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    v = targets.validity
    parts: Dict[str, Tensor] = {
        "start": wce_loss(outputs.start, targets.boundary.start),
        "end": wce_loss(outputs.end, targets.boundary.end),
        "cls": wce_loss(outputs.mcc, (targets.iou >= binarize).astype(np.float64), v),
        "reg": masked_mse(outputs.mcr, targets.iou, v),
    }
    total = parts["start"] + parts["end"] + parts["cls"] + parts["reg"] * _const(lam, parts["reg"])
    return total, parts
