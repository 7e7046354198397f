"""Post-processing: boundary selection, start/end matching, Soft-NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np

from .metrics import tiou_matrix


@dataclass(frozen=True)
class Proposal:
    start: float
    end: float
    score: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"proposal start {self.start} is not before end {self.end}")
        if not np.isfinite(self.score) or self.score < 0:
            raise ValueError(f"bad proposal score {self.score}")


@dataclass
class SoftNmsConfig:
    iou_threshold: float = 0.5
    top_k: int = 200
    method: str = "linear"
    sigma: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must be in (0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.method not in ("linear", "gaussian"):
            raise ValueError(f"unknown Soft-NMS method {self.method!r}")


def select_boundaries(probs, ratio: float = 0.5) -> List[int]:
    """Indices at or above ``ratio * max`` plus strict local maxima."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("empty probability vector")
    keep = p >= ratio * p.max()
    if p.size > 1:
        left = np.concatenate([[-np.inf], p[:-1]])
        right = np.concatenate([p[1:], [-np.inf]])
        keep |= (p > left) & (p > right)
    return [int(i) for i in np.nonzero(keep)[0]]


def match_and_score(starts: Iterable[int], ends: Iterable[int], mcc: np.ndarray, mcr: np.ndarray,
                    validity: np.ndarray | None = None, start_probs=None, end_probs=None,
                    use_boundary_probs: bool = False) -> List[Proposal]:
    """Pair every start with every later end inside the valid region.

    Score is ``mcc[i, j] * mcr[i, j]``, optionally times the boundary
    probabilities at ``i`` and ``j``.
    """
    mcc = np.asarray(mcc)
    mcr = np.asarray(mcr)
    T = mcc.shape[0]
    if validity is None:
        validity = np.triu(np.ones((T, T), dtype=bool), 1)
    out = []
    ends = sorted(set(ends))
    for i in sorted(set(starts)):
        for j in ends:
            if i >= j or not validity[i, j]:
                continue
            s = float(mcc[i, j] * mcr[i, j])
            if use_boundary_probs:
                s *= float(start_probs[i]) * float(end_probs[j])
            out.append(Proposal(float(i), float(j), max(s, 0.0)))
    return out


def _order_key(p: Proposal):
    return (-p.score, p.start, p.end)


def soft_nms(proposals: Sequence[Proposal], config: SoftNmsConfig | None = None) -> List[Proposal]:
    """Decay-based suppression.

    Repeatedly keep the best remaining proposal and decay the others that
    overlap it by more than the threshold (linear: ``score * (1 - iou)``).
    """
    config = config or SoftNmsConfig()
    if not proposals:
        return []
    seg = np.array([(p.start, p.end) for p in proposals], dtype=np.float64)
    score = np.array([p.score for p in proposals], dtype=np.float64)
    alive = np.ones(len(proposals), dtype=bool)
    kept: List[Proposal] = []
    while alive.any() and len(kept) < config.top_k:
        cand = np.nonzero(alive)[0]
        # lexsort: last key is primary
        best = cand[np.lexsort((seg[cand, 1], seg[cand, 0], -score[cand]))[0]]
        alive[best] = False
        kept.append(Proposal(seg[best, 0], seg[best, 1], float(score[best])))
        rest = np.nonzero(alive)[0]
        if rest.size == 0:
            break
        iou = tiou_matrix(seg[rest], seg[best][None])[:, 0]
        if config.method == "linear":
            hit = iou > config.iou_threshold
            score[rest[hit]] *= 1.0 - iou[hit]
        else:
            score[rest] *= np.exp(-(iou * iou) / config.sigma)
    kept.sort(key=_order_key)
    return kept


def postprocess(start_probs, end_probs, mcc, mcr, validity, config: SoftNmsConfig | None = None,
                use_boundary_probs: bool = False) -> List[Proposal]:
    """Full inference chain for one video's network outputs."""
    starts = select_boundaries(start_probs)
    ends = select_boundaries(end_probs)
    props = match_and_score(starts, ends, mcc, mcr, validity, start_probs, end_probs,
                            use_boundary_probs)
    return soft_nms(props, config)
