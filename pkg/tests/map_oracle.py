"""Brute-force detection AP used as an independent reference."""

import numpy as np

from pcmnet.metrics import Detection, GroundTruth


def brute_force_ap(preds, gts, thr):
    """Independent AP: explicit greedy matching and an all-point precision sum."""
    if not gts:
        return 0.0
    order = sorted(range(len(preds)), key=lambda k: (-preds[k].score, preds[k].video,
                                                      preds[k].start, preds[k].end))
    taken = set()
    hits = []
    for k in order:
        p = preds[k]
        best, best_iou = None, -1.0
        for n, g in enumerate(gts):
            if n in taken or g.video != p.video:
                continue
            inter = max(0.0, min(p.end, g.end) - max(p.start, g.start))
            iou = inter / (max(p.end, g.end) - min(p.start, g.start)) if inter > 0 else 0.0
            if iou >= thr and iou > best_iou:
                best, best_iou = n, iou
        if best is not None:
            taken.add(best)
        hits.append(best is not None)
    # precision at each rank, envelope = max precision at any later rank
    ap, tp = 0.0, 0
    prec = []
    for r, h in enumerate(hits, 1):
        tp += h
        prec.append(tp / r)
    for r, h in enumerate(hits):
        if h:
            ap += max(prec[r:]) / len(gts)
    return ap


def brute_force_map(preds, gts, thr):
    classes = sorted({g.label for g in gts})
    return np.mean([brute_force_ap([p for p in preds if p.label == c],
                                   [g for g in gts if g.label == c], thr) for c in classes])


TOY_GTS = [
    GroundTruth("v1", 2.0, 10.0, "a"), GroundTruth("v1", 20.0, 30.0, "b"),
    GroundTruth("v2", 0.0, 5.0, "a"), GroundTruth("v2", 7.0, 15.0, "a"),
    GroundTruth("v3", 40.0, 60.0, "b"),
]
TOY_PREDS = [
    Detection("v1", 2.5, 10.0, 0.95, "a"), Detection("v1", 3.0, 9.0, 0.9, "a"),
    Detection("v1", 19.0, 31.0, 0.6, "b"), Detection("v1", 50.0, 55.0, 0.55, "b"),
    Detection("v2", 0.0, 4.0, 0.8, "a"), Detection("v2", 8.0, 20.0, 0.7, "a"),
    Detection("v2", 9.0, 14.0, 0.3, "a"), Detection("v3", 45.0, 58.0, 0.85, "b"),
    Detection("v3", 41.0, 61.0, 0.4, "b"), Detection("v3", 0.0, 3.0, 0.2, "a"),
]
