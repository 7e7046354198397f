"""Training loop and the per-video inference pipeline."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensorgrad as tg
from .config import RunConfig
from .dataio import Video, rescale_annotation, rescale_factor, rescale_linear, window_split
from .infer import Proposal, match_and_score, select_boundaries, soft_nms
from .net import NetworkOutputs, PcmNetParams, pcmnet_forward
from .supervision import Targets, total_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "lr", "total", "start", "end", "cls", "reg")


@dataclass
class Sample:
    video_id: str
    offset: int
    scale: float          # raw frames per network frame
    length: int           # valid network frames (window padding excluded)
    features: np.ndarray
    targets: Targets


def make_samples(video: Video, config: RunConfig) -> List[Sample]:
    """Network-ready inputs and targets for one video."""
    m, ann = config.model, video.annotation
    if video.features.shape[1] != m.input_dim:
        raise ValueError(f"{ann.video_id}: feature dim {video.features.shape[1]} != input_dim {m.input_dim}")
    if config.data.temporal_mode == "rescale":
        X = rescale_linear(video.features, m.T)
        f = rescale_factor(video.features.shape[0], m.T)
        inst = [(s, e) for s, e, _ in rescale_annotation(ann, m.T)]
        tg_ = Targets.build(inst, m.T, m.D, config.loss.expansion)
        return [Sample(ann.video_id, 0, 1.0 / f if f else 1.0, m.T, X, tg_)]
    insts = [(i.start, i.end, i.label) for i in ann.instances]
    out = []
    for w in window_split(video.features, config.data.window, config.data.overlap, insts):
        tg_ = Targets.build([(s, e) for s, e, _ in w.instances], m.T, m.D, config.loss.expansion)
        out.append(Sample(ann.video_id, w.offset, 1.0, w.length, w.features, tg_))
    return out


def init_params(config: RunConfig) -> PcmNetParams:
    dtype = np.float32 if config.optim.dtype == "float32" else np.float64
    return PcmNetParams.init(config.model, config.seed, dtype)


def train(config: RunConfig, videos: Sequence[Video], params: Optional[PcmNetParams] = None,
          log_path=None, on_step: Optional[Callable[[dict], None]] = None):
    """Train with Adam; returns ``(params, history)``.

    ``history`` has one dict per optimiser step (fields ``LOG_FIELDS``); it
    is also written to ``log_path`` as CSV when given.
    """
    params = params or init_params(config)
    named = params.named_parameters()
    samples = [s for v in videos for s in make_samples(v, config)]
    if not samples:
        raise ValueError("no training samples")
    oc = config.optim
    opt = tg.Adam(named, lr=oc.lr, weight_decay=oc.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    history: List[dict] = []
    step = 0
    for epoch in range(oc.epochs):
        opt.lr = oc.lr_at(epoch)
        order = rng.permutation(len(samples))
        for b0 in range(0, len(order), oc.batch_size):
            batch = [samples[k] for k in order[b0:b0 + oc.batch_size]]
            grads = {k: np.zeros_like(p.data) for k, p in named.items()}
            sums = dict.fromkeys(("total", "start", "end", "cls", "reg"), 0.0)
            for s in batch:
                tg.zero_grad(named.values())
                out = pcmnet_forward(s.features, config.model, params)
                loss, parts = total_loss(out, s.targets, config.loss.lam, config.loss.binarize)
                val = float(loss.data)
                if not np.isfinite(val):
                    raise RuntimeError(f"non-finite loss at step {step} (video {s.video_id}, "
                                       f"parts {({k: float(v.data) for k, v in parts.items()})})")
                g = tg.backward(loss, named)
                for k in grads:
                    grads[k] += g[k]
                sums["total"] += val
                for k, v in parts.items():
                    sums[k] += float(v.data)
            n = len(batch)
            opt.step({k: v / n for k, v in grads.items()})
            row = {"step": step, "epoch": epoch, "lr": opt.lr, **{k: v / n for k, v in sums.items()}}
            history.append(row)
            if on_step:
                on_step(row)
            step += 1
        log.info("epoch %d  lr %.2e  loss %.4f", epoch, opt.lr, history[-1]["total"])
    tg.zero_grad(named.values())
    if log_path is not None:
        write_loss_log(log_path, history)
    return params, history


def write_loss_log(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in LOG_FIELDS})


def forward_sample(sample: Sample, config: RunConfig, params: PcmNetParams,
                   return_attention: bool = False) -> NetworkOutputs:
    with tg.no_grad():
        return pcmnet_forward(sample.features, config.model, params, return_attention)


def sample_candidates(sample: Sample, out: NetworkOutputs, config: RunConfig) -> List[Proposal]:
    """Scored start/end pairs of one sample, in raw-video frames."""
    ic = config.inference
    ps, pe = out.start.data, out.end.data
    n = sample.length
    valid = config.model.validity().copy()
    valid[n:, :] = False
    valid[:, n:] = False
    starts = [i for i in select_boundaries(ps[:n])]
    ends = [j for j in select_boundaries(pe[:n])]
    props = match_and_score(starts, ends, out.mcc.data, out.mcr.data, valid, ps, pe,
                            ic.use_boundary_probs)
    return [Proposal(sample.offset + p.start * sample.scale, sample.offset + p.end * sample.scale,
                     p.score) for p in props]


def predict_video(video: Video, config: RunConfig, params: PcmNetParams,
                  attention_sink: Optional[list] = None) -> List[Proposal]:
    """Forward every window/rescaled view, pool candidates, then Soft-NMS."""
    pool: List[Proposal] = []
    for s in make_samples(video, config):
        out = forward_sample(s, config, params, attention_sink is not None)
        if attention_sink is not None:
            attention_sink.append((s, out.attention))
        pool.extend(sample_candidates(s, out, config))
    return soft_nms(pool, config.inference.soft_nms())
