"""Brute-force reference computations and the self-check behind ``verify``.

The oracles loop over frames/proposals one at a time with plain numpy and
share no code with the batched, masked implementations they check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import tensorgrad as tg
from .fpcm import FpcmParams, channel_gate, fpcm_block, fpcm_forward
from .net import PcmNetConfig, PcmNetParams, pcmnet_forward
from .posenc import max_pe_asymmetry, pe2d, sinusoidal_pe
from .ppcm import PpcmParams, ppcm_forward, validity_mask
from .supervision import Targets, total_loss


def _np(p):
    return p.data if isinstance(p, tg.Tensor) else np.asarray(p)


def _softmax_weights(logits: List[float]) -> np.ndarray:
    z = np.array(logits) - max(logits)
    e = np.exp(z)
    return e / e.sum()


def _attend(query_vec, keys, values) -> np.ndarray:
    """Attention of one query over an explicit list of keys; empty -> zeros."""
    if not keys:
        return np.zeros_like(query_vec)
    w = _softmax_weights([float(query_vec @ k) for k in keys])
    out = np.zeros_like(values[0])
    for wk, v in zip(w, values):
        out = out + wk * v
    return out


def _gate_oracle(x, y, w1, w2) -> np.ndarray:
    hidden = np.array([max(0.0, float(y @ w1[:, h])) for h in range(w1.shape[1])])
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        a = float(hidden @ w2[:, c])
        out[c] = x[c] + x[c] / (1.0 + np.exp(-a))
    return out


def vanilla_oracle(X, params: FpcmParams) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    phi, th, g = _np(params.phi), _np(params.theta_before), _np(params.g)
    T = X.shape[0]
    out = np.zeros((T, g.shape[1]))
    for i in range(T):
        q = X[i] @ phi
        out[i] = _attend(q, [X[j] @ th for j in range(T)], [X[j] @ g for j in range(T)])
    return out


def fpcm_oracle(X, pe, params: FpcmParams, gated: bool = False) -> np.ndarray:
    """Frame-by-frame before/after attention, concat, reduction (and gate)."""
    X = np.asarray(X, dtype=np.float64)
    Xt = X + pe
    phi, tb, ta, g = (_np(params.phi), _np(params.theta_before), _np(params.theta_after),
                      _np(params.g))
    rw, rb = _np(params.reduce_w), _np(params.reduce_b)
    T = X.shape[0]
    out = np.zeros((T, rw.shape[1]))
    for i in range(T):
        q = Xt[i] @ phi
        yb = _attend(q, [Xt[j] @ tb for j in range(i)], [X[j] @ g for j in range(i)])
        ya = _attend(q, [Xt[j] @ ta for j in range(i + 1, T)], [X[j] @ g for j in range(i + 1, T)])
        y = np.concatenate([yb, ya]) @ rw + rb
        out[i] = _gate_oracle(X[i], y, _np(params.gate_w1), _np(params.gate_w2)) if gated else y
    return out


def ppcm_oracle(P, pe, validity, params: PpcmParams) -> np.ndarray:
    """Cell-by-cell four-group attention straight from the group definitions."""
    P = np.asarray(P, dtype=np.float64)
    Pt = P + pe
    T = P.shape[0]
    g = _np(params.g)
    out = np.zeros_like(P)
    row = (_np(params.row_phi), _np(params.row_theta_before), _np(params.row_theta_after))
    col = (_np(params.col_phi), _np(params.col_theta_before), _np(params.col_theta_after))
    for i in range(T):
        for j in range(T):
            if not validity[i, j]:
                continue
            groups = {
                "EE": [(i, k) for k in range(j) if validity[i, k]],
                "LE": [(i, k) for k in range(j + 1, T) if validity[i, k]],
                "ES": [(k, j) for k in range(i) if validity[k, j]],
                "LS": [(k, j) for k in range(i + 1, T) if validity[k, j]],
            }
            parts = []
            for name, cells in groups.items():
                phi, tb, ta = row if name in ("EE", "LE") else col
                th = tb if name in ("EE", "ES") else ta
                q = Pt[i, j] @ phi
                parts.append(_attend(q, [Pt[a, b] @ th for a, b in cells],
                                     [P[a, b] @ g for a, b in cells]))
            y = np.concatenate(parts) @ _np(params.reduce_w) + _np(params.reduce_b)
            out[i, j] = _gate_oracle(P[i, j], y, _np(params.gate_w1), _np(params.gate_w2))
    return out


def sampling_oracle(X, i: int, j: int, samples: int) -> np.ndarray:
    """Mean of ``samples`` linearly interpolated points over ``[i, j]``."""
    X = np.asarray(X, dtype=np.float64)
    T = X.shape[0]
    acc = np.zeros(X.shape[1])
    for s in range(samples):
        t = i + (j - i) * s / (samples - 1)
        lo = min(int(np.floor(t)), T - 1)
        hi = min(lo + 1, T - 1)
        f = t - lo
        acc += (1 - f) * X[lo] + f * X[hi]
    return acc / samples


# ---------------------------------------------------------------------------
# self-check


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.value < self.tolerance)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<40s} {self.value:.3e} < {self.tolerance:.0e}  ({self.seconds:.1f}s)"


def _timed(name: str, tol: float, fn: Callable[[], float]) -> CheckResult:
    t0 = time.perf_counter()
    v = fn()
    return CheckResult(name, float(v), tol, time.perf_counter() - t0)


def check_pe(T: int = 256, dims=(64, 128)) -> float:
    return max(max_pe_asymmetry(T, d) for d in dims)


def check_fpcm_oracle(seeds=range(10), T: int = 12, C: int = 16) -> float:
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(T, C))
        params = FpcmParams.init(rng, C)
        pe = sinusoidal_pe(T, C)
        got = fpcm_forward(tg.Tensor(X), pe, params).data
        worst = max(worst, float(np.abs(got - fpcm_oracle(X, pe, params)).max()))
    return worst


def check_ppcm_oracle(seeds=range(10), T: int = 8, C: int = 8, D: int = 6) -> float:
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        valid = validity_mask(T, D)
        P = rng.normal(size=(T, T, C)) * valid[:, :, None]
        params = PpcmParams.init(rng, C)
        pe = pe2d(T, C)
        got = ppcm_forward(tg.Tensor(P), pe, valid, params).data
        worst = max(worst, float(np.abs(got - ppcm_oracle(P, pe, valid, params)).max()))
    return worst


# Perturbed losses are evaluated in extended precision: the relative-error
# floor of 1e-8 makes near-zero gradient entries an almost absolute test
# that float64 cancellation noise cannot meet at the default step.
FD_DTYPE = np.longdouble


def check_fpcm_gradients(seed: int = 0, T: int = 8, C: int = 16) -> float:
    rng = np.random.default_rng(seed)
    X = tg.Tensor(rng.normal(size=(T, C)), requires_grad=True)
    params = FpcmParams.init(rng, C)
    pe = sinusoidal_pe(T, C)
    named = {"x": X, **params.named_parameters()}
    return tg.check_gradients(lambda: tg.tsum(tg.sigmoid(fpcm_block(X, pe, params))), named,
                              fd_dtype=FD_DTYPE)


def check_ppcm_gradients(seed: int = 0, T: int = 6, C: int = 8, D: int = 6) -> float:
    rng = np.random.default_rng(seed)
    valid = validity_mask(T, D)
    P = tg.Tensor(rng.normal(size=(T, T, C)) * valid[:, :, None], requires_grad=True)
    params = PpcmParams.init(rng, C)
    pe = pe2d(T, C)
    named = {"P": P, **params.named_parameters()}
    return tg.check_gradients(lambda: tg.tsum(tg.sigmoid(ppcm_forward(P, pe, valid, params))),
                              named, fd_dtype=FD_DTYPE)


def network_gradient_error(T: int = 8, C: int = 16, D: int = 8, input_dim: int = 4,
                           head_hidden: int = 8, seed: int = 0) -> float:
    """Finite-difference check of the whole loss through the whole network."""
    cfg = PcmNetConfig(T=T, C=C, input_dim=input_dim, D=D, S=4, head_hidden=head_hidden)
    params = PcmNetParams.init(cfg, seed, np.float64)
    rng = np.random.default_rng(seed + 100)
    X = rng.normal(size=(T, input_dim))
    targets = Targets.build([(1, 4), (5, 7)], T, D)
    return tg.check_gradients(lambda: total_loss(pcmnet_forward(X, cfg, params), targets)[0],
                              params.named_parameters(), fd_dtype=FD_DTYPE)


def run_checks(quick: bool = False) -> List[CheckResult]:
    results = [
        _timed("pe symmetry (T=256, l=64,128)", 1e-9, check_pe),
        _timed("f-PCM vs loop oracle", 1e-10,
               lambda: check_fpcm_oracle(range(3) if quick else range(10))),
        _timed("p-PCM vs loop oracle", 1e-10,
               lambda: check_ppcm_oracle(range(3) if quick else range(10))),
        _timed("f-PCM block gradient", 1e-5, check_fpcm_gradients),
        _timed("p-PCM block gradient", 1e-5, check_ppcm_gradients),
    ]
    if not quick:
        results.append(_timed("network gradient (T=8, C=16, D=8)", 1e-5, network_gradient_error))
    return results
