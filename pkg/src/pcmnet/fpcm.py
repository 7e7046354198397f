"""Frame-level position-sensitive context modeling.

Each frame attends separately to the frames before it and the frames
after it; the two context vectors are concatenated and reduced back to
``C`` channels. The result only drives a channel gate on the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .layers import ParamGroup, grouped_attention, linear, weight, zeros
from .tensorgrad import Tensor


@dataclass
class FpcmParams(ParamGroup):
    phi: Tensor             # query embedding, shared by both directions
    theta_before: Tensor
    theta_after: Tensor
    g: Tensor
    reduce_w: Tensor        # (2C, C)
    reduce_b: Tensor
    gate_w1: Tensor         # (C, C // r)
    gate_w2: Tensor         # (C // r, C)

    @classmethod
    def init(cls, rng: np.random.Generator, C: int, ratio: int = 4, dtype=np.float64,
             embed_scale: float = 0.5) -> "FpcmParams":
        if C % ratio:
            raise ValueError(f"C={C} not divisible by gate ratio {ratio}")
        h = C // ratio
        return cls(
            phi=weight(rng, (C, C), C, embed_scale, dtype),
            theta_before=weight(rng, (C, C), C, embed_scale, dtype),
            theta_after=weight(rng, (C, C), C, embed_scale, dtype),
            g=weight(rng, (C, C), C, 1.0, dtype),
            reduce_w=weight(rng, (2 * C, C), 2 * C, 1.0, dtype),
            reduce_b=zeros((C,), dtype),
            gate_w1=weight(rng, (C, h), C, 1.0, dtype),
            gate_w2=weight(rng, (h, C), h, 1.0, dtype),
        )


def group_masks(T: int):
    """Before mask (``j < i``) and after mask (``j > i``), each ``(T, T)``."""
    idx = np.arange(T)
    before = idx[None, :] < idx[:, None]
    return before, before.T.copy()


def vanilla_attention(X: Tensor, params: FpcmParams) -> Tensor:
    """Ungrouped embedded-Gaussian attention over all frames, no encoding."""
    X = tg.as_tensor(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"expected a non-empty (T, C) input, got {X.shape}")
    q = linear(X, params.phi)
    k = linear(X, params.theta_before)
    v = linear(X, params.g)
    logits = tg.matmul(q, k.transpose())
    w = tg.masked_softmax(logits, np.ones(logits.shape, dtype=bool))
    return tg.matmul(w, v)


def directed_attention(Xt: Tensor, X: Tensor, phi: Tensor, theta_before: Tensor,
                       theta_after: Tensor, g: Tensor, before: np.ndarray, after: np.ndarray):
    """Two-group attention along the second-to-last axis.

    Works on ``(T, C)`` sequences and on batches ``(B, T, C)``; masks are
    ``(T, T)`` or ``(B, T, T)``. ``Xt`` feeds the compatibility, ``X`` the values.
    """
    q = linear(Xt, phi)
    kb = linear(Xt, theta_before)
    ka = linear(Xt, theta_after)
    v = linear(X, g)
    yb, wb = grouped_attention(tg.matmul(q, tg.transpose(kb, _swap_last(kb.ndim))), before, v)
    ya, wa = grouped_attention(tg.matmul(q, tg.transpose(ka, _swap_last(ka.ndim))), after, v)
    return yb, ya, wb, wa


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def fpcm_forward(X: Tensor, pe: np.ndarray, params: FpcmParams, return_attention: bool = False):
    """Grouped before/after context for every frame, reduced to ``C`` channels.

    With ``return_attention`` a dict of the two ``(T, T)`` weight matrices is
    returned as well.
    """
    X = tg.as_tensor(X)
    pe = np.asarray(pe)
    if X.ndim != 2 or pe.shape != X.shape:
        raise ValueError(f"feature shape {X.shape} and encoding shape {pe.shape} differ")
    T = X.shape[0]
    before, after = group_masks(T)
    Xt = X + pe.astype(X.dtype)
    yb, ya, wb, wa = directed_attention(Xt, X, params.phi, params.theta_before,
                                        params.theta_after, params.g, before, after)
    y = linear(tg.concat([yb, ya], axis=-1), params.reduce_w, params.reduce_b)
    if return_attention:
        return y, {"before": wb.data.copy(), "after": wa.data.copy()}
    return y


def channel_gate(X: Tensor, Y: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """``X + X * sigmoid(relu(Y @ w1) @ w2)``; works on any leading shape."""
    X, Y = tg.as_tensor(X), tg.as_tensor(Y)
    if X.shape != Y.shape:
        raise ValueError(f"gate input {X.shape} and context {Y.shape} differ")
    gate = tg.sigmoid(linear(tg.relu(linear(Y, w1)), w2))
    return X + X * gate


def fpcm_block(X: Tensor, pe: np.ndarray, params: FpcmParams, return_attention: bool = False):
    """f-PCM context followed by the residual channel gate."""
    res = fpcm_forward(X, pe, params, return_attention)
    y, attn = res if return_attention else (res, None)
    z = channel_gate(X, y, params.gate_w1, params.gate_w2)
    return (z, attn) if return_attention else z
