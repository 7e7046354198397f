"""Proposal-level position-sensitive context modeling.

A proposal ``(i, j)`` attends to four groups on the proposal map: same
start with earlier end (EE) or later end (LE), and same end with earlier
start (ES) or later start (LS). EE/LE live in row ``i`` and ES/LS in
column ``j``, so the block runs one batched row pass and one batched
column pass.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .fpcm import channel_gate, directed_attention
from .layers import ParamGroup, linear, weight, zeros
from .tensorgrad import Tensor, interp_weights

DEFAULT_SAMPLES = 32
GROUPS = ("EE", "LE", "ES", "LS")


@functools.lru_cache(maxsize=32)
def _validity_cached(T: int, D: int) -> np.ndarray:
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    out = (j > i) & (j - i <= D)
    out.setflags(write=False)
    return out


def validity_mask(T: int, D: int | None = None) -> np.ndarray:
    """``(T, T)`` mask, true iff ``0 < j - i <= D`` (read-only, cached)."""
    return _validity_cached(int(T), int(T if D is None else D))


def check_validity(validity: np.ndarray) -> np.ndarray:
    validity = np.asarray(validity, dtype=bool)
    if validity.ndim != 2 or validity.shape[0] != validity.shape[1]:
        raise ValueError(f"validity must be square, got {validity.shape}")
    if np.any(np.tril(validity)):
        raise ValueError("validity mask has cells on or below the diagonal")
    return validity


@functools.lru_cache(maxsize=16)
def _sampling_matrix(T: int, valid_bytes: bytes, S: int) -> np.ndarray:
    valid = np.frombuffer(valid_bytes, dtype=bool).reshape(T, T)
    ii, jj = np.nonzero(valid)
    frac = np.linspace(0.0, 1.0, S)
    pos = ii[:, None] + (jj - ii)[:, None] * frac[None, :]
    lo, hi, w = interp_weights(pos, T)
    A = np.zeros((T * T, T))
    rows = np.repeat((ii * T + jj)[:, None], S, axis=1)
    np.add.at(A, (rows.ravel(), lo.ravel()), (1.0 - w).ravel() / S)
    np.add.at(A, (rows.ravel(), hi.ravel()), w.ravel() / S)
    A.setflags(write=False)
    return A


def proposal_sampling_matrix(validity: np.ndarray, samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """``(T*T, T)`` matrix averaging ``samples`` interpolated frames per cell.

    Row ``i*T + j`` holds the interpolation weights of the points spaced
    uniformly over ``[i, j]``; rows of invalid cells are zero.
    """
    if samples < 2:
        raise ValueError("need at least 2 sample points")
    validity = check_validity(validity)
    return _sampling_matrix(validity.shape[0], validity.tobytes(), int(samples))


def sample_proposal_features(X: Tensor, validity: np.ndarray, proj: Tensor | None = None,
                             samples: int = DEFAULT_SAMPLES) -> Tensor:
    """Mean of interpolated frame features over each valid proposal.

    Returns ``(T, T, C)``; invalid cells are zero. ``proj`` (``(C, C)``,
    bias-free so invalid cells stay zero) is applied when given.
    """
    X = tg.as_tensor(X)
    T, C = X.shape
    if validity.shape != (T, T):
        raise ValueError(f"validity {validity.shape} does not match T={T}")
    A = proposal_sampling_matrix(validity, samples).astype(X.dtype)
    P = tg.reshape(tg.matmul(A, X), (T, T, C))
    return linear(P, proj) if proj is not None else P


@dataclass
class PpcmParams(ParamGroup):
    row_phi: Tensor
    row_theta_before: Tensor     # EE
    row_theta_after: Tensor      # LE
    col_phi: Tensor
    col_theta_before: Tensor     # ES
    col_theta_after: Tensor      # LS
    g: Tensor
    reduce_w: Tensor             # (4C, C)
    reduce_b: Tensor
    gate_w1: Tensor
    gate_w2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, C: int, ratio: int = 4, dtype=np.float64,
             embed_scale: float = 0.5) -> "PpcmParams":
        if C % ratio:
            raise ValueError(f"C={C} not divisible by gate ratio {ratio}")
        h = C // ratio

        def emb():
            return weight(rng, (C, C), C, embed_scale, dtype)

        return cls(
            row_phi=emb(), row_theta_before=emb(), row_theta_after=emb(),
            col_phi=emb(), col_theta_before=emb(), col_theta_after=emb(),
            g=weight(rng, (C, C), C, 1.0, dtype),
            reduce_w=weight(rng, (4 * C, C), 4 * C, 1.0, dtype),
            reduce_b=zeros((C,), dtype),
            gate_w1=weight(rng, (C, h), C, 1.0, dtype),
            gate_w2=weight(rng, (h, C), h, 1.0, dtype),
        )


@functools.lru_cache(maxsize=16)
def _row_masks_cached(T: int, valid_bytes: bytes):
    validity = np.frombuffer(valid_bytes, dtype=bool).reshape(T, T)
    k = np.arange(T)
    pair = validity[:, :, None] & validity[:, None, :]
    earlier = k[None, :] < k[:, None]
    masks = (pair & earlier[None], pair & earlier.T[None])
    for m in masks:
        m.setflags(write=False)
    return masks


def row_group_masks(validity: np.ndarray):
    """``(T, T, T)`` masks for the row pass: ``[i, j, k]`` is key ``(i, k)``
    for query ``(i, j)``; returns (earlier-end, later-end)."""
    validity = np.ascontiguousarray(validity, dtype=bool)
    return _row_masks_cached(validity.shape[0], validity.tobytes())


def ppcm_forward(P: Tensor, pe: np.ndarray, validity: np.ndarray, params: PpcmParams,
                 return_attention: bool = False):
    """Four-group directed attention on the proposal map, gated onto ``P``.

    Output is ``(T, T, C)`` with invalid cells zero. With
    ``return_attention`` also returns the averaged ``(T, T)`` attention map
    and the raw per-group weights.
    """
    P = tg.as_tensor(P)
    pe = np.asarray(pe)
    if P.ndim != 3 or pe.shape != P.shape:
        raise ValueError(f"proposal map {P.shape} and encoding {pe.shape} differ")
    validity = check_validity(validity)
    if validity.shape != P.shape[:2]:
        raise ValueError(f"validity {validity.shape} does not match map {P.shape}")

    Pt = P + pe.astype(P.dtype)
    row_e, row_l = row_group_masks(validity)
    ee, le, w_ee, w_le = directed_attention(
        Pt, P, params.row_phi, params.row_theta_before, params.row_theta_after,
        params.g, row_e, row_l)

    # column pass = row pass on the transposed map
    Ptt = tg.transpose(Pt, (1, 0, 2))
    PT = tg.transpose(P, (1, 0, 2))
    col_e, col_l = row_group_masks(validity.T)
    es, ls, w_es, w_ls = directed_attention(
        Ptt, PT, params.col_phi, params.col_theta_before, params.col_theta_after,
        params.g, col_e, col_l)
    es = tg.transpose(es, (1, 0, 2))
    ls = tg.transpose(ls, (1, 0, 2))

    ctx = linear(tg.concat([ee, le, es, ls], axis=-1), params.reduce_w, params.reduce_b)
    out = channel_gate(P, ctx, params.gate_w1, params.gate_w2)
    out = out * validity[:, :, None].astype(P.dtype)
    if not return_attention:
        return out

    n_q = max(int(validity.sum()), 1)
    avg = (w_ee.data + w_le.data).sum(axis=1)            # row i, key column k
    avg = avg + (w_es.data + w_ls.data).sum(axis=1).T    # key row k, column j
    attn = {
        "average": avg / n_q,
        "EE": w_ee.data.copy(), "LE": w_le.data.copy(),
        "ES": np.transpose(w_es.data, (1, 0, 2)).copy(),
        "LS": np.transpose(w_ls.data, (1, 0, 2)).copy(),
    }
    return out, attn
