"""The full network: base module, boundary head and proposal head.

::

    X_raw -> conv3 -> conv3 -> [f-PCM] ----+--> [f-PCM] -> conv3 -> conv1 -> start, end
                                           |
                                           +--> sample -> [p-PCM] -> 1x1 -> 1x1 -> Mcc, Mcr

The two heads are parallel branches of the base output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import tensorgrad as tg
from .fpcm import FpcmParams, fpcm_block
from .layers import ParamGroup, linear, weight, zeros
from .posenc import DEFAULT_BASE, pe2d, sinusoidal_pe
from .ppcm import DEFAULT_SAMPLES, PpcmParams, ppcm_forward, sample_proposal_features, validity_mask
from .tensorgrad import Tensor


@dataclass
class PcmNetConfig:
    T: int = 100
    C: int = 256
    input_dim: int = 400
    D: Optional[int] = None
    S: int = DEFAULT_SAMPLES
    gate_ratio: int = 4
    head_hidden: int = 128
    pe_base: float = DEFAULT_BASE
    use_fpcm: bool = True
    use_ppcm: bool = True
    boundary_fpcm: bool = True

    def __post_init__(self):
        for name in ("T", "C", "input_dim", "S", "gate_ratio", "head_hidden"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.D is not None and (not isinstance(self.D, (int, np.integer)) or self.D < 1):
            raise ValueError(f"D must be a positive integer or null, got {self.D!r}")
        if self.C % 4:
            raise ValueError(f"C must be divisible by 4, got {self.C}")
        if self.C % self.gate_ratio:
            raise ValueError(f"C={self.C} not divisible by gate_ratio={self.gate_ratio}")
        if self.S < 2:
            raise ValueError("S must be at least 2")
        if self.pe_base <= 1:
            raise ValueError("pe_base must exceed 1")

    @property
    def duration_cap(self) -> int:
        return self.T if self.D is None else self.D

    def validity(self) -> np.ndarray:
        return validity_mask(self.T, self.duration_cap)


@dataclass
class PcmNetParams(ParamGroup):
    base_w1: Tensor
    base_b1: Tensor
    base_w2: Tensor
    base_b2: Tensor
    base_fpcm: Optional[FpcmParams]
    bnd_fpcm: Optional[FpcmParams]
    bnd_w1: Tensor
    bnd_b1: Tensor
    bnd_start_w: Tensor
    bnd_start_b: Tensor
    bnd_end_w: Tensor
    bnd_end_b: Tensor
    sample_proj: Tensor
    ppcm: Optional[PpcmParams]
    prop_w1: Tensor
    prop_b1: Tensor
    prop_cc_w: Tensor
    prop_cc_b: Tensor
    prop_cr_w: Tensor
    prop_cr_b: Tensor

    @classmethod
    def init(cls, config: PcmNetConfig, seed: int = 0, dtype=np.float64) -> "PcmNetParams":
        rng = np.random.default_rng(seed)
        C, H, I = config.C, config.head_hidden, config.input_dim

        def w(shape, fan_in, scale=1.0):
            return weight(rng, shape, fan_in, scale, dtype)

        use_f = config.use_fpcm
        return cls(
            base_w1=w((3, I, C), 3 * I, np.sqrt(2)), base_b1=zeros((C,), dtype),
            base_w2=w((3, C, C), 3 * C, np.sqrt(2)), base_b2=zeros((C,), dtype),
            base_fpcm=FpcmParams.init(rng, C, config.gate_ratio, dtype) if use_f else None,
            bnd_fpcm=(FpcmParams.init(rng, C, config.gate_ratio, dtype)
                      if use_f and config.boundary_fpcm else None),
            bnd_w1=w((3, C, H), 3 * C, np.sqrt(2)), bnd_b1=zeros((H,), dtype),
            bnd_start_w=w((1, H, 1), H), bnd_start_b=zeros((1,), dtype),
            bnd_end_w=w((1, H, 1), H), bnd_end_b=zeros((1,), dtype),
            sample_proj=w((C, C), C),
            ppcm=PpcmParams.init(rng, C, config.gate_ratio, dtype) if config.use_ppcm else None,
            prop_w1=w((C, H), C, np.sqrt(2)), prop_b1=zeros((H,), dtype),
            prop_cc_w=w((H, 1), H), prop_cc_b=zeros((1,), dtype),
            prop_cr_w=w((H, 1), H), prop_cr_b=zeros((1,), dtype),
        )

    def load(self, arrays: Dict[str, np.ndarray]) -> None:
        """Copy ``arrays`` into the parameters; names and shapes must match."""
        named = self.named_parameters()
        if set(arrays) != set(named):
            missing = sorted(set(named) - set(arrays))
            extra = sorted(set(arrays) - set(named))
            raise ValueError(f"checkpoint/config mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in named.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"checkpoint/config mismatch for {k}: {arrays[k].shape} vs {p.shape}")
            p.data = np.array(arrays[k], dtype=p.dtype)

    def astype(self, dtype) -> "PcmNetParams":
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        return self


@dataclass
class NetworkOutputs:
    start: Tensor
    end: Tensor
    mcc: Tensor
    mcr: Tensor
    attention: dict = dataclasses.field(default_factory=dict)


def parameter_count(params: PcmNetParams) -> int:
    return int(sum(p.data.size for p in params.named_parameters().values()))


def pcmnet_forward(X_raw, config: PcmNetConfig, params: PcmNetParams,
                   return_attention: bool = False) -> NetworkOutputs:
    X = tg.as_tensor(X_raw)
    if X.shape != (config.T, config.input_dim):
        raise ValueError(f"input {X.shape} does not match config ({config.T}, {config.input_dim})")
    dtype = params.base_w1.dtype
    if X.dtype != dtype:
        X = Tensor(X.data.astype(dtype))
    T, C = config.T, config.C
    attn = {}
    pe = sinusoidal_pe(T, C, config.pe_base)

    h = tg.relu(tg.conv1d(X, params.base_w1, params.base_b1))
    h = tg.relu(tg.conv1d(h, params.base_w2, params.base_b2))
    if params.base_fpcm is not None:
        h = _maybe_attn(fpcm_block(h, pe, params.base_fpcm, return_attention),
                        attn, "base_fpcm")

    b = h
    if params.bnd_fpcm is not None:
        b = _maybe_attn(fpcm_block(b, pe, params.bnd_fpcm, return_attention),
                        attn, "boundary_fpcm")
    b = tg.relu(tg.conv1d(b, params.bnd_w1, params.bnd_b1))
    start = tg.sigmoid(tg.reshape(tg.conv1d(b, params.bnd_start_w, params.bnd_start_b), (T,)))
    end = tg.sigmoid(tg.reshape(tg.conv1d(b, params.bnd_end_w, params.bnd_end_b), (T,)))

    valid = config.validity()
    P = sample_proposal_features(h, valid, params.sample_proj, config.S)
    if params.ppcm is not None:
        P = _maybe_attn(ppcm_forward(P, pe2d(T, C, config.pe_base), valid, params.ppcm,
                                     return_attention), attn, "ppcm")
    q = tg.relu(linear(P, params.prop_w1, params.prop_b1))
    mask = Tensor(valid.astype(dtype))
    mcc = tg.sigmoid(tg.reshape(linear(q, params.prop_cc_w, params.prop_cc_b), (T, T))) * mask
    mcr = tg.sigmoid(tg.reshape(linear(q, params.prop_cr_w, params.prop_cr_b), (T, T))) * mask
    return NetworkOutputs(start, end, mcc, mcr, attn)


def _maybe_attn(result, store: dict, key: str):
    if isinstance(result, tuple):
        store[key] = result[1]
        return result[0]
    return result
