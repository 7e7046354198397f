"""Parameter containers and small building blocks shared by the modules."""

from __future__ import annotations

import dataclasses
from typing import Dict

import numpy as np

from .tensorgrad import Tensor, masked_softmax, matmul, mul


class ParamGroup:
    """Dataclass mixin: fields are Tensors or nested ParamGroups."""

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            key = f"{prefix}{f.name}"
            if isinstance(val, ParamGroup):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, Tensor):
                out[key] = val
        return out


def weight(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0,
           dtype=np.float64) -> Tensor:
    std = scale / np.sqrt(fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise (1x1) projection over the last axis."""
    y = matmul(x, w)
    return y + b if b is not None else y


def grouped_attention(logits: Tensor, mask: np.ndarray, values: Tensor):
    """Attend within the groups given by ``mask`` (last axis indexes keys).

    Rows whose group is empty produce a zero vector. Returns the attended
    values and the weight tensor.
    """
    mask = np.asarray(mask, dtype=bool)
    nonempty = mask.any(axis=-1)
    if nonempty.all():
        w = masked_softmax(logits, mask)
    else:
        support = mask | ~nonempty[..., None]
        keep = nonempty[..., None].astype(logits.dtype)
        w = mul(masked_softmax(logits, support), keep)
    return matmul(w, values), w
