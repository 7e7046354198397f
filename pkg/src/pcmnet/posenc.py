"""Sinusoidal positional encodings and the direction-blindness check."""

from __future__ import annotations

import functools

import numpy as np

DEFAULT_BASE = 10000.0


@functools.lru_cache(maxsize=32)
def _sinusoidal_cached(T: int, dim: int, base: float) -> np.ndarray:
    k = dim // 2
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = base ** (-np.arange(k, dtype=np.float64) / k)
    angle = pos * freq[None, :]
    pe = np.empty((T, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def sinusoidal_pe(T: int, dim: int, base: float = DEFAULT_BASE) -> np.ndarray:
    """``(T, dim)`` encoding with ``pe[i, 2d] = sin(i / base**(d/k))`` and
    ``pe[i, 2d+1] = cos(i / base**(d/k))``, ``k = dim // 2``.

    Results are cached and returned read-only.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"encoding dim must be even and >= 2, got {dim}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if base <= 1:
        raise ValueError(f"base must exceed 1, got {base}")
    return _sinusoidal_cached(int(T), int(dim), float(base))


@functools.lru_cache(maxsize=16)
def _pe2d_cached(T: int, C: int, base: float) -> np.ndarray:
    half = C // 2
    pe = sinusoidal_pe(T, half, base)
    out = np.empty((T, T, C), dtype=np.float64)
    out[:, :, :half] = pe[:, None, :]
    out[:, :, half:] = pe[None, :, :]
    out.setflags(write=False)
    return out


def pe2d(T: int, C: int, base: float = DEFAULT_BASE) -> np.ndarray:
    """``(T, T, C)`` proposal-map encoding.

    Cell ``(i, j)`` is the start encoding of ``i`` (first ``C/2`` channels)
    concatenated with the end encoding of ``j`` (last ``C/2`` channels).
    """
    if C % 4:
        raise ValueError(f"C must be divisible by 4, got {C}")
    return _pe2d_cached(int(T), int(C), float(base))


def verify_pe_symmetry(dim: int, i: int, r: int, T: int | None = None,
                       base: float = DEFAULT_BASE) -> float:
    """``|pe_i . pe_{i+r} - pe_i . pe_{i-r}|`` for one frame and offset."""
    if i - r < 0:
        raise ValueError(f"i - r = {i - r} is negative")
    if T is not None and i + r >= T:
        raise ValueError(f"i + r = {i + r} is outside [0, {T})")
    pe = sinusoidal_pe(i + r + 1, dim, base)
    return float(abs(pe[i] @ pe[i + r] - pe[i] @ pe[i - r]))


def max_pe_asymmetry(T: int, dim: int, base: float = DEFAULT_BASE) -> float:
    """Worst forward/backward dot-product mismatch over every valid ``(i, r)``."""
    pe = sinusoidal_pe(T, dim, base)
    gram = pe @ pe.T
    worst = 0.0
    for r in range(1, T):
        i = np.arange(r, T - r)
        if i.size == 0:
            break
        worst = max(worst, float(np.abs(gram[i, i + r] - gram[i, i - r]).max()))
    return worst
