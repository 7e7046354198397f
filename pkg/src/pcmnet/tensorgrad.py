"""Dense numpy tensors with reverse-mode differentiation.

Only the primitives the network needs are provided. Every primitive
records a closure that maps the output gradient to gradients of its
inputs; :func:`backward` replays them in reverse topological order.

All primitive outputs are checked for finiteness, a NaN or Inf raises
:class:`FloatingPointError` at the op that produced it.
"""

from __future__ import annotations

import contextlib
import math
import struct
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True

LOG_EPS = 1e-8

_sum_all = np.add.reduce


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An ndarray plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap constants; float arrays keep their dtype unless ``dtype`` is given."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; only fall back to the full scan
    # when the sum itself is not finite
    s = _sum_all(arr, axis=None)
    if math.isfinite(s):
        return
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0).astype(a.dtype, copy=False), (a,),
                 lambda g: (g * pos,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a, eps: float = LOG_EPS) -> Tensor:
    """Natural log of ``max(a, eps)``; the clamp has zero gradient."""
    a = as_tensor(a)
    live = a.data > eps
    safe = np.where(live, a.data, eps)
    out = np.log(safe)
    return _make(out, (a,), lambda g: (np.where(live, g / safe, 0.0),), "log")


# ---------------------------------------------------------------------------
# structural


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, ts, bw, "concat")


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))
    src = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.asarray(a.data.mean(axis=axis))
    src = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _make(out, (a,), bw, "mean")


# ---------------------------------------------------------------------------
# linear algebra


_BLAS_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # np.matmul has no BLAS kernel for extended precision and its generic
    # loop is ~2.5x slower than np.dot's; route those dtypes through dot
    if x.dtype in _BLAS_DTYPES and y.dtype in _BLAS_DTYPES:
        return np.matmul(x, y)
    if y.ndim == 2:
        return np.dot(x.reshape(-1, x.shape[-1]), y).reshape(x.shape[:-1] + (y.shape[-1],))
    if x.ndim == 3 and y.ndim == 3 and x.shape[0] == y.shape[0]:
        out = np.empty((x.shape[0], x.shape[1], y.shape[2]), np.result_type(x, y))
        for k in range(x.shape[0]):
            out[k] = np.dot(x[k], y[k])
        return out
    return np.matmul(x, y)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = _mm(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch dims instead of materialising per-batch products
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def conv1d(x, w, b=None) -> Tensor:
    """Same-length 1-D convolution over the time axis.

    ``x`` is ``(T, C_in)``, ``w`` is ``(k, C_in, C_out)`` with ``k`` in {1, 3},
    ``b`` is ``(C_out,)``. Out-of-range taps read zeros.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 3:
        raise ValueError("conv1d expects x (T, C_in) and w (k, C_in, C_out)")
    k = w.shape[0]
    if k not in (1, 3):
        raise ValueError(f"kernel size must be 1 or 3, got {k}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1d channel mismatch: {x.shape} vs {w.shape}")
    T = x.shape[0]
    pad = k // 2
    xp = np.zeros((T + 2 * pad, x.shape[1]), dtype=x.dtype)
    xp[pad:pad + T] = x.data
    out = np.zeros((T, w.shape[2]), dtype=np.result_type(x.data, w.data))
    for o in range(k):
        out += xp[o:o + T] @ w.data[o]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for o in range(k):
            gxp[o:o + T] += g @ w.data[o].T
            gw[o] = xp[o:o + T].T @ g
        grads = [gxp[pad:pad + T], gw]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, bw, "conv1d")


# ---------------------------------------------------------------------------
# attention


def masked_softmax(x, mask) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked entries are excluded from the support and come out exactly 0.
    A row with no unmasked entry is an error; callers handle empty groups.
    """
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax over an all-masked row")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw, "masked_softmax")


# ---------------------------------------------------------------------------
# interpolation


def interp_weights(positions: np.ndarray, length: int):
    """Left index, right index and right weight for linear interpolation."""
    pos = np.clip(np.asarray(positions, dtype=np.float64), 0.0, length - 1)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, length - 1)
    hi = np.minimum(lo + 1, length - 1)
    frac = pos - lo
    return lo, hi, frac


def interp_gather(x, positions) -> Tensor:
    """Linearly interpolate rows of ``x`` (``(T, C)``) at fractional positions.

    Output shape is ``positions.shape + (C,)``. Positions are clamped to
    ``[0, T-1]``.
    """
    x = as_tensor(x)
    T = x.shape[0]
    lo, hi, frac = interp_weights(positions, T)
    fr = frac[..., None].astype(x.dtype)
    out = (1.0 - fr) * x.data[lo] + fr * x.data[hi]

    def bw(g):
        gx = np.zeros_like(x.data)
        flat = g.reshape(-1, x.shape[1])
        f = fr.reshape(-1, 1)
        np.add.at(gx, lo.reshape(-1), (1.0 - f) * flat)
        np.add.at(gx, hi.reshape(-1), f * flat)
        return (gx,)

    return _make(out, (x,), bw, "interp_gather")


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(loss: Tensor) -> list:
    """Nodes reachable from ``loss`` ordered inputs-first.

    Raises ``ValueError`` if the recorded graph contains a cycle.
    """
    order = []
    state: Dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise ValueError("computation graph contains a cycle")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            ps = state.get(id(p))
            if ps == 1:
                raise ValueError("computation graph contains a cycle")
            if ps is None:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """Backpropagate a scalar ``loss``.

    Sets ``.grad`` on every leaf that requires grad. If ``params`` is given,
    returns ``{name: gradient}`` for each; parameters that did not take part
    in the loss get exact zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = pg if k not in grads else grads[k] + pg
    if params is None:
        return {}
    out = {}
    for name, p in params.items():
        out[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def check_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                    step: float = 1e-5, report: Optional[dict] = None, order: int = 2,
                    fd_dtype=None) -> float:
    """Compare backprop gradients to central finite differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Every entry of every parameter is perturbed by ``+-step`` (``order=2``)
    or ``+-step, +-2 step`` (``order=4``, the five-point stencil, which
    tolerates a larger step and so has far less cancellation error).
    Returns the maximum relative error ``|a - n| / max(|a|, |n|, 1e-8)``;
    when ``report`` is a dict it is filled with the per-parameter maxima.

    ``fd_dtype`` (e.g. ``np.longdouble``) evaluates only the perturbed losses
    at that precision. Entries whose gradient sits below the ``1e-8`` floor
    are then compared almost absolutely, and float64 cancellation noise of
    ``eps * |loss| / step`` would otherwise swamp them unless ``step`` were
    large enough to step across ReLU kinks.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    offsets = (1.0, -1.0) if order == 2 else (2.0, 1.0, -1.0, -2.0)
    # integer weights over a common divisor keep the stencil exact in any dtype
    coefs, denom = ((1, -1), 2) if order == 2 else ((-1, 8, -8, 1), 12)
    zero_grad(params.values())
    analytic = backward(loss_fn(), params)
    worst = 0.0
    saved = {name: p.data for name, p in params.items()}
    if fd_dtype is not None:
        for name, p in params.items():
            p.data = saved[name].astype(fd_dtype)
    try:
        worst = _fd_compare(loss_fn, params, analytic, step, offsets, coefs, denom, report)
    finally:
        for name, p in params.items():
            p.data = saved[name]
    zero_grad(params.values())
    return worst


def _fd_compare(loss_fn, params, analytic, step, offsets, coefs, denom, report) -> float:
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            numeric = np.empty(flat.size)
            for idx in range(flat.size):
                orig = flat[idx]
                vals = np.empty(len(offsets), dtype=p.data.dtype)
                for n, off in enumerate(offsets):
                    flat[idx] = orig + off * step
                    vals[n] = loss_fn().data
                flat[idx] = orig
                if not np.isfinite(vals).all():
                    raise FloatingPointError(f"non-finite loss while perturbing {name}[{idx}]")
                numeric[idx] = float((np.asarray(coefs, vals.dtype) @ vals) / (denom * step))
            a = analytic[name].reshape(-1)
            rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
            m = float(rel.max()) if rel.size else 0.0
            if report is not None:
                report[name] = m
            worst = max(worst, m)
    return worst


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= (self.lr * upd).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoint I/O

CHECKPOINT_MAGIC = b"PCMW"


def save_checkpoint(path, params: Mapping[str, Tensor]) -> None:
    """Write parameters in the little-endian ``PCMW`` layout (f32 payload)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            arr = p.data if not isinstance(p, np.ndarray) else p
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    """Read a ``PCMW`` file into ``{name: float32 array}`` preserving order."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a PCMW checkpoint")
    off = 4
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = arr.astype(np.float32)
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out
