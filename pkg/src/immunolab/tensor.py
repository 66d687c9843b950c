"""Minimal dense tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`GradientTape` is active and at
least one input requires a gradient; everything else runs as plain numpy.
Training uses float32; gradient checks switch to float64 via :func:`precision`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "GradientTape",
    "Tensor",
    "add",
    "backward",
    "bias_add",
    "channel_bias",
    "clamp",
    "concat",
    "conv2d",
    "get_default_dtype",
    "group_norm",
    "matmul",
    "mean",
    "mse",
    "mul",
    "precision",
    "repeat_batch",
    "reshape",
    "scale",
    "sigmoid",
    "silu",
    "softmax_rows",
    "sub",
    "sum",
    "transpose",
    "upsample_nearest",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype="float64"):
    """Temporarily change the dtype used for newly constructed tensors."""
    old = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


class Tensor:
    """A dense array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradientTape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations performed inside the block on
    tensors that require gradients are recorded. The tape keeps all saved
    values, so gradients may be recomputed as often as needed.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._index: dict[int, int] = {}
        self._closed = False

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)
        self._closed = True

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self._index[id(out)] = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward))
        out._tape = self

    def _propagate(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._index:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: self._index[id(loss)] + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if id(inp) not in self._index:
                    leaves[key] = inp
        return {k: grads[k] for k in leaves if k in grads}, leaves

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Return d(loss)/d(source) arrays without touching ``.grad``."""
        grads, _ = self._propagate(loss)
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf."""
        grads, leaves = self._propagate(loss)
        for key, g in grads.items():
            leaf = leaves[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape that produced it."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss was not produced on an active tape")
    loss._tape.backward(loss)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1]._record(out, inputs, backward_fn)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = a.dtype.type(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def bias_add(x, b) -> Tensor:
    """``x + b`` where ``b`` matches the trailing dimensions of ``x``."""
    x = _as_tensor(x)
    b = _as_tensor(b, x)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"bias_add: bias {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def channel_bias(x, b) -> Tensor:
    """Add a per-channel bias to ``x[..., C, H, W]``; ``b`` is ``(C,)`` or ``(N, C)``."""
    x = _as_tensor(x)
    b = _as_tensor(b, x)
    if b.ndim == 1:
        if x.shape[-3] != b.shape[0]:
            raise DimensionError(f"channel_bias: bias {b.shape} vs input {x.shape}")
        bd = b.data[:, None, None]
        sum_axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
    elif b.ndim == 2 and x.ndim == 4:
        if x.shape[:2] != b.shape:
            raise DimensionError(f"channel_bias: bias {b.shape} vs input {x.shape}")
        bd = b.data[:, :, None, None]
        sum_axes = (2, 3)
    else:
        raise DimensionError(f"channel_bias: bias {b.shape} vs input {x.shape}")
    return _make(x.data + bd, (x, b), lambda g: (g, g.sum(axis=sum_axes)))


def silu(x) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return _make(out, (x,), lambda g: (g * (sig * (1.0 + x.data * (1.0 - sig))),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is passed only where no clipping happened."""
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def repeat_batch(x, n: int) -> Tensor:
    """Repeat every batch item ``n`` times consecutively: ``(B, ...) -> (B*n, ...)``."""
    x = _as_tensor(x)
    b = x.shape[0]
    out = np.repeat(x.data, n, axis=0)
    return _make(out, (x,), lambda g: (g.reshape((b, n) + g.shape[1:]).sum(axis=1),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


# ---------------------------------------------------------------- reductions


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_same(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _make(np.asarray(np.mean(diff * diff)), (a, b), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either a plain ``(k, n)`` weight or
    has exactly the same leading dims as ``a``.
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dims differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, stabilized by subtracting the row max."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: (N, C, Hp, Wp) -> (C*kh*kw, N*Ho*Wo)
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int):
    n = xp.shape[0]
    o, _, kh, kw = w.shape
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return out, cols


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``; ``w`` is ``(O, C, kh, kw)``;
    optional bias ``b`` is ``(O,)``. Zero padding of ``pad`` on every side.
    """
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks for input {x.shape} and kernel {w.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, wd = xd.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d: input {x.shape} has {c} channels, kernel {w.shape} expects {cw}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {x.shape} (pad={pad})")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    out, cols = _correlate(xp, w.data, stride)
    ho, wo = out.shape[2:]
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b, x)
        out = out + b.data[None, :, None, None]
        inputs.append(b)
    if unbatched:
        out = out[0]

    def bw(g):
        g4 = g[None] if unbatched else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(w.shape)
        # input gradient: full correlation of the dilated output gradient with the flipped kernel
        if stride > 1:
            gd = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g4.dtype)
            gd[:, :, ::stride, ::stride] = g4
        else:
            gd = g4
        top, left = kh - 1 - pad, kw - 1 - pad
        bottom = h + kh - 1 - top - gd.shape[2]
        right = wd + kw - 1 - left - gd.shape[3]
        gd = np.pad(gd, ((0, 0), (0, 0), (max(top, 0), max(bottom, 0)), (max(left, 0), max(right, 0))))
        gd = gd[:, :, max(-top, 0) : gd.shape[2] - max(-bottom, 0), max(-left, 0) : gd.shape[3] - max(-right, 0)]
        wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _correlate(gd, wf, 1)
        if unbatched:
            gx = gx[0]
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(np.ascontiguousarray(out), tuple(inputs), bw)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    x = _as_tensor(x)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        sh = g.shape[:-2] + (g.shape[-2] // factor, factor, g.shape[-1] // factor, factor)
        return (g.reshape(sh).sum(axis=(-3, -1)),)

    return _make(out, (x,), bw)


def group_norm(x, groups: int, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Group normalization over ``(N, C, H, W)`` (or ``(C, H, W)``) input."""
    x = _as_tensor(x)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    n, c, h, w = xd.shape
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = xd.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out = xhat
    inputs = [x]
    if gamma is not None:
        gamma = _as_tensor(gamma, x)
        beta = _as_tensor(beta, x)
        out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
        inputs += [gamma, beta]
    m = xg.shape[2]

    def bw(g):
        g4 = g[None] if unbatched else g
        grads = []
        gxhat = g4 * gamma.data[None, :, None, None] if gamma is not None else g4
        gxh = gxhat.reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv / m * (m * gxh - gxh.sum(axis=2, keepdims=True) - xh * (gxh * xh).sum(axis=2, keepdims=True))
        gx = gx.reshape(n, c, h, w)
        grads.append(gx[0] if unbatched else gx)
        if gamma is not None:
            grads.append((g4 * xhat).sum(axis=(0, 2, 3)))
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    if unbatched:
        out = out[0]
    return _make(np.ascontiguousarray(out), tuple(inputs), bw)
