"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape nothing is recorded, which is the inference path.
"""
from __future__ import annotations

import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_local = threading.local()
_check_finite = os.environ.get("MIMICPARTS_DEBUG", "0") not in ("", "0", "false")


class NonFiniteError(FloatingPointError):
    pass


class TapeConsumedError(RuntimeError):
    pass


def set_check_finite(flag: bool) -> None:
    """Toggle eager NaN/Inf detection after every primitive."""
    global _check_finite
    _check_finite = bool(flag)


def check_finite_enabled() -> bool:
    return _check_finite


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name
        if _check_finite and not np.isfinite(self.data).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())

    # metadata ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of primitive applications.

    Use as a context manager; every primitive evaluated inside with at least
    one gradient-requiring input is appended in evaluation order.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        if self.consumed:
            raise TapeConsumedError("cannot record on a consumed tape")
        self.records.append(_Record(out, tuple(inputs), backward))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] = ()) -> dict[Tensor, np.ndarray]:
        """Return d(loss)/d(leaf) for every gradient-requiring leaf on the tape.

        Tensors listed in ``wrt`` are always present in the result (zeros if
        the loss does not depend on them).
        """
        if self.consumed:
            raise TapeConsumedError("backward already called on this tape")
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True

        produced = {id(r.out) for r in self.records}
        leaves: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves.setdefault(id(t), t)
        if loss.requires_grad and id(loss) not in produced:
            leaves.setdefault(id(loss), loss)
        for t in wrt:
            leaves.setdefault(id(t), t)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for r in reversed(self.records):
            g = grads.pop(id(r.out), None)
            if g is None:
                continue
            in_grads = r.backward(g)
            for t, gi in zip(r.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self.records = []

        out: dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            g = grads.get(key)
            out[t] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
        return out


def backward(loss: Tensor, tape: Tape | None = None, wrt: Sequence[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("no tape recorded; evaluate the loss inside `with Tape():`")
    return tape.backward(loss, wrt)


def primitive(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a raw result as a tensor and record ``backward_fn`` if needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    out_data = np.asarray(out_data)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    dtype = out_data.dtype if out_data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    out = Tensor(np.asarray(out_data, dtype=dtype), requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    nlead = grad.ndim - len(shape)
    if nlead > 0:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return primitive(out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return primitive(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return primitive(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return primitive(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return primitive(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return primitive(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return primitive(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return primitive(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return primitive(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return primitive(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return primitive(a.data * mask, (a,), lambda g: (g * mask,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return primitive(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * x * (1.0 + 0.044715 * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return primitive(out, (a,), bw)


# linear algebra / shape ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need rank >= 2 and broadcast on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return primitive(out, (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return primitive(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return primitive(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return primitive(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return primitive(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty list")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(s != r for k, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if k != ax):
            raise ValueError(f"concat shape mismatch along axis {axis}: {[t.shape for t in ts]}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return primitive(out, ts, lambda g: tuple(np.split(g, bounds, axis=ax)))


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    a = as_tensor(a)
    ax = axis % a.ndim
    if any(s < 1 for s in sizes) or sum(sizes) != a.shape[ax]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    pieces, start = [], 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + s)
        pieces.append(getitem(a, tuple(idx)))
        start += s
    return pieces


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


def repeat(a, factor: int, axis: int) -> Tensor:
    """Nearest-neighbour upsampling: each slice along ``axis`` repeated ``factor`` times."""
    a = as_tensor(a)
    ax = axis % a.ndim

    def bw(g):
        shp = a.shape[:ax] + (a.shape[ax], factor) + a.shape[ax + 1:]
        return (g.reshape(shp).sum(axis=ax + 1),)

    return primitive(np.repeat(a.data, factor, axis=ax), (a,), bw)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# reductions ---------------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return primitive(np.asarray(out), (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size / max(np.asarray(out).size, 1)
    return primitive(np.asarray(out), (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / n,))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    res = out if keepdims else np.squeeze(out, axis=axis)
    return primitive(res, (a,), lambda g: (soft * (g if keepdims else np.expand_dims(g, axis)),))


# normalisation / activations over an axis -----------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return primitive(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    sh = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(sh).sum(axis=axis, keepdims=True))
    out = sh - lse
    soft = np.exp(out)
    return primitive(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return primitive(xhat, (a,), bw)


def l2_normalize(a, axis: int = -1, eps: float = 0.0) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise ZeroDivisionError("zero-norm vector cannot be normalised")
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return primitive(out, (a,), bw)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis`` (broadcasting)."""
    return tsum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


# losses ------------------------------------------------------------------------

def smooth_l1(x, y, delta: float = 1.0, reduction: str = "mean") -> Tensor:
    """Huber-style loss: 0.5 d^2 / delta inside |d| < delta, |d| - 0.5 delta outside."""
    x, y = as_tensor(x), as_tensor(y)
    d = x.data - y.data
    ad = np.abs(d)
    inside = ad < delta
    val = np.where(inside, 0.5 * d * d / delta, ad - 0.5 * delta)
    dval = np.where(inside, d / delta, np.sign(d))
    if reduction == "mean":
        n = val.size
        out = np.asarray(val.mean())

        def bw(g):
            gd = g * dval / n
            return _unbroadcast(gd, x.shape), _unbroadcast(-gd, y.shape)
    elif reduction == "none":
        out = val

        def bw(g):
            gd = g * dval
            return _unbroadcast(gd, x.shape), _unbroadcast(-gd, y.shape)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return primitive(out, (x, y), bw)


# convolution -----------------------------------------------------------------------

def conv1d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution.

    x: (B, T, Cin), w: (K, Cin, Cout), b: (Cout,) -> (B, T_out, Cout) with
    T_out = (T + 2*padding - K) // stride + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}")
    K, cin, cout = w.shape
    B, T, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    t_out = (T + 2 * padding - K) // stride + 1
    if t_out < 1:
        raise ValueError("conv1d input shorter than kernel")
    # cols: (B, t_out, K, Cin)
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)[:, ::stride][:, :t_out]
    cols = np.ascontiguousarray(np.swapaxes(win, 2, 3)).reshape(B * t_out, K * cin)
    out = (cols @ w.data.reshape(K * cin, cout)).reshape(B, t_out, cout)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs.append(b)

    def bw(g):
        g2 = g.reshape(B * t_out, cout)
        gw = (cols.T @ g2).reshape(K, cin, cout) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            end = stride * (t_out - 1) + 1
            for k in range(K):
                gxp[:, k:k + end:stride, :] += g @ w.data[k].T
            gx = gxp[:, padding:padding + T, :] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    return primitive(out, inputs, bw)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
