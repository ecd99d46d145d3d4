"""Dense float64 tensors with recorded lineage.

Every primitive records a backward rule that is itself written in terms of
primitives, so gradients produced with graph retention are ordinary
differentiable tensors. That is what makes double backward work.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

DIV_EPS = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DivisionError(ArithmeticError):
    """Raised when an unguarded division meets a near-zero divisor."""


@contextlib.contextmanager
def no_grad():
    """Disable lineage recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """Lineage entry: operation name, parent tensors and the vector-Jacobian rule."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64, copy=True) if not (
            isinstance(data, np.ndarray) and data.dtype == np.float64
        ) else data
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    @property
    def lineage(self) -> Tuple[str, Tuple["Tensor", ...]]:
        if self.node is None:
            return ("", ())
        return (self.node.op, self.node.parents)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag}{op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return getitem(self, index)

    # -- method aliases ------------------------------------------------
    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def max(self, axis=-1, keepdims=False): return max_(self, axis, keepdims)[0]
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def tanh(self): return tanh(self)
    def abs(self): return abs_(self)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def square(self): return square(self)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], op: str, vjp: Callable) -> Tensor:
    out = Tensor(np.asarray(data, dtype=np.float64))
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, vjp)
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# shape plumbing

def sum_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back to ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = x.shape

    def vjp(g):
        return (broadcast_to(g, src),)

    return _make(data.reshape(shape), (x,), "sum_to", vjp)


def broadcast_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape

    def vjp(g):
        return (sum_to(g, src),)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), "broadcast_to", vjp)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from None

    def vjp(g):
        return (reshape(g, src),)

    return _make(data, (x,), "reshape", vjp)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), "transpose", vjp)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def expand_dims(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def vjp(g):
        return (scatter_add(g, index, src),)

    return _make(np.array(x.data[index]), (x,), "getitem", vjp)


def scatter_add(values: Tensor, index, shape: Tuple[int, ...]) -> Tensor:
    """Zeros of ``shape`` with ``values`` accumulated at ``index`` (adjoint of getitem)."""
    out = np.zeros(shape)
    np.add.at(out, index, values.data)

    def vjp(g):
        return (getitem(g, index),)

    return _make(out, (values,), "scatter_add", vjp)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            grads.append(getitem(g, tuple(idx)))
        return tuple(grads)

    return _make(data, tuple(xs), "concat", vjp)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), "add", vjp)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(neg(g), b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), "sub", vjp)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (neg(g),))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        return (sum_to(mul(g, b), a.shape) if a.requires_grad else None,
                sum_to(mul(g, a), b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), "mul", vjp)


def div(a: ArrayLike, b: ArrayLike, eps: Optional[float] = None) -> Tensor:
    """Elementwise ``a / b``.

    Without ``eps`` a divisor with magnitude below 1e-12 raises
    :class:`DivisionError`. With ``eps`` the divisor becomes ``b + eps``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if eps is not None:
        b = add(b, eps)
    elif np.any(np.abs(b.data) < DIV_EPS):
        raise DivisionError("div: divisor magnitude below 1e-12; use the eps-guarded form")
    _broadcast_shape(a, b, "div")
    out_data = a.data / b.data

    def vjp(g):
        ga = sum_to(_raw_div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = sum_to(neg(_raw_div(mul(g, out), b)), b.shape)
        return ga, gb

    out = _make(out_data, (a, b), "div", vjp)
    return out


def _raw_div(a: Tensor, b: Tensor) -> Tensor:
    # divisor already validated by the forward call
    def vjp(g):
        ga = sum_to(_raw_div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(_raw_div(mul(g, out), b)), b.shape) if b.requires_grad else None
        return ga, gb

    out = _make(a.data / b.data, (a, b), "div", vjp)
    return out


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power: exponent must be a Python scalar")
    p = float(exponent)

    def vjp(g):
        if p == 2.0:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _make(a.data ** p, (a,), "power", vjp)


def square(a: ArrayLike) -> Tensor:
    return power(a, 2.0)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), "exp", vjp)
    return out


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DivisionError("log: non-positive argument")
    return _make(np.log(a.data), (a,), "log", lambda g: (_raw_div(g, a),))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(np.tanh(a.data), (a,), "tanh", vjp)
    return out


def abs_(a: ArrayLike) -> Tensor:
    """|a| with subgradient 0 at exactly 0."""
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))
    return _make(np.abs(a.data), (a,), "abs", lambda g: (mul(g, sign),))


def minimum(a: ArrayLike, c: float) -> Tensor:
    """Elementwise min with a scalar; gradient passes where ``a < c``."""
    a = as_tensor(a)
    keep = Tensor((a.data < c).astype(np.float64))
    return _make(np.minimum(a.data, c), (a,), "minimum", lambda g: (mul(g, keep),))


def maximum(a: ArrayLike, c: float) -> Tensor:
    """Elementwise max with a scalar; gradient passes where ``a > c``."""
    a = as_tensor(a)
    keep = Tensor((a.data > c).astype(np.float64))
    return _make(np.maximum(a.data, c), (a,), "maximum", lambda g: (mul(g, keep),))


def mask_mul(a: ArrayLike, mask) -> Tensor:
    """Multiply by a constant factor (Bernoulli gate, dropout, indicator).

    The factor never joins the lineage graph, so no gradient reaches it.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    return mul(a, Tensor(m))


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", vjp)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / count)


def max_(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tuple[Tensor, np.ndarray]:
    """Max over one axis, returning ``(values, argmax)``.

    Ties resolve to the lowest index; gradient flows to the argmax only.
    """
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    onehot = np.zeros(a.shape)
    np.put_along_axis(onehot, np.expand_dims(idx, axis), 1.0, axis=axis)
    hot = Tensor(onehot)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        vals = np.squeeze(vals, axis=axis)
    kept = list(a.shape)
    kept[axis] = 1
    kept = tuple(kept)
    src = a.shape

    def vjp(g):
        return (mul(broadcast_to(reshape(g, kept), src), hot),)

    return _make(vals, (a,), "max", vjp), idx


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = sum_(mul(g, out), axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    out = _make(y, (a,), "softmax", vjp)
    return out


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def vjp(g):
        p = exp(out)
        return (sub(g, mul(p, sum_(g, axis, keepdims=True))),)

    out = _make(y, (a,), "log_softmax", vjp)
    return out


# ---------------------------------------------------------------------------
# linear algebra and convolution

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product with numpy batching semantics (both operands ≥ 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from None

    def vjp(g):
        ga = sum_to(matmul(g, swapaxes(b, -1, -2)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swapaxes(a, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), "matmul", vjp)


def _window_index(length: int, width: int) -> np.ndarray:
    return np.arange(length)[:, None] + np.arange(width)[None, :]


def unfold(x: Tensor, width: int, pad_left: int, pad_right: int) -> Tensor:
    """Sliding windows over axis -2 of ``(..., L, D)``.

    Returns ``(..., L_out, width * D)`` where ``L_out = L + pads - width + 1``.
    """
    x = as_tensor(x)
    *lead, length, dim = x.shape
    out_len = length + pad_left + pad_right - width + 1
    if out_len < 1:
        raise ShapeError(f"unfold: window {width} longer than padded length {length + pad_left + pad_right}")
    pad = [(0, 0)] * len(lead) + [(pad_left, pad_right), (0, 0)]
    xp = np.pad(x.data, pad)
    win = xp[..., _window_index(out_len, width), :]
    data = win.reshape(*lead, out_len, width * dim)
    src = x.shape

    def vjp(g):
        return (fold(g, width, pad_left, pad_right, src),)

    return _make(data, (x,), "unfold", vjp)


def fold(cols: Tensor, width: int, pad_left: int, pad_right: int, shape: Tuple[int, ...]) -> Tensor:
    """Adjoint of :func:`unfold`: scatter-add windows back onto the sequence."""
    *lead, length, dim = shape
    out_len = cols.shape[-2]
    padded = np.zeros((*lead, length + pad_left + pad_right, dim))
    win = cols.data.reshape(*lead, out_len, width, dim)
    for k in range(width):
        padded[..., k:k + out_len, :] += win[..., :, k, :]
    data = padded[..., pad_left:pad_left + length, :]

    def vjp(g):
        return (unfold(g, width, pad_left, pad_right),)

    return _make(np.ascontiguousarray(data), (cols,), "fold", vjp)


def conv1d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: str = "valid") -> Tensor:
    """1-D convolution over the token axis.

    ``x`` is ``(..., L, D)``, ``kernel`` is ``(width, D, K)``. ``padding`` is
    ``"valid"`` (no padding, stride 1) or ``"same"`` (left ``(w-1)//2``, right
    ``w//2``, so every position keeps one output column).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d: kernel must be (width, D, K), got {kernel.shape}")
    width, dim, k = kernel.shape
    if x.shape[-1] != dim:
        raise ShapeError(f"conv1d: input feature size {x.shape[-1]} != kernel depth {dim}")
    if padding == "same":
        left, right = (width - 1) // 2, width // 2
    elif padding == "valid":
        left = right = 0
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")
    cols = unfold(x, width, left, right)
    out = matmul(cols, reshape(kernel, (width * dim, k)))
    if bias is not None:
        out = add(out, bias)
    return out
