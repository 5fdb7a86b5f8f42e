"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps a row-major ``numpy.ndarray``. Every differentiable
operation records its parents and a backward closure; calling
:meth:`Tensor.backward` builds a :class:`Tape` (the reachable nodes in
forward-execution order) and replays the adjoints in reverse.

Broadcasting follows numpy's trailing-dimension alignment: shapes are
right-aligned and a dimension of size 1 (or a missing leading dimension)
stretches to match. Gradients flowing back into a broadcast operand are
summed over the stretched dimensions.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "precision",
    "get_default_dtype",
    "set_debug",
    "debug_mode",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "take",
    "sum",
    "mean",
    "relu",
    "sigmoid",
    "softplus",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "softmax",
    "log_softmax",
    "conv1d",
    "embedding_lookup",
    "cosine_similarity",
    "masked_fill",
    "clamp_min",
    "straight_through",
    "sorted_sum",
    "cast",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, shape_a, shape_b, detail: str = ""):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        msg = f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(FloatingPointError):
    """A non-finite value was produced while debug mode is on."""


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)


_state = _State()
_debug = False
_ids = itertools.count()


def get_default_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (e.g. ``np.float64``)."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_debug(flag: bool) -> None:
    """In debug mode any NaN produced by an op raises :class:`NumericError`."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    prev = _debug
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


class Tensor:
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(_state.dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data: np.ndarray = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._id = next(_ids)

    # -- basic properties -------------------------------------------------
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
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError("backward", self.shape, grad.shape)
        Tape.from_root(self).backward(self, grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def relu(self) -> Tensor:
        return relu(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sqrt(self) -> Tensor:
        return sqrt(self)


class Tape:
    """Reachable graph nodes in forward-execution order.

    Node ids increase monotonically at creation, so sorting by id gives a
    topological order; :meth:`backward` walks it in reverse and visits each
    node once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen[id(node)] = node
            stack.extend(node._parents)
        return cls(sorted(seen.values(), key=lambda n: n._id))

    def backward(self, root: Tensor, grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# -- helpers ---------------------------------------------------------------


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _state.dtype), requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _state.dtype), requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _debug and np.issubdtype(out.dtype, np.floating) and np.isnan(out.data).any():
        raise NumericError(f"{op}: produced NaN")
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, "trailing dimensions must match or be 1") from None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# -- element-wise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _result(a.data / b.data, (a, b), backward, "div")


def cast(a: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the source dtype."""
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    return _result(a.data.astype(dtype), (a,), lambda g: (g.astype(a.dtype),), "cast")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    """Element-wise power with a constant exponent."""
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(a.data**exponent, (a,), backward, "power")


# -- linear algebra and shape ---------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, "need (..., n, k) @ (..., k, m)")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, "batch dimensions do not broadcast") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; with ``axes=None`` swap the last two (matrix transpose)."""
    if axes is None:
        if a.ndim < 2:
            return a
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes, "axes must permute all dimensions")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _result(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0]
    nd = ref.ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref.shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", ref.shape, t.shape, f"must agree off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def take(a: Tensor, index) -> Tensor:
    """Numpy-style indexing (basic slices or integer arrays)."""
    if isinstance(index, Tensor):
        index = index.data
    data = a.data[index]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(data, copy=True), (a,), backward, "slice")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis, keepdims) * (1.0 / count)


def sorted_sum(a: Tensor, axis: int = 0) -> Tensor:
    """Sum along ``axis`` after sorting the values.

    The result depends only on the multiset of values, so permuting the
    summands along ``axis`` gives a bit-identical result.
    """
    ordered = np.sort(a.data, axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(ordered.sum(axis=axis)), (a,), backward, "sorted_sum")


# -- nonlinearities ---------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    y = np.logaddexp(0, a.data).astype(a.dtype)
    s = _stable_sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * s,), "softplus")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _result(y, (a,), lambda g: (g / (2 * y),), "sqrt")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (a,), backward, "log_softmax")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data >= floor
    y = np.where(mask, a.data, floor).astype(a.dtype)
    return _result(y, (a,), lambda g: (g * mask,), "clamp_min")


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant (no gradient there)."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ShapeError("masked_fill", a.shape, mask.shape) from None
    y = np.where(full, np.asarray(value, dtype=a.dtype), a.data)
    return _result(y, (a,), lambda g: (np.where(full, 0, g).astype(g.dtype),), "masked_fill")


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward the ``hard`` values; route the gradient to ``soft`` unchanged."""
    hard = np.asarray(hard.data if isinstance(hard, Tensor) else hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError("straight_through", hard.shape, soft.shape)
    return _result(hard.copy(), (soft,), lambda g: (g,), "straight_through")


# -- structured ops -------------------------------------------------------


def conv1d(signal: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``signal`` (B, C_in, L) with ``kernel`` (C_out, C_in, K).

    Zero padding of ``padding`` elements is applied on both ends. Output is
    (B, C_out, L_out) with ``L_out = (L + 2*padding - K) // stride + 1``.
    """
    if signal.ndim != 3 or kernel.ndim != 3 or signal.shape[1] != kernel.shape[1]:
        raise ShapeError("conv1d", signal.shape, kernel.shape, "need (B, C_in, L) and (C_out, C_in, K)")
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    width = signal.shape[2] + 2 * padding
    k = kernel.shape[2]
    if k > width:
        raise ShapeError("conv1d", signal.shape, kernel.shape, "kernel longer than padded signal")
    xp = np.pad(signal.data, ((0, 0), (0, 0), (padding, padding))) if padding else signal.data
    l_out = (width - k) // stride + 1
    idx = np.arange(l_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[:, :, idx]  # (B, C_in, L_out, K)
    out = np.tensordot(cols, kernel.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)

    def backward(g):
        gk = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
        gcols = np.tensordot(g, kernel.data, axes=([1], [0])).transpose(0, 2, 1, 3)
        gx = np.zeros_like(xp)
        if stride >= k:
            gx[:, :, idx.reshape(-1)] = gcols.reshape(gcols.shape[0], gcols.shape[1], -1)
        else:
            np.add.at(gx, (slice(None), slice(None), idx), gcols)
        if padding:
            gx = gx[:, :, padding:-padding]
        return gx, gk

    return _result(np.ascontiguousarray(out), (signal, kernel), backward, "conv1d")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for vocabulary of {table.shape[0]}")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _result(table.data[ids], (table,), backward, "embedding_lookup")


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis``.

    A zero vector has cosine 0 with everything.
    """
    a, b = _pair(a, b)
    _broadcast_check("cosine_similarity", a, b)
    return sum(_unit(a, axis) * _unit(b, axis), axis=axis)


def _unit(x: Tensor, axis: int) -> Tensor:
    sq = sum(x * x, axis=axis, keepdims=True)
    # zero rows get norm 1 so they normalise to the zero vector
    norm = sqrt(sq + (sq.data == 0).astype(x.dtype))
    return x / norm


# -- gradient oracle ----------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``x``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    x.grad = None
    was = x.requires_grad
    x.requires_grad = True
    try:
        out = f(x)
        if out.size != 1:
            raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
        out.backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        numeric = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f(x).data.sum())
                flat[i] = orig - eps
                lo = float(f(x).data.sum())
                flat[i] = orig
                num_flat[i] = (hi - lo) / (2 * eps)
    finally:
        x.requires_grad = was
        x.grad = None
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


