"""Dense numpy tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:func:`backward` on a scalar walks the graph once in reverse topological
order and *adds* into ``.grad`` of every tensor that requires it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True

_GELU_K = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    """Set the float type used for new leaf tensors (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the global float type, e.g. for gradient checks."""
    previous = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[GradFn] = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: GradFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- tape


class Tape:
    """Operations reachable from a root, ordered so inputs precede outputs."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def run_backward(self, seed: np.ndarray) -> None:
        root = self.nodes[-1]
        pending: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable t."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    Tape(loss).run_backward(np.ones_like(loss.data))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = float(b)

        def scale_fn(g):
            return (g * c,)

        return Tensor._from_op(a.data * np.asarray(c, dtype=a.data.dtype), (a,), scale_fn)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, sa) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, sb) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), grad_fn)


def gated_residual(x: Tensor, y: Tensor, gate: np.ndarray) -> Tensor:
    """``x + y`` where ``gate`` is true, exactly ``x`` elsewhere (no rounding)."""
    gate = np.asarray(gate, dtype=bool)
    out = np.where(gate, x.data + y.data, x.data)
    sy = y.shape

    def grad_fn(g):
        return g, _unbroadcast(np.where(gate, g, 0).astype(g.dtype), sy)

    return Tensor._from_op(out, (x, y), grad_fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes.

    A 2-D right operand applied to a stacked left operand (the usual
    ``x @ W`` of a linear layer) takes a reshaped fast path in backward.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        out = (a.data.reshape(-1, sa[-1]) @ b.data).reshape(sa[:-1] + sb[-1:])
    else:
        out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, sb[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(sa)
            if b.requires_grad:
                gb = a.data.reshape(-1, sa[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), sa)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), sb)
        return ga, gb

    return Tensor._from_op(out, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def grad_fn(g):
        return (g.reshape(src),)

    return Tensor._from_op(x.data.reshape(shape), (x,), grad_fn)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inverse),)

    return Tensor._from_op(x.data.transpose(axes), (x,), grad_fn)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    src, dtype = x.shape, x.data.dtype
    basic = _is_basic_index(index)

    def grad_fn(g):
        full = np.zeros(src, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(x.data[index], (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} on axis {axis}") from exc

    def grad_fn(g):
        return np.split(g, bounds, axis=axis)

    return Tensor._from_op(out, tensors, grad_fn)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick rows along axis 1: ``out[b, i] = x[b, index[b, i]]``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_rows: x {x.shape} with index {index.shape}")
    batch, n, d = x.shape
    dtype = x.data.dtype
    out = np.take_along_axis(x.data, index[:, :, None], axis=1)

    def grad_fn(g):
        flat = np.zeros((batch * n, d), dtype=dtype)
        offsets = (index + (np.arange(batch) * n)[:, None]).ravel()
        np.add.at(flat, offsets, g.reshape(-1, d))
        return (flat.reshape(batch, n, d),)

    return Tensor._from_op(out, (x,), grad_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; differentiable with respect to the table."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding index out of range [0, {vocab})")
    dtype = table.data.dtype
    tshape = table.shape

    def grad_fn(g):
        full = np.zeros(tshape, dtype=dtype)
        np.add.at(full, ids.ravel(), g.reshape(-1, tshape[-1]))
        return (full,)

    return Tensor._from_op(table.data[ids], (table,), grad_fn)


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- nonlinearities


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-shifted softmax.

    ``mask`` (broadcastable, True = keep) zeroes excluded entries; a slice
    with nothing kept yields all zeros rather than NaN.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    if mask is not None:
        m = np.where(np.isfinite(m), m, 0)
    y = np.subtract(z, m)
    np.exp(y, out=y)
    s = y.sum(axis=axis, keepdims=True)
    if mask is not None:
        s = np.where(s == 0, 1, s)
    y /= s

    def grad_fn(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return Tensor._from_op(y, (x,), grad_fn)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    n = x.shape[-1]
    xhat = x.data - x.data.mean(axis=-1, keepdims=True)
    var = np.square(xhat).mean(axis=-1, keepdims=True)
    var += eps
    inv = 1.0 / np.sqrt(var)
    xhat *= inv
    out = xhat * weight.data
    out += bias.data

    def grad_fn(g):
        gw = (g * xhat).reshape(-1, n).sum(axis=0) if weight.requires_grad else None
        gb = g.reshape(-1, n).sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * weight.data
            proj = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = dxhat - dxhat.mean(axis=-1, keepdims=True)
            gx -= xhat * proj
            gx *= inv
        return gx, gw, gb

    return Tensor._from_op(out, (x, weight, bias), grad_fn)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(k (x + 0.044715 x^3)))."""
    d = x.data
    t = d * d
    t *= 0.044715 * _GELU_K
    t += _GELU_K
    t *= d
    np.tanh(t, out=t)
    out = t + 1.0
    out *= d
    out *= 0.5

    def grad_fn(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) k (1 + 3 * 0.044715 x^2)
        inner = d * d
        inner *= 3 * 0.044715 * _GELU_K
        inner += _GELU_K
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        sech2 *= d
        sech2 *= inner
        sech2 += t
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return Tensor._from_op(out, (x,), grad_fn)


# ---------------------------------------------------------------- losses


def log_softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``.

    ``logits`` may carry extra leading axes; they are flattened together with
    ``targets``.
    """
    targets = np.asarray(targets, dtype=np.int64).ravel()
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    if flat.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy: {flat.shape[0]} rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target index out of range [0, {v})")
    rows = np.arange(flat.shape[0])
    logp = log_softmax_np(flat)
    loss = -logp[rows, targets].mean()
    src = logits.shape

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, targets] -= 1
        return ((p * (g / flat.shape[0])).reshape(src),)

    return Tensor._from_op(np.asarray(loss, dtype=flat.dtype), (logits,), grad_fn)
