"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to one gradient per
parent.  :func:`backward` walks the recorded graph once in reverse
topological order (depth-first from the loss, parents visited in argument
order) so accumulation order is fixed and results are reproducible.

After a backward pass the tape is released; calling ``backward`` on the
same loss again raises :class:`~seqlidar.errors.ContractError`.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from seqlidar.errors import ContractError, DimensionError

DTYPES = (np.float32, np.float64)

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_dtype(dtype):
    dtype = np.dtype(dtype)
    if dtype.type not in DTYPES:
        raise DimensionError(f"unsupported dtype {dtype}; use float32 or float64")
    return dtype


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD.

    Attributes:
        data: The row-major value buffer.
        requires_grad: Whether gradients should flow into this tensor.
        grad: Accumulated gradient (same shape/dtype as ``data``) or None.
    """

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_released")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.type in DTYPES else np.float32
        arr = np.asarray(arr, dtype=_as_dtype(dtype), order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self._released = False

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._released = False
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- array-like surface ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def check_finite(self, name="tensor"):
        """Debug check: raise if any stored scalar is NaN or infinite."""
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{name} contains non-finite values")
        return self

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    # -- operators ---------------------------------------------------------------

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(a, b):
    """Wrap python/numpy operands so both sides are tensors of a common dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------------


def add(a, b):
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b):
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b):
    a, b = _lift(a, b)
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), back, "mul")


def div(a, b):
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), back, "div")


def neg(a):
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise ContractError("tensor exponents are not supported")
    p = float(exponent)
    x = a.data
    return Tensor._make(
        x**p, (a,), lambda g: (g * p * x ** (p - 1),), "pow"
    )


def exp(a):
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    x = a.data
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a):
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    return Tensor._make(
        x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu"
    )


def relu(a):
    x = a.data
    return Tensor._make(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), "relu")


def maximum(a, b):
    """Elementwise max; ties send the gradient to the first argument."""
    a, b = _lift(a, b)
    take_a = a.data >= b.data

    def back(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return Tensor._make(np.where(take_a, a.data, b.data), (a, b), back, "maximum")


# -- reductions ----------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(
        np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), back, "sum"
    )


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


# -- shape -----------------------------------------------------------------------------


def reshape(a, shape):
    src = a.shape
    return Tensor._make(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape"
    )


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, index):
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return Tensor._make(np.asarray(a.data[index], order="C"), (a,), back, "getitem")


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax))
            for i in range(len(tensors))
        )

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back, "concat"
    )


def split(a, sizes, axis=0):
    """Split along ``axis`` into consecutive chunks of the given sizes."""
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split sizes {sizes} do not cover axis of length {a.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        index = [slice(None)] * a.ndim
        index[ax] = slice(start, start + n)
        out.append(getitem(a, tuple(index)))
        start += n
    return out


# -- linear algebra --------------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), back, "matmul")


# -- the tape walk -------------------------------------------------------------------------


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Raises:
        ContractError: if ``loss`` is not a scalar, does not require grad, or
            its tape was already consumed by an earlier call.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise ContractError("tape already consumed; re-run the forward pass first")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._released = True
