"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable op appends a node to the active :class:`Tape`.  Calling
:func:`backward` walks the tape in reverse append order, so gradient
accumulation order is fixed by the order of the forward pass.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from deepcaps.errors import ShapeError

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Node:
    """One recorded op: its inputs and a closure mapping output grad to input grads."""

    __slots__ = ("inputs", "backward_fn", "name")

    def __init__(self, inputs, backward_fn, name=""):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Append-only record of differentiable ops (single writer)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def fresh_tape():
    """Run a block on a private tape, restoring the previous one afterwards."""
    prev = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = prev


def is_grad_enabled() -> bool:
    return _state.enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

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

    def relu(self):
        return relu(self)

    def backward(self):
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make_op(data, inputs, backward_fn, name=""):
    """Wrap ``data`` as the output of an op, recording it when any input needs grad."""
    out = Tensor(data)
    if _state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(tuple(inputs), backward_fn, name)
        _state.tape.record(out._node)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` that ``loss`` depends on.

    Leaf gradients accumulate into existing ``.grad`` buffers. The tape is
    cleared afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or _state.tape
    if loss._node is None:
        raise ValueError("loss is not on the tape (no input requires grad)")
    grads = {loss._node: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                prev = grads.get(inp._node)
                grads[inp._node] = gi if prev is None else prev + gi
    tape.clear()


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return make_op(out, (a, b), bw, "div")


def neg(a):
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float):
    ad = a.data
    return make_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a):
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a):
    mask = a.data > 0
    # maximum (unlike where) lets NaN through, so corrupted weights surface as a non-finite loss
    return make_op(np.maximum(a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    ad = a.data
    # split by sign so exp never overflows
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_op(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    orig = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype

    key = idx if isinstance(idx, tuple) else (idx,)
    basic = all(k is None or k is Ellipsis or isinstance(k, (int, slice)) for k in key)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_op(a.data[idx], (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def matmul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner axis mismatch: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_op(ad @ bd, (a, b), bw, "matmul")


def einsum(spec: str, a, b):
    """Two-operand einsum. Every index of each operand must appear in the output or the other operand."""
    a, b = _pair(a, b)
    ins, out = spec.replace(" ", "").split("->")
    ia, ib = ins.split(",")
    for mine, other in ((ia, ib), (ib, ia)):
        if any(c not in out and c not in other for c in mine):
            raise ValueError(f"einsum index summed within one operand is unsupported: {spec}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.einsum(f"{out},{ib}->{ia}", g, bd, optimize=True)
        gb = np.einsum(f"{out},{ia}->{ib}", g, ad, optimize=True)
        return ga, gb

    return make_op(np.einsum(spec, ad, bd, optimize=True), (a, b), bw, "einsum")


def norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    ad = a.data
    n = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, g * ad / safe, 0).astype(ad.dtype),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return make_op(out, (a,), bw, "norm")


def softmax(a, axis=-1):
    """Softmax along ``axis`` with max subtraction."""
    ad = a.data
    z = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (a,), bw, "softmax")


softmax_axis = softmax
