"""Dense tensors with reverse-mode automatic differentiation.

Arrays are numpy-backed. Every differentiable operation records a node
(parents plus a backward closure) stamped with a global, monotonically
increasing sequence number; ``backward`` replays the reachable nodes in
reverse sequence order, so the record behaves like an append-only tape.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "no_grad",
    "backward",
    "grad",
    "concat",
    "stack",
    "where",
    "maximum",
    "minimum",
    "conv2d",
    "conv2d_output_size",
    "softmax_cross_entropy",
    "maxpool1d",
    "sort_desc",
    "ShapeError",
    "ConfigError",
    "ContractError",
]


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class ConfigError(ValueError):
    """Operation parameters describe an impossible configuration."""


class ContractError(ValueError):
    """A documented precondition was violated."""


_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_SEQ = itertools.count()


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (float64 for gradient checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = _DEFAULT_DTYPE
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return _add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_lift(other, self)))

    def __rsub__(self, other):
        return _add(_lift(other, self), _neg(self))

    def __mul__(self, other):
        return _mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return _div(_lift(other, self), self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, exponent: float):
        return _pow(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, _lift(other, self))

    def __getitem__(self, index):
        return _getitem(self, index)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return _sum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def flatten(self, start: int = 1) -> Tensor:
        return _reshape(self, self.shape[:start] + (-1,))

    def transpose(self, *axes) -> Tensor:
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes)

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def abs(self) -> Tensor:
        return _abs(self)

    def relu(self) -> Tensor:
        return _relu(self)

    def exp(self) -> Tensor:
        return _exp(self)

    def log(self) -> Tensor:
        return _log(self)

    def clamp(self, lo=None, hi=None) -> Tensor:
        out = self
        if lo is not None:
            out = maximum(out, lo)
        if hi is not None:
            out = minimum(out, hi)
        return out

    def max(self, axis: int = -1) -> Tensor:
        return _max(self, axis)

    def gather(self, index: np.ndarray, axis: int) -> Tensor:
        return _take_along(self, np.asarray(index), axis)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    if isinstance(data, Tensor):
        data = data.data
    return Tensor(np.array(data, dtype=dtype or _pick_dtype(data)), requires_grad=requires_grad)


def _pick_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data.dtype
    return _DEFAULT_DTYPE


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_SEQ)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def _add(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def _neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def _div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def _pow(a: Tensor, p: float) -> Tensor:
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def _abs(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def _relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def _exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def _log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b``; ``mask`` is constant."""
    mask = np.asarray(mask, dtype=bool)
    ref = a if isinstance(a, Tensor) else b
    a, b = _lift(a, ref), _lift(b, ref)
    out = np.where(mask, a.data, b.data)
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape),
                            _unbroadcast(np.where(mask, 0, g), b.shape)))


def maximum(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else b
    a, b = _lift(a, ref), _lift(b, ref)
    return where(a.data >= b.data, a, b)


def minimum(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else b
    a, b = _lift(a, ref), _lift(b, ref)
    return where(a.data <= b.data, a, b)


# -- reductions and shape ops ----------------------------------------------

def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.asarray(out, dtype=a.dtype), (a,), bw)


def _max(a: Tensor, axis: int) -> Tensor:
    idx = np.argmax(a.data, axis=axis)
    return _take_along(a, np.expand_dims(idx, axis), axis).reshape(
        tuple(n for i, n in enumerate(a.shape) if i != axis % a.ndim))


def _reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), bw)


def _take_along(a: Tensor, index: np.ndarray, axis: int) -> Tensor:
    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        _add_along_axis(full, index, g, axis)
        return (full,)

    return _node(np.take_along_axis(a.data, index, axis), (a,), bw)


def _add_along_axis(target: np.ndarray, index: np.ndarray, values: np.ndarray, axis: int) -> None:
    axis = axis % target.ndim
    grids = list(np.ix_(*[np.arange(n) for n in index.shape]))
    grids[axis] = index
    np.add.at(target, tuple(grids), values)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    return _node(out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]`` or plain 2-D products."""
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def bw(g):
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, b.shape[1])
        return (g @ b.data.T, a2.T @ g2)

    return _node(out, (a, b), bw)


# -- convolution --------------------------------------------------------------

def conv2d_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"conv2d: (size {size} + 2*{padding} - kernel {k}) is not a nonnegative multiple of stride {stride}")
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``kernel[Cout,Cin,K,K]`` via patch expansion."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if k != k2:
        raise ShapeError(f"conv2d: only square kernels are supported, got {k}x{k2}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    ho = conv2d_output_size(h, k, stride, padding)
    wo = conv2d_output_size(w, k, stride, padding)
    cols = _im2col(x.data, k, stride, padding)
    wmat = kernel.data.reshape(cout, -1)
    out = np.einsum("ok,nkp->nop", wmat, cols, optimize=True).reshape(n, cout, ho, wo)
    parents: list[Tensor] = [x, kernel]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = np.einsum("nop,nkp->ok", g2, cols, optimize=True).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = np.einsum("ok,nop->nkp", wmat, g2, optimize=True)
            gx = _col2im(gcols, x.shape, k, stride, padding, ho, wo)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out.astype(x.dtype, copy=False), parents, bw)


# -- losses and ordering ops -------------------------------------------------

def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``, max-subtracted."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,k] logits, got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise ContractError("softmax_cross_entropy needs at least two classes")
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.shape != (n,):
        raise ShapeError(f"expected {n} targets, got {target.shape[0]}")
    if np.any(target < 0) or np.any(target >= k):
        raise IndexError(f"target out of range [0, {k})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - shifted[rows, target])

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, target] -= 1.0
        return (p * (g / n),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def maxpool1d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max over windows of length ``k`` along the last axis."""
    stride = k if stride is None else stride
    n = x.shape[-1]
    if k < 1 or k > n:
        raise ContractError(f"maxpool1d: window {k} must be in [1, {n}]")
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=-1)[..., ::stride, :]
    arg = win.argmax(axis=-1)
    starts = np.arange(win.shape[-2]) * stride
    idx = starts + arg
    return _take_along(x, idx, -1)


def sort_desc(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sort the last axis in descending order (stable); returns values and permutation."""
    if x.shape[-1] < 1:
        raise ContractError("sort_desc needs a nonempty axis")
    perm = np.argsort(-x.data, axis=-1, kind="stable")
    return _take_along(x, perm, -1), perm


# -- backward --------------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def _propagate(root: Tensor, sink: Callable[[Tensor, np.ndarray], None]) -> None:
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(root.data)
    if root._backward is None:
        sink(root, seed)
        return
    pending: dict[int, np.ndarray] = {id(root): seed}
    for node in _reachable(root):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                sink(parent, pg)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""

    def sink(leaf: Tensor, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    _propagate(loss, sink)


def grad(loss: Tensor, inputs: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs`` without touching any ``.grad``."""
    inputs = list(inputs)
    wanted = {id(t): i for i, t in enumerate(inputs)}
    out = [np.zeros(t.shape, dtype=t.dtype) for t in inputs]

    def sink(leaf: Tensor, g: np.ndarray) -> None:
        i = wanted.get(id(leaf))
        if i is not None:
            out[i] = out[i] + np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)

    _propagate(loss, sink)
    return out
