"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node that remembers its parents and a closure
mapping the output gradient to per-parent gradients. ``backward`` sorts
the graph topologically and sweeps it in reverse, accumulating gradients
additively across fan-out.

Binary elementwise ops follow numpy broadcasting; the backward pass sums
gradients back down to each operand's shape.

Multiply-accumulate operations performed by ``matmul`` and ``conv2d`` are
tallied in an optional counter (see :func:`count_macs`) so that closed-form
cost models can be checked against what actually ran.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatch",
    "NonScalarOutput",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "conv2d",
    "relu",
    "exp",
    "log",
    "power",
    "sum",
    "mean",
    "concat",
    "reshape",
    "transpose",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding_lookup",
    "index_add",
    "backward",
    "build_tape",
    "count_macs",
]

LAYER_NORM_EPS = 1e-5


class ShapeMismatch(ValueError):
    pass


class NonScalarOutput(ValueError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


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


def _broadcast_check(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- MAC counter

_mac_counters: list[list[int]] = []


def _tally(n: int) -> None:
    for c in _mac_counters:
        c[0] += int(n)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates executed by matmul and conv2d.

    >>> with count_macs() as c:
    ...     _ = matmul(tensor(np.ones((2, 3))), tensor(np.ones((3, 4))))
    >>> c[0]
    24
    """
    counter = [0]
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


# ----------------------------------------------------------- elementwise ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)
    if exponent == 0.0:
        return _node(np.ones_like(a.data), (a,), lambda g: (np.zeros_like(g),), "power")

    def bw(g):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return _node(np.power(a.data, exponent), (a,), bw, "power")


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _node(out, (a,), bw, "mean")


# ------------------------------------------------------------- shape ops

def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, ts, bw, "concat")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    """Permute axes; with ``axes=None`` swap the last two."""
    a = _as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        if a.ndim >= 2:
            axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def _getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), (a,), bw, "getitem")


def embedding_lookup(table, indices) -> Tensor:
    """Gather rows of ``table``; ``indices`` may have any integer shape."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(table.data[idx], (table,), bw, "embedding_lookup")


def index_add(src, indices, n_rows: int) -> Tensor:
    """Scatter-add rows of ``src`` into a fresh ``n_rows``-row tensor."""
    src = _as_tensor(src)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != src.shape[:1]:
        raise ShapeMismatch(f"need one index per row: {idx.shape} vs {src.shape}")
    out = np.zeros((n_rows,) + src.shape[1:])
    np.add.at(out, idx, src.data)
    return _node(out, (src,), lambda g: (g[idx],), "index_add")


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _tally(out.size * a.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bw, "matmul")


def conv2d(x, kernels, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``[C_in, H, W]`` (or batched ``[B, C_in, H, W]``)
    with ``[C_out, C_in, k, k]`` kernels."""
    x, w = _as_tensor(x), _as_tensor(kernels)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ShapeMismatch(f"conv2d input {x.shape}, kernels {w.shape}")
    xd = x.data if batched else x.data[None]
    B, C, H, W = xd.shape
    C_out, C_in, kh, kw = w.shape
    if C_in != C or kh > H or kw > W:
        raise ShapeMismatch(f"conv2d input {x.shape}, kernels {w.shape}")
    Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    cols = windows[:, :, ::stride, ::stride][:, :, :Ho, :Wo]  # B, C, Ho, Wo, kh, kw
    out = np.einsum("bchwij,ocij->bohw", cols, w.data, optimize=True)
    _tally(B * C_out * C_in * kh * kw * Ho * Wo)

    def bw(g):
        g4 = g if batched else g[None]
        gw = np.einsum("bohw,bchwij->ocij", g4, cols, optimize=True)
        gx = np.zeros_like(xd)
        contrib = np.einsum("bohw,ocij->bchwij", g4, w.data, optimize=True)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += contrib[..., i, j]
        return (gx if batched else gx[0]), gw

    return _node(out if batched else out[0], (x, w), bw, "conv2d")


# ------------------------------------------------------------ normalisers

def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis (no affine part)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _node(out, (a,), bw, "layer_norm")


# ----------------------------------------------------------------- backward

class Tape(list):
    """Nodes of a graph in topological order (inputs before outputs)."""


def build_tape(output: Tensor) -> Tape:
    order, seen = Tape(), set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Populate ``.grad`` on every gradient-tracking ancestor of a scalar."""
    if output.size != 1:
        raise NonScalarOutput(f"backward needs a scalar, got shape {output.shape}")
    if not output.requires_grad:
        return
    tape = build_tape(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
