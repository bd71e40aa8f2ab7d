"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every primitive records its inputs and a closure that maps the upstream
gradient to input gradients. ``backward`` walks the recorded graph in reverse
topological order. Shapes are checked eagerly; there is no implicit
broadcasting other than adding a bias row to the last axis.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12
MASK_VALUE = -1e9

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on invalid use of the computation record (e.g. double backward)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


_SEQ = itertools.count(1)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._consumed = False
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., n] + b[n]; the only broadcast the engine allows."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a non-differentiable array of the same shape (masks, dropout)."""
    c = np.asarray(c, dtype=x.dtype)
    if c.shape != x.shape:
        raise ShapeError(f"mul_const: shape mismatch {x.shape} vs {c.shape}")
    return _make(x.data * c, (x,), lambda g: (g * c,), "mul_const")


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=x.dtype)
    if c.shape != x.shape:
        raise ShapeError(f"add_const: shape mismatch {x.shape} vs {c.shape}")
    return _make(x.data + c, (x,), lambda g: (g,), "add_const")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must agree exactly."""
    if (
        a.ndim < 2
        or b.ndim != a.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., k] @ w[k, n] (+ b[n])."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g @ wd.T, x2.T @ g2)

    out = _make(xd @ wd, (x, w), backward, "linear")
    return out if b is None else add_bias(out, b)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """[1, h] -> [n, h] by explicit replication."""
    if x.ndim != 2 or x.shape[0] != 1:
        raise ShapeError(f"repeat_rows expects a single row, got {x.shape}")
    return _make(np.repeat(x.data, n, axis=0), (x,), lambda g: (g.sum(axis=0, keepdims=True),), "repeat_rows")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is None:
            return (np.full(src, g, dtype=x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def mean_rows(x: Tensor) -> Tensor:
    """Column mean of a [T, h] tensor, kept as a [1, h] row."""
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"mean_rows needs a non-empty [T, h] tensor, got {x.shape}")
    n = x.shape[0]
    return _make(
        x.data.mean(axis=0, keepdims=True),
        (x,),
        lambda g: (np.repeat(g / n, n, axis=0),),
        "mean_rows",
    )


# ---------------------------------------------------------------- normalisation / losses


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (same shape, bool) marks positions to drop."""
    z = x.data
    if mask is not None:
        z = np.where(mask, MASK_VALUE, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = p * (g - (g * p).sum(axis=-1, keepdims=True))
        return (gx,)

    return _make(p, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def cross_entropy(probs: Tensor, targets: Sequence[int], eps: float = LOG_EPS) -> Tensor:
    """-(1/N) sum_i log probs[i, t_i] with probabilities clamped at ``eps``."""
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, C] probabilities, got {probs.shape}")
    n, c = probs.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: {t.shape[0] if t.ndim else 0} targets for {n} rows")
    if n and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"cross_entropy: target index out of range [0, {c})")
    picked = probs.data[np.arange(n), t]
    clamped = np.maximum(picked, eps)
    loss = -np.log(clamped).sum() / n
    keep = picked >= eps

    def backward(g):
        gp = np.zeros_like(probs.data)
        gp[np.arange(n), t] = np.where(keep, -g / (n * clamped), 0)
        return (gp,)

    return _make(np.asarray(loss + 0.0, dtype=probs.dtype), (probs,), backward, "cross_entropy")


def nll_masked(logp: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of -logp[..., target] over positions where ``mask`` is true."""
    t = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    if t.shape != logp.shape[:-1] or m.shape != t.shape:
        raise ShapeError(f"nll_masked: targets {t.shape} / mask {m.shape} vs log-probs {logp.shape}")
    count = int(m.sum())
    if count == 0:
        raise ValueError("nll_masked: no target positions")
    flat = logp.data.reshape(-1, logp.shape[-1])
    rows = np.nonzero(m.reshape(-1))[0]
    cols = t.reshape(-1)[rows]
    loss = -flat[rows, cols].sum() / count

    def backward(g):
        gl = np.zeros_like(flat)
        gl[rows, cols] = -g / count
        return (gl.reshape(logp.shape),)

    return _make(np.asarray(loss, dtype=logp.dtype), (logp,), backward, "nll")


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already called on this graph; call reset(loss) first")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring gradients")
    order = _topo(loss)
    # contributions are summed in the creation order of the consumers, so a
    # gradient does not depend on how unrelated subgraphs shift the traversal
    pending: dict[int, list[tuple[int, np.ndarray]]] = {id(loss): [(0, np.ones(loss.shape, dtype=loss.dtype))]}
    for node in reversed(order):
        parts = pending.pop(id(node), None)
        if parts is None:
            continue
        parts.sort(key=lambda item: item[0])
        g = parts[0][1]
        for _, more in parts[1:]:
            g = g + more
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pending.setdefault(id(parent), []).append((node._seq, pg))
    loss._consumed = True


def reset(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Allow another backward pass through ``loss`` and clear the given gradients."""
    loss._consumed = False
    for p in params:
        p.grad = None


def sinusoidal_positions(n: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
