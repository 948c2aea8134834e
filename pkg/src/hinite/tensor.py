"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are float64 numpy arrays. Every operation creates a new node whose id
is strictly larger than the ids of its inputs, so sorting the reachable nodes
by id gives a valid topological order. ``backward`` replays that order in
reverse, which is the tape.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "leaky_relu",
    "exp",
    "concat",
    "gather",
    "segment_softmax",
    "spmm",
    "dropout",
    "backward",
    "custom",
    "accumulate",
    "topological_order",
    "LEAKY_SLOPE",
]

LEAKY_SLOPE = 0.2

_ids = itertools.count()


class Tensor:
    """A node in the differentiation graph.

    ``grad`` is only populated for tensors with ``requires_grad`` set after a
    call to :func:`backward`.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return mean(self, axis)

    def square(self) -> "Tensor":
        return mul(self, self)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def __getitem__(self, rows) -> "Tensor":
        return gather(self, np.asarray(rows))


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap a hand-derived primitive; ``backward_fn(g)`` must call :func:`accumulate`."""
    return _node(values, parents, backward_fn)


def _node(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=needs, parents=parents if needs else (), backward_fn=backward_fn if needs else None)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # never mutate in place: g may alias a buffer owned by another node
    t.grad = g if t.grad is None else t.grad + g


accumulate = _accumulate


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.values + b.values, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.values - b.values, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _node(a.values * b.values, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0.0)

    def bw(g):
        _accumulate(x, g * (out > 0))

    return _node(out, (x,), bw)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """Elementwise ``max(x, slope * x)`` for ``0 < slope < 1``."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
    scale = np.where(x.values > 0, 1.0, slope)

    def bw(g):
        _accumulate(x, g * scale)

    return _node(x.values * scale, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)

    def bw(g):
        _accumulate(x, g * out)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------- reductions / shape


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    def bw(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _node(np.asarray(x.values.sum(axis=axis)), (x,), bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.values.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(x.values.reshape(shape), (x,), bw)


def transpose(x: Tensor) -> Tensor:
    def bw(g):
        _accumulate(x, g.T)

    return _node(x.values.T, (x,), bw)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(index)])

    return _node(np.concatenate([p.values for p in parts], axis=axis), tuple(parts), bw)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Select entries (1-d input) or rows (2-d input) by integer index."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        if x.values.ndim == 1:
            _accumulate(x, np.bincount(index, weights=g, minlength=x.shape[0]))
        else:
            out = np.zeros_like(x.values)
            np.add.at(out, index, g)
            _accumulate(x, out)

    return _node(x.values[index], (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.values.T)
        if b.requires_grad:
            _accumulate(b, a.values.T @ g)

    return _node(a.values @ b.values, (a, b), bw)


def spmm(weights, rows: np.ndarray, cols: np.ndarray, n: int, h: Tensor) -> Tensor:
    """Sparse-dense product ``S @ h`` where ``S[rows[e], cols[e]] = weights[e]``.

    ``weights`` may be a Tensor (edge attention) or a plain array (fixed
    normalization); duplicate (row, col) pairs are summed.
    """
    w = _as_tensor(weights)
    mat = sp.csr_matrix((w.values, (rows, cols)), shape=(n, h.shape[0]))

    def bw(g):
        if h.requires_grad:
            _accumulate(h, mat.T @ g)
        if w.requires_grad:
            _accumulate(w, np.einsum("ij,ij->i", g[rows], h.values[cols]))

    return _node(mat @ h.values, (w, h), bw)


# ---------------------------------------------------------------- attention helpers


def segment_softmax(logits: Tensor, segments: np.ndarray, num_segments: int | None = None) -> Tensor:
    """Softmax of a 1-d tensor within groups given by ``segments``.

    Every segment in ``range(num_segments)`` must own at least one entry.
    """
    segments = np.asarray(segments, dtype=np.int64)
    if num_segments is None:
        num_segments = int(segments.max()) + 1 if segments.size else 0
    counts = np.bincount(segments, minlength=num_segments)
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"segment {empty} has no entries; include the self-edge")
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segments, logits.values)
    shifted = np.exp(logits.values - seg_max[segments])
    denom = np.bincount(segments, weights=shifted, minlength=num_segments)
    out = shifted / denom[segments]

    def bw(g):
        dot = np.bincount(segments, weights=g * out, minlength=num_segments)
        _accumulate(logits, out * (g - dot[segments]))

    return _node(out, (logits,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or not training."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, in creation order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.node_id in seen or not node.requires_grad:
            continue
        seen[node.node_id] = node
        stack.extend(node._parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Existing grads on leaves are overwritten, not accumulated across calls.
    Intermediate grads are released after use; the loss keeps its unit grad.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    for p in params or ():
        p.grad = np.zeros_like(p.values)
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node is not loss:
                node.grad = None
