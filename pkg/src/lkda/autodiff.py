"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure computing the vector-Jacobian product.  The tape is rebuilt on each
forward pass; :meth:`Tensor.backward` orders it topologically and replays it
in reverse, visiting each recorded node exactly once.

Gradients accumulate across repeated ``backward`` calls until
:meth:`Tensor.zero_grad` (or :func:`zero_grads`) resets them.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from collections.abc import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

_node_counter = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Operand lies outside the domain of the operation."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure evaluation)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def grad_enabled() -> bool:
    # per-thread so concurrent evaluations do not toggle each other's tape
    return getattr(_state, "enabled", True)


class Tensor:
    __slots__ = ("values", "grad", "node_id", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_counter)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every ancestor that requires it.

        Repeated calls accumulate into existing buffers.
        """
        if self.values.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.values)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def _make(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.node_id = next(_node_counter)
    out.op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        return (
            _unbroadcast(g * bv, av.shape) if ra else None,
            _unbroadcast(g * av, bv.shape) if rb else None,
        )

    return _make(av * bv, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.values * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        return (g @ bv.T if ra else None, av.T @ g if rb else None)

    return _make(av @ bv, (a, b), backward, "matmul")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise DomainError("log: input contains nonpositive values")
    av = a.values
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make(
            np.array(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
        )
    out = a.values.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.values.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrays = [t.values for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([0] + [arr.shape[axis] for arr in arrays])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(arrays))
        )

    return _make(out, tuple(tensors), backward, "concat")


def gather_rows(a: Tensor, index) -> Tensor:
    """Rows ``a[index]``; repeated indices accumulate in backward.

    ``index`` may be a :class:`SegmentIndex` over ``a``'s rows, which reuses
    its cached scatter matrix for the backward pass.
    """
    n = a.shape[0]
    seg = index
    if isinstance(index, SegmentIndex):
        if index.num_segments != n:
            raise DimensionError(f"gather_rows: index built for {index.num_segments} rows, got {n}")
    else:
        idx = np.asarray(index, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise DimensionError(f"gather_rows: index out of range for {n} rows")
        return _make(a.values[idx], (a,), lambda g: (SegmentIndex(idx, n).sum(g),), "gather_rows")
    return _make(a.values[seg.ids], (a,), lambda g: (seg.sum(g),), "gather_rows")


class SegmentIndex:
    """Row-to-bucket assignment reused by the segment operations.

    Caches a sparse summation matrix and the sorted layout needed for
    per-bucket maxima, so one index built per forward pass serves every
    layer and head.
    """

    def __init__(self, ids, num_segments: int):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise DimensionError(f"segment ids must be 1-d, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
            raise DimensionError(f"segment ids out of range for {num_segments} segments")
        self.ids = ids
        self.num_segments = num_segments
        self.counts = np.bincount(ids, minlength=num_segments)
        self.matrix = sparse.csr_matrix(
            (np.ones(ids.size), (ids, np.arange(ids.size))), shape=(num_segments, ids.size)
        )
        self.order = np.argsort(ids, kind="stable")
        nonempty = np.flatnonzero(self.counts)
        self.nonempty = nonempty
        self.starts = np.concatenate([[0], np.cumsum(self.counts)])[nonempty]

    def __len__(self) -> int:
        return self.ids.size

    def sum(self, rows: np.ndarray) -> np.ndarray:
        flat = rows.reshape(rows.shape[0], -1)
        return np.asarray(self.matrix @ flat).reshape((self.num_segments,) + rows.shape[1:])

    def max(self, rows: np.ndarray) -> np.ndarray:
        out = np.full((self.num_segments,) + rows.shape[1:], -np.inf)
        if self.ids.size:
            out[self.nonempty] = np.maximum.reduceat(rows[self.order], self.starts, axis=0)
        return out


def _segments(segment, num_segments: int | None, rows: int, name: str) -> SegmentIndex:
    if not isinstance(segment, SegmentIndex):
        if num_segments is None:
            raise ContractError(f"{name}: num_segments required with raw ids")
        segment = SegmentIndex(segment, num_segments)
    if len(segment) != rows:
        raise DimensionError(f"{name}: {len(segment)} ids for {rows} rows")
    return segment


def segment_sum(a: Tensor, segment, num_segments: int | None = None) -> Tensor:
    """Sum rows of ``a`` into buckets given by ``segment``."""
    seg = _segments(segment, num_segments, a.shape[0], "segment_sum")
    ids = seg.ids
    return _make(seg.sum(a.values), (a,), lambda g: (g[ids],), "segment_sum")


def segment_mean(a: Tensor, segment, num_segments: int | None = None) -> Tensor:
    seg = _segments(segment, num_segments, a.shape[0], "segment_mean")
    if np.any(seg.counts == 0):
        raise ContractError("segment_mean: empty segment")
    inv = Tensor((1.0 / seg.counts)[:, None])
    return mul(segment_sum(a, seg), inv)


def zero_mask(a: Tensor, rows) -> Tensor:
    """Zero the selected rows; masked entries pass no gradient."""
    keep = np.ones((a.shape[0],) + (1,) * (a.values.ndim - 1))
    rows = np.asarray(list(rows) if not isinstance(rows, np.ndarray) else rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0]):
        raise DimensionError(f"zero_mask: row index out of range for {a.shape[0]} rows")
    keep[rows] = 0.0
    return _make(a.values * keep, (a,), lambda g: (g * keep,), "zero_mask")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout with a caller-seeded mask; identity when ``rng`` is None."""
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.values * keep, (a,), lambda g: (g * keep,), "dropout")


# ------------------------------------------------------------------ softmax


def softmax_rows(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got shape {a.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (a,), backward, "softmax_rows")


def log_softmax_rows(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"log_softmax_rows: expected a matrix, got shape {a.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(y, (a,), backward, "log_softmax_rows")


def segment_softmax(a: Tensor, segment, num_segments: int | None = None) -> Tensor:
    """Column-wise softmax of the rows of ``a`` within each segment."""
    seg = _segments(segment, num_segments, a.shape[0], "segment_softmax")
    ids = seg.ids
    x = a.values
    e = np.exp(x - seg.max(x)[ids])
    y = e / seg.sum(e)[ids]

    def backward(g):
        return (y * (g - seg.sum(g * y)[ids]),)

    return _make(y, (a,), backward, "segment_softmax")
