"""Minimal reverse-mode automatic differentiation over 2-D float64 arrays.

Every value is a ``Tensor`` of shape ``(rows, cols)``.  Operations record
their inputs and a local backward rule; ``Tensor.backward`` walks the
resulting graph once in reverse topological order.  A graph is meant to be
built for one training step and thrown away afterwards: calling
``backward`` twice on the same graph raises.

Conventions:

* relu and hinge use subgradient 0 at 0.
* ``l2_normalize_rows`` refuses rows whose norm is ``<= EPS_NORM`` instead
  of clamping them.
* The forward matrix product is computed with ``np.einsum`` rather than
  BLAS so that each output row depends only on its input row.  That keeps
  batched and one-row forward passes bit-identical.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateRowError, DimensionError, DomainError

EPS_NORM = 1e-12

_Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A 2-D float64 array with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 1-D or 2-D, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: _Backward | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` leaf reachable from this scalar."""
        if self.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 root, got {self.shape}")
        if self._consumed:
            raise ContractError("graph already consumed by a previous backward(); rebuild it")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((1, 1))}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            local = node._backward(g)
            for parent, pg in zip(node._parents, local):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._consumed = True
                node._backward = None


def _topological_order(root: Tensor) -> list[Tensor]:
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
        if node._consumed:
            raise ContractError("graph already consumed by a previous backward(); rebuild it")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(values: np.ndarray, parents: tuple[Tensor, ...], backward: _Backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out._op = op
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x, shape: tuple[int, int] | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x) and shape is not None:
        return Tensor(np.full(shape, float(x)))
    return Tensor(x)


# ---------------------------------------------------------------- products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.values, b.values
    out = np.einsum("ik,kj->ij", av, bv)

    def backward(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _make(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    return _make(np.ascontiguousarray(a.values.T), (a,), lambda g: (g.T,), "transpose")


# ------------------------------------------------------------- elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> bool:
    """Return True when ``b`` is a 1xN row broadcast over the rows of ``a``."""
    if a.shape == b.shape:
        return False
    if b.shape[0] == 1 and b.shape[1] == a.shape[1] and op == "add":
        return True
    raise DimensionError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a.shape)
    row_bias = _binary_shapes(a, b, "add")

    def backward(g):
        gb = g.sum(axis=0, keepdims=True) if row_bias else g
        return g, gb

    return _make(a.values + b.values, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b.shape if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a.shape)
    _binary_shapes(a, b, "sub")
    return _make(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if np.isscalar(b):
        c = float(b)
        return _make(a.values * c, (a,), lambda g: (g * c,), "scale")
    b = _as_tensor(b)
    _binary_shapes(a, b, "mul")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def hinge(a: Tensor) -> Tensor:
    """``max(0, x)`` elementwise; subgradient at 0 is 0."""
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "hinge")


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.values))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(a: Tensor) -> Tensor:
    av = a.values
    if av.size and not np.all(av > 0):
        bad = av[~(av > 0)].flat[0]
        raise DomainError(f"log of non-positive value {bad}")
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def square(a: Tensor) -> Tensor:
    av = a.values
    return _make(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; gradient passes only where no clipping happened."""
    av = a.values
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def l2_normalize_rows(a: Tensor) -> Tensor:
    av = a.values
    norms = np.sqrt(np.einsum("ij,ij->i", av, av))[:, None]
    if norms.size and np.any(norms <= EPS_NORM):
        row = int(np.argmax(norms[:, 0] <= EPS_NORM))
        raise DegenerateRowError(f"row {row} has norm {norms[row, 0]:.3g} <= {EPS_NORM}")
    y = av / norms

    def backward(g):
        proj = np.einsum("ij,ij->i", g, y)[:, None]
        return ((g - y * proj) / norms,)

    return _make(y, (a,), backward, "l2_normalize_rows")


# -------------------------------------------------------------- reductions


def _nonempty(a: Tensor, op: str) -> None:
    if a.values.size == 0:
        raise DimensionError(f"{op} of empty tensor {a.shape}")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    _nonempty(a, "sum")
    shape = a.shape
    return _make(np.array([[a.values.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean(a: Tensor) -> Tensor:
    _nonempty(a, "mean")
    shape, n = a.shape, a.values.size
    return _make(np.array([[a.values.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),), "mean")


def frobenius_sq(a: Tensor) -> Tensor:
    _nonempty(a, "frobenius_sq")
    av = a.values
    return _make(np.array([[np.sum(av * av)]]), (a,), lambda g: (2.0 * av * g[0, 0],), "frobenius_sq")


def row_sum(a: Tensor) -> Tensor:
    """Sum each row: ``m x n -> m x 1``."""
    return _make(a.values.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "row_sum")


# ---------------------------------------------------------------- indexing


def gather_rows(table: Tensor, ids: Iterable[int]) -> Tensor:
    idx = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64).reshape(-1)
    n_rows = table.shape[0]
    if idx.size:
        bad = (idx < 0) | (idx >= n_rows)
        if bad.any():
            raise IndexError(f"row id {int(idx[bad][0])} out of range for table with V={n_rows} rows")
    out = table.values[idx]
    shape = table.shape

    def backward(g):
        return (scatter_add_rows(idx, g, shape[0]),)

    return _make(out, (table,), backward, "gather_rows")


def scatter_add_rows(idx: np.ndarray, g: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[idx[j]] += g[j]`` for every j (a sort + segmented sum; faster than ``np.add.at``)."""
    full = np.zeros((n_rows, g.shape[1]))
    if idx.size == 0:
        return full
    order = np.argsort(idx, kind="stable")
    s = idx[order]
    starts = np.flatnonzero(np.concatenate(([True], s[1:] != s[:-1])))
    full[s[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return full


def mean_pool_segments(a: Tensor, offsets: Sequence[int]) -> Tensor:
    """Mean of consecutive row segments ``a[offsets[i]:offsets[i+1]]``.

    Empty segments produce a zero row.  Each output row depends only on its
    own segment, so results do not change with the surrounding batch.
    """
    off = np.asarray(offsets, dtype=np.int64)
    if off.ndim != 1 or off.size < 1 or off[0] != 0 or off[-1] != a.shape[0] or np.any(np.diff(off) < 0):
        raise DimensionError(f"bad segment offsets for {a.shape[0]} rows")
    counts = np.diff(off)
    n_seg, width = counts.size, a.shape[1]
    out = np.zeros((n_seg, width))
    nonempty = counts > 0
    if nonempty.any():
        # starts of non-empty segments are increasing and tile the rows exactly
        sums = np.add.reduceat(a.values, off[:-1][nonempty], axis=0)
        out[nonempty] = sums / counts[nonempty, None]
    owner = np.repeat(np.arange(n_seg), counts)
    inv = np.zeros(n_seg)
    inv[nonempty] = 1.0 / counts[nonempty]

    def backward(g):
        return ((g * inv[:, None])[owner],)

    return _make(out, (a,), backward, "mean_pool_segments")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols needs at least one tensor")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols row counts differ: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=1))

    return _make(np.concatenate([p.values for p in parts], axis=1), tuple(parts), backward, "concat_cols")


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)
