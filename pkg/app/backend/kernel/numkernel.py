"""
Dense float64 kernel for the detection heads.

Every op exists twice: as a pure function on numpy matrices (used at inference
and by tests as a reference) and as a `Tape` method that records enough state
to compute its vector-Jacobian product during `Tape.backward`.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from app.backend.exceptions import NumericError, ShapeError, StateError


logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]

CONV_WIDTH = 3
PROB_FLOOR = 1e-12
POOL_EPS = 1e-8
_SIGMOID_HI = float(np.nextafter(1.0, 0.0))
_SIGMOID_LO = float(np.finfo(np.float64).tiny)


def as_matrix(x: npt.ArrayLike) -> Matrix:
    """Coerces to a 2-D float64 array; 1-D input becomes a single row."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return m


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ShapeError(message)


def check_finite(x: Matrix, what: str) -> Matrix:
    """Returns x unchanged, or raises NumericError naming `what` if any entry is NaN or infinite."""
    bad = int(np.count_nonzero(~np.isfinite(x)))
    if bad:
        raise NumericError(f"{what} holds {bad} non-finite values")
    return x


def matmul(a: Matrix, b: Matrix) -> Matrix:
    _check(a.shape[1] == b.shape[0], f"matmul {a.shape} @ {b.shape}")
    return a @ b


def relu(x: Matrix) -> Matrix:
    return np.maximum(x, 0.0)


def _im2col(x: Matrix) -> Matrix:
    """Rows [x[t-1] | x[t] | x[t+1]] with zero rows outside the sequence."""
    L, din = x.shape
    padded = np.zeros((L + 2, din))
    padded[1:-1] = x
    return np.hstack([padded[:-2], padded[1:-1], padded[2:]])


def _conv_pre(x: Matrix, kernel: Matrix, bias: Matrix) -> Tuple[Matrix, Matrix]:
    _check(x.shape[0] >= 1, "conv1d needs at least one frame")
    _check(kernel.shape[0] == CONV_WIDTH * x.shape[1],
           f"conv1d kernel rows {kernel.shape[0]} != {CONV_WIDTH} x input dim {x.shape[1]}")
    bias = bias.reshape(1, -1)
    _check(bias.shape[1] == kernel.shape[1], f"conv1d bias {bias.shape} vs kernel {kernel.shape}")
    cols = _im2col(x)
    return cols, cols @ kernel + bias


def conv1d(x: Matrix, kernel: Matrix, bias: npt.ArrayLike) -> Matrix:
    """
    Width-3 same-padded convolution followed by ReLU.

    Args:
        x: L x Din input.
        kernel: (3*Din) x d, row blocks for offsets -1, 0, +1.
        bias: d values.
    Returns:
        L x d activations.
    """
    _, pre = _conv_pre(as_matrix(x), as_matrix(kernel), np.asarray(bias, dtype=np.float64))
    return relu(pre)


def sigmoid(x: Matrix) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    # keep strictly inside (0, 1) where float64 would round to an endpoint
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def softmax_rows(x: Matrix) -> Matrix:
    x = as_matrix(x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def pool_denominator(weights: Matrix, eps: float = POOL_EPS) -> float:
    """Sum of the weights, floored at eps only when it falls below it."""
    return max(float(weights.sum()), eps)


def weighted_pool(weights: Matrix, h: Matrix, eps: float = POOL_EPS) -> Matrix:
    """Attention-weighted mean of the rows of h; eps only guards a (near) all-zero weight row."""
    _check(weights.shape == (1, h.shape[0]), f"pool weights {weights.shape} vs frames {h.shape}")
    return (weights @ h) / pool_denominator(weights, eps)


def nll(p: Matrix, labels: Sequence[int], floor: float = PROB_FLOOR) -> float:
    """Mean over rows of -log p[row, label]."""
    _check(p.shape[0] == len(labels), f"{len(labels)} labels for {p.shape[0]} rows")
    picked = p[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)]
    return float(np.mean(-np.log(np.maximum(picked, floor))))


@dataclass(eq=False)
class Node:
    """A value on the tape. Leaves created with `Tape.leaf` receive gradients."""
    value: Matrix
    requires_grad: bool = False
    name: Optional[str] = None
    grad: Optional[Matrix] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def accumulate(self, g: Matrix) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


@dataclass
class _Record:
    op: str
    out: Node
    inputs: Tuple[Node, ...]
    vjp: Callable[[Matrix], Tuple[Optional[Matrix], ...]]


@dataclass
class Tape:
    """
    Ordered record of primitive ops. A tape serves one forward pass and one
    backward pass and belongs to a single thread.
    """
    _records: List[_Record] = field(default_factory=list)
    _leaves: Dict[str, Node] = field(default_factory=dict)
    _consumed: bool = False

    @property
    def ops(self) -> List[str]:
        return [r.op for r in self._records]

    def leaf(self, value: npt.ArrayLike, name: str) -> Node:
        if name in self._leaves:
            raise StateError(f"leaf '{name}' registered twice")
        node = Node(as_matrix(value).copy(), requires_grad=True, name=name)
        self._leaves[name] = node
        return node

    def constant(self, value: npt.ArrayLike) -> Node:
        return Node(as_matrix(value))

    def _record(self, op: str, value: Matrix, inputs: Tuple[Node, ...],
                vjp: Callable[[Matrix], Tuple[Optional[Matrix], ...]]) -> Node:
        if self._consumed:
            raise StateError("tape already replayed; start a new tape for a new forward pass")
        out = Node(value, requires_grad=any(n.requires_grad for n in inputs))
        if out.requires_grad:
            self._records.append(_Record(op, out, inputs, vjp))
        return out

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._record("matmul", matmul(av, bv), (a, b), lambda g: (g @ bv.T, av.T @ g))

    def transpose(self, a: Node) -> Node:
        return self._record("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))

    def add(self, a: Node, b: Node) -> Node:
        _check(a.shape == b.shape, f"add {a.shape} + {b.shape}")
        return self._record("add", a.value + b.value, (a, b), lambda g: (g, g))

    def sum(self, a: Node) -> Node:
        shape = a.shape
        return self._record("sum", np.array([[a.value.sum()]]), (a,),
                            lambda g: (np.full(shape, g[0, 0]),))

    def conv1d(self, x: Node, kernel: Node, bias: Node) -> Node:
        xv, kv = x.value, kernel.value
        cols, pre = _conv_pre(xv, kv, bias.value)
        L, din = xv.shape

        def vjp(g: Matrix) -> Tuple[Matrix, Matrix, Matrix]:
            g_pre = g * (pre > 0)
            g_cols = g_pre @ kv.T
            g_pad = np.zeros((L + 2, din))
            g_pad[:-2] += g_cols[:, :din]
            g_pad[1:-1] += g_cols[:, din:2 * din]
            g_pad[2:] += g_cols[:, 2 * din:]
            return g_pad[1:-1], cols.T @ g_pre, g_pre.sum(axis=0, keepdims=True).reshape(bias.shape)

        return self._record("conv1d", relu(pre), (x, kernel, bias), vjp)

    def sigmoid(self, a: Node) -> Node:
        y = sigmoid(a.value)
        return self._record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))

    def softmax_rows(self, a: Node) -> Node:
        y = softmax_rows(a.value)
        return self._record("softmax_rows", y, (a,),
                            lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))

    def select_row(self, a: Node, row: int) -> Node:
        rows = a.shape[0]
        if not 0 <= row < rows:
            raise ShapeError(f"row {row} outside [0, {rows})")

        def vjp(g: Matrix) -> Tuple[Matrix]:
            out = np.zeros(a.shape)
            out[row] = g[0]
            return (out,)

        return self._record("select_row", a.value[row:row + 1].copy(), (a,), vjp)

    def mul_const(self, a: Node, mask: Matrix) -> Node:
        _check(mask.shape == a.shape, f"mask {mask.shape} vs {a.shape}")
        return self._record("mul_const", a.value * mask, (a,), lambda g: (g * mask,))

    def weighted_pool(self, weights: Node, h: Node, eps: float = POOL_EPS) -> Node:
        wv, hv = weights.value, h.value
        out = weighted_pool(wv, hv, eps)
        denom = pool_denominator(wv, eps)
        # the floored denominator is a constant
        floored = float(wv.sum()) < eps

        def vjp(g: Matrix) -> Tuple[Matrix, Matrix]:
            g_w = (g @ hv.T - (0.0 if floored else float((g * out).sum()))) / denom
            return g_w, wv.T @ g / denom

        return self._record("weighted_pool", out, (weights, h), vjp)

    def nll(self, p: Node, labels: Sequence[int], floor: float = PROB_FLOOR) -> Node:
        pv = p.value
        idx = np.asarray(labels, dtype=np.int64)
        _check(pv.shape[0] == len(idx), f"{len(idx)} labels for {pv.shape[0]} rows")
        if len(idx) and (idx.min() < 0 or idx.max() >= pv.shape[1]):
            raise ShapeError(f"label outside [0, {pv.shape[1]})")
        n = len(idx)
        rows = np.arange(n)
        picked = pv[rows, idx]

        def vjp(g: Matrix) -> Tuple[Matrix]:
            out = np.zeros_like(pv)
            live = picked > floor
            out[rows[live], idx[live]] = -g[0, 0] / (n * picked[live])
            return (out,)

        return self._record("nll", np.array([[nll(pv, idx, floor)]]), (p,), vjp)

    def backward(self, loss: Node, loss_grad: float = 1.0) -> Dict[str, Matrix]:
        """
        Replays the tape in reverse and returns d(loss)/d(leaf) for every leaf.

        Args:
            loss: 1 x 1 node produced on this tape.
            loss_grad: Seed gradient.
        Returns:
            Gradient per leaf name; leaves the loss does not depend on get zeros.
        """
        if self._consumed:
            raise StateError("backward already ran on this tape")
        if not self._records or all(r.out is not loss for r in self._records):
            raise StateError("backward called before a forward pass recorded the loss")
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be 1 x 1, got {loss.shape}")

        loss.grad = np.full((1, 1), float(loss_grad))
        for record in reversed(self._records):
            g = record.out.grad
            if g is None:
                continue
            for node, g_in in zip(record.inputs, record.vjp(g)):
                if node.requires_grad and g_in is not None:
                    node.accumulate(g_in)
        self._consumed = True
        return {
            name: node.grad if node.grad is not None else np.zeros_like(node.value)
            for name, node in self._leaves.items()
        }
