"""Dense 2-D float64 tensors with a reverse-mode differentiation tape.

Every op takes and returns 2-D arrays. When gradient recording is enabled
and any input requires a gradient, the op appends a node to the calling
thread's tape; :func:`backward` replays the tape in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Raised when op inputs do not conform."""


class GradCheckError(RuntimeError):
    """Raised when a loss builder is not deterministic."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor expects 2-D data, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def reset_tape() -> None:
    """Drop every recorded node on this thread's tape."""
    _state.tape.clear()


def grad_enabled() -> bool:
    return _state.enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = _state.enabled and any(t.requires_grad for t in inputs)
    t = Tensor._wrap(out, needs)
    if needs:
        node = _Node(inputs, t, backward, op)
        t._node = node
        _state.tape.nodes.append(node)
    return t


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. Leaves that appear on
    the tape but receive no gradient get a zero gradient. The tape is cleared.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    tape = _state.tape
    if loss.is_leaf:
        if loss.requires_grad:
            _accumulate(loss, np.ones((1, 1)))
        tape.clear()
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            for t in node.inputs:
                if t.requires_grad and t.is_leaf:
                    leaves.setdefault(id(t), t)
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad:
                continue
            if t.is_leaf:
                leaves.setdefault(id(t), t)
                if gi is not None:
                    _accumulate(t, gi)
            elif gi is not None:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    tape.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# ops


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_index(op: str, idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{op}: index out of range for {n} rows")
    return idx


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _record("matmul", A @ B, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a python scalar or by a 1x1 tensor."""
    if isinstance(c, Tensor):
        if c.shape != (1, 1):
            raise ShapeError(f"scale: factor must be 1x1, got {c.shape}")
        A, s = a.data, c.data[0, 0]

        def bw(g):
            return g * s, np.array([[np.sum(g * A)]])

        return _record("scale", A * s, (a, c), bw)
    s = float(c)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def transpose(a: Tensor) -> Tensor:
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_cols: no inputs")
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _record("concat_cols", np.concatenate([p.data for p in parts], axis=1), parts, bw)


def row_select(a: Tensor, indices) -> Tensor:
    """Gather rows; repeated indices are allowed and their gradients summed."""
    idx = _check_index("row_select", indices, a.rows)
    n = a.rows

    def bw(g):
        return (_scatter_rows(g, idx, n),)

    return _record("row_select", a.data[idx], (a,), bw)


def scatter_add(a: Tensor, indices, n_rows: int) -> Tensor:
    """``out[indices[k]] += a[k]`` into an ``n_rows``-row zero matrix."""
    idx = _check_index("scatter_add", indices, n_rows)
    if idx.size != a.rows:
        raise ShapeError(f"scatter_add: {idx.size} indices for {a.rows} rows")

    def bw(g):
        return (g[idx],)

    return _record("scatter_add", _scatter_rows(a.data, idx, n_rows), (a,), bw)


def _scatter_rows(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    if idx.size == 0:
        return np.zeros((n, values.shape[1]))
    m = sp.csc_matrix((np.ones(idx.size), idx, np.arange(idx.size + 1)), shape=(n, idx.size))
    return np.asarray(m @ values)


def row_scale(a: Tensor, v: Tensor) -> Tensor:
    """Multiply row i of ``a`` by the scalar ``v[i, 0]``."""
    if v.shape != (a.rows, 1):
        raise ShapeError(f"row_scale: factor shape {v.shape} for matrix {a.shape}")
    A, V = a.data, v.data

    def bw(g):
        return g * V, np.sum(g * A, axis=1, keepdims=True)

    return _record("row_scale", A * V, (a, v), bw)


def add_row(a: Tensor, b: Tensor) -> Tensor:
    """Add the 1 x f row ``b`` to every row of ``a`` (bias add)."""
    if b.shape != (1, a.cols):
        raise ShapeError(f"add_row: bias shape {b.shape} for matrix {a.shape}")
    return _record("add_row", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p``; entries must be positive."""
    x = a.data
    if np.any(x <= 0):
        raise ValueError("power: entries must be positive")
    out = x**p
    return _record("power", out, (a,), lambda g: (g * p * out / x,))


def row_sum(a: Tensor) -> Tensor:
    n, f = a.shape
    return _record("row_sum", a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, (n, f)).copy(),))


def col_sum(a: Tensor) -> Tensor:
    n, f = a.shape
    return _record("col_sum", a.data.sum(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g, (n, f)).copy(),))


def total(a: Tensor) -> Tensor:
    return col_sum(row_sum(a))


def mean_rows(a: Tensor) -> Tensor:
    n, f = a.shape
    if n == 0:
        raise ShapeError("mean_rows: no rows")
    return _record("mean_rows", a.data.mean(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g / n, (n, f)).copy(),))


def max_rows(a: Tensor) -> Tensor:
    """Column-wise max; the gradient goes to the first maximising row."""
    n, f = a.shape
    if n == 0:
        raise ShapeError("max_rows: no rows")
    arg = np.argmax(a.data, axis=0)
    cols = np.arange(f)

    def bw(g):
        out = np.zeros((n, f))
        out[arg, cols] = g[0]
        return (out,)

    return _record("max_rows", a.data[arg, cols][None, :], (a,), bw)


def _check_offsets(op: str, offsets, n: int) -> np.ndarray:
    off = np.asarray(offsets, dtype=np.int64)
    if off.ndim != 1 or off.size < 2 or off[0] != 0 or off[-1] != n:
        raise ShapeError(f"{op}: offsets must run from 0 to {n}")
    if np.any(np.diff(off) <= 0):
        raise ShapeError(f"{op}: empty segment")
    return off


def segment_mean(a: Tensor, offsets) -> Tensor:
    """Per contiguous segment ``[offsets[s], offsets[s+1])`` column-wise mean."""
    off = _check_offsets("segment_mean", offsets, a.rows)
    counts = np.diff(off).astype(np.float64)[:, None]
    out = np.add.reduceat(a.data, off[:-1], axis=0) / counts
    reps = np.diff(off)

    def bw(g):
        return (np.repeat(g / counts, reps, axis=0),)

    return _record("segment_mean", out, (a,), bw)


def segment_max(a: Tensor, offsets) -> Tensor:
    """Per-segment column-wise max; ties send the gradient to the first row."""
    off = _check_offsets("segment_max", offsets, a.rows)
    x = a.data
    n, f = x.shape
    out = np.maximum.reduceat(x, off[:-1], axis=0)
    reps = np.diff(off)
    hit = x == np.repeat(out, reps, axis=0)
    rows = np.where(hit, np.arange(n)[:, None], n)
    arg = np.minimum.reduceat(rows, off[:-1], axis=0)
    cols = np.broadcast_to(np.arange(f), arg.shape)

    def bw(g):
        res = np.zeros((n, f))
        res[arg, cols] = g
        return (res,)

    return _record("segment_max", out, (a,), bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept entries scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record("dropout", a.data * mask, (a,), lambda g: (g * mask,))


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _record("log_softmax", out, (a,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def nll(logp: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row log-probs."""
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = logp.shape
    if t.size != n:
        raise ShapeError(f"nll: {t.size} targets for {n} rows")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"nll: target outside [0, {c})")
    rows = np.arange(n)
    val = -logp.data[rows, t].mean()

    def bw(g):
        out = np.zeros((n, c))
        out[rows, t] = -g[0, 0] / n
        return (out,)

    return _record("nll", np.array([[val]]), (logp,), bw)


def mae(pred: Tensor, targets) -> Tensor:
    """Mean absolute error against a constant target array of the same shape."""
    y = np.asarray(targets, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - y
    n = diff.size
    sign = np.sign(diff)
    return _record("mae", np.array([[np.abs(diff).mean()]]), (pred,), lambda g: (sign * (g[0, 0] / n),))


def spmm(op: sp.spmatrix, a: Tensor) -> Tensor:
    """Apply a constant sparse (or dense numpy) operator: ``op @ a``."""
    if op.shape[1] != a.rows:
        raise ShapeError(f"spmm: operator {op.shape} @ {a.shape}")
    opT = op.T

    def bw(g):
        return (np.asarray(opT @ g),)

    return _record("spmm", np.asarray(op @ a.data), (a,), bw)


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "scale": scale,
    "mul": mul,
    "transpose": transpose,
    "concat_cols": lambda *xs: concat_cols(xs),
    "row_select": row_select,
    "scatter_add": scatter_add,
    "row_scale": row_scale,
    "add_row": add_row,
    "sigmoid": sigmoid,
    "relu": relu,
    "power": power,
    "row_sum": row_sum,
    "col_sum": col_sum,
    "mean_rows": mean_rows,
    "max_rows": max_rows,
    "segment_mean": segment_mean,
    "segment_max": segment_max,
    "dropout": dropout,
    "log_softmax": log_softmax,
    "nll": nll,
    "mae": mae,
    "spmm": spmm,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("row_select", x, indices=[2, 0])``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


def op_kinds() -> list[str]:
    return sorted(_OPS)


# ---------------------------------------------------------------------------
# gradient check


def grad_check(builder: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The relative error of one entry is ``|a - n| / max(1e-8, |a| + |n|)``.
    ``builder`` must return the same scalar loss whenever the leaves hold the
    same values.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    reset_tape()
    for leaf in leaves:
        leaf.grad = None
    loss = builder()
    base = loss.item()
    backward(loss)
    with no_grad():
        again = builder().item()
    if again != base:
        raise GradCheckError(f"builder is not deterministic: {base!r} != {again!r}")

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            with no_grad():
                plus = builder().item()
            flat[k] = orig - step
            with no_grad():
                minus = builder().item()
            flat[k] = orig
            numeric = (plus - minus) / (2.0 * step)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
