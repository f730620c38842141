"""Graph convolution, normalised propagation, readout, linear layers and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .graphs import SparseGraph, canonical_edges
from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step sees NaN or Inf gradients."""


def sym_norm(W) -> np.ndarray:
    """``D^{-1/2} W D^{-1/2}`` with ``D`` the diagonal of row sums of ``W``."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"sym_norm needs a square matrix, got {W.shape}")
    if np.any(W < 0):
        raise ValueError("sym_norm needs nonnegative entries")
    deg = W.sum(axis=1)
    zero = np.flatnonzero(deg <= 0)
    if zero.size:
        raise ValueError(f"zero row sum at node {int(zero[0])}; add self-loops first")
    d = 1.0 / np.sqrt(deg)
    return d[:, None] * W * d[None, :]


class Propagator:
    """Normalised operator ``D^{-1/2} (W + s I) D^{-1/2}`` over a sparse graph.

    ``W`` is the symmetric off-diagonal weight matrix defined by the graph's
    edges and weights and ``s`` the self-loop weight. Unit or fixed weights
    are compiled to a constant sparse matrix; Tensor weights stay on the tape.
    """

    def __init__(self, graph: SparseGraph, self_weight: float = 1.0):
        self.n = graph.n
        self.edges = graph.edges
        self.self_weight = float(self_weight)
        w = graph.weights
        self.weights = w
        e = self.edges
        self._src = np.concatenate([e[:, 0], e[:, 1]])
        self._dst = np.concatenate([e[:, 1], e[:, 0]])
        if isinstance(w, Tensor):
            self._build_tape(w)
            self.matrix = None
        else:
            vals = np.ones(len(e)) if w is None else np.asarray(w, dtype=np.float64).reshape(-1)
            self.matrix = self._compile(vals)

    def _compile(self, vals: np.ndarray) -> sp.csr_matrix:
        n, e = self.n, self.edges
        deg = np.full(n, self.self_weight)
        if len(e):
            deg += np.bincount(e[:, 0], vals, n) + np.bincount(e[:, 1], vals, n)
        d = 1.0 / np.sqrt(deg)
        coef = np.concatenate([vals, vals]) * d[self._src] * d[self._dst]
        rows = np.concatenate([self._src, np.arange(n)])
        cols = np.concatenate([self._dst, np.arange(n)])
        data = np.concatenate([coef, self.self_weight * d * d])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def _build_tape(self, w: Tensor) -> None:
        n, e = self.n, self.edges
        both = np.concatenate([np.arange(len(e)), np.arange(len(e))])
        self._w_dir = T.row_select(w, both)
        deg = T.scatter_add(self._w_dir, self._src, n) + Tensor(np.full((n, 1), self.self_weight))
        dinv = T.power(deg, -0.5)
        self._self_coef = T.scale(T.mul(dinv, dinv), self.self_weight)
        self._edge_coef = T.mul(T.mul(T.row_select(dinv, self._src), self._w_dir), T.row_select(dinv, self._dst))

    def __call__(self, x: Tensor) -> Tensor:
        if x.rows != self.n:
            raise T.ShapeError(f"propagate: {x.rows} rows for a {self.n}-node graph")
        if self.matrix is not None:
            return T.spmm(self.matrix, x)
        out = T.row_scale(x, self._self_coef)
        if len(self._src):
            msg = T.row_scale(T.row_select(x, self._dst), self._edge_coef)
            out = out + T.scatter_add(msg, self._src, self.n)
        return out

    def dense(self) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix.toarray()
        vals = self.weights.data.reshape(-1)
        return self._compile(vals).toarray()


def propagator(graph: SparseGraph) -> Propagator:
    """Cached GCN operator ``D^{-1/2}(A+I)D^{-1/2}`` for ``graph``."""
    prop = graph._cache.get("gcn")
    if prop is None:
        prop = graph._cache["gcn"] = Propagator(graph)
    return prop


def as_sparse_graph(A, n: int) -> SparseGraph:
    """Accept a SparseGraph, an edge list, or a dense weighted n x n matrix.

    The diagonal of a dense matrix is ignored: self-loops are added by the
    propagator. An integer 2 x 2 array is read as an edge list.
    """
    if isinstance(A, SparseGraph):
        return A
    A = np.asarray(A)
    is_edge_list = A.ndim == 2 and A.shape[1] == 2 and A.dtype.kind in "iu"
    if A.ndim == 2 and A.shape == (n, n) and not is_edge_list:
        if not np.allclose(A, A.T):
            raise ValueError("weighted adjacency must be symmetric")
        iu, ju = np.nonzero(np.triu(A, k=1))
        edges = np.stack([iu, ju], axis=1).astype(np.int64).reshape(-1, 2)
        return SparseGraph(n, edges, np.array([0, n]), A[iu, ju].astype(np.float64))
    return SparseGraph(n, canonical_edges(A, n), np.array([0, n]))


def gcn_forward(X: Tensor, A, theta: Tensor) -> Tensor:
    """``D^{-1/2} (A + I) D^{-1/2} X Theta``."""
    if X.cols != theta.rows:
        raise T.ShapeError(f"gcn: attrs {X.shape} do not match weight {theta.shape}")
    prop = propagator(as_sparse_graph(A, X.rows))
    if theta.cols < theta.rows:
        return prop(X @ theta)
    return prop(X) @ theta


def readout(H: Tensor, offsets) -> Tensor:
    """Per-slot ``[mean || max]`` over contiguous node segments."""
    return T.concat_cols([T.segment_mean(H, offsets), T.segment_max(H, offsets)])


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int, name: str = "lin") -> "Linear":
        return cls(glorot(rng, fan_in, fan_out, f"{name}.weight"), Tensor(np.zeros((1, fan_out)), True, f"{name}.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_row(x @ self.weight, self.bias)

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class Adam:
    """Adam with bias correction and decoupled weight decay."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: list[Tensor]) -> None:
        for p in params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in {p.name or p.shape} at step {self.step_count + 1}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            key = id(p)
            if key not in self.m:
                self.m[key] = np.zeros_like(p.data)
                self.v[key] = np.zeros_like(p.data)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    @staticmethod
    def zero_grad(params: list[Tensor]) -> None:
        for p in params:
            p.grad = None
