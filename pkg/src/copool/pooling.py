"""Cross-view pooling: edge-view pruning, node-view selection and their fusion.

Everything operates on :class:`~copool.graphs.SparseGraph` batches. Per
undirected edge ``k = (i, j)`` the directed proximity vector holds ``P[i, j]``
at row ``k`` and ``P[j, i]`` at row ``E + k``. The diagonal of the symmetrised
proximity matrix is always 1 and is kept implicit.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graphs import SparseGraph
from .layers import Propagator, glorot, propagator
from .tensor import Tensor

MODES = ("full", "no_gpr", "no_node_view")

_TOL = 1e-9


def keep_count(total, ratio: float):
    """``ceil(total * ratio)`` with a small tolerance against float noise."""
    return np.ceil(np.asarray(total, dtype=np.float64) * ratio - _TOL).astype(np.int64)


@dataclass
class CoPoolConfig:
    gamma: float = 1.0
    epsilon: float = 0.5
    T: int = 3
    mode: str = "full"
    double_self_loop: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma {self.gamma} outside (0, 1]")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon {self.epsilon} outside (0, 1]")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class CoPoolParams:
    beta: Tensor  # (T+1) x 1
    W_prox: Tensor  # f x f'
    a: Tensor  # 2f' x 1
    W_fuse: Tensor  # 2f x f_out, or f x f_out without the node view

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int, config: CoPoolConfig, name: str = "pool"):
        beta = Tensor(np.full((config.T + 1, 1), 1.0 / (config.T + 1)), True, f"{name}.beta")
        W_prox = glorot(rng, in_dim, in_dim, f"{name}.W_prox")
        a = glorot(rng, 2 * in_dim, 1, f"{name}.a")
        fuse_in = in_dim if config.mode == "no_node_view" else 2 * in_dim
        W_fuse = glorot(rng, fuse_in, out_dim, f"{name}.W_fuse")
        return cls(beta, W_prox, a, W_fuse)

    def tensors(self) -> list[Tensor]:
        return [self.beta, self.W_prox, self.a, self.W_fuse]


@dataclass(eq=False)
class PooledGraph:
    Z: Tensor
    graph: SparseGraph  # pooled structure, weights = retained proximity
    indices: np.ndarray  # selected input node ids, per slot in descending score order
    kept_edges: np.ndarray  # ids into the input edge list that survived the cut
    scores: np.ndarray | None
    input_n: int
    input_edges: np.ndarray
    edge_weights: np.ndarray  # symmetrised proximity of every input edge

    @property
    def cut_edges(self) -> np.ndarray:
        return self.input_edges[self.kept_edges]

    @property
    def proximity_full(self) -> np.ndarray:
        """Dense cut proximity matrix over the input nodes (diagonal 1)."""
        return dense_symmetric(self.input_n, self.cut_edges, self.edge_weights[self.kept_edges])

    @property
    def adj(self) -> np.ndarray:
        """Dense pooled adjacency: the cut matrix restricted to ``indices``."""
        w = self.graph.weights
        vals = np.zeros(0) if w is None else (w.data.reshape(-1) if isinstance(w, Tensor) else np.asarray(w))
        return dense_symmetric(self.graph.n, self.graph.edges, vals)


def dense_symmetric(n: int, edges: np.ndarray, weights, diagonal: float = 1.0) -> np.ndarray:
    M = np.eye(n) * diagonal
    if len(edges):
        M[edges[:, 0], edges[:, 1]] = weights
        M[edges[:, 1], edges[:, 0]] = weights
    return M


# ---------------------------------------------------------------------------
# decision log, used to verify that selections are locally constant


_decisions: contextvars.ContextVar[list | None] = contextvars.ContextVar("copool_decisions", default=None)


@contextlib.contextmanager
def record_decisions():
    """Collect ``(indices, kept_edges)`` of every pooling call in the block."""
    log: list = []
    token = _decisions.set(log)
    try:
        yield log
    finally:
        _decisions.reset(token)


# ---------------------------------------------------------------------------
# edge view


def gpr_propagate(H: Tensor, graph: SparseGraph, beta: Tensor, T_steps: int | None = None) -> Tensor:
    """``sum_t beta_t S^t H`` with ``S`` the normalised adjacency with self-loops."""
    steps = beta.rows - 1 if T_steps is None else T_steps
    if beta.shape != (steps + 1, 1):
        raise T.ShapeError(f"gpr: beta shape {beta.shape} for T={steps}")
    prop = propagator(graph)
    out = T.scale(H, T.row_select(beta, [0]))
    h = H
    for t in range(1, steps + 1):
        h = prop(h)
        out = out + T.scale(h, T.row_select(beta, [t]))
    return out


def proximity_weights(O: Tensor, graph: SparseGraph, a: Tensor, W_prox: Tensor) -> Tensor:
    """Directed edge proximities ``sigmoid(a^T [W O_i || W O_j])``, shape 2E x 1."""
    f2 = W_prox.cols
    if a.shape != (2 * f2, 1):
        raise T.ShapeError(f"proximity: a has shape {a.shape}, expected {(2 * f2, 1)}")
    e = graph.edges
    U = O @ W_prox
    left = U @ T.row_select(a, np.arange(f2))
    right = U @ T.row_select(a, np.arange(f2, 2 * f2))
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    return T.sigmoid(T.row_select(left, src) + T.row_select(right, dst))


def proximity_matrix(p_dir, graph: SparseGraph) -> np.ndarray:
    """Dense n x n proximity matrix (zero diagonal) from directed edge values."""
    vals = p_dir.data.reshape(-1) if isinstance(p_dir, Tensor) else np.asarray(p_dir).reshape(-1)
    e = graph.edges
    P = np.zeros((graph.n, graph.n))
    E = len(e)
    P[e[:, 0], e[:, 1]] = vals[:E]
    P[e[:, 1], e[:, 0]] = vals[E:]
    return P


def symmetrize_proximity(p_dir: Tensor) -> Tensor:
    """Off-diagonal entries of ``((P + I) + (P + I)^T) / 2`` per undirected edge."""
    if p_dir.rows % 2:
        raise T.ShapeError("symmetrize: directed proximity must have 2E rows")
    E = p_dir.rows // 2
    fwd = T.row_select(p_dir, np.arange(E))
    bwd = T.row_select(p_dir, np.arange(E, 2 * E))
    return T.scale(fwd + bwd, 0.5)


def top_gamma_cut(weights, gamma: float, graph: SparseGraph) -> np.ndarray:
    """Ids of the ``ceil(gamma |E_g|)`` heaviest edges of each graph slot.

    Ties go to the lexicographically smaller ``(i, j)``. Returned ids are
    sorted ascending.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma {gamma} outside (0, 1]")
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    E = graph.num_edges
    if E == 0:
        return np.zeros(0, dtype=np.int64)
    slot = graph.edge_slot
    e = graph.edges
    order = np.lexsort((e[:, 1], e[:, 0], -w, slot))
    per_slot = np.bincount(slot, minlength=graph.num_slots)
    first = np.concatenate([[0], np.cumsum(per_slot)])[:-1]
    sorted_slot = slot[order]
    rank = np.arange(E) - first[sorted_slot]
    keep = rank < keep_count(per_slot, gamma)[sorted_slot]
    return np.sort(order[keep])


# ---------------------------------------------------------------------------
# node view


def node_scores(n: int, edges: np.ndarray, weights, H, double_self_loop: bool = True) -> np.ndarray:
    """Row sums of ``D^{-1/2} (P_cut + I) D^{-1/2} H``.

    ``edges``/``weights`` are the retained off-diagonal entries of the cut
    proximity matrix, whose own diagonal is 1. With ``double_self_loop`` the
    extra identity is added on top, giving diagonal weight 2.
    """
    h = (H.data if isinstance(H, Tensor) else np.asarray(H)).sum(axis=1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    diag = 2.0 if double_self_loop else 1.0
    deg = np.full(n, diag)
    if len(edges):
        i, j = edges[:, 0], edges[:, 1]
        deg += np.bincount(i, w, n) + np.bincount(j, w, n)
    d = 1.0 / np.sqrt(deg)
    s = diag * d * d * h
    if len(edges):
        c = w * d[i] * d[j]
        s += np.bincount(i, c * h[j], n) + np.bincount(j, c * h[i], n)
    return s


def select_top_nodes(scores, epsilon: float, offsets) -> np.ndarray:
    """Per slot, the ``max(1, ceil(n_g * epsilon))`` best nodes.

    Output is grouped by slot; within a slot, descending score with ties to
    the smaller index.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    off = np.asarray(offsets, dtype=np.int64)
    sizes = np.diff(off)
    slot = np.repeat(np.arange(len(sizes)), sizes)
    idx = np.arange(len(s))
    order = np.lexsort((idx, -s, slot))
    k = np.maximum(1, keep_count(sizes, epsilon))
    rank = np.arange(len(s)) - off[:-1][slot[order]]
    return order[rank < k[slot[order]]]


# ---------------------------------------------------------------------------
# fusion


def _edge_view(O: Tensor, edges: np.ndarray, w_kept: Tensor | None, indices: np.ndarray, n: int) -> Tensor:
    """Rows ``indices`` of ``P_cut @ O`` with the unit diagonal of ``P_cut``."""
    out = T.row_select(O, indices)
    if w_kept is None or len(edges) == 0:
        return out
    pos = np.full(n, -1, dtype=np.int64)
    pos[indices] = np.arange(len(indices))
    E = len(edges)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    eid = np.concatenate([np.arange(E), np.arange(E)])
    hit = pos[src] >= 0
    if not hit.any():
        return out
    msg = T.row_scale(T.row_select(O, dst[hit]), T.row_select(w_kept, eid[hit]))
    return out + T.scatter_add(msg, pos[src[hit]], len(indices))


def copool_forward(H: Tensor, graph: SparseGraph, params: CoPoolParams, config: CoPoolConfig) -> PooledGraph:
    """One cross-view pooling layer over a (batched) graph."""
    if H.rows != graph.n:
        raise T.ShapeError(f"copool: {H.rows} embeddings for {graph.n} nodes")
    n, E = graph.n, graph.num_edges

    O = H if config.mode == "no_gpr" else gpr_propagate(H, graph, params.beta, config.T)

    if E:
        w = symmetrize_proximity(proximity_weights(O, graph, params.a, params.W_prox))
        w_np = w.data.reshape(-1).copy()
        kept = top_gamma_cut(w_np, config.gamma, graph)
        w_kept = T.row_select(w, kept)
    else:
        w_np = np.zeros(0)
        kept = np.zeros(0, dtype=np.int64)
        w_kept = None
    cut = graph.edges[kept]

    if config.mode == "no_node_view":
        indices = np.arange(n)
        scores = None
        Z = _edge_view(O, cut, w_kept, indices, n) @ params.W_fuse
        pooled = SparseGraph(n, cut, graph.offsets, w_kept)
    else:
        scores = node_scores(n, cut, w_np[kept], H, config.double_self_loop)
        indices = select_top_nodes(scores, config.epsilon, graph.offsets)
        ev = _edge_view(O, cut, w_kept, indices, n)
        Z = T.concat_cols([ev, T.row_select(H, indices)]) @ params.W_fuse
        pooled = _induced(graph, cut, w_kept, kept, indices)

    log = _decisions.get()
    if log is not None:
        log.append((indices.copy(), kept.copy()))
    return PooledGraph(Z, pooled, indices, kept, scores, n, graph.edges, w_np)


def _induced(graph: SparseGraph, cut: np.ndarray, w_kept: Tensor | None, kept: np.ndarray, indices: np.ndarray) -> SparseGraph:
    pos = np.full(graph.n, -1, dtype=np.int64)
    pos[indices] = np.arange(len(indices))
    sizes = np.bincount(graph.membership[indices], minlength=graph.num_slots)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    if len(cut) == 0:
        return SparseGraph(len(indices), np.zeros((0, 2), dtype=np.int64), offsets)
    a, b = pos[cut[:, 0]], pos[cut[:, 1]]
    both = (a >= 0) & (b >= 0)
    new_edges = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)[both]
    weights = T.row_select(w_kept, np.flatnonzero(both))
    return SparseGraph(len(indices), new_edges.astype(np.int64).reshape(-1, 2), offsets, weights)
