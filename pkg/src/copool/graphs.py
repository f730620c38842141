"""Graph containers, TU-format ingestion, dataset transforms, folds and batching.

Random draws use numpy's PCG64 generator (``np.random.default_rng``) seeded
with the integer passed to each transform, so results are reproducible
across platforms.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

ATTR_KINDS = ("attributed", "labeled", "plain")


class DatasetFormatError(ValueError):
    """Raised for malformed or incomplete TU corpora."""


def canonical_edges(pairs, n: int | None = None) -> np.ndarray:
    """Unordered, deduplicated, self-loop-free edge array sorted lexicographically."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    keep = lo != hi
    uniq = np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)
    if n is not None and uniq.size and (uniq.min() < 0 or uniq.max() >= n):
        raise ValueError(f"edge endpoint outside [0, {n})")
    return uniq.reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    edges: np.ndarray  # (E, 2) int64, i < j, sorted
    node_attrs: np.ndarray  # (n, d) float64
    target: float | int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a graph needs at least one node")
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            if np.any(e[:, 0] >= e[:, 1]):
                raise ValueError("edges must be stored as (i, j) with i < j")
            if e.min() < 0 or e.max() >= self.n:
                raise ValueError(f"edge endpoint outside [0, {self.n})")
            if len(np.unique(e, axis=0)) != len(e):
                raise ValueError("duplicate edges")
        x = np.asarray(self.node_attrs, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.n:
            raise ValueError(f"node_attrs must be {self.n} x d, got {x.shape}")
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "node_attrs", x)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def replace(self, **changes) -> "Graph":
        return dataclasses.replace(self, **changes)

    def same_as(self, other: "Graph") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.node_attrs, other.node_attrs)
            and self.target == other.target
        )


@dataclass(frozen=True, eq=False)
class GraphDataset:
    graphs: tuple[Graph, ...]
    attr_kind: str
    attr_dim: int
    task: str = "classification"
    num_classes: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        if self.attr_kind not in ATTR_KINDS:
            raise ValueError(f"attr_kind must be one of {ATTR_KINDS}")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        for g in self.graphs:
            if g.node_attrs.shape[1] != self.attr_dim:
                raise ValueError("graphs do not share attr_dim")
            if self.task == "classification" and not 0 <= int(g.target) < self.num_classes:
                raise ValueError(f"class target {g.target} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def with_graphs(self, graphs: Sequence[Graph], **changes) -> "GraphDataset":
        return dataclasses.replace(self, graphs=tuple(graphs), **changes)

    def subset(self, ids: Sequence[int]) -> "GraphDataset":
        return self.with_graphs([self.graphs[i] for i in ids])

    def targets(self) -> np.ndarray:
        dtype = np.int64 if self.task == "classification" else np.float64
        return np.array([g.target for g in self.graphs], dtype=dtype)

    def same_as(self, other: "GraphDataset") -> bool:
        return (
            len(self) == len(other)
            and self.attr_kind == other.attr_kind
            and self.attr_dim == other.attr_dim
            and self.task == other.task
            and self.num_classes == other.num_classes
            and all(a.same_as(b) for a, b in zip(self.graphs, other.graphs))
        )

    def stats(self) -> dict:
        """Table-style summary: counts, mean nodes, mean undirected edges."""
        nodes = [g.n for g in self.graphs]
        edges = [g.num_edges for g in self.graphs]
        return {
            "name": self.name,
            "graphs": len(self.graphs),
            "classes": self.num_classes if self.task == "classification" else None,
            "avg_nodes": float(np.mean(nodes)) if nodes else 0.0,
            "avg_edges": float(np.mean(edges)) if edges else 0.0,
            "attr_kind": self.attr_kind,
            "attr_dim": self.attr_dim,
            "task": self.task,
        }


# ---------------------------------------------------------------------------
# TU format


def _read_rows(path: Path) -> list[list[str]]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([tok.strip() for tok in line.split(",")])
    return rows


def _read_column(path: Path, kind=int) -> list:
    out = []
    for row in _read_rows(path):
        if len(row) != 1:
            raise DatasetFormatError(f"{path.name}: expected one value per line, got {row}")
        out.append(kind(row[0]))
    return out


def parse_tu_dataset(root, name: str, task: str = "classification") -> GraphDataset:
    """Load ``root/name/{name}_*.txt`` (or ``root/{name}_*.txt``).

    For ``task="regression"`` the per-graph target is read from
    ``{name}_graph_attributes.txt`` when present, else from the labels file.
    """
    root = Path(root)
    base = root / name if (root / name).is_dir() else root
    f = lambda suffix: base / f"{name}_{suffix}.txt"  # noqa: E731

    label_file = f("graph_labels")
    if task == "regression" and f("graph_attributes").exists():
        label_file = f("graph_attributes")
    for path in (f("A"), f("graph_indicator"), label_file):
        if not path.exists():
            raise DatasetFormatError(f"missing mandatory file {path}")

    indicator = np.array(_read_column(f("graph_indicator")), dtype=np.int64)
    n_total = len(indicator)
    raw_targets = _read_column(label_file, float)
    n_graphs = len(raw_targets)
    if n_total == 0 or indicator.min() < 1 or indicator.max() > n_graphs:
        raise DatasetFormatError("graph indicator refers to unknown graph ids")
    if np.any(np.diff(indicator) < 0):
        raise DatasetFormatError("graph indicator must be non-decreasing")
    counts = np.bincount(indicator - 1, minlength=n_graphs)
    if np.any(counts == 0):
        raise DatasetFormatError("a graph has no nodes")
    starts = np.concatenate([[0], np.cumsum(counts)])

    edge_rows = _read_rows(f("A"))
    try:
        pairs = np.array([[int(r[0]), int(r[1])] for r in edge_rows], dtype=np.int64).reshape(-1, 2) - 1
    except (IndexError, ValueError) as exc:
        raise DatasetFormatError(f"{name}_A.txt: malformed line") from exc
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n_total):
        raise DatasetFormatError("edge references a node outside the indicator range")
    g_src = indicator[pairs[:, 0]] - 1 if pairs.size else np.zeros(0, dtype=np.int64)
    g_dst = indicator[pairs[:, 1]] - 1 if pairs.size else np.zeros(0, dtype=np.int64)
    if np.any(g_src != g_dst):
        raise DatasetFormatError("edge connects nodes of different graphs")

    if f("node_attributes").exists():
        rows = _read_rows(f("node_attributes"))
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise DatasetFormatError("ragged node attribute rows")
        if len(rows) != n_total:
            raise DatasetFormatError("node attribute count differs from node count")
        attrs = np.array(rows, dtype=np.float64)
        kind = "attributed"
    elif f("node_labels").exists():
        labels = np.array(_read_column(f("node_labels")), dtype=np.int64)
        if len(labels) != n_total:
            raise DatasetFormatError("node label count differs from node count")
        alphabet, inverse = np.unique(labels, return_inverse=True)
        attrs = np.zeros((n_total, len(alphabet)))
        attrs[np.arange(n_total), inverse] = 1.0
        kind = "labeled"
    else:
        attrs = np.zeros((n_total, 0))
        kind = "plain"

    if task == "classification":
        classes = sorted(set(raw_targets))
        remap = {c: i for i, c in enumerate(classes)}
        targets = [remap[t] for t in raw_targets]
        num_classes = len(classes)
    else:
        targets = [float(t) for t in raw_targets]
        num_classes = 0

    order = np.argsort(g_src, kind="stable")
    pairs, g_src = pairs[order], g_src[order]
    edge_bounds = np.searchsorted(g_src, np.arange(n_graphs + 1))
    graphs = []
    for g in range(n_graphs):
        local = pairs[edge_bounds[g] : edge_bounds[g + 1]] - starts[g]
        graphs.append(
            Graph(
                n=int(counts[g]),
                edges=canonical_edges(local),
                node_attrs=attrs[starts[g] : starts[g + 1]],
                target=targets[g],
            )
        )
    return GraphDataset(graphs, kind, attrs.shape[1], task, num_classes, name)


def write_tu_dataset(ds: GraphDataset, root, name: str | None = None, labels=None) -> Path:
    """Serialise ``ds`` in TU layout under ``root``; returns the directory.

    ``labels`` optionally maps class ids back to original graph labels.
    Attributed datasets are written as node attributes, labeled ones as
    node labels (argmax of the one-hot row, 1-based).
    """
    name = name or ds.name or "DS"
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    p = lambda suffix: root / f"{name}_{suffix}.txt"  # noqa: E731
    offset = 0
    with open(p("A"), "w") as fa, open(p("graph_indicator"), "w") as fi:
        for gid, g in enumerate(ds.graphs, start=1):
            for i, j in g.edges:
                fa.write(f"{i + offset + 1}, {j + offset + 1}\n{j + offset + 1}, {i + offset + 1}\n")
            fi.write(f"{gid}\n" * g.n)
            offset += g.n
    target_file = "graph_labels" if ds.task == "classification" else "graph_attributes"
    with open(p(target_file), "w") as fl:
        for g in ds.graphs:
            t = g.target if labels is None else labels[g.target]
            fl.write(f"{t!r}\n" if ds.task == "regression" else f"{int(t)}\n")
    if ds.attr_kind == "attributed":
        with open(p("node_attributes"), "w") as fn:
            for g in ds.graphs:
                for row in g.node_attrs:
                    fn.write(", ".join(repr(float(v)) for v in row) + "\n")
    elif ds.attr_kind == "labeled":
        with open(p("node_labels"), "w") as fn:
            for g in ds.graphs:
                for row in g.node_attrs:
                    fn.write(f"{int(np.argmax(row)) + 1}\n")
    return root


# ---------------------------------------------------------------------------
# transforms


def pad_plain_attributes(ds: GraphDataset, dim: int = 1) -> GraphDataset:
    """Give every node of a plain dataset the all-one vector of length ``dim``."""
    if ds.attr_kind != "plain":
        raise ValueError(f"padding applies to plain datasets, {ds.name!r} is {ds.attr_kind}")
    if dim < 1:
        raise ValueError("pad dimension must be >= 1")
    graphs = [g.replace(node_attrs=np.ones((g.n, dim))) for g in ds.graphs]
    return ds.with_graphs(graphs, attr_dim=dim)


def make_incomplete(ds: GraphDataset, ratio: float, seed: int) -> GraphDataset:
    """Zero the attribute rows of floor(ratio * total_nodes) nodes chosen dataset-wide."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"incomplete ratio {ratio} outside [0, 1]")
    if ds.attr_kind not in ("attributed", "labeled"):
        raise ValueError("incompleteness needs attributed or labeled graphs")
    sizes = np.array([g.n for g in ds.graphs])
    n_total = int(sizes.sum())
    k = int(math.floor(ratio * n_total + 1e-9))
    if k == 0:
        return ds
    rng = np.random.default_rng(seed)
    chosen = np.zeros(n_total, dtype=bool)
    chosen[rng.choice(n_total, size=k, replace=False)] = True
    starts = np.concatenate([[0], np.cumsum(sizes)])
    graphs = []
    for gi, g in enumerate(ds.graphs):
        mask = chosen[starts[gi] : starts[gi + 1]]
        if mask.any():
            x = g.node_attrs.copy()
            x[mask] = 0.0
            g = g.replace(node_attrs=x)
        graphs.append(g)
    return ds.with_graphs(graphs)


def perturb_edges(ds: GraphDataset, mode: str, ratio: float, seed: int) -> GraphDataset:
    """Randomly drop edges, or rebuild each graph's edges from scratch.

    ``drop`` removes floor(ratio * |E|) edges. ``add`` starts from the empty
    edge set and inserts floor(ratio * |E|) distinct random pairs, capped at
    n(n-1)/2.
    """
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    if mode == "drop" and ratio > 1:
        raise ValueError("drop ratio must be <= 1")
    if mode not in ("drop", "add"):
        raise ValueError(f"unknown perturbation mode {mode!r}")
    rng = np.random.default_rng(seed)
    graphs = []
    for g in ds.graphs:
        m = int(math.floor(ratio * g.num_edges + 1e-9))
        if mode == "drop":
            if m == 0:
                graphs.append(g)
                continue
            keep = np.sort(rng.choice(g.num_edges, size=g.num_edges - m, replace=False))
            graphs.append(g.replace(edges=g.edges[keep]))
        else:
            m = min(m, g.n * (g.n - 1) // 2)
            graphs.append(g.replace(edges=_random_pairs(g.n, m, rng)))
    return ds.with_graphs(graphs)


def _random_pairs(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    if m == 0:
        return np.zeros((0, 2), dtype=np.int64)
    total = n * (n - 1) // 2
    codes = np.sort(rng.choice(total, size=m, replace=False))
    # decode linear index of the strict upper triangle, row-major
    iu, ju = np.triu_indices(n, k=1)
    return np.stack([iu[codes], ju[codes]], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[int, ...]
    val_ids: tuple[int, ...]
    test_ids: tuple[int, ...]


def stratified_kfold(ds: GraphDataset, k: int = 10, seed: int = 0) -> list[FoldSplit]:
    """k test folds partitioning the dataset; the remainder split 8:1 train/val.

    Classification folds are stratified by dealing each shuffled class round
    robin over the folds, starting where the previous class stopped.
    """
    n = len(ds)
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"{n} graphs cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    if ds.task == "classification":
        y = ds.targets()
        cursor = 0
        for c in range(ds.num_classes):
            members = np.flatnonzero(y == c)
            if 0 < len(members) < k:
                raise ValueError(f"class {c} has {len(members)} members, fewer than k={k}")
            members = rng.permutation(members)
            fold_of[members] = (cursor + np.arange(len(members))) % k
            cursor = (cursor + len(members)) % k
    else:
        perm = rng.permutation(n)
        fold_of[perm] = np.arange(n) % k

    splits = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        rest = np.flatnonzero(fold_of != f)
        if ds.task == "classification":
            val = _stratified_take(rest, ds.targets()[rest], 1 / 9, rng)
        else:
            val = np.sort(rng.permutation(rest)[: int(round(len(rest) / 9))])
        train = np.setdiff1d(rest, val)
        splits.append(FoldSplit(f, tuple(map(int, train)), tuple(map(int, val)), tuple(map(int, test))))
    return splits


def _stratified_take(ids: np.ndarray, y: np.ndarray, frac: float, rng) -> np.ndarray:
    target = int(round(len(ids) * frac))
    picked = []
    quotas = {}
    for c in np.unique(y):
        members = ids[y == c]
        quotas[c] = (rng.permutation(members), len(members) * frac)
    base = {c: int(math.floor(q)) for c, (_, q) in quotas.items()}
    short = target - sum(base.values())
    order = sorted(quotas, key=lambda c: (-(quotas[c][1] - base[c]), c))
    for c in order[:max(short, 0)]:
        base[c] += 1
    for c, (members, _) in quotas.items():
        picked.extend(members[: base[c]])
    return np.sort(np.array(picked, dtype=np.int64))


def random_split(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> FoldSplit:
    """Single shuffled train/val/test split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return FoldSplit(
        0,
        tuple(map(int, np.sort(perm[:n_train]))),
        tuple(map(int, np.sort(perm[n_train : n_train + n_val]))),
        tuple(map(int, np.sort(perm[n_train + n_val :]))),
    )


# ---------------------------------------------------------------------------
# batching


@dataclass(eq=False)
class SparseGraph:
    """Block-diagonal graph structure over contiguous node segments.

    ``weights`` is ``None`` for unit edges, a float array for fixed weights,
    or a Tensor (E x 1) when the weights are themselves differentiable.
    """

    n: int
    edges: np.ndarray
    offsets: np.ndarray
    weights: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    @cached_property
    def membership(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.offsets) - 1), np.diff(self.offsets))

    @cached_property
    def edge_slot(self) -> np.ndarray:
        return self.membership[self.edges[:, 0]] if len(self.edges) else np.zeros(0, dtype=np.int64)

    @property
    def num_slots(self) -> int:
        return len(self.offsets) - 1

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric unit-weight adjacency, no self-loops."""
        e = self.edges
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n, self.n))


@dataclass(eq=False)
class Batch:
    total_nodes: int
    attrs: np.ndarray
    edges: np.ndarray
    membership: np.ndarray
    targets: np.ndarray
    offsets: np.ndarray

    @property
    def num_slots(self) -> int:
        return len(self.offsets) - 1

    @cached_property
    def graph(self) -> SparseGraph:
        return SparseGraph(self.total_nodes, self.edges, self.offsets)


def batch_graphs(graphs: Sequence[Graph]) -> Batch:
    """Stack graphs block-diagonally; node ids of slot s are offset by earlier slots."""
    if len(graphs) == 0:
        raise ValueError("cannot batch an empty list of graphs")
    dims = {g.node_attrs.shape[1] for g in graphs}
    if len(dims) != 1:
        raise ValueError(f"mixed attr_dim in batch: {sorted(dims)}")
    sizes = np.array([g.n for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    edges = [g.edges + offsets[i] for i, g in enumerate(graphs)]
    targets = np.array([g.target for g in graphs])
    return Batch(
        total_nodes=int(offsets[-1]),
        attrs=np.concatenate([g.node_attrs for g in graphs], axis=0),
        edges=np.concatenate(edges, axis=0).astype(np.int64).reshape(-1, 2),
        membership=np.repeat(np.arange(len(graphs)), sizes),
        targets=targets,
        offsets=offsets,
    )


# ---------------------------------------------------------------------------
# synthetic corpora for tests and desk-scale runs


def synthetic_regression_dataset(num_graphs: int = 1000, seed: int = 0, num_labels: int = 4) -> GraphDataset:
    """Molecule-like random graphs with a structure-dependent real target.

    Each graph is a random tree plus a few ring-closing edges; nodes carry
    one-hot labels. Target = mean degree + 2 * fraction of label-0 nodes
    + 0.5 * (number of cycles) / n.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(num_graphs):
        n = int(rng.integers(8, 25))
        parents = [int(rng.integers(0, i)) for i in range(1, n)]
        pairs = [(p, i) for i, p in enumerate(parents, start=1)]
        extra = int(rng.integers(0, 4))
        for _ in range(extra):
            i, j = rng.choice(n, size=2, replace=False)
            pairs.append((int(i), int(j)))
        edges = canonical_edges(pairs)
        labels = rng.choice(num_labels, size=n, p=rng.dirichlet(np.ones(num_labels)))
        x = np.zeros((n, num_labels))
        x[np.arange(n), labels] = 1.0
        cycles = len(edges) - (n - 1)
        target = 2 * len(edges) / n + 2.0 * np.mean(labels == 0) + 0.5 * cycles / n
        graphs.append(Graph(n, edges, x, float(target)))
    return GraphDataset(graphs, "labeled", num_labels, "regression", 0, "SYNTH-REG")


def synthetic_classification_dataset(num_graphs: int = 100, seed: int = 0) -> GraphDataset:
    """Two classes of labeled graphs: sparse chains vs. dense clusters.

    Class 0 graphs are paths with mostly label-0 nodes; class 1 graphs are
    denser random graphs with mostly label-1 nodes, so both structure and
    attributes separate the classes.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(num_graphs):
        cls = i % 2
        n = int(rng.integers(5, 12))
        if cls == 0:
            pairs = [(k, k + 1) for k in range(n - 1)]
        else:
            iu, ju = np.triu_indices(n, k=1)
            pick = rng.random(len(iu)) < 0.5
            pairs = list(zip(iu[pick], ju[pick])) + [(k, k + 1) for k in range(n - 1)]
        labels = np.where(rng.random(n) < 0.8, cls, 1 - cls)
        x = np.zeros((n, 2))
        x[np.arange(n), labels] = 1.0
        graphs.append(Graph(n, canonical_edges(pairs), x, cls))
    return GraphDataset(graphs, "labeled", 2, "classification", 2, "SYNTH-CLS")


def find_dataset_root(name: str, data_root=None) -> Path | None:
    """Locate a TU corpus directory, checking ``data_root`` then ``$COPOOL_DATA``."""
    candidates = []
    if data_root:
        candidates.append(Path(data_root))
    if os.environ.get("COPOOL_DATA"):
        candidates.append(Path(os.environ["COPOOL_DATA"]))
    for root in candidates:
        for base in (root / name, root):
            if (base / f"{name}_A.txt").exists():
                return base
    return None
