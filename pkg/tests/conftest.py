from __future__ import annotations

import contextlib
from pathlib import Path

import numpy as np
import pytest

from copool import tensor as T
from copool.graphs import Graph, GraphDataset, canonical_edges

DATA = Path(__file__).parent / "data"


def random_graph(rng: np.random.Generator, n_min: int = 1, n_max: int = 8, p: float | None = None, d: int = 3, target=0) -> Graph:
    n = int(rng.integers(n_min, n_max + 1))
    p = rng.uniform(0.2, 0.8) if p is None else p
    iu, ju = np.triu_indices(n, k=1)
    pick = rng.random(len(iu)) < p
    edges = canonical_edges(np.stack([iu[pick], ju[pick]], axis=1), n)
    return Graph(n, edges, rng.normal(size=(n, d)), target)


def dense_adj(n: int, edges) -> np.ndarray:
    A = np.zeros((n, n))
    for i, j in np.asarray(edges).reshape(-1, 2):
        A[i, j] = A[j, i] = 1.0
    return A


def toy_dataset(num: int = 20, seed: int = 0, d: int = 3) -> GraphDataset:
    rng = np.random.default_rng(seed)
    graphs = [random_graph(rng, 2, 7, d=d, target=i % 2) for i in range(num)]
    return GraphDataset(graphs, "attributed", d, "classification", 2, "TOY")


@contextlib.contextmanager
def kink_monitor():
    """Track how close relu inputs and segment maxima come to a non-smooth point.

    Yields a one-element list holding the smallest nonzero |relu input| and the
    smallest gap between the two largest entries of any max segment. Exact
    zeros are ignored: they come from rows that are identically zero and stay
    zero under small perturbations.
    """
    margin = [np.inf]
    relu, seg_max = T.relu, T.segment_max

    def spy_relu(a):
        x = np.abs(a.data[a.data != 0])
        if x.size:
            margin[0] = min(margin[0], float(x.min()))
        return relu(a)

    def spy_max(a, offsets):
        off = np.asarray(offsets)
        for lo, hi in zip(off[:-1], off[1:]):
            if hi - lo > 1:
                top = np.sort(a.data[lo:hi], axis=0)[-2:]
                margin[0] = min(margin[0], float(np.min(top[1] - top[0])))
        return seg_max(a, offsets)

    T.relu, T.segment_max = spy_relu, spy_max
    try:
        yield margin
    finally:
        T.relu, T.segment_max = relu, seg_max


@pytest.fixture(autouse=True)
def _clean_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
