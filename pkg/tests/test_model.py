import math

import numpy as np
import pytest

from conftest import kink_monitor, random_graph
from copool import tensor as T
from copool.graphs import Graph, batch_graphs, synthetic_regression_dataset
from copool.layers import Adam
from copool.model import ModelConfig, classify_forward, forward, init_params, load_checkpoint, loss, regress_forward, save_checkpoint
from copool.pooling import CoPoolConfig, record_decisions
from copool.tensor import Tensor


def cls_config(d=3, hidden=8, **pool):
    return ModelConfig(attr_dim=d, hidden=hidden, pool=CoPoolConfig(**pool), num_classes=2)


def test_single_node_graph_gives_finite_logits(rng):
    cfg = ModelConfig(attr_dim=3, hidden=8, num_classes=3)
    params = init_params(cfg, rng)
    out = classify_forward(batch_graphs([Graph(1, np.zeros((0, 2)), rng.normal(size=(1, 3)), 0)]), params, cfg)
    assert out.shape == (1, 3) and np.all(np.isfinite(out.data))


def test_duplicated_graph_gives_identical_logits(rng):
    cfg = cls_config()
    params = init_params(cfg, rng)
    g = random_graph(rng, 6, 6)
    out = classify_forward(batch_graphs([g, g]), params, cfg).data
    np.testing.assert_array_equal(out[0], out[1])


def test_permuted_graph_gives_identical_logits(rng):
    cfg = cls_config(gamma=0.7)
    for _ in range(20):
        params = init_params(cfg, rng)
        g = random_graph(rng, 6, 6)
        perm = rng.permutation(6)
        inv = np.argsort(perm)
        edges = np.sort(inv[g.edges], axis=1) if g.num_edges else g.edges
        h = Graph(6, edges[np.lexsort((edges[:, 1], edges[:, 0]))] if len(edges) else edges, g.node_attrs[perm], 0)
        a = classify_forward(batch_graphs([g]), params, cfg).data
        b = classify_forward(batch_graphs([h]), params, cfg).data
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_batch_equals_individual_graphs(rng):
    cfg = cls_config(gamma=0.5)
    params = init_params(cfg, rng)
    graphs = [random_graph(rng, 1, 8) for _ in range(5)]
    joint = classify_forward(batch_graphs(graphs), params, cfg).data
    for s, g in enumerate(graphs):
        np.testing.assert_allclose(joint[s], classify_forward(batch_graphs([g]), params, cfg).data[0], atol=1e-12)


def test_eval_mode_is_deterministic_and_dropout_only_in_training(rng):
    cfg = ModelConfig(attr_dim=3, hidden=8, dropout=0.5, task="regression")
    params = init_params(cfg, rng)
    b = batch_graphs([random_graph(rng, 3, 7) for _ in range(4)])
    a1 = regress_forward(b, params, cfg).data
    a2 = regress_forward(b, params, cfg).data
    np.testing.assert_array_equal(a1, a2)
    assert a1.shape == (4, 1)
    t1 = regress_forward(b, params, cfg, True, np.random.default_rng(0)).data
    assert not np.allclose(t1, a1)


def test_attr_dim_mismatch(rng):
    cfg = cls_config(d=4)
    with pytest.raises(T.ShapeError):
        classify_forward(batch_graphs([random_graph(rng, 3, 3, d=3)]), init_params(cfg, rng), cfg)


@pytest.mark.parametrize("kwargs", [{"hidden": 0}, {"dropout": 1.0}, {"attr_dim": 0}, {"task": "ranking"}, {"num_classes": 1}])
def test_config_validation(kwargs):
    base = {"attr_dim": 3}
    with pytest.raises(ValueError):
        ModelConfig(**{**base, **kwargs})


def test_loss_closed_forms():
    assert loss(Tensor(np.zeros((3, 2))), [0, 1, 1], "classification").item() == pytest.approx(math.log(2))
    y = np.array([0.5, -1.0, 2.0])
    assert loss(Tensor(y.reshape(-1, 1)), y, "regression").item() == 0.0
    big = Tensor([[50.0, -50.0], [-50.0, 50.0]])
    assert loss(big, [0, 1], "classification").item() < 1e-20
    with pytest.raises(ValueError):
        loss(big, [0, 1], "ranking")


def test_end_to_end_gradients(rng):
    """Central differences on the full classifier, hidden=4, six-node graphs, two classes."""
    checked = 0
    while checked < 3:
        cfg = ModelConfig(attr_dim=3, hidden=4, pool=CoPoolConfig(gamma=0.6, epsilon=0.5), num_classes=2)
        params = init_params(cfg, rng)
        # zero biases sit exactly on relu kinks when a layer's inputs are all dead; move to a generic point
        for t in params.tensors():
            t.data[...] = rng.normal(scale=0.5, size=t.shape)
        graphs = [random_graph(rng, 4, 6, d=3, target=t) for t in (0, 1)]
        b = batch_graphs(graphs)
        build = lambda: loss(classify_forward(b, params, cfg), b.targets, "classification")  # noqa: E731
        with kink_monitor() as margin:
            build()
        if margin[0] < 1e-3:
            continue  # a probe of size 1e-4 could cross a relu or max kink
        with record_decisions() as log:
            err = T.grad_check(build, params.tensors(), 1e-4)
        # a perturbation that flips a discrete selection makes the loss non-smooth; skip those draws
        if any(not all(np.array_equal(x, y) for x, y in zip(d, log[i % 2])) for i, d in enumerate(log)):
            continue
        assert err < 1e-4
        checked += 1


def fit(cfg, graphs, epochs, lr, rng):
    params = init_params(cfg, rng)
    b = batch_graphs(graphs)
    opt = Adam(lr)
    tensors = params.tensors()
    for epoch in range(epochs):
        if epoch == int(0.8 * epochs):
            opt.lr *= 0.1  # L1 steps do not shrink near the optimum, so settle with a smaller rate
        T.reset_tape()
        Adam.zero_grad(tensors)
        L = loss(forward(b, params, cfg, True, rng), b.targets, cfg.task)
        T.backward(L)
        opt.step(tensors)
    with T.no_grad():
        return forward(b, params, cfg).data


def test_constant_target_is_fitted(rng):
    graphs = [Graph(g.n, g.edges, np.ones((g.n, 2)), 1.7) for g in (random_graph(rng, 2, 7) for _ in range(8))]
    pred = fit(ModelConfig(attr_dim=2, hidden=8, task="regression"), graphs, 1000, 0.01, rng)
    np.testing.assert_allclose(pred, 1.7, atol=0.01)


def test_small_regression_set_is_overfit(rng):
    ds = synthetic_regression_dataset(32, seed=5)
    pred = fit(ModelConfig(attr_dim=ds.attr_dim, hidden=32, task="regression"), list(ds.graphs), 500, 0.005, rng)
    assert np.mean(np.abs(pred.ravel() - ds.targets())) < 0.05


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = ModelConfig(attr_dim=3, hidden=6, pool=CoPoolConfig(gamma=0.4, mode="no_node_view"), num_classes=3)
    params = init_params(cfg, rng)
    path = save_checkpoint(tmp_path / "m.npz", params, cfg, {"seed": 4})
    loaded, cfg2, extra = load_checkpoint(path)
    assert cfg2 == cfg and extra == {"seed": 4}
    b = batch_graphs([random_graph(rng, 2, 7) for _ in range(3)])
    np.testing.assert_array_equal(classify_forward(b, loaded, cfg2).data, classify_forward(b, params, cfg).data)


def test_checkpoint_layout_mismatch(tmp_path, rng):
    cfg = ModelConfig(attr_dim=3, hidden=6)
    params = init_params(cfg, rng)
    path = save_checkpoint(tmp_path / "m.npz", params, cfg)
    data = dict(np.load(path))
    data.pop("param/lin0.bias")
    np.savez(tmp_path / "bad.npz", **data)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.npz")
