import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from copool import tensor as T
from copool.tensor import Tensor


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def projected(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar loss sum(out * R) for a fixed random R, so every output entry matters."""
    R = np.random.default_rng(seed).normal(size=out.shape)
    return T.total(T.mul(out, Tensor(R)))


def op_cases(rng):
    """(name, builder, leaves) for every differentiable op."""
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    c, d = leaf(rng, 3, 4), leaf(rng, 3, 4)
    s = leaf(rng, 1, 1)
    col = leaf(rng, 3, 1)
    row = leaf(rng, 1, 4)
    pos = leaf(rng, 3, 2, low=0.5, high=2.0)
    away = Tensor(np.array([[0.7, -0.4], [-1.3, 0.9], [0.2, -0.6]]), requires_grad=True)
    distinct = Tensor(rng.permutation(12).reshape(4, 3) * 0.1, requires_grad=True)
    logits = leaf(rng, 4, 3)
    op = sp.random(5, 3, density=0.6, random_state=3, format="csr")
    spin = leaf(rng, 3, 2)
    offs = [0, 1, 4]
    return [
        ("matmul", lambda: projected(a @ b), [a, b]),
        ("add", lambda: projected(c + d), [c, d]),
        ("sub", lambda: projected(c - d), [c, d]),
        ("scale", lambda: projected(T.scale(c, 2.5)), [c]),
        ("scale_tensor", lambda: projected(T.scale(c, s)), [c, s]),
        ("mul", lambda: projected(T.mul(c, d)), [c, d]),
        ("transpose", lambda: projected(c.T), [c]),
        ("concat_cols", lambda: projected(T.concat_cols([c, col])), [c, col]),
        ("row_select", lambda: projected(T.row_select(c, [2, 0, 2])), [c]),
        ("scatter_add", lambda: projected(T.scatter_add(c, [1, 1, 0], 2)), [c]),
        ("row_scale", lambda: projected(T.row_scale(c, col)), [c, col]),
        ("add_row", lambda: projected(T.add_row(c, row)), [c, row]),
        ("sigmoid", lambda: projected(T.sigmoid(c)), [c]),
        ("relu", lambda: projected(T.relu(away)), [away]),
        ("power", lambda: projected(T.power(pos, -0.5)), [pos]),
        ("row_sum", lambda: projected(T.row_sum(c)), [c]),
        ("col_sum", lambda: projected(T.col_sum(c)), [c]),
        ("total", lambda: T.total(T.mul(c, c)), [c]),
        ("mean_rows", lambda: projected(T.mean_rows(c)), [c]),
        ("max_rows", lambda: projected(T.max_rows(distinct)), [distinct]),
        ("segment_mean", lambda: projected(T.segment_mean(distinct, offs)), [distinct]),
        ("segment_max", lambda: projected(T.segment_max(distinct, offs)), [distinct]),
        ("dropout", lambda: projected(T.dropout(c, 0.4, np.random.default_rng(5))), [c]),
        ("log_softmax", lambda: projected(T.log_softmax(logits)), [logits]),
        ("nll", lambda: T.nll(T.log_softmax(logits), [0, 2, 1, 1]), [logits]),
        ("mae", lambda: T.mae(c, np.zeros((3, 4)) + 0.05), [c]),
        ("spmm", lambda: projected(T.spmm(op, spin)), [spin]),
    ]


def test_every_op_kind_has_a_grad_case(rng):
    covered = {name.split("_tensor")[0] for name, _, _ in op_cases(rng)}
    assert set(T.op_kinds()) <= covered


@pytest.mark.parametrize("idx", range(27))
def test_grad_check_per_op(idx):
    name, builder, leaves = op_cases(np.random.default_rng(idx))[idx]
    err = T.grad_check(builder, leaves, step=1e-5)
    assert err < 1e-6, name


def test_identity_matmul(rng):
    M = rng.normal(size=(3, 5))
    out = T.forward_op("matmul", Tensor(np.eye(3)), Tensor(M))
    np.testing.assert_array_equal(out.data, M)


def test_sigmoid_of_zero():
    out = T.forward_op("sigmoid", Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.data, np.full((2, 3), 0.5))


def test_row_select_gathers():
    out = T.forward_op("row_select", Tensor([[1, 2], [3, 4], [5, 6]]), indices=[2, 0])
    np.testing.assert_array_equal(out.data, [[5, 6], [1, 2]])


def test_unknown_op_kind():
    with pytest.raises(ValueError):
        T.forward_op("conv2d", Tensor([[1.0]]))


def test_linear_map_gradient():
    W = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    T.backward(T.total(T.scale(W, 2.0)))
    np.testing.assert_array_equal(W.grad, np.full((2, 2), 2.0))


def test_sigmoid_gradient_at_zero():
    W = Tensor(np.zeros((2, 3)), requires_grad=True)
    T.backward(T.total(T.sigmoid(W)))
    np.testing.assert_allclose(W.grad, 0.25)


def test_product_gradient_matches_finite_differences(rng):
    A, B = leaf(rng, 3, 4), leaf(rng, 4, 2)
    T.backward(T.total(A @ B))
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.data.T)
    numeric = np.zeros_like(A.data)
    h = 1e-5
    for idx in np.ndindex(*A.shape):
        orig = A.data[idx]
        A.data[idx] = orig + h
        plus = (A.data @ B.data).sum()
        A.data[idx] = orig - h
        minus = (A.data @ B.data).sum()
        A.data[idx] = orig
        numeric[idx] = (plus - minus) / (2 * h)
    np.testing.assert_allclose(A.grad, numeric, atol=1e-8)


def test_grad_check_exact_for_linear_loss(rng):
    W = leaf(rng, 3, 3)
    C = Tensor(rng.normal(size=(3, 3)))
    # below ~1e-5 the float64 roundoff of the difference quotient alone exceeds 1e-10
    for step in (1.0, 1e-1, 1e-2, 1e-3, 1e-4):
        assert T.grad_check(lambda: T.total(T.mul(W, C)), [W], step) <= 1e-10


def test_grad_check_relu_away_from_kink(rng):
    W = leaf(rng, 4, 3, low=0.1, high=2.0)
    assert T.grad_check(lambda: projected(T.relu(W)), [W], 1e-5) < 1e-7


def test_relu_subgradient_at_zero_is_zero():
    W = Tensor(np.zeros((1, 2)), requires_grad=True)
    T.backward(T.total(T.relu(W)))
    np.testing.assert_array_equal(W.grad, [[0.0, 0.0]])


def test_grad_check_rejects_nondeterministic_builder(rng):
    W = leaf(rng, 2, 2)
    gen = np.random.default_rng(0)
    with pytest.raises(T.GradCheckError):
        T.grad_check(lambda: T.total(T.dropout(W, 0.5, gen)), [W], 1e-5)


def test_gradients_accumulate_and_unreached_leaves_get_zero(rng):
    a, b, unused = leaf(rng, 2, 2), leaf(rng, 2, 2), leaf(rng, 2, 2)
    T.scale(unused, 3.0)  # on the tape but disconnected from the loss
    T.backward(T.total(a + b))
    T.backward(T.total(T.scale(a, 2.0)))
    np.testing.assert_array_equal(a.grad, np.full((2, 2), 3.0))
    np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))


def test_shared_subexpression_sums_paths(rng):
    x = leaf(rng, 2, 3)
    y = T.sigmoid(x)
    T.backward(T.total(y + y))
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, 2 * s * (1 - s))


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 2, 2)
    with T.no_grad():
        y = T.sigmoid(x)
    assert y.is_leaf and not y.requires_grad
    assert not T.current_tape().nodes


def test_backward_needs_scalar(rng):
    with pytest.raises(T.ShapeError):
        T.backward(leaf(rng, 2, 2) + leaf(rng, 2, 2))


@pytest.mark.parametrize(
    "build",
    [
        lambda: Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3))),
        lambda: Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2))),
        lambda: T.row_select(Tensor(np.ones((2, 3))), [5]),
        lambda: T.nll(Tensor(np.zeros((2, 2))), [0]),
        lambda: Tensor(np.ones((2, 2, 2))),
    ],
)
def test_shape_and_index_errors(build):
    with pytest.raises((T.ShapeError, IndexError)):
        build()


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid(Tensor([[-1000.0, 1000.0]]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [[0.0, 1.0]])


def test_dropout_scaling_and_identity(rng):
    x = Tensor(np.ones((200, 50)))
    y = T.dropout(x, 0.5, np.random.default_rng(0))
    assert set(np.unique(y.data)) <= {0.0, 2.0}
    assert abs(y.data.mean() - 1.0) < 0.05
    assert T.dropout(x, 0.0, rng) is x


def test_segment_reductions():
    x = Tensor([[0.0, 2.0], [4.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(T.segment_mean(x, [0, 2, 3]).data, [[2.0, 1.0], [1.0, 1.0]])
    np.testing.assert_allclose(T.segment_max(x, [0, 2, 3]).data, [[4.0, 2.0], [1.0, 1.0]])


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-3, 3)),
    st.integers(1, 3),
    st.integers(0, 2**31),
)
def test_matmul_chain_gradients_property(x, k, seed):
    gen = np.random.default_rng(seed)
    A = Tensor(x, requires_grad=True)
    B = Tensor(gen.normal(size=(x.shape[1], k)), requires_grad=True)
    assert T.grad_check(lambda: projected(T.sigmoid(A @ B)), [A, B], 1e-5) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=10), st.integers(0, 2**31))
def test_row_select_scatter_adjoint_property(idx, seed):
    """<row_select(X, idx), Y> == <X, scatter_add(Y, idx)>."""
    gen = np.random.default_rng(seed)
    X = gen.normal(size=(5, 3))
    Y = gen.normal(size=(len(idx), 3))
    lhs = np.sum(T.row_select(Tensor(X), idx).data * Y)
    rhs = np.sum(X * T.scatter_add(Tensor(Y), idx, 5).data)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)
