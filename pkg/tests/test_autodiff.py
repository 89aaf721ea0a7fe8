import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from threem import autodiff as ad
from threem.autodiff import Tensor
from threem.errors import ContractError, DimensionError, NumericError, ParameterError
from threem.gradcheck import OP_TOLERANCE, check_ops

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def numeric_grad(f, x, eps=1e-6):
    """Central differences of a numpy function, coordinate by coordinate."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + eps
        fp = f(x)
        x[i] = orig - eps
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g


@pytest.mark.parametrize("result", check_ops(seed=3), ids=lambda r: r.name)
def test_each_op_matches_finite_differences(result):
    assert result.error < OP_TOLERANCE


def test_matmul_grad_against_numpy_oracle(rng):
    a_np, b_np = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a, b = Tensor(a_np.copy(), requires_grad=True), Tensor(b_np, requires_grad=True)
    ad.backward(ad.sum(ad.tanh(a @ b)))
    expected = numeric_grad(lambda x: np.tanh(x @ b_np).sum(), a_np.copy())
    np.testing.assert_allclose(a.grad, expected, rtol=1e-6, atol=1e-8)


def test_grad_accumulates_over_fan_out():
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    ad.backward(ad.sum(x * x + x * 3.0))
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_backward_twice_accumulates_into_leaves():
    x = Tensor(np.array([2.0]), requires_grad=True)
    ad.backward(ad.sum(x * 4.0))
    ad.backward(ad.sum(x * 4.0))
    assert x.grad[0] == 8.0


def test_broadcast_add_unbroadcasts_gradient():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    ad.backward(ad.sum(a + b))
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_incompatible_shapes_raise_dimension_error():
    with pytest.raises(DimensionError):
        Tensor(np.ones((3, 4))) + Tensor(np.ones((3, 5)))
    with pytest.raises(DimensionError):
        Tensor(np.ones((3, 4))) @ Tensor(np.ones((3, 4)))


def test_backward_needs_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_scalar_does_not_upcast_float32():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 0.5).dtype == np.float32
    assert (x + 1).dtype == np.float32


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert (p >= 0).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_log_softmax_agrees_with_log_of_softmax(x):
    np.testing.assert_allclose(ad.log_softmax(Tensor(x)).data, np.log(ad.softmax(Tensor(x)).data), atol=1e-12)


def test_log_softmax_is_stable_for_large_logits():
    out = ad.log_softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]]))).data
    assert np.isfinite(out[0, :2]).all()
    assert out[0, 0] == 0.0


def test_masked_softmax_zeroes_padding():
    mask = np.array([[True, False, True]])
    p = ad.softmax(Tensor(np.array([[0.0, 50.0, 0.0]])), mask=mask).data
    np.testing.assert_allclose(p, [[0.5, 0.0, 0.5]])


def test_dropout_is_identity_in_eval_and_scaled_in_training():
    x = Tensor(np.ones(1000))
    assert ad.dropout(x, 0.5, training=False) is x
    y = ad.dropout(x, 0.5, training=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    with pytest.raises(ParameterError):
        ad.dropout(x, 1.0, training=True)


def test_index_select_accumulates_repeated_rows():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    ad.backward(ad.sum(table[np.array([1, 1, 3])]))
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_no_grad_builds_no_graph_and_is_thread_local():
    x = Tensor(np.ones(2), requires_grad=True)
    seen = {}

    def other():
        seen["y"] = (x * 2.0).requires_grad

    with ad.no_grad():
        y = x * 2.0
        t = threading.Thread(target=other)
        t.start()
        t.join()
    assert not y.requires_grad and y.parents == ()
    assert seen["y"]


def test_trace_is_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.tanh(x)
    z = ad.sum(y * x)
    order = ad.ComputationRecord.trace(z).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_deep_graph_does_not_hit_recursion_limit():
    x = Tensor(np.array([0.1]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    ad.backward(ad.sum(y))
    assert x.grad[0] == 1.0


def test_grad_check_detects_corrupted_rule(monkeypatch):
    x = Tensor(np.random.default_rng(0).normal(size=5), requires_grad=True)
    f = lambda: ad.sum(ad.tanh(x))  # noqa: E731
    assert ad.grad_check(f, [x]) < 1e-8
    good = ad.BACKWARD_RULES["tanh"]
    monkeypatch.setitem(ad.BACKWARD_RULES, "tanh", lambda g, node: [1.1 * r for r in good(g, node)])
    assert ad.grad_check(f, [x]) > 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_validates_eps_and_finiteness():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ParameterError):
        ad.grad_check(lambda: ad.sum(x), [x], eps=1e-2)
    with pytest.raises(NumericError):
        ad.grad_check(lambda: ad.sum(ad.log(x - 1.0)), [x])
