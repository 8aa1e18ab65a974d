import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from improv import numerics as nx
from improv.gradcheck import check_function
from improv.numerics import ContractError, DimensionError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_matmul_identity_and_hand_product():
    with nx.precision(np.float64):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(nx.matmul(Tensor(np.eye(2)), a).data, a.data)
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(nx.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        nx.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))
    assert "(3, 4)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_matmul_backward_closed_form():
    rng = np.random.default_rng(0)
    with nx.precision(np.float64):
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
        nx.backward(nx.tsum(nx.matmul(a, b)))
        g = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)


def test_matmul_finite_difference():
    rng = np.random.default_rng(1)
    err = check_function(lambda t: nx.matmul(t[0], t[1]),
                         [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], rng)
    assert err < 1e-6


def test_softmax_examples():
    with nx.precision(np.float64):
        np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(nx.softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e4, 1e4)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    with nx.precision(np.float64):
        p = nx.softmax(Tensor(x)).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(nx.softmax(Tensor(x + c)).data, p, atol=1e-9)


def test_softmax_mask_excludes_keys_and_full_mask_gives_zeros():
    x = Tensor(np.zeros((2, 3)))
    mask = np.array([[True, False, True], [False, False, False]])
    p = nx.softmax(x, mask=mask).data
    np.testing.assert_allclose(p[0], [0.5, 0.0, 0.5])
    assert np.all(p[1] == 0)


def test_cross_entropy_uniform_and_saturated():
    with nx.precision(np.float64):
        loss = nx.cross_entropy_logits(Tensor(np.zeros((4, 216))), np.array([0, 5, 100, 215]))
        assert abs(float(loss.data) - math.log(216)) < 1e-12
        assert abs(math.log(216) - 5.3753) < 1e-4
        logits = np.zeros((3, 10))
        t = np.array([1, 4, 9])
        logits[np.arange(3), t] = 50.0
        assert float(nx.cross_entropy_logits(Tensor(logits), t).data) < 1e-6


def test_cross_entropy_gradient_closed_form():
    rng = np.random.default_rng(2)
    with nx.precision(np.float64):
        x = leaf(rng.standard_normal((5, 7)))
        t = rng.integers(0, 7, size=5)
        nx.backward(nx.cross_entropy_logits(x, t))
        p = np.exp(x.data - x.data.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(5), t] -= 1
        np.testing.assert_allclose(x.grad, p / 5, rtol=1e-6)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        nx.cross_entropy_logits(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_backward_square_and_accumulation():
    with nx.precision(np.float64):
        x = leaf([1.0, -2.0, 3.0])
        nx.backward(nx.tsum(x * x))
        np.testing.assert_allclose(x.grad, 2 * x.data)
        nx.backward(nx.tsum(x * x))
        np.testing.assert_allclose(x.grad, 4 * x.data)


def test_backward_fan_out_accumulates():
    with nx.precision(np.float64):
        x = leaf([2.0])
        y = x * x + x * 3.0 + x
        nx.backward(nx.tsum(y))
        np.testing.assert_allclose(x.grad, [2 * 2.0 + 3.0 + 1.0])


def test_disconnected_parameter_grad_stays_empty():
    x, w = leaf([1.0]), leaf([5.0])
    nx.backward(nx.tsum(x * 2.0))
    assert w.grad is None or np.all(w.grad == 0)


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        nx.backward(x * 2.0)


def test_tape_visits_each_node_once_in_topological_order():
    x = leaf([1.0])
    a = x * 2.0
    b = a + a
    c = b * a
    order = nx.Tape(nx.tsum(c)).nodes
    assert len(order) == len({id(n) for n in order})
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_layer_norm_constant_vector_and_gelu_zero():
    with nx.precision(np.float64):
        out = nx.layer_norm(Tensor(np.full((2, 6), 3.5)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
        assert np.all(out.data == 0)
        assert float(nx.gelu(Tensor([0.0])).data[0]) == 0.0


def test_layer_norm_normalises_last_axis():
    rng = np.random.default_rng(3)
    with nx.precision(np.float64):
        out = nx.layer_norm(Tensor(rng.standard_normal((4, 16)) * 5 + 2), Tensor(np.ones(16)),
                            Tensor(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-3)


def test_layer_norm_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_embedding_gradient_flows_to_table():
    with nx.precision(np.float64):
        table = leaf(np.arange(12.0).reshape(4, 3))
        out = nx.embedding(table, np.array([[1, 1, 3]]))
        np.testing.assert_array_equal(out.data[0, 0], table.data[1])
        nx.backward(nx.tsum(out))
        np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 1])
    with pytest.raises(IndexError):
        nx.embedding(table, np.array([4]))


def test_add_broadcast_gradient_shapes():
    with nx.precision(np.float64):
        a, b = leaf(np.ones((2, 3, 4))), leaf(np.ones(4))
        nx.backward(nx.tsum(a + b))
        assert a.grad.shape == a.shape and b.grad.shape == b.shape
        np.testing.assert_array_equal(b.grad, np.full(4, 6.0))


def test_gated_residual_exact_identity_where_gate_closed():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
    y = Tensor(np.full((2, 3, 4), 0.1))
    out = nx.gated_residual(x, y, np.array([True, False])[:, None, None])
    assert np.array_equal(out.data[1], x.data[1])
    np.testing.assert_allclose(out.data[0], x.data[0] + 0.1, rtol=1e-6)


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(7)
        with nx.precision(np.float64):
            w = leaf(rng.standard_normal((5, 3)))
            x = Tensor(rng.standard_normal((4, 5)))
            nx.backward(nx.tmean(nx.gelu(nx.matmul(x, w))))
            return w.grad.copy()
    assert np.array_equal(run(), run())


def test_precision_switch_restores_default():
    assert nx.get_dtype() == np.float32
    with nx.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with nx.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()
