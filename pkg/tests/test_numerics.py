import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pepnet import numerics as nx
from pepnet.numerics import DimensionError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def rand(rng, *shape):
    return rng.normal(size=shape)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    out = nx.matmul(nx.constant([[1.0, 0.0], [0.0, 1.0]]), nx.constant([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.value, [[3, 4], [5, 6]])


def test_matmul_row_by_column():
    out = nx.matmul(nx.constant([[1.0, 2.0]]), nx.constant([[3.0], [4.0]]))
    assert out.value.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(nx.constant(np.zeros((2, 3))), nx.constant(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    arrays_ = {"a": rand(rng, 3, 4), "b": rand(rng, 4, 2)}
    err = nx.gradient_check(lambda p: nx.sum_all(nx.mul(nx.matmul(p["a"], p["b"]),
                                                        nx.constant(rand(np.random.default_rng(1), 3, 2)))),
                            arrays_)
    assert err < 1e-6


# -- relu --------------------------------------------------------------------

def test_relu_values():
    assert nx.relu(nx.constant([-1.0, 0.0, 2.0])).value.tolist() == [0.0, 0.0, 2.0]


def test_relu_all_negative_blocks_gradient():
    x = nx.parameter(np.array([[-1.0, -2.0, -0.5]]))
    nx.backward(nx.sum_all(nx.relu(x)))
    assert not nx.relu(nx.constant(x.value)).value.any()
    assert not x.grad.any()


def test_relu_subgradient_at_zero_is_zero():
    x = nx.parameter(np.zeros((1, 3)))
    nx.backward(nx.sum_all(nx.relu(x)))
    assert not x.grad.any()


def test_relu_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rand(rng, 2, 5)
    x[np.abs(x) < 0.1] += 0.5  # stay away from the kink
    assert nx.gradient_check(lambda p: nx.sum_all(nx.scale(nx.relu(p["x"]), 3.0)), {"x": x}) < 1e-6


# -- sigmoid -----------------------------------------------------------------

def test_sigmoid_at_zero():
    assert nx.sigmoid(nx.constant([0.0])).value[0] == 0.5


def test_sigmoid_saturates_without_overflow():
    with np.errstate(all="raise"):
        v = nx.sigmoid(nx.constant([50.0, -800.0, 800.0])).value
    assert 1 - 1e-15 < v[0] < 1.0
    assert 0.0 < v[1] and v[2] < 1.0


def test_sigmoid_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    assert nx.gradient_check(lambda p: nx.sum_all(nx.sigmoid(p["x"])), {"x": rand(rng, 3, 4)}) < 1e-6


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)))
def test_sigmoid_open_interval(x):
    v = nx.sigmoid(nx.constant(x)).value
    assert np.all((v > 0) & (v < 1))


# -- elementwise mul ---------------------------------------------------------

def test_mul_by_ones_is_identity():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(nx.mul(nx.constant(a), nx.constant(np.ones((2, 3)))).value, a)


def test_mul_values():
    assert nx.elementwise_mul(nx.constant([2.0, 3.0]), nx.constant([4.0, 5.0])).value.tolist() == [8.0, 15.0]


def test_mul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.mul(nx.constant(np.ones((2, 3))), nx.constant(np.ones((3, 2))))


def test_mul_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    err = nx.gradient_check(lambda p: nx.sum_all(nx.mul(p["a"], p["b"])), {"a": rand(rng, 2, 3), "b": rand(rng, 2, 3)})
    assert err < 1e-6


# -- concat / split ------------------------------------------------------------

def test_concat_values():
    assert nx.concat([nx.constant([1.0, 2.0]), nx.constant([3.0])]).value.tolist() == [1.0, 2.0, 3.0]


def test_concat_single_part_unchanged():
    x = nx.constant([[1.0, 2.0]])
    assert nx.concat([x]) is x


def test_concat_errors():
    with pytest.raises(DimensionError):
        nx.concat([])
    with pytest.raises(DimensionError):
        nx.concat([nx.constant(np.ones((2, 2))), nx.constant(np.ones((3, 2)))])


def test_split_values():
    a, b = nx.split(nx.constant([1.0, 2.0, 3.0, 4.0]), [2, 2])
    assert a.value.tolist() == [1.0, 2.0] and b.value.tolist() == [3.0, 4.0]


def test_split_whole_width():
    x = nx.constant([1.0, 2.0, 3.0])
    assert nx.split(x, [3]) == [x]


def test_split_width_mismatch():
    with pytest.raises(DimensionError):
        nx.split(nx.constant([1.0, 2.0, 3.0]), [1, 1])


@settings(max_examples=50)
@given(widths=st.lists(st.integers(1, 5), min_size=1, max_size=5), rows=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_concat_split_round_trip_values_and_gradients(widths, rows, seed):
    rng = np.random.default_rng(seed)
    parts = [nx.parameter(rng.normal(size=(rows, w))) for w in widths]
    back = nx.split(nx.concat(parts), widths)
    for p, q in zip(parts, back):
        assert np.array_equal(p.value, q.value)
    weights = [rng.normal(size=(rows, w)) for w in widths]
    loss = None
    for q, w in zip(back, weights):
        term = nx.sum_all(nx.mul(q, nx.constant(w)))
        loss = term if loss is None else nx.add(loss, term)
    nx.backward(loss)
    for p, w in zip(parts, weights):
        assert np.array_equal(p.grad, w)


@given(arrays(np.float64, (3, 4), elements=finite))
def test_split_concat_round_trip(x):
    assert np.array_equal(nx.concat(nx.split(nx.constant(x), [1, 3])).value, x)


# -- stop gradient --------------------------------------------------------------

def test_stop_gradient_value():
    x = nx.parameter(np.array([[1.5, -2.0]]))
    assert np.array_equal(nx.stop_gradient(x).value, x.value)


def test_stop_gradient_blocks_everything():
    x = nx.parameter(np.array([[1.5, -2.0]]))
    nx.backward(nx.sum_all(nx.stop_gradient(x)))
    assert not x.grad.any()


def test_stop_gradient_product_gives_x_not_2x():
    x = nx.parameter(np.array([[1.5, -2.0, 0.25]]))
    nx.backward(nx.sum_all(nx.mul(x, nx.stop_gradient(x))))
    assert np.array_equal(x.grad, x.value)


# -- bce ----------------------------------------------------------------------

def test_bce_half():
    loss = nx.bce_loss(nx.constant([[0.5]]), [[1]])
    assert math.isclose(float(loss.value), math.log(2), rel_tol=1e-15)


def test_bce_at_label_is_tiny():
    assert float(nx.bce_loss(nx.constant([[1.0, 0.0]]), [[1, 0]]).value) < 1e-10


def test_bce_rejects_soft_labels():
    with pytest.raises(ValueError):
        nx.bce_loss(nx.constant([[0.3]]), [[0.5]])


def test_bce_gradient_formula_and_finite_differences():
    rng = np.random.default_rng(5)
    p = rng.uniform(0.05, 0.95, size=(6, 2))
    y = (rng.random((6, 2)) < 0.5).astype(float)
    leaf = nx.parameter(p)
    nx.backward(nx.bce_loss(leaf, y))
    np.testing.assert_allclose(leaf.grad, (p - y) / (p * (1 - p)) / p.size, rtol=1e-14)
    assert nx.gradient_check(lambda q: nx.bce_loss(q["p"], y), {"p": p}) < 1e-5


@given(arrays(np.float64, (4, 2), elements=st.floats(0, 1)), st.integers(0, 2**16))
def test_bce_nonnegative(p, seed):
    y = (np.random.default_rng(seed).random((4, 2)) < 0.5).astype(float)
    assert float(nx.bce_loss(nx.constant(p), y).value) >= 0.0


# -- backward -------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = nx.parameter(np.arange(6.0).reshape(2, 3))
    nx.backward(nx.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_diamond_accumulates():
    x = nx.parameter(np.array([[1.0, 2.0]]))
    nx.backward(nx.sum_all(nx.scale(nx.add(x, x), 3.0)))
    assert np.array_equal(x.grad, np.full((1, 2), 6.0))


def test_backward_rejects_non_scalar():
    with pytest.raises(DimensionError):
        nx.backward(nx.parameter(np.ones((2, 2))))


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(9)
        w = nx.parameter(rng.normal(size=(4, 3)))
        x = nx.constant(rng.normal(size=(5, 4)))
        nx.backward(nx.sum_all(nx.sigmoid(nx.matmul(x, w))))
        return w.grad.copy()
    assert np.array_equal(run(), run())


def test_grad_starts_at_zero_and_zero_grad_resets():
    x = nx.parameter(np.ones((2, 2)))
    assert x.grad.shape == (2, 2) and not x.grad.any()
    nx.backward(nx.sum_all(x))
    nx.zero_grad([x])
    assert not x.grad.any()


def test_softmax_rows_sum_to_one_and_gradient():
    rng = np.random.default_rng(6)
    x = rand(rng, 4, 3)
    s = nx.softmax(nx.constant(x)).value
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-15)
    w = rand(rng, 4, 3)
    assert nx.gradient_check(lambda p: nx.sum_all(nx.mul(nx.softmax(p["x"]), nx.constant(w))), {"x": x}) < 1e-6


# -- finite_diff_check ----------------------------------------------------------------

def test_finite_diff_linear():
    rng = np.random.default_rng(7)
    c = rand(rng, 3, 2)
    assert nx.gradient_check(lambda p: nx.sum_all(nx.mul(p["w"], nx.constant(c))), {"w": rand(rng, 3, 2)}) < 1e-9


def test_finite_diff_sigmoid_neuron():
    rng = np.random.default_rng(8)
    x = nx.constant(rand(rng, 5, 3))
    err = nx.gradient_check(lambda p: nx.sum_all(nx.sigmoid(nx.linear(x, p["w"], p["b"]))),
                            {"w": rand(rng, 3, 1), "b": rand(rng, 1)})
    assert err < 1e-6


def test_finite_diff_three_layer_gated_net():
    rng = np.random.default_rng(10)
    x = nx.constant(rand(rng, 6, 4))
    y = (rng.random((6, 1)) < 0.5).astype(float)

    def build(p):
        h = nx.relu(nx.linear(x, p["w1"], p["b1"]))
        gate = nx.scale(nx.sigmoid(nx.linear(x, p["g"], p["gb"])), 2.0)
        h = nx.relu(nx.linear(nx.mul(h, gate), p["w2"], p["b2"]))
        return nx.bce_loss(nx.sigmoid(nx.linear(h, p["w3"], p["b3"])), y)

    arrays_ = {"w1": rand(rng, 4, 5), "b1": rand(rng, 5) * 0.1, "g": rand(rng, 4, 5), "gb": rand(rng, 5),
               "w2": rand(rng, 5, 3), "b2": rand(rng, 3) * 0.1, "w3": rand(rng, 3, 1), "b3": rand(rng, 1)}
    assert nx.gradient_check(build, arrays_) < 1e-4


def test_finite_diff_raises_on_non_finite():
    arr = np.array([1.0])
    with pytest.raises(FloatingPointError):
        nx.finite_diff_check(lambda: nx.constant(np.array(np.inf)), [arr], [np.zeros(1)])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_composed_graph_gradients_for_random_seeds(seed):
    rng = np.random.default_rng(seed)
    x = nx.constant(rand(rng, 4, 3))
    y = (rng.random((4, 2)) < 0.5).astype(float)

    def build(p):
        h = nx.relu(nx.linear(x, p["w"], p["b"]))
        parts = nx.split(nx.concat([h, nx.scale(h, -0.5)]), [4, 4])
        z = nx.mul(parts[0], nx.sigmoid(parts[1]))
        return nx.bce_loss(nx.sigmoid(nx.linear(z, p["v"], p["c"])), y)

    arrays_ = {"w": rand(rng, 3, 4), "b": rand(rng, 4) * 0.1, "v": rand(rng, 4, 2), "c": rand(rng, 2)}
    assert nx.gradient_check(build, arrays_) <= 1e-4
