import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pepnet import numerics as nx
from pepnet.gates import (EpNetParams, GateNUParams, epnet_forward, gate_nu_forward, ppnet_layer_forward)
from pepnet.numerics import DimensionError


def zero_gate(in_dim, out_dim, gamma=2.0, hidden=None):
    h = hidden or out_dim
    return GateNUParams(np.zeros((in_dim, h)), np.zeros(h), np.zeros((h, out_dim)), np.zeros(out_dim), gamma)


def random_gate(rng, in_dim, out_dim, gamma=2.0, hidden=5):
    return GateNUParams(rng.normal(size=(in_dim, hidden)), rng.normal(size=hidden),
                        rng.normal(size=(hidden, out_dim)), rng.normal(size=out_dim), gamma)


def test_zero_gate_outputs_one_for_default_gamma():
    x = nx.constant(np.random.default_rng(0).normal(size=(4, 3)))
    assert np.array_equal(gate_nu_forward(zero_gate(3, 5), x).value, np.ones((4, 5)))


def test_zero_gate_outputs_half_for_gamma_one():
    x = nx.constant(np.ones((2, 3)))
    assert np.array_equal(gate_nu_forward(zero_gate(3, 2, gamma=1.0), x).value, np.full((2, 2), 0.5))


def test_gate_matches_hand_composition():
    rng = np.random.default_rng(1)
    g = random_gate(rng, 4, 3)
    x = rng.normal(size=(6, 4))
    hand = g.gamma / (1 + np.exp(-(np.maximum(x @ g.W + g.b, 0) @ g.W2 + g.b2)))
    np.testing.assert_allclose(gate_nu_forward(g, nx.constant(x)).value, hand, rtol=0, atol=1e-15)


def test_gate_width_mismatch():
    with pytest.raises(DimensionError):
        gate_nu_forward(zero_gate(3, 2), nx.constant(np.ones((1, 4))))


def test_gamma_must_be_positive():
    with pytest.raises(ValueError):
        GateNUParams.init(np.random.default_rng(0), 3, 2, gamma=0.0)


def test_init_has_zero_second_layer_and_xavier_first():
    g = GateNUParams.init(np.random.default_rng(0), 10, 6)
    assert not g.W2.any() and not g.b2.any()
    assert g.W.shape == (10, 6) and np.abs(g.W).max() <= np.sqrt(6 / 16)
    assert g.gamma == 2.0


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), gamma=st.floats(0.1, 8.0), scale=st.floats(0.1, 30.0))
def test_gate_strictly_inside_zero_gamma(seed, gamma, scale):
    rng = np.random.default_rng(seed)
    g = random_gate(rng, 4, 6, gamma=gamma)
    v = gate_nu_forward(g, nx.constant(scale * rng.normal(size=(8, 4)))).value
    assert np.all(v > 0) and np.all(v < gamma)


@settings(max_examples=50)
@given(seed=st.integers(0, 2**31 - 1), c=st.sampled_from([0.5, 2.0, 4.0, 8.0]))
def test_gamma_scaling_is_exact(seed, c):
    # powers of two keep the product exact in floating point
    rng = np.random.default_rng(seed)
    g = random_gate(rng, 3, 4, gamma=1.0)
    x = nx.constant(rng.normal(size=(5, 3)))
    scaled = GateNUParams(g.W, g.b, g.W2, g.b2, gamma=c)
    assert np.array_equal(gate_nu_forward(scaled, x).value, c * gate_nu_forward(g, x).value)


# -- EPNet ---------------------------------------------------------------------

def test_epnet_neutral_gate_returns_embedding():
    rng = np.random.default_rng(2)
    E = nx.constant(rng.normal(size=(3, 6)))
    dom = nx.constant(rng.normal(size=(3, 2)))
    delta, O = epnet_forward(EpNetParams(zero_gate(8, 6)), dom, E)
    assert np.array_equal(O.value, E.value) and np.array_equal(delta.value, np.ones((3, 6)))


def test_epnet_gate_input_carries_no_gradient_to_embedding():
    rng = np.random.default_rng(3)
    E = nx.parameter(rng.normal(size=(3, 6)))
    delta, _ = epnet_forward(EpNetParams(random_gate(rng, 8, 6)), nx.constant(rng.normal(size=(3, 2))), E)
    nx.backward(nx.sum_all(delta))
    assert not E.grad.any()


def test_epnet_embedding_gradient_is_delta_times_upstream():
    rng = np.random.default_rng(4)
    gate = random_gate(rng, 8, 6)
    dom = nx.constant(rng.normal(size=(3, 2)))
    E0 = rng.normal(size=(3, 6))
    w = rng.normal(size=(3, 6))
    E = nx.parameter(E0.copy())
    delta, O = epnet_forward(EpNetParams(gate), dom, E)
    nx.backward(nx.sum_all(nx.mul(O, nx.constant(w))))
    np.testing.assert_array_equal(E.grad, delta.value * w)
    # finite differences on the O_ep path alone, with delta held at its value
    step, num = 1e-6, np.zeros_like(E0)
    for i in np.ndindex(E0.shape):
        for sgn in (1, -1):
            Ep = E0.copy()
            Ep[i] += sgn * step
            num[i] += sgn * float((delta.value * Ep * w).sum())
    np.testing.assert_allclose(E.grad, num / (2 * step), rtol=1e-6, atol=1e-8)


def test_epnet_vector_wise_broadcasts_per_field():
    rng = np.random.default_rng(5)
    p = EpNetParams(random_gate(rng, 6 + 2, 3), field_widths=[2, 2, 2])
    delta, _ = epnet_forward(p, nx.constant(rng.normal(size=(4, 2))), nx.constant(rng.normal(size=(4, 6))))
    d = delta.value
    assert np.array_equal(d[:, 0], d[:, 1]) and np.array_equal(d[:, 2], d[:, 3]) and np.array_equal(d[:, 4], d[:, 5])


def test_epnet_width_mismatch():
    with pytest.raises(DimensionError):
        epnet_forward(EpNetParams(zero_gate(8, 5)), nx.constant(np.ones((1, 2))), nx.constant(np.ones((1, 6))))


# -- PPNet ---------------------------------------------------------------------

def test_ppnet_neutral_gate_keeps_hidden_units():
    rng = np.random.default_rng(6)
    H = [nx.constant(rng.normal(size=(2, 3))) for _ in range(4)]
    out = ppnet_layer_forward(zero_gate(5 + 6, 12), nx.constant(rng.normal(size=(2, 5))),
                              nx.constant(rng.normal(size=(2, 6))), H)
    for h, o in zip(H, out):
        assert np.array_equal(h.value, o.value)


def test_ppnet_single_task_is_elementwise_gate():
    rng = np.random.default_rng(7)
    g = random_gate(rng, 4 + 3, 5)
    prior, O_ep = nx.constant(rng.normal(size=(2, 4))), nx.constant(rng.normal(size=(2, 3)))
    H = nx.constant(rng.normal(size=(2, 5)))
    (out,) = ppnet_layer_forward(g, prior, O_ep, [H])
    expected = gate_nu_forward(g, nx.concat([prior, O_ep])).value * H.value
    assert np.array_equal(out.value, expected)


def test_ppnet_chunk_assignment():
    # T=2, h=3: gate output index 4 belongs to task 2, hidden unit 1
    rng = np.random.default_rng(8)
    g = random_gate(rng, 4, 6)
    prior, O_ep = nx.constant(rng.normal(size=(1, 2))), nx.constant(rng.normal(size=(1, 2)))
    H = [nx.constant(rng.normal(size=(1, 3))) for _ in range(2)]
    base = [o.value.copy() for o in ppnet_layer_forward(g, prior, O_ep, H)]
    g.b2[4] += 1.0
    moved = [o.value for o in ppnet_layer_forward(g, prior, O_ep, H)]
    changed = [np.flatnonzero(b != m).tolist() for b, m in zip(base, moved)]
    assert changed == [[], [1]]


def test_ppnet_gate_input_carries_no_gradient_to_o_ep():
    rng = np.random.default_rng(9)
    O_ep = nx.parameter(rng.normal(size=(2, 3)))
    H = [nx.constant(rng.normal(size=(2, 2))) for _ in range(2)]
    out = ppnet_layer_forward(random_gate(rng, 4 + 3, 4), nx.constant(rng.normal(size=(2, 4))), O_ep, H)
    nx.backward(nx.sum_all(nx.concat(out)))
    assert not O_ep.grad.any()


def test_ppnet_errors():
    g = zero_gate(4, 6)
    prior, O_ep = nx.constant(np.ones((1, 2))), nx.constant(np.ones((1, 2)))
    with pytest.raises(DimensionError):
        ppnet_layer_forward(g, prior, O_ep, [nx.constant(np.ones((1, 3)))] * 3)  # wrong tower count
    with pytest.raises(DimensionError):
        ppnet_layer_forward(g, prior, O_ep, [nx.constant(np.ones((1, 3))), nx.constant(np.ones((1, 2)))])
    with pytest.raises(DimensionError):
        ppnet_layer_forward(g, prior, O_ep, [])


def test_backprop_input_mode_lets_gradient_through():
    rng = np.random.default_rng(10)
    E = nx.parameter(rng.normal(size=(3, 6)))
    delta, _ = epnet_forward(EpNetParams(random_gate(rng, 8, 6)), nx.constant(rng.normal(size=(3, 2))), E,
                             input_mode="backprop")
    nx.backward(nx.sum_all(delta))
    assert E.grad.any()


def test_none_input_mode_uses_prior_only():
    rng = np.random.default_rng(11)
    g = random_gate(rng, 2, 6)
    dom = nx.constant(rng.normal(size=(3, 2)))
    delta, _ = epnet_forward(EpNetParams(g), dom, nx.constant(rng.normal(size=(3, 6))), input_mode="none")
    assert np.array_equal(delta.value, gate_nu_forward(g, dom).value)
