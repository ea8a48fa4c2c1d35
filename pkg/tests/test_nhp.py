import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from hyperhawkes import diffgraph as dg, nhp
from hyperhawkes.nhp import HazardNetWeights, RnnWeights, Topology

from conftest import make_seq

LN2 = math.log(2.0)


def random_weights(rng, topo, scale=1.0, tau_scale=1.0):
    w_r = RnnWeights.from_flat(topo, scale * rng.normal(size=topo.rnn_size), tau_scale)
    w_t = HazardNetWeights(topo, scale * rng.normal(size=topo.hazard_size), tau_scale)
    return w_r, w_t


def test_rnn_step_zero_weights():
    w = RnnWeights(np.zeros((1, 4)), np.zeros((4, 4)), np.zeros(4))
    np.testing.assert_array_equal(nhp.rnn_step(0.7, np.ones(4) * 0.3, w), np.zeros(4))


def test_rnn_step_input_independent():
    b = np.array([0.3, -1.2, 2.0])
    w = RnnWeights(np.zeros((1, 3)), np.zeros((3, 3)), b)
    for tau in (0.0, 0.4, 9.0):
        np.testing.assert_array_equal(nhp.rnn_step(tau, np.array([0.1, 0.2, -0.5]), w), np.tanh(b))


def test_rnn_step_matches_formula(rng):
    V, U, b = rng.normal(size=3), rng.normal(size=(3, 3)), rng.normal(size=3)
    h = np.tanh(rng.normal(size=3))
    w = RnnWeights(V[None], U, b)
    expected = [math.tanh(0.37 * V[k] + sum(h[i] * U[i, k] for i in range(3)) + b[k]) for k in range(3)]
    np.testing.assert_allclose(nhp.rnn_step(0.37, h, w), expected, rtol=0, atol=1e-12)


def test_rnn_step_rejects_bad_input():
    w = RnnWeights(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        nhp.rnn_step(-0.1, np.zeros(2), w)
    with pytest.raises(ValueError):
        nhp.rnn_step(0.1, np.array([np.nan, 0.0]), w)


def test_encode_history_folds(rng):
    topo = Topology(hidden=4, layers=(3,))
    w_r, _ = random_weights(rng, topo)
    seq = make_seq([0.0, 0.1, 0.25, 0.3, 0.6])
    np.testing.assert_array_equal(nhp.encode_history(seq, 0, w_r, 3), np.zeros(4))
    np.testing.assert_array_equal(nhp.encode_history(seq, 1, w_r, 1), nhp.rnn_step(0.1, np.zeros(4), w_r))
    h = np.zeros(4)
    for tau in (0.15, 0.05, 0.3):
        h = nhp.rnn_step(tau, h, w_r)
    np.testing.assert_allclose(nhp.encode_history(seq, 4, w_r, 3), h, rtol=0, atol=1e-15)


def test_single_layer_closed_form():
    topo = Topology(hidden=1, layers=(), activation="softplus")
    c = 0.3
    w = HazardNetWeights(topo, np.array([-1000.0, nhp.inverse_softplus(2.0), c]))
    tau = np.linspace(0, 3, 7)
    np.testing.assert_allclose(nhp.hazard(tau, [0.5], w), 2 * nhp.sigmoid(c + 2 * tau), rtol=1e-14)
    np.testing.assert_allclose(nhp.network_output(tau, [0.5], w), nhp.softplus(c + 2 * tau), rtol=1e-14)


@pytest.mark.parametrize("activation", ["softplus", "tanh"])
def test_hazard_matches_finite_differences(rng, activation):
    topo = Topology(hidden=5, layers=(6, 4), activation=activation)
    for _ in range(50):
        _, w_t = random_weights(rng, topo)
        h = np.tanh(rng.normal(size=5))
        tau = rng.uniform(0.05, 3.0)
        step = 1e-5 * max(1.0, tau)
        fd = (nhp.network_output(tau + step, h, w_t) - nhp.network_output(tau - step, h, w_t)) / (2 * step)
        assert nhp.hazard(tau, h, w_t) == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_hazard_positive_and_phi_increasing(rng):
    topo = Topology(hidden=4, layers=(5, 5), activation="tanh")
    for _ in range(1000):
        _, w_t = random_weights(rng, topo, scale=2.0)
        h = np.tanh(rng.normal(size=4))
        t1, t2 = np.sort(rng.uniform(0, 5, 2))
        assert nhp.hazard(t1, h, w_t) > 0
        assert nhp.network_output(t1, h, w_t) < nhp.network_output(t2, h, w_t)
        assert nhp.network_output(t1, h, w_t) > 0


def test_tanh_hazard_positive_far_into_saturation(rng):
    # gaps much longer than the training scale push tanh units to |z| >> 19
    topo = Topology(hidden=4, layers=(5, 5), activation="tanh")
    _, w_t = random_weights(rng, topo)
    h = np.tanh(rng.normal(size=4))
    for tau in (50.0, 200.0):
        lam = nhp.hazard(tau, h, w_t)
        assert lam > 0 and math.isfinite(math.log(lam))


def test_phi_is_integral_of_hazard(rng):
    topo = Topology(hidden=3, layers=(4, 4), activation="tanh")
    _, w_t = random_weights(rng, topo)
    h = np.tanh(rng.normal(size=3))
    assert nhp.cumulative_hazard(0.0, h, w_t) == 0.0
    for tau in np.linspace(0.01, 2.0, 100):
        area, _ = integrate.quad(lambda s: nhp.hazard(s, h, w_t), 0.0, tau, epsabs=1e-12, epsrel=1e-12)
        assert nhp.cumulative_hazard(tau, h, w_t) == pytest.approx(area, abs=1e-6)


@pytest.mark.parametrize("activation, extra", [("softplus", 0), ("tanh", 0), ("tanh", 2)])
def test_hazard_graph_agrees_with_vectorized_engine(rng, activation, extra):
    topo = Topology(hidden=3, layers=(4, 3), activation=activation, extra=extra)
    _, w_t = random_weights(rng, topo, tau_scale=1.7)
    w_t = HazardNetWeights(topo, w_t.raw, 1.7)
    h = np.tanh(rng.normal(size=3))
    side = rng.normal(size=extra) if extra else None
    tau = 0.42
    g, tau_node, phi = nhp.hazard_graph(w_t, h, tau, side)
    lam = dg.build_tau_derivative(g, tau_node, phi)
    assert phi.value == pytest.approx(nhp.network_output(tau, h, w_t, side), rel=1e-13)
    assert lam.value == pytest.approx(nhp.hazard(tau, h, w_t, side), rel=1e-12)


@pytest.mark.parametrize("activation", ["softplus", "tanh"])
def test_reverse_pass_matches_graph_oracle(rng, activation):
    """Gradients of ``log lambda - Phi`` from the hand reverse pass vs the scalar graph."""
    topo = Topology(hidden=3, layers=(4, 3), activation=activation)
    _, w_t = random_weights(rng, topo)
    h = np.tanh(rng.normal(size=3))
    tau = 0.8
    # graph oracle: d/dparams [log F'(tau) - F(tau) + F(0)]
    g, tau_node, phi = nhp.hazard_graph(w_t, h, tau)
    lam = dg.build_tau_derivative(g, tau_node, phi)
    term = g.add(g.log(lam), g.neg(phi))
    dg.forward(g, output=term)
    grads = dg.backward(g, term)
    g0, _, phi0 = nhp.hazard_graph(w_t, h, 0.0)
    dg.forward(g0, output=phi0)
    grads0 = dg.backward(g0, phi0)
    names = [f"{n}[{i},{j}]" if n.startswith("W") else f"{n}[{j}]"
             for n, shape in topo.hazard_shapes()
             for i in range(shape[0] if n.startswith("W") else 1)
             for j in range(shape[-1])]
    oracle = np.array([grads[n] + grads0[n] for n in names])
    oracle_h = np.array([grads[f"h[{i}]"] + grads0[f"h[{i}]"] for i in range(3)])

    _, lam_v, cache = nhp.anchored_forward(topo, w_t.raw[None], np.zeros(1, int), h[None], np.array([tau]), keep=True)
    g_raw, g_h = nhp.anchored_backward(topo, w_t.raw[None], cache, np.array([-1.0]), np.array([1.0 / lam_v[0]]))
    np.testing.assert_allclose(g_raw[0], oracle, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(g_h[0], oracle_h, rtol=1e-10, atol=1e-12)


def test_constant_hazard_loglik_is_exponential():
    topo = Topology(hidden=4, layers=(3, 3), activation="softplus")
    rng = np.random.default_rng(2)
    w_r, _ = random_weights(rng, topo)
    for c in (0.5, 2.0, 7.3):
        w_t = nhp.constant_hazard_weights(topo, c)
        seq = make_seq(np.cumsum(rng.exponential(1 / c, 30)))
        gaps = np.diff(seq.timestamps)
        expected = np.log(c) - c * gaps
        np.testing.assert_allclose(nhp.event_loglik_terms(seq, w_r, w_t, 5), expected, rtol=0, atol=1e-12)
        assert nhp.event_loglik(seq, w_r, w_t, 5) == pytest.approx(expected.sum(), abs=1e-12)


def test_constant_hazard_needs_softplus_layers():
    with pytest.raises(ValueError):
        nhp.constant_hazard_weights(Topology(activation="tanh"), 1.0)


def test_loglik_terms_match_quadrature_density(rng):
    topo = Topology(hidden=3, layers=(4, 4), activation="tanh")
    w_r, w_t = random_weights(rng, topo)
    seq = make_seq([0.0, 0.2, 0.5, 0.55, 1.1])
    terms = nhp.event_loglik_terms(seq, w_r, w_t, 3)
    for k in range(1, len(seq)):
        h = nhp.encode_history(seq, k - 1, w_r, 3)
        tau = seq.timestamps[k] - seq.timestamps[k - 1]
        area, _ = integrate.quad(lambda s: nhp.hazard(s, h, w_t), 0.0, tau, epsabs=1e-13)
        dens = nhp.hazard(tau, h, w_t) * math.exp(-area)
        assert terms[k - 1] == pytest.approx(math.log(dens), abs=1e-5)


def test_loglik_summation_order(rng):
    topo = Topology(hidden=3, layers=(4, 4))
    w_r, w_t = random_weights(rng, topo)
    seq = make_seq(np.cumsum(rng.exponential(0.1, 40)))
    terms = nhp.event_loglik_terms(seq, w_r, w_t, 5)
    assert nhp.event_loglik(seq, w_r, w_t, 5) == pytest.approx(terms[::-1].sum(), abs=1e-12)
    assert nhp.event_loglik(seq, w_r, w_t, 5) == nhp.event_loglik(seq, w_r, w_t, 5)


def test_loglik_grid_peaks_at_true_rate():
    c = 3.0
    gaps = np.random.default_rng(4).exponential(1 / c, 2000)
    seq = make_seq(np.cumsum(gaps))
    topo = Topology(hidden=2, layers=(2,), activation="softplus")
    w_r = RnnWeights(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros(2))
    grid = np.arange(1.0, 5.01, 0.5)
    ll = [nhp.event_loglik(seq, w_r, nhp.constant_hazard_weights(topo, g), 4) for g in grid]
    assert grid[int(np.argmax(ll))] == 3.0


@pytest.mark.parametrize("c", [1.0, 2.0, 0.25, 9.0])
def test_constant_hazard_median(c):
    topo = Topology(hidden=3, layers=(3, 3), activation="softplus")
    w_r = RnnWeights(np.zeros((1, 3)), np.zeros((3, 3)), np.zeros(3))
    seq = make_seq([0.0, 0.1, 0.4])
    t = nhp.predict_next(seq, 2, w_r, nhp.constant_hazard_weights(topo, c), M=2)
    assert t - 0.4 == pytest.approx(LN2 / c, abs=1e-8)
    assert nhp.predict_next(seq, 2, w_r, nhp.constant_hazard_weights(topo, 2.0), M=2) == pytest.approx(0.4 + 0.3465736, abs=1e-7)


def test_bisection_invariant_on_random_networks(rng):
    topo = Topology(hidden=3, layers=(4, 4), activation="tanh")
    seq = make_seq([0.0, 0.3, 0.35, 0.9])
    tol = 1e-8
    solved = 0
    for _ in range(100):
        w_r, w_t = random_weights(rng, topo, scale=1.5)
        h = nhp.encode_history(seq, 3, w_r, 3)
        try:
            t = nhp.predict_next(seq, 3, w_r, w_t, M=3, tol=tol)
        except nhp.PredictionError:
            # tanh layers saturate, so Phi can level off below ln 2
            assert nhp.cumulative_hazard(2.0**60, h, w_t) < LN2
            continue
        solved += 1
        assert abs(nhp.cumulative_hazard(t - 0.9, h, w_t) - LN2) <= tol
    assert solved >= 50


def test_bracket_cap_reports_failure():
    topo = Topology(hidden=2, layers=(2,), activation="softplus")
    w_r = RnnWeights(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros(2))
    seq = make_seq([0.0, 0.5])
    with pytest.raises(nhp.PredictionError):
        nhp.predict_next(seq, 1, w_r, nhp.constant_hazard_weights(topo, 1e-30), M=2)
    with pytest.raises(ValueError):
        nhp.predict_next(seq, 1, w_r, nhp.constant_hazard_weights(topo, 1.0), M=2, tol=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_batched_loglik_matches_per_event_loop(seed, M):
    rng = np.random.default_rng(seed)
    topo = Topology(hidden=3, layers=(3,), activation="tanh")
    w_r, w_t = random_weights(rng, topo)
    seq = make_seq(np.cumsum(rng.exponential(0.2, 8)))
    terms = nhp.event_loglik_terms(seq, w_r, w_t, M)
    for k in range(1, len(seq)):
        h = nhp.encode_history(seq, k - 1, w_r, M)
        tau = seq.timestamps[k] - seq.timestamps[k - 1]
        ref = math.log(nhp.hazard(tau, h, w_t)) - nhp.cumulative_hazard(tau, h, w_t)
        assert terms[k - 1] == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_loglik_gradient_matches_finite_differences(rng):
    topo = Topology(hidden=3, layers=(4, 3), activation="tanh")
    rnn = 0.7 * rng.normal(size=topo.rnn_size)
    haz = 0.7 * rng.normal(size=topo.hazard_size)
    seq = make_seq(np.cumsum(rng.exponential(0.2, 10)))
    batch = nhp.make_batch([seq], [np.arange(1, len(seq))], 4, topo)
    _, _, g_rnn, g_haz = nhp.batch_nll_grad(topo, rnn[None], haz[None], batch)

    def nll(r, z):
        return -nhp.batch_loglik(topo, r[None], z[None], batch).sum()

    for vec, grad, other, first in ((rnn, g_rnn[0], haz, True), (haz, g_haz[0], rnn, False)):
        for i in range(vec.size):
            e = np.zeros(vec.size)
            e[i] = 1e-6
            args = (lambda v: (v, other)) if first else (lambda v: (other, v))
            fd = (nll(*args(vec + e)) - nll(*args(vec - e))) / 2e-6
            assert grad[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=7) * 1e-300, "c": np.array([1 / 3, math.pi])}
    path = tmp_path / "ck.txt"
    nhp.save_checkpoint(path, {"topology": Topology().to_dict()}, arrays)
    header, back = nhp.load_checkpoint(path)
    assert Topology.from_dict(header["topology"]) == Topology()
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()


def test_weight_shape_validation():
    topo = Topology(hidden=3, layers=(2,))
    with pytest.raises(ValueError):
        HazardNetWeights(topo, np.zeros(topo.hazard_size + 1))
    with pytest.raises(ValueError):
        RnnWeights.from_flat(topo, np.zeros(topo.rnn_size - 1))
    with pytest.raises(ValueError):
        Topology(activation="relu")
