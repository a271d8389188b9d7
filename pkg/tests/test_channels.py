import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaninf.activations import get_activation
from chaninf.channels import (PairReparam, THREE_NEURON_BASIS, detect_channels,
                              eps_expansion_check, glu_correction, glu_error, glu_limit_output,
                              group_directions, inverse_reparam, jump_procedure,
                              loss_eps2_fit, merge_channel_pair, multi_neuron_limit_output,
                              net_pair_reparam, pair_output, parallel_update_fraction,
                              reparam_pair, set_pair, slope_law_fit, three_neuron_network)
from chaninf.flow import FlowConfig, FlowResult
from chaninf.landscape import SaddleLine, duplicate_neuron
from chaninf.net import Dataset, NetworkParams, forward

from conftest import random_data, random_net

ACTS = ["softplus", "erf_scaled", "tanh"]


# -- reparameterisation ------------------------------------------------------

def test_reparam_example():
    p = reparam_pair(2.0, -1.0, [1.0, 0.0], [0.0, 1.0])
    np.testing.assert_allclose(p.w, [0.5, 0.5])
    assert p.eps == pytest.approx(np.sqrt(2) / 2)
    np.testing.assert_allclose(p.delta, [1 / np.sqrt(2), -1 / np.sqrt(2)])
    assert p.a == pytest.approx(3 * np.sqrt(2) / 2)
    assert p.c == 1.0


@settings(max_examples=100, deadline=None)
@given(log_eps=st.floats(-8, 1), seed=st.integers(0, 2**32 - 1))
def test_reparam_roundtrip(log_eps, seed):
    rng = np.random.default_rng(seed)
    w, delta = rng.standard_normal(3), rng.standard_normal(3)
    delta /= np.linalg.norm(delta)
    eps = 10.0 ** log_eps
    a_i, a_j = rng.standard_normal(2)
    w_i, w_j = w + eps * delta, w - eps * delta
    p = reparam_pair(a_i, a_j, w_i, w_j)
    assert np.linalg.norm(p.delta) == pytest.approx(1.0, abs=1e-14)
    b_i, b_j, v_i, v_j = inverse_reparam(p)
    scale = 1 + abs(a_i) + abs(a_j)
    assert abs(b_i - a_i) < 1e-14 * scale / max(eps, 1e-2) and abs(b_j - a_j) < 1e-14 * scale / max(eps, 1e-2)
    assert np.max(np.abs(v_i - w_i)) < 1e-14 * 4 and np.max(np.abs(v_j - w_j)) < 1e-14 * 4


def test_inverse_undefined_at_zero_eps():
    p = reparam_pair(1.0, 2.0, [1.0, 1.0], [1.0, 1.0])
    assert p.eps == 0 and p.delta is None
    with pytest.raises(ValueError):
        inverse_reparam(p)


@pytest.mark.parametrize("act", ACTS + ["sigmoid4_plus_softplus"])
def test_pair_identity(rng, act):
    sigma = get_activation(act).value
    for _ in range(20):
        a_i, a_j = rng.standard_normal(2) * 3
        w_i, w_j = rng.standard_normal((2, 3))
        X = rng.standard_normal((100, 3))
        direct = a_i * sigma(X @ w_i) + a_j * sigma(X @ w_j)
        assert np.max(np.abs(pair_output(reparam_pair(a_i, a_j, w_i, w_j), X, act) - direct)) < 1e-12


# -- GLU limit ---------------------------------------------------------------

def test_glu_examples(rng):
    assert glu_limit_output(0.0, 1.0, [1.0], [1.0], [[0.0]], "softplus")[0] == 0.0
    X = rng.standard_normal((10, 2))
    w = rng.standard_normal(2)
    np.testing.assert_allclose(glu_limit_output(1.3, 0.0, w, [1.0, 0.0], X, "tanh"),
                               1.3 * np.tanh(X @ w), rtol=1e-15)


@pytest.mark.parametrize("act", ACTS)
def test_glu_limit_quadratic_order(rng, act):
    c, a = rng.standard_normal(2)
    w, delta = rng.standard_normal((2, 2))
    delta /= np.linalg.norm(delta)
    X = rng.standard_normal((50, 2))
    limit = glu_limit_output(c, a, w, delta, X, act)
    eps = 10.0 ** -np.arange(1, 4, 0.5)
    err = np.array([np.max(np.abs(pair_output(PairReparam(w, e, delta, a, c), X, act) - limit))
                    for e in eps])
    halves = np.array([np.max(np.abs(pair_output(PairReparam(w, e / 2, delta, a, c), X, act) - limit))
                       for e in eps])
    assert np.all((halves / err > 0.2) & (halves / err < 0.3))


def test_glu_correction_is_eps2_coefficient(rng):
    c, a = 0.7, -1.4
    w, delta = np.array([0.3, -0.8]), np.array([0.6, 0.8])
    X = rng.standard_normal((20, 2))
    eps = 1e-3
    lhs = (pair_output(PairReparam(w, eps, delta, a, c), X, "erf_scaled")
           - glu_limit_output(c, a, w, delta, X, "erf_scaled")) / eps**2
    np.testing.assert_allclose(lhs, glu_correction(c, a, w, delta, X, "erf_scaled"),
                               rtol=1e-4, atol=1e-6)


def test_glu_error_of_exact_duplicate_pair_vanishes_with_eps(rng):
    net = random_net(rng, [2, 3, 1], "softplus", True)
    data = random_data(rng, 30, 2)
    p = net_pair_reparam(net, (0, 1))
    errs = []
    for e in (1e-2, 5e-3):
        p.eps = e
        errs.append(glu_error(set_pair(net, p), data, (0, 1)))
    assert errs[1] / errs[0] == pytest.approx(0.25, abs=0.02)


# -- loss expansion ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_eps_expansion(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, [2, 3, 1], "softplus", True)
    data = random_data(rng, 40, 2)
    chk = eps_expansion_check(net, data, (0, 2), [1e-2, 5e-3, 2e-3, 1e-3])
    assert chk.exponent == pytest.approx(2.0, abs=0.1)
    assert chk.ratios[-1] == pytest.approx(chk.h, rel=0.05)


def test_eps_expansion_zero_residual_gives_zero_h(rng):
    net = random_net(rng, [2, 3, 1], "tanh")
    X = rng.standard_normal((20, 2))
    p = net_pair_reparam(net, (0, 1))
    # targets equal to the eps = 0 network
    limit = forward(net, X) - pair_output(p, X, "tanh") + glu_limit_output(p.c, p.a, p.w, p.delta,
                                                                           X, "tanh")
    chk = eps_expansion_check(net, Dataset(X, limit), (0, 1), [1e-2, 1e-3])
    assert abs(chk.h) < 1e-15 and chk.loss0 < 1e-28


def test_eps_expansion_validates_eps():
    net = NetworkParams.single_layer([[1.0], [2.0]], [1.0, 1.0])
    data = Dataset(np.ones((3, 1)), np.zeros(3))
    with pytest.raises(ValueError):
        eps_expansion_check(net, data, (0, 1), [1e-3, 1e-2])


# -- detection -----------------------------------------------------------------

def _channel_like_net(norm_scale=1000.0, spread=1e-3):
    w = np.array([[1.0, 2.0], [1.0 + spread, 2.0], [-2.0, 1.0]])
    return NetworkParams.single_layer(w, [norm_scale, -norm_scale, 0.5])


def test_detect_examples():
    rep = detect_channels(_channel_like_net(), param_norm=2000.0)
    assert rep.is_channel and rep.min_cosdist < 0.005 and rep.closest_pair == (0, 0, 1)
    assert rep.group_sizes == [2]
    assert rep.closest_sum_abs_a == pytest.approx(2000.0)
    assert not detect_channels(_channel_like_net(), param_norm=50.0).is_channel
    assert not detect_channels(_channel_like_net(spread=1.0)).is_channel


def test_detect_three_neuron_group():
    w = np.array([[1.0, 2.0], [1.001, 2.0], [1.0, 2.001], [-2.0, 1.0]])
    rep = detect_channels(NetworkParams.single_layer(w, [900, -500, -400, 1.0]))
    assert rep.group_sizes == [3] and rep.groups[0].members == [0, 1, 2]


def test_detect_invariant_under_permutation_and_sign(rng):
    base = _channel_like_net()
    perm = [2, 0, 1]
    shuffled = NetworkParams.single_layer(base.w[perm], base.a[perm])
    a, b = detect_channels(base), detect_channels(shuffled)
    assert a.is_channel == b.is_channel and a.min_cosdist == pytest.approx(b.min_cosdist)
    odd = NetworkParams.single_layer(base.w, base.a, activation="erf_scaled")
    flipped = NetworkParams.single_layer(base.w * [[1], [-1], [1]], base.a * [1, -1, 1],
                                         activation="erf_scaled")
    assert detect_channels(flipped).is_channel == detect_channels(odd).is_channel is True


def test_report_json(rng):
    rep = detect_channels(_channel_like_net())
    d = json.loads(rep.to_json())
    assert d["is_channel"] and d["closest_pair"] == [0, 0, 1] and d["groups"][0]["members"] == [0, 1]


# -- parallel updates ----------------------------------------------------------

def _fake_result(net, updates):
    theta = net.flatten()
    return FlowResult(theta=theta, stop_reason="max_steps", t=np.arange(len(updates) + 1.0),
                      loss=np.zeros(len(updates) + 1), grad_linf=np.zeros(len(updates) + 1),
                      pnorm=np.zeros(len(updates) + 1),
                      updates=[(k + 1, u) for k, u in enumerate(updates)], template=net)


def test_parallel_fraction_extremes(rng):
    line = SaddleLine(random_net(rng, [2, 2, 1]), 0)
    net = line.at(0.3)
    ortho = rng.standard_normal(net.n_params)
    ortho -= (ortho @ line.direction) * line.direction
    res = _fake_result(net, [3.0 * line.direction, ortho, np.zeros(net.n_params)])
    frac = parallel_update_fraction(res, line)
    np.testing.assert_allclose(frac, [1.0, 0.0], atol=1e-14)


def test_group_directions_span_line_subspace():
    net = NetworkParams.single_layer([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [0.0, 1.0]],
                                     [1.0, 2.0, 3.0, 4.0])
    rep = detect_channels(net)
    Q = group_directions(net, rep.groups)
    assert Q.shape == (net.n_params, 2)
    np.testing.assert_allclose(Q.T @ Q, np.eye(2), atol=1e-14)
    # moving output weight between the merged neurons keeps the function; it lies in the span
    move = np.zeros(net.n_params)
    move[[8, 10]] = [0.5, -0.5]
    assert np.linalg.norm(Q @ (Q.T @ move) - move) < 1e-14


# -- jump procedure --------------------------------------------------------------

def test_halving_step_halves_eps(rng):
    net = random_net(rng, [2, 3, 1])
    p = net_pair_reparam(net, (0, 2))
    p.eps /= 2
    q = net_pair_reparam(set_pair(net, p), (0, 2))
    assert q.eps == pytest.approx(net_pair_reparam(net, (0, 2)).eps / 2, rel=1e-12)
    assert q.c == pytest.approx(p.c) and q.a == pytest.approx(p.a)
    np.testing.assert_allclose(q.w, p.w, atol=1e-14)


def test_jump_procedure_records(rng):
    net = random_net(rng, [1, 3, 1], "tanh", scale=0.5)
    data = random_data(rng, 20, 1)
    jr = jump_procedure(net, data, (0, 1), halvings=3, flow_cfg=FlowConfig(max_steps=5))
    assert jr.stop_reason == "completed" and len(jr.records) == 4
    assert json.loads(jr.to_json())["records"][0]["eps"] == jr.records[0].eps
    assert jr.series("eps").shape == (4,)


# -- slope law ----------------------------------------------------------------

def test_slope_law_synthetic():
    eps = 0.3 * 2.0 ** -np.arange(10)
    a = 1.7
    assert slope_law_fit(eps, 0.2 + 0.9 * eps**2, a / eps) == pytest.approx(3.0, abs=1e-10)


@pytest.mark.parametrize("eps, loss", [
    (0.3 * 2.0 ** -np.arange(10), np.full(10, 0.5)),  # constant loss
    (np.array([0.3, 0.2, 0.1]), np.array([3.0, 2.0, 1.0])),  # too few points
    (np.linspace(1.0, 0.9, 6), np.linspace(3.0, 2.0, 6)),  # under half a decade
])
def test_slope_law_rejects(eps, loss):
    with pytest.raises(ValueError):
        slope_law_fit(eps, loss, 1.0 / eps)


def test_loss_eps2_fit_exact():
    eps = 0.1 * 2.0 ** -np.arange(8)
    slope, l_inf = loss_eps2_fit(eps, 0.25 + 3.0 * eps**2)
    assert slope == pytest.approx(1.0, abs=1e-9) and l_inf == pytest.approx(0.25, abs=1e-14)


# -- merging --------------------------------------------------------------------

def test_merge_recovers_duplicated_neuron(rng):
    base = random_net(rng, [2, 3, 1], "softplus", True)
    dup = duplicate_neuron(base, 1, 0.37)
    merged = merge_channel_pair(dup, (1, 3))
    assert merged.widths == base.widths
    np.testing.assert_allclose(merged.flatten(), base.flatten(), atol=1e-15)


def test_merge_drops_glu_term(rng):
    w, delta = np.array([0.4, -0.3]), np.array([0.6, 0.8])
    c, a = 1.1, 0.8
    X = rng.standard_normal((30, 2))
    diffs = []
    for eps in (1e-2, 5e-3):
        a_i, a_j, w_i, w_j = inverse_reparam(PairReparam(w, eps, delta, a, c))
        net = NetworkParams.single_layer([w_i, w_j, [1.0, 1.0]], [a_i, a_j, 0.3])
        merged = merge_channel_pair(net, (0, 1))
        glu_term = a * (X @ delta) * get_activation("softplus").d1(X @ w)
        diffs.append(np.max(np.abs(forward(net, X) - forward(merged, X) - glu_term)))
    assert diffs[1] / diffs[0] == pytest.approx(0.25, abs=0.03)


# -- three-neuron hierarchy ----------------------------------------------------------

def test_three_neuron_basis_orthonormal():
    np.testing.assert_allclose(THREE_NEURON_BASIS @ THREE_NEURON_BASIS.T, np.eye(3), atol=1e-15)


@pytest.mark.parametrize("act", ACTS)
def test_three_neuron_limit_reductions(rng, act):
    omega = rng.standard_normal((3, 2))
    X = rng.standard_normal((20, 2))
    sig = get_activation(act)
    z = X @ omega[0] / np.sqrt(3)
    np.testing.assert_allclose(multi_neuron_limit_output([0.7, 0, 0], omega, X, act),
                               np.sqrt(3) * 0.7 * sig.value(z), rtol=1e-14)
    np.testing.assert_allclose(multi_neuron_limit_output([0.7, -0.4, 0], omega, X, act),
                               np.sqrt(3) * 0.7 * sig.value(z) - 0.4 * (X @ omega[1]) * sig.d1(z),
                               rtol=1e-13)


@pytest.mark.parametrize("act", ACTS)
def test_three_neuron_network_converges_to_limit(rng, act):
    alpha = rng.standard_normal(3)
    omega = rng.standard_normal((3, 2))
    X = rng.standard_normal((50, 2))
    limit = multi_neuron_limit_output(alpha, omega, X, act)
    eps = 0.05 * 2.0 ** -np.arange(6)
    err = np.array([np.max(np.abs(forward(three_neuron_network(alpha, omega, e, act), X) - limit))
                    for e in eps])
    assert err[-1] < 1e-3 * np.max(np.abs(limit))
    assert np.all(err[1:] / err[:-1] < 0.6)
