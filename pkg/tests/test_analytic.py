import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from chaninf.analytic import (PopLossSpec, WSweep, bvn_cdf, erf_mean, erf_pair_expectation,
                              erf_pair_expectation_grad, gauss_hermite, gauss_legendre,
                              limit_loss_and_h, optimal_readouts, owens_t, population_gradient,
                              population_loss, readout_residual, std_normal_cdf, toy_coords,
                              toy_teacher_spec, toy_theta, w_sweep)
from chaninf.net import NetworkParams, forward

from conftest import fd_gradient, rel_err


def owens_t_oracle(h, a):
    f = lambda x: np.exp(-0.5 * h * h * (1 + x * x)) / (1 + x * x) / (2 * np.pi)
    return integrate.quad(f, 0, a, epsabs=1e-14, epsrel=1e-12)[0]


def bvn_oracle(m1, m2, rho):
    # inner integral over y done exactly by the normal CDF
    s = np.sqrt(1 - rho * rho)
    f = lambda x: np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi) * special.ndtr((m2 - rho * x) / s)
    return integrate.quad(f, -np.inf, m1, epsabs=1e-14, epsrel=1e-12, limit=200)[0]


# -- quadrature ----------------------------------------------------------------

@pytest.mark.parametrize("deg", [0, 5, 63, 127])
def test_legendre_exact_to_degree_2n_minus_1(deg):
    rule = gauss_legendre()
    exact = 2.0 / (deg + 1) if deg % 2 == 0 else 0.0
    assert abs(rule.weights @ rule.nodes**deg - exact) < 1e-12


@pytest.mark.parametrize("k", [0, 2, 4, 10, 20])
def test_hermite_normal_moments(k):
    rule = gauss_hermite()
    # E[x^k] = (k-1)!! for standard normal
    exact = float(np.prod(np.arange(k - 1, 0, -2))) if k else 1.0
    assert rule.normal_expectation(lambda x: x**k) == pytest.approx(exact, rel=1e-12)
    with pytest.raises(ValueError):
        gauss_legendre().normal_expectation(np.cos)


# -- normal CDF and Owen's T -----------------------------------------------------

def test_std_normal_cdf():
    assert std_normal_cdf(0.0) == 0.5
    z = np.linspace(-8, 8, 33)
    np.testing.assert_allclose(std_normal_cdf(-z), 1 - std_normal_cdf(z), atol=1e-15)
    oracle = 0.5 + integrate.quad(lambda x: np.exp(-x * x / 2) / np.sqrt(2 * np.pi), 0, 1.96)[0]
    assert std_normal_cdf(1.96) == pytest.approx(oracle, abs=1e-14)
    assert std_normal_cdf(1.96) == pytest.approx(0.9750, abs=1e-4)


def test_owens_t_examples():
    assert owens_t(1.3, 0.0) == 0.0
    for a in (0.3, 1.0, 4.0):
        assert owens_t(0.0, a) == pytest.approx(np.arctan(a) / (2 * np.pi), abs=1e-15)
    for h in (0.1, 0.7, 2.5):
        g = std_normal_cdf(h)
        assert abs(owens_t(h, 1.0) - 0.5 * g * (1 - g)) < 1e-10
        assert abs(owens_t_oracle(h, 1.0) - 0.5 * g * (1 - g)) < 1e-10


@settings(max_examples=60, deadline=None)
@given(h=st.floats(-6, 6), a=st.floats(-30, 30))
def test_owens_t_matches_integral(h, a):
    assert abs(owens_t(h, a) - owens_t_oracle(abs(h), a)) < 1e-10
    assert abs(owens_t(h, a) - special.owens_t(h, a)) < 1e-10


def test_owens_t_symmetries_and_vectorisation(rng):
    h, a = rng.normal(size=20) * 2, rng.normal(size=20) * 3
    v = owens_t(h, a)
    assert v.shape == (20,)
    np.testing.assert_array_equal(owens_t(-h, a), v)
    np.testing.assert_array_equal(owens_t(h, -a), -v)
    assert owens_t(1.0, np.inf) == pytest.approx(0.5 * std_normal_cdf(-1.0))


# -- bivariate normal --------------------------------------------------------------

def test_bvn_examples():
    assert bvn_cdf(0.0, 0.0, 0.0) == pytest.approx(0.25, abs=1e-15)
    for rho in (-0.9, -0.3, 0.5, 0.99):
        assert bvn_cdf(0.0, 0.0, rho) == pytest.approx(0.25 + np.arcsin(rho) / (2 * np.pi), abs=1e-15)
        assert abs(bvn_oracle(0.0, 0.0, rho) - 0.25 - np.arcsin(rho) / (2 * np.pi)) < 1e-8


@settings(max_examples=60, deadline=None)
@given(m1=st.floats(-4, 4), m2=st.floats(-4, 4), rho=st.floats(-0.98, 0.98))
def test_bvn_matches_integral(m1, m2, rho):
    assert abs(bvn_cdf(m1, m2, rho) - bvn_oracle(m1, m2, rho)) < 1e-9


@pytest.mark.parametrize("m1, m2", [(0.0, 0.8), (-1.2, 0.0), (0.0, -2.0)])
def test_bvn_zero_mean_branches_continuous(m1, m2):
    for rho in (-0.6, 0.2, 0.9):
        exact = bvn_cdf(m1, m2, rho)
        nudged = bvn_cdf(m1 + 1e-9, m2 + 1e-9, rho)
        assert abs(exact - nudged) < 1e-8
        assert abs(exact - bvn_oracle(m1, m2, rho)) < 1e-10


def test_bvn_degenerate_correlation():
    assert bvn_cdf(0.3, -0.4, 1.0) == pytest.approx(std_normal_cdf(-0.4))
    assert bvn_cdf(0.3, 0.4, -1.0) == pytest.approx(std_normal_cdf(0.3) + std_normal_cdf(0.4) - 1)
    assert bvn_cdf(-0.3, -0.4, -1.0) == 0.0


# -- pair expectation ---------------------------------------------------------------

def test_pair_expectation_examples():
    assert abs(erf_pair_expectation(0.0, 0.0, 1.0, 0.0, 2.0)) < 1e-15
    for var in (0.5, 1.0, 4.0):
        assert erf_pair_expectation(0.0, 0.0, var, var, var) == pytest.approx(
            2 / np.pi * np.arcsin(var / (1 + var)), abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(m1=st.floats(-3, 3), m2=st.floats(-3, 3), v1=st.floats(0.01, 5), v2=st.floats(0.01, 5),
       rho=st.floats(-0.95, 0.95))
def test_pair_expectation_symmetric(m1, m2, v1, v2, rho):
    k = rho * np.sqrt(v1 * v2)
    assert abs(erf_pair_expectation(m1, m2, v1, k, v2) - erf_pair_expectation(m2, m1, v2, k, v1)) < 1e-12


def test_pair_expectation_monte_carlo(rng):
    m1, m2, v1, v2, rho = 0.4, -0.7, 1.3, 0.6, 0.35
    k = rho * np.sqrt(v1 * v2)
    L = np.linalg.cholesky([[v1, k], [k, v2]])
    z = rng.standard_normal((200_000, 2)) @ L.T
    vals = special.erf((z[:, 0] + m1) / np.sqrt(2)) * special.erf((z[:, 1] + m2) / np.sqrt(2))
    se = vals.std() / np.sqrt(vals.size)
    assert abs(vals.mean() - erf_pair_expectation(m1, m2, v1, k, v2)) < 3 * se


def test_pair_expectation_grad_vs_fd(rng):
    for _ in range(10):
        args = np.array([*rng.normal(size=2), *rng.uniform(0.2, 2, 2)])
        m1, m2, v1, v2 = args
        k = rng.uniform(-0.8, 0.8) * np.sqrt(v1 * v2)
        x = np.array([m1, m2, v1, k, v2])
        g, parts = erf_pair_expectation_grad(*x)
        assert g == pytest.approx(erf_pair_expectation(*x), abs=1e-15)
        fd = fd_gradient(lambda v: float(erf_pair_expectation(*v)), x, 1e-6)
        np.testing.assert_allclose(np.array(parts, dtype=float), fd, atol=1e-8)
    with pytest.raises(ValueError):
        erf_pair_expectation_grad(0.0, 0.0, 0.0, 1.0, 0.0)


def test_erf_mean(rng):
    z = rng.standard_normal(200_000) * np.sqrt(0.8)
    vals = special.erf((z + 0.3) / np.sqrt(2))
    assert abs(vals.mean() - erf_mean(0.3, 0.8)) < 3 * vals.std() / np.sqrt(z.size)


# -- population loss -------------------------------------------------------------------

def random_spec(rng, d=3, r_t=2, r=3, has_bias=False):
    return PopLossSpec(rng.normal(size=r_t), rng.normal(size=(r_t, d)) * 0.8,
                       rng.normal(size=r_t) * 0.5, r=r, has_bias=has_bias)


def test_population_loss_examples(rng):
    spec = random_spec(rng, r=2)
    teacher = NetworkParams.single_layer(spec.teacher_w, spec.teacher_a, b=spec.teacher_b, c=0.0,
                                         activation="erf_scaled")
    matched = PopLossSpec(spec.teacher_a, spec.teacher_w, spec.teacher_b, r=2, has_bias=True)
    assert abs(population_loss(matched, teacher)) < 1e-10
    assert np.max(np.abs(population_gradient(matched, teacher))) < 1e-10
    zero = np.zeros(3 * 2 + 2)
    assert population_loss(spec, zero) == pytest.approx(0.5 * spec.teacher_sq_mean, abs=1e-15)


@pytest.mark.parametrize("has_bias", [False, True])
def test_population_loss_monte_carlo(rng, has_bias):
    spec = random_spec(rng, has_bias=has_bias)
    net = spec.student(rng.normal(size=_n_params(spec)))
    X = rng.standard_normal((300_000, spec.dim))
    sq = 0.5 * (spec.teacher(X) - forward(net, X)) ** 2
    assert abs(sq.mean() - population_loss(spec, net)) < 3 * sq.std() / np.sqrt(sq.size)
    assert population_loss(spec, net) >= 0


def _n_params(spec):
    return spec.r * spec.dim + spec.r + ((spec.r + 1) if spec.has_bias else 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), has_bias=st.booleans())
def test_population_gradient_vs_fd(seed, has_bias):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, d=2, has_bias=has_bias)
    theta = rng.normal(size=_n_params(spec))
    g = population_gradient(spec, theta)
    g_fd = fd_gradient(lambda th: population_loss(spec, th), theta, 1e-5)
    assert rel_err(g, g_fd) < 1e-7


def test_population_student_must_be_erf(rng):
    spec = random_spec(rng)
    with pytest.raises(ValueError):
        population_loss(spec, NetworkParams.single_layer(np.ones((3, 3)), np.ones(3)))


# -- toy problem ---------------------------------------------------------------------

def test_readouts_of_representable_teachers():
    w = 1.7
    c_only = lambda x: 0.8 * special.erf(w * x / np.sqrt(2))
    a0, c0 = optimal_readouts(w, c_only)
    assert abs(a0) < 1e-10 and c0 == pytest.approx(0.8, abs=1e-10)
    glu = lambda x: -1.3 * x * np.sqrt(2 / np.pi) * np.exp(-0.5 * (w * x) ** 2)
    a0, c0 = optimal_readouts(w, glu)
    assert a0 == pytest.approx(-1.3, abs=1e-10) and abs(c0) < 1e-10
    loss, h, _, _ = limit_loss_and_h(w, glu)
    assert abs(loss) < 1e-20 and abs(h) < 1e-10
    with pytest.raises(np.linalg.LinAlgError):
        optimal_readouts(0.0, c_only)


def test_readout_residual_small_on_sweep():
    spec = toy_teacher_spec()
    for w in np.linspace(0.1, 8, 40):
        a0, c0 = optimal_readouts(w, spec)
        assert readout_residual(w, a0, c0, spec) < 1e-10


def test_toy_sweep_structure(tmp_path):
    spec = toy_teacher_spec()
    sweep = w_sweep(np.linspace(0.05, 8.0, 800), spec)
    crit = sweep.critical_points()
    assert [k for _, k in crit] == ["min", "max", "min"]
    for w, kind in crit:
        if kind == "min":
            assert limit_loss_and_h(w, spec)[1] > 0
    sweep.to_csv(tmp_path / "sweep.csv")
    rows = np.genfromtxt(tmp_path / "sweep.csv", delimiter=",", names=True)
    np.testing.assert_array_equal(rows["loss0"], sweep.loss)


def test_quadrature_order_is_converged():
    spec = toy_teacher_spec()
    for w in (0.2, 0.5, 0.87, 3.1, 5.0):
        lo = limit_loss_and_h(w, spec)
        hi = limit_loss_and_h(w, spec, gauss_hermite(2 * gauss_hermite().n))
        assert max(abs(lo[0] - hi[0]), abs(lo[1] - hi[1])) < 1e-10


# Near w = 3.08 the readouts make |a_i| ~ 3e3 at eps = 1e-3, and rounding in the
# self-overlap sum (~1e-9) swamps h eps^2 ~ 1e-9; there the check uses eps = 1e-2.
@pytest.mark.parametrize("w, eps", [(0.87, 1e-3), (2.0, 1e-3), (3.08, 1e-2)])
def test_limit_h_matches_population_loss(w, eps):
    spec = toy_teacher_spec()
    loss0, h, a0, c0 = limit_loss_and_h(w, spec)
    direct = (population_loss(spec, toy_theta(w, eps, a0, c0)) - loss0) / eps**2
    assert direct == pytest.approx(h, rel=0.02)


@settings(max_examples=30)
@given(w=st.floats(-3, 3), eps=st.floats(1e-4, 2), a=st.floats(-5, 5), c=st.floats(-5, 5))
def test_toy_coords_roundtrip(w, eps, a, c):
    back = toy_coords(toy_theta(w, eps, a, c))
    np.testing.assert_allclose(back, (w, eps, a, c), atol=1e-9 * (1 + abs(a) / eps))


def test_wsweep_stable_flag():
    sw = WSweep(np.arange(3.0), np.zeros(3), np.array([-1.0, 0.0, 2.0]), np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(sw.stable, [False, False, True])
