import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from spinecoal import genfun
from spinecoal.genfun import LowConfidenceWarning
from spinecoal.model import geo1, spectral, sym2


def birth_death_pgf(t, s, b=0.5):
    """Closed form of F_t(s) for the critical binary birth-death process with rates b, b."""
    return (b * t * (1 - s) + s) / (b * t * (1 - s) + 1)


def test_time_zero_is_identity(sym2_model):
    s = np.array([.3, .8])
    np.testing.assert_allclose(genfun.generating_function(sym2_model, 0.0, s), s, atol=1e-14)


def test_fixed_point_one(mix2_model):
    np.testing.assert_allclose(genfun.generating_function(mix2_model, [1.0, 7.0], [1.0, 1.0]), 1.0,
                               atol=1e-12)


@given(st.floats(0.0, 20.0), st.floats(0.0, 1.0))
def test_geo1_matches_birth_death_closed_form(t, s):
    val = genfun.generating_function(geo1(), t, [s])[0]
    assert val == pytest.approx(birth_death_pgf(t, s), abs=1e-9)


def test_extinction_probability_closed_form(geo1_model):
    t = np.array([0.5, 2.0, 10.0])
    np.testing.assert_allclose(genfun.extinction_prob(geo1_model, t)[:, 0], t / (t + 2), atol=1e-10)


@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_semigroup(t, s, x1, x2):
    m = sym2()
    x = np.array([x1, x2])
    inner = genfun.generating_function(m, s, x)
    lhs = genfun.generating_function(m, t + s, x)
    rhs = genfun.generating_function(m, t, inner)
    assert np.max(np.abs(lhs - rhs)) < 1e-8


@pytest.mark.parametrize("t", [0.5, 3.0, 10.0])
def test_mean_population_matches_matrix_exponential(mix2_model, t):
    spec = spectral(mix2_model)
    exact = expm(spec.C * t) @ np.ones(2)
    got = genfun.factorial_moment_discounted(mix2_model, t, [0, 0], 1)
    assert np.max(np.abs(got - exact)) < 1e-8


@pytest.mark.parametrize("k", [2, 3, 4])
def test_jet_and_finite_differences_agree(mix2_model, k):
    theta = (0.2, 0.4)
    jet = genfun.factorial_moment_discounted(mix2_model, 4.0, theta, k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowConfidenceWarning)
        fd = genfun.factorial_moment_discounted(mix2_model, 4.0, theta, k, method="fd")
    np.testing.assert_allclose(jet, fd, rtol=1e-5)


def test_finite_differences_warn_with_coarse_step(sym2_model):
    with pytest.warns(LowConfidenceWarning):
        genfun.factorial_moment_discounted(sym2_model, 5.0, (0.2, 0.1), 3, method="fd", h=0.3)


def test_second_factorial_moment_geo1_closed_form(geo1_model):
    # E[N(N-1)] = F''_t(1) = 2 b t for the critical birth-death process with b = 1/2
    for t in (1.0, 4.0):
        assert genfun.factorial_moment_discounted(geo1_model, t, [0.0], 2)[0] == pytest.approx(t, rel=1e-9)


def test_moment_jet_time_derivatives(mix2_model):
    t = np.array([1.0, 1.0 + 1e-5, 1.0 + 2e-5])
    vals, ders = genfun.moment_jets(mix2_model, t, (0.3, 0.1), 3)
    fd = (-3 * vals[0] + 4 * vals[1] - vals[2]) / 2e-5
    np.testing.assert_allclose(ders[0], fd, rtol=1e-6, atol=1e-10)


def test_jacobian_against_differences(mix2_model):
    s = np.array([.4, .7])
    J = genfun.jacobian(mix2_model, 2.0, s)
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        col = (genfun.generating_function(mix2_model, 2.0, s + e)
               - genfun.generating_function(mix2_model, 2.0, s - e)) / (2 * h)
        np.testing.assert_allclose(J[:, i], col, rtol=1e-6)


def test_laplace_rejects_negative_theta(sym2_model):
    with pytest.raises(ValueError):
        genfun.laplace(sym2_model, 1.0, (-1.0, 0.0))


def test_asymptotic_laplace_convergence(sym2_model):
    spec = spectral(sym2_model)
    theta = np.array([1.0, 1.0])
    devs = []
    for T in (100.0, 400.0, 800.0 / spec.zeta):
        exact = genfun.laplace(sym2_model, T, 2 * theta / (spec.zeta * T))
        approx = genfun.asymptotic_laplace(spec, 0.0, theta, T)
        devs.append(np.max(np.abs((1 - exact) / (1 - approx) - 1)))
    assert devs[0] > devs[1] > devs[2] and devs[2] < 0.02


@pytest.mark.parametrize("k", [1, 2, 3])
def test_asymptotic_factorial_moment_convergence(mix2_model, k):
    spec = spectral(mix2_model)
    theta = np.array([1.0, 0.5])
    ratios = []
    for T in (200.0, 800.0, 3200.0):
        exact = genfun.factorial_moment_discounted(mix2_model, T, 2 * theta / (spec.zeta * T), k)
        ratios.append(np.max(np.abs(exact / genfun.asymptotic_factorial_moment(spec, 0.0, theta, T, k) - 1)))
    assert ratios[0] > ratios[1] > ratios[2] and ratios[2] < 0.01


def test_survival_asymptotics_mix2(mix2_model):
    spec = spectral(mix2_model)
    T = 400.0 / spec.zeta
    q = genfun.extinction_prob(mix2_model, T)
    np.testing.assert_allclose(T * (1 - q), 2 * spec.xi / spec.zeta, rtol=0.05)


def _path(u):
    return np.array([u, 2 * u])


def test_derivative_identity_ode_route(sym2_model, mix2_model):
    for m in (sym2_model, mix2_model):
        for i in range(2):
            res, _ = genfun.derivative_identity_residual(m, 5.0, 10.0, _path, i, method="ode")
            assert abs(res) < 1e-5


def test_derivative_identity_constant_path_is_zero(mix2_model):
    res, _ = genfun.derivative_identity_residual(mix2_model, 2.0, 4.0, lambda u: np.array([.5, .5]),
                                                 0, method="ode")
    assert abs(res) < 1e-12


def test_derivative_identity_monte_carlo_small(mix2_model):
    res, se = genfun.derivative_identity_residual(mix2_model, 1.0, 3.0, _path, 1, method="mc",
                                                  replicates=100_000, seed=5)
    assert abs(res) < 3 * se + 1e-4
