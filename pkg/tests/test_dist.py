import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from tiesched.dist import (CensoredLogT, LogTParams, betainc_reg, censored_cvar,
                           censored_expectation, logt_cdf, logt_pdf, mc_context, psi,
                           sample_logt, t_cdf, t_pdf, t_quantile, t_sf)
from tiesched.errors import DomainError, UsageError


def quad_censored_expectation(mu, sigma, nu, x_max):
    """E[min(X, x_max)] by adaptive quadrature in log space."""
    y_max = (math.log(x_max) - mu) / sigma
    body, _ = integrate.quad(lambda y: math.exp(mu + sigma * y) * stats.t.pdf(y, nu),
                             -np.inf, y_max, limit=200, epsabs=1e-12, epsrel=1e-11)
    return body + x_max * stats.t.sf(y_max, nu)


# -- special functions --------------------------------------------------------


def test_betainc_matches_scipy():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.2, 8, 200)
    b = rng.uniform(0.2, 8, 200)
    x = rng.uniform(0, 1, 200)
    got = np.array([betainc_reg(ai, bi, xi) for ai, bi, xi in zip(a, b, x)])
    np.testing.assert_allclose(got, special.betainc(a, b, x), rtol=1e-12, atol=1e-14)


def test_t_pdf_cauchy_closed_form():
    assert t_pdf(0.0, 1.0) == pytest.approx(1 / math.pi, rel=1e-15)


def test_t_pdf_direct_lgamma_evaluation():
    nu, y = 3.5, 1.0
    logc = math.lgamma((nu + 1) / 2) - math.lgamma(nu / 2) - 0.5 * math.log(nu * math.pi)
    expect = math.exp(logc - (nu + 1) / 2 * math.log1p(y * y / nu))
    assert t_pdf(y, nu) == pytest.approx(expect, rel=1e-14)
    assert t_pdf(y, nu) == pytest.approx(stats.t.pdf(y, nu), rel=1e-13)


@pytest.mark.parametrize("nu", [1.0, 2.0, 3.5, 10.0])
def test_t_pdf_integrates_to_one(nu):
    total, _ = integrate.quad(lambda y: t_pdf(y, nu), -np.inf, np.inf)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_t_pdf_rejects_bad_input():
    with pytest.raises(DomainError):
        t_pdf(0.0, 0.0)
    with pytest.raises(DomainError):
        t_pdf(math.inf, 3.5)


def test_t_cdf_examples():
    assert t_cdf(0.0, 3.5) == 0.5
    assert t_cdf(1.0, 1.0) == pytest.approx(0.75, abs=1e-15)
    oracle, _ = integrate.quad(lambda y: stats.t.pdf(y, 3.5), -np.inf, 2.0, epsabs=1e-13)
    assert t_cdf(2.0, 3.5) == pytest.approx(oracle, abs=1e-10)
    with pytest.raises(DomainError):
        t_cdf(0.0, -1.0)


@pytest.mark.parametrize("nu", [0.7, 1.0, 3.5, 30.0, math.inf])
def test_t_cdf_matches_scipy(nu):
    y = np.linspace(-40, 40, 801)
    ref = stats.norm.cdf(y) if math.isinf(nu) else stats.t.cdf(y, nu)
    np.testing.assert_allclose(t_cdf(y, nu), ref, rtol=1e-12, atol=1e-15)


def test_t_sf_far_tail_has_no_cancellation():
    assert t_sf(1e4, 3.5) == pytest.approx(stats.t.sf(1e4, 3.5), rel=1e-10)


def test_t_quantile_examples():
    assert t_quantile(0.5, 3.5) == 0.0
    assert t_quantile(0.75, 1.0) == pytest.approx(1.0, abs=1e-12)
    y = t_quantile(0.9, 3.5)
    assert abs(t_cdf(y, 3.5) - 0.9) <= 1e-10
    assert y == pytest.approx(stats.t.ppf(0.9, 3.5), rel=1e-10)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_t_quantile_domain(p):
    with pytest.raises(DomainError):
        t_quantile(p, 3.5)


@settings(max_examples=60, deadline=None)
@given(y=st.floats(-10, 10), nu=st.floats(0.5, 20))
def test_quantile_inverts_cdf(y, nu):
    assert t_quantile(t_cdf(y, nu), nu) == pytest.approx(y, abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(y=st.floats(-50, 50), nu=st.floats(0.5, 50))
def test_cdf_symmetry(y, nu):
    assert t_cdf(-y, nu) == pytest.approx(1.0 - t_cdf(y, nu), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-30, 30), b=st.floats(-30, 30), nu=st.floats(0.5, 20))
def test_cdf_monotone(a, b, nu):
    lo, hi = min(a, b), max(a, b)
    assert t_cdf(lo, nu) <= t_cdf(hi, nu)


# -- log-t ---------------------------------------------------------------------


def test_logt_pdf_at_median():
    p = LogTParams(4.0, 0.8, 3.5)
    assert logt_pdf(math.exp(4.0), p) == pytest.approx(t_pdf(0.0, 3.5) / (0.8 * math.exp(4.0)))


def test_logt_pdf_change_of_variables():
    p = LogTParams(4.0, 0.8, 3.5)
    z = (math.log(100) - 4.0) / 0.8
    assert logt_pdf(100.0, p) == pytest.approx(stats.t.pdf(z, 3.5) / (0.8 * 100), rel=1e-13)


def test_logt_pdf_integrates_to_one():
    p = LogTParams(2.0, 0.5, 3.5)
    # integrate in log space to keep quad well conditioned
    total, _ = integrate.quad(lambda u: logt_pdf(math.exp(u), p) * math.exp(u), -60, 60,
                              limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_logt_cdf_examples():
    p = LogTParams(4.0, 0.8, 3.5)
    assert logt_cdf(math.exp(4.0), p) == pytest.approx(0.5, abs=1e-15)
    assert logt_cdf(512.0, p) == t_cdf((math.log(512) - 4.0) / 0.8, 3.5)
    xs = np.geomspace(1, 1e5, 50)
    assert np.all(np.diff(logt_cdf(xs, p)) >= 0)
    with pytest.raises(DomainError):
        logt_cdf(0.0, p)
    with pytest.raises(DomainError):
        logt_pdf(-1.0, p)


def test_logt_params_validation_and_clamp():
    with pytest.raises(DomainError):
        LogTParams(0.0, 0.0)
    with pytest.raises(DomainError):
        LogTParams(math.nan, 1.0)
    with pytest.raises(DomainError):
        LogTParams(0.0, 1.0, -2.0)
    p = LogTParams(1.0, 1e-12)
    assert p.sigma == 1e-9 and p.sigma_clamped


def test_sample_logt_degenerate_scale():
    xs = sample_logt(LogTParams(3.0, 1e-12), 5, seed=1)
    np.testing.assert_allclose(xs, math.exp(3.0), rtol=1e-7)


def test_sample_logt_deterministic_and_positive():
    p = LogTParams(5.0, 0.7, 3.5)
    a = sample_logt(p, 1000, seed=9)
    b = sample_logt(p, 1000, seed=9)
    assert np.array_equal(a, b)
    assert np.all(a > 0)


def test_sample_logt_median():
    xs = sample_logt(LogTParams(5.0, 0.7, 3.5), 100_000, seed=0)
    assert np.median(xs) == pytest.approx(math.exp(5.0), rel=0.02)


def test_sample_logt_distribution_ks_against_scipy():
    p = LogTParams(1.0, 0.5, 3.5)
    xs = sample_logt(p, 20_000, seed=5)
    z = (np.log(xs) - 1.0) / 0.5
    assert stats.kstest(z, stats.t(3.5).cdf).pvalue > 0.01


# -- Monte Carlo context and Psi -------------------------------------------------


def test_mc_context_sorted_reproducible_and_shared():
    for sampler in ("quantile", "ratio"):
        mc = mc_context(3.5, 2000, 7, sampler)
        assert np.all(np.diff(mc.samples) >= 0)
        assert mc is mc_context(3.5, 2000, 7, sampler)
        assert not mc.samples.flags.writeable
    a = mc_context(3.5, 500, 1, "ratio").samples
    mc_context.cache_clear()
    assert np.array_equal(a, mc_context(3.5, 500, 1, "ratio").samples)


def test_mc_context_rejects_bad_settings():
    with pytest.raises(DomainError):
        mc_context(3.5, 0)
    with pytest.raises(DomainError):
        mc_context(3.5, 10, 0, "sobol")


def test_psi_below_support_is_zero_and_nu_mismatch():
    mc = mc_context()
    p = LogTParams(4.0, 0.8, 3.5)
    assert psi(mc.samples[0] - 1.0, p, mc) == 0.0
    assert psi(-math.inf, p, mc) == 0.0
    with pytest.raises(UsageError):
        psi(0.0, LogTParams(4.0, 0.8, 5.0), mc)


def test_psi_full_range_matches_fresh_mc():
    # fresh i.i.d. draws with an unrelated seed; sigma small enough for a finite spread
    mc = mc_context()
    p = LogTParams(0.0, 0.3, 3.5)
    got = psi(math.inf, p, mc)
    y = stats.t.rvs(3.5, size=200_000, random_state=np.random.default_rng(2024))
    vals = np.exp(0.3 * y)
    se = vals.std() / math.sqrt(vals.size)
    assert abs(got - vals.mean()) < 3 * se + 1e-3


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-20, 20), b=st.floats(-20, 20), mu=st.floats(0, 6), s=st.floats(0.1, 2))
def test_psi_monotone(a, b, mu, s):
    mc = mc_context()
    p = LogTParams(mu, s, 3.5)
    lo, hi = min(a, b), max(a, b)
    assert psi(lo, p, mc) <= psi(hi, p, mc)


# -- censored moments -------------------------------------------------------------


def test_censored_expectation_near_deterministic():
    cl = CensoredLogT(LogTParams(math.log(100), 1e-9, 3.5), 1000.0)
    assert censored_expectation(cl, mc_context()) == pytest.approx(100.0, rel=1e-6)


def test_censored_expectation_full_censoring():
    cl = CensoredLogT(LogTParams(12.0, 0.3, 3.5), 2.0)
    assert censored_expectation(cl, mc_context()) == pytest.approx(2.0, rel=1e-6)


def test_censored_expectation_vs_quadrature():
    cl = CensoredLogT(LogTParams(4.0, 0.8, 3.5), 512.0)
    oracle = quad_censored_expectation(4.0, 0.8, 3.5, 512.0)
    assert censored_expectation(cl, mc_context()) == pytest.approx(oracle, rel=0.01)


def test_censored_cvar_vs_brute_force():
    cl = CensoredLogT(LogTParams(4.0, 0.8, 3.5), 512.0)
    rng = np.random.default_rng(77)
    xs = np.minimum(np.exp(4.0 + 0.8 * stats.t.rvs(3.5, size=2_000_000, random_state=rng)),
                    512.0)
    xs.sort()
    k = int(math.ceil(0.9 * xs.size))
    brute = xs[k:].mean()
    assert censored_cvar(cl, 0.9, mc_context()) == pytest.approx(brute, rel=0.02)


def test_censored_cvar_case_one_exact():
    cl = CensoredLogT(LogTParams(6.0, 0.5, 3.5), 256.0)
    level = t_cdf(cl.y_max, 3.5)
    assert level < 0.5
    for alpha in (level, 0.5, 0.9, 0.999):
        out = censored_cvar(cl, alpha, mc_context())
        assert out == 256.0 and type(out) is float


def test_censored_cvar_at_zero_is_expectation():
    mc = mc_context()
    cl = CensoredLogT(LogTParams(4.0, 0.8, 3.5), 512.0)
    assert censored_cvar(cl, 0.0, mc) == censored_expectation(cl, mc)


@pytest.mark.parametrize("alpha", [-0.1, 1.0, 2.0])
def test_censored_cvar_alpha_domain(alpha):
    cl = CensoredLogT(LogTParams(4.0, 0.8, 3.5), 512.0)
    with pytest.raises(DomainError):
        censored_cvar(cl, alpha, mc_context())


def test_censored_logt_validation():
    with pytest.raises(DomainError):
        CensoredLogT(LogTParams(4.0, 0.8), 0.0)
    with pytest.raises(DomainError):
        CensoredLogT(LogTParams(4.0, 0.8), math.inf)


@settings(max_examples=60, deadline=None)
@given(mu=st.floats(0, 8), s=st.floats(0.05, 2.0), x_max=st.integers(1, 8192),
       a1=st.floats(0, 0.99), a2=st.floats(0, 0.99))
def test_censored_moment_invariants(mu, s, x_max, a1, a2):
    mc = mc_context()
    cl = CensoredLogT(LogTParams(mu, s, 3.5), float(x_max))
    e = censored_expectation(cl, mc)
    assert 0 < e <= x_max
    lo, hi = min(a1, a2), max(a1, a2)
    c_lo, c_hi = censored_cvar(cl, lo, mc), censored_cvar(cl, hi, mc)
    assert e <= c_lo <= c_hi + 1e-9 * x_max
    assert c_hi <= x_max
    assert censored_cvar(cl, 0.0, mc) == e


def test_lognormal_limit_matches_closed_form():
    # nu = inf: E[min(X, m)] has a closed form for the log-normal
    mu, s, m = 4.0, 0.8, 512.0
    mc = mc_context(math.inf)
    cl = CensoredLogT(LogTParams(mu, s, math.inf), m)
    z = (math.log(m) - mu) / s
    exact = math.exp(mu + s * s / 2) * stats.norm.cdf(z - s) + m * stats.norm.sf(z)
    assert censored_expectation(cl, mc) == pytest.approx(exact, rel=1e-3)
