"""Student-t and log-t primitives plus censored expectation / CVaR.

The t CDF is evaluated through the regularized incomplete beta function
(continued fraction, modified Lentz), quantiles by a safeguarded
Newton/bisection on the upper tail.  ``nu = inf`` is accepted everywhere
and means the Gaussian limit, which turns a log-t into a log-normal.

Censored moments follow the partial-expectation decomposition

    E[min(X, x_max)]  = Psi(y_max) + x_max * (1 - T(y_max))
    CVaR_a            = (Psi(y_max) - Psi(y_a) + x_max * (1 - T(y_max))) / (1 - a)

with ``Psi(y) = E[X 1{Y <= y}]`` estimated from one shared, sorted sample
set per ``(nu, n_samples, seed, sampler)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DomainError, UsageError

SIGMA_MIN = 1e-9

_CF_EPS = 1e-15
_CF_TINY = 1e-300
_CF_MAXIT = 500


# ---------------------------------------------------------------------------
# special functions


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta function (vectorized)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
    d = 1.0 / d
    h = d.copy()
    for m in range(1, _CF_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _CF_TINY, _CF_TINY, c)
        d = 1.0 / d
        h = h * d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _CF_TINY, _CF_TINY, c)
        d = 1.0 / d
        delta = d * c
        h = h * delta
        if np.all(np.abs(delta - 1.0) < _CF_EPS):
            break
    return h


def betainc_reg(a, b, x, x_comp=None):
    """Regularized incomplete beta ``I_x(a, b)`` for array ``x`` in [0, 1].

    ``x_comp`` may carry ``1 - x`` computed without cancellation.
    """
    x = np.asarray(x, dtype=float)
    xc = 1.0 - x if x_comp is None else np.asarray(x_comp, dtype=float)
    out = np.empty_like(x)
    zero = x <= 0.0
    one = xc <= 0.0
    mid = ~(zero | one)
    out[zero] = 0.0
    out[one] = 1.0
    if np.any(mid):
        xm, xcm = x[mid], xc[mid]
        lbeta = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
        front = np.exp(a * np.log(xm) + b * np.log(xcm) - lbeta)
        direct = xm < (a + 1.0) / (a + b + 2.0)
        res = np.empty_like(xm)
        if np.any(direct):
            res[direct] = front[direct] * _betacf(a, b, xm[direct]) / a
        flip = ~direct
        if np.any(flip):
            res[flip] = 1.0 - front[flip] * _betacf(b, a, xcm[flip]) / b
        out[mid] = res
    return out


_erfc = np.vectorize(math.erfc, otypes=[float])


def _check_nu(nu):
    if not (nu > 0) or math.isnan(nu):
        raise DomainError(f"degrees of freedom must be > 0, got {nu!r}")


def _ret(arr, scalar):
    return float(arr) if scalar else arr


def _t_sf_nonneg(y, nu):
    """Upper tail P(Y > y) for y >= 0 (array)."""
    if math.isinf(nu):
        return 0.5 * _erfc(y / math.sqrt(2.0))
    y2 = y * y
    with np.errstate(over="ignore", invalid="ignore"):
        x = nu / (nu + y2)
        xc = y2 / (nu + y2)
    big = ~np.isfinite(y2)
    x = np.where(big, 0.0, x)
    xc = np.where(big, 1.0, xc)
    return 0.5 * betainc_reg(0.5 * nu, 0.5, x, xc)


def t_pdf(y, nu):
    """Density of the standard Student-t with ``nu`` degrees of freedom."""
    _check_nu(nu)
    scalar = np.ndim(y) == 0
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DomainError("t_pdf requires finite y")
    if math.isinf(nu):
        out = np.exp(-0.5 * y * y) / math.sqrt(2.0 * math.pi)
    else:
        logc = (math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)
                - 0.5 * math.log(nu * math.pi))
        out = np.exp(logc - 0.5 * (nu + 1.0) * np.log1p(y * y / nu))
    return _ret(out, scalar)


def t_logpdf(y, nu):
    """Log density of the standard t (array friendly, no finiteness check)."""
    y = np.asarray(y, dtype=float)
    if math.isinf(nu):
        return -0.5 * y * y - 0.5 * math.log(2.0 * math.pi)
    logc = (math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)
            - 0.5 * math.log(nu * math.pi))
    return logc - 0.5 * (nu + 1.0) * np.log1p(y * y / nu)


def t_cdf(y, nu):
    """CDF of the standard Student-t; exact symmetry ``T(-y) = 1 - T(y)``."""
    _check_nu(nu)
    scalar = np.ndim(y) == 0
    y = np.asarray(y, dtype=float)
    if np.any(np.isnan(y)):
        raise DomainError("t_cdf got NaN")
    sf = _t_sf_nonneg(np.abs(y), nu)
    out = np.where(y >= 0, 1.0 - sf, sf)
    return _ret(out, scalar)


def t_sf(y, nu):
    """Upper tail ``1 - T(y)`` without cancellation for large y."""
    _check_nu(nu)
    scalar = np.ndim(y) == 0
    y = np.asarray(y, dtype=float)
    tail = _t_sf_nonneg(np.abs(y), nu)
    out = np.where(y >= 0, tail, 1.0 - tail)
    return _ret(out, scalar)


def _t_isf_upper(q, nu):
    """Solve ``P(Y > y) = q`` for y >= 0, ``q`` array in (0, 0.5]."""
    q = np.asarray(q, dtype=float)
    lo = np.zeros_like(q)
    hi = np.ones_like(q)
    for _ in range(2000):
        short = _t_sf_nonneg(hi, nu) > q
        if not np.any(short):
            break
        lo = np.where(short, hi, lo)
        hi = np.where(short, hi * 2.0, hi)
    x = 0.5 * (lo + hi)
    tol = np.maximum(1e-300, 1e-13 * q)
    for _ in range(200):
        f = _t_sf_nonneg(x, nu) - q
        done = np.abs(f) <= tol
        lo = np.where(f > 0, x, lo)
        hi = np.where(f > 0, hi, x)
        if math.isinf(nu):
            dens = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        else:
            dens = np.exp(t_logpdf(x, nu))
        with np.errstate(divide="ignore", invalid="ignore"):
            step = x + f / dens
        ok = np.isfinite(step) & (step > lo) & (step < hi)
        nxt = np.where(ok, step, 0.5 * (lo + hi))
        x = np.where(done, x, nxt)
        if np.all(done | (hi - lo <= 4e-16 * np.maximum(1.0, hi))):
            break
    return x


def t_quantile(p, nu):
    """Inverse CDF of the standard t; ``|t_cdf(result) - p| <= 1e-10``."""
    _check_nu(nu)
    scalar = np.ndim(p) == 0
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0.0) | ~(p < 1.0)):
        raise DomainError("t_quantile requires 0 < p < 1")
    q = np.minimum(p, 1.0 - p)
    y = _t_isf_upper(q, nu)
    out = np.where(p >= 0.5, y, -y)
    out = np.where(p == 0.5, 0.0, out)
    return _ret(out, scalar)


# ---------------------------------------------------------------------------
# log-t


@dataclass(frozen=True)
class LogTParams:
    """Parameters of ``X = exp(mu + sigma * Y)``, ``Y ~ t(nu)``.

    ``sigma`` below ``SIGMA_MIN`` is clamped and ``sigma_clamped`` set.
    ``nu = inf`` denotes the log-normal limit.
    """

    mu: float
    sigma: float
    nu: float = 3.5
    sigma_clamped: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise DomainError(f"mu must be finite, got {self.mu!r}")
        if not (self.sigma > 0) or not math.isfinite(self.sigma):
            raise DomainError(f"sigma must be finite and > 0, got {self.sigma!r}")
        _check_nu(self.nu)
        if self.sigma < SIGMA_MIN:
            object.__setattr__(self, "sigma", SIGMA_MIN)
            object.__setattr__(self, "sigma_clamped", True)


def _standardize(x, params):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("log-t support is x > 0")
    return (np.log(x) - params.mu) / params.sigma


def logt_pdf(x, params: LogTParams):
    scalar = np.ndim(x) == 0
    z = _standardize(x, params)
    out = t_pdf(z, params.nu) / (params.sigma * np.asarray(x, dtype=float))
    return _ret(out, scalar)


def logt_cdf(x, params: LogTParams):
    scalar = np.ndim(x) == 0
    out = t_cdf(_standardize(x, params), params.nu)
    return _ret(out, scalar)


def standard_t(rng: np.random.Generator, nu: float, n: int) -> np.ndarray:
    """Draw standard-t variates by the ratio ``Z / sqrt(V / nu)``."""
    z = rng.standard_normal(n)
    if math.isinf(nu):
        return z
    v = 2.0 * rng.standard_gamma(0.5 * nu, n)  # chi-square(nu)
    return z / np.sqrt(v / nu)


def sample_logt(params: LogTParams, n: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. log-t draws, deterministic under ``seed``."""
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = np.random.default_rng(seed)
    y = standard_t(rng, params.nu, n)
    with np.errstate(over="ignore"):
        x = np.exp(params.mu + params.sigma * y)
    return np.minimum(x, np.finfo(float).max)


# ---------------------------------------------------------------------------
# Monte Carlo context and censored moments

SAMPLERS = ("quantile", "ratio")


@dataclass(frozen=True, eq=False)
class McContext:
    """Shared sorted standard-t sample set used by every Psi evaluation.

    ``sampler="quantile"`` places one point at the probability midpoint of
    each of ``n_samples`` equal-mass strata (deterministic, seed unused);
    ``sampler="ratio"`` draws i.i.d. variates by the ratio construction.
    Build through :func:`mc_context` to share instances.
    """

    nu: float
    n_samples: int
    seed: int
    sampler: str
    samples: np.ndarray

    @property
    def stratified(self) -> bool:
        return self.sampler == "quantile"


@lru_cache(maxsize=64)
def mc_context(nu: float = 3.5, n_samples: int = 10_000, seed: int = 42,
               sampler: str = "quantile") -> McContext:
    _check_nu(nu)
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    if sampler == "quantile":
        u = (np.arange(n_samples, dtype=float) + 0.5) / n_samples
        ys = t_quantile(u, nu) if n_samples > 1 else np.zeros(1)
        ys = np.asarray(ys, dtype=float)
    elif sampler == "ratio":
        ys = np.sort(standard_t(np.random.default_rng(seed), nu, n_samples))
    else:
        raise DomainError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")
    ys.setflags(write=False)
    return McContext(nu=float(nu), n_samples=int(n_samples), seed=int(seed),
                     sampler=sampler, samples=ys)


def psi(y: float, params: LogTParams, mc: McContext) -> float:
    """Monte Carlo partial expectation ``E[X 1{Y <= y}]``."""
    if mc.nu != params.nu:
        raise UsageError(f"McContext built for nu={mc.nu}, params have nu={params.nu}")
    k = int(np.searchsorted(mc.samples, y, side="right"))
    if k == 0:
        return 0.0
    with np.errstate(over="ignore"):
        vals = np.exp(params.mu + params.sigma * mc.samples[:k])
    return float(np.sum(vals)) / mc.n_samples


def _psi_cut(y: float, params: LogTParams, mc: McContext) -> float:
    """Psi at a cut point, with the stratified sets' boundary-mass term.

    For the quantile sampler the empirical CDF of the point set differs
    from ``T(y)`` by at most half a stratum; that residual mass is priced
    at the value at the cut.  Without it the top strata dominate the error
    whenever y_max sits in the far tail.
    """
    val = psi(y, params, mc)
    if mc.stratified and math.isfinite(y):
        k = int(np.searchsorted(mc.samples, y, side="right"))
        resid = t_cdf(y, params.nu) - k / mc.n_samples
        val += resid * math.exp(params.mu + params.sigma * y)
    return val


@dataclass(frozen=True)
class CensoredLogT:
    """A log-t length censored at ``x_max`` (the request's max_tokens)."""

    params: LogTParams
    x_max: float

    def __post_init__(self):
        if not (self.x_max > 0) or not math.isfinite(self.x_max):
            raise DomainError(f"x_max must be finite and > 0, got {self.x_max!r}")
        if not math.isfinite(self.y_max):
            raise DomainError("y_max is not finite")

    @property
    def y_max(self) -> float:
        return (math.log(self.x_max) - self.params.mu) / self.params.sigma


def censored_expectation(cl: CensoredLogT, mc: McContext) -> float:
    ym = cl.y_max
    tail = cl.x_max * t_sf(ym, cl.params.nu)
    val = _psi_cut(ym, cl.params, mc) + tail
    return min(max(val, 0.0), cl.x_max)


@lru_cache(maxsize=256)
def _var_level(alpha: float, nu: float) -> float:
    # the standardized VaR point does not depend on (mu, sigma)
    return float(t_quantile(alpha, nu))


def censored_cvar(cl: CensoredLogT, alpha: float, mc: McContext) -> float:
    """CVaR at level ``alpha`` of ``min(X, x_max)``.

    Returns ``x_max`` exactly when ``alpha >= T(y_max)``.
    """
    if not (0.0 <= alpha < 1.0):
        raise DomainError(f"alpha must lie in [0, 1), got {alpha!r}")
    ym = cl.y_max
    nu = cl.params.nu
    if alpha >= t_cdf(ym, nu):
        return float(cl.x_max)
    psi_max = _psi_cut(ym, cl.params, mc)
    tail = cl.x_max * t_sf(ym, nu)
    if alpha == 0.0:
        psi_a = 0.0
    else:
        psi_a = _psi_cut(_var_level(alpha, nu), cl.params, mc)
    val = (psi_max - psi_a + tail) / (1.0 - alpha)
    expectation = min(max(psi_max + tail, 0.0), cl.x_max)
    return min(max(val, expectation), cl.x_max)
