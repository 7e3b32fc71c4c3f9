"""Maximum-likelihood fits, KS goodness of fit and heavy-tail statistics."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .dist import LogTParams, t_cdf, t_logpdf
from .errors import DomainError, InsufficientDataError, TraceParseError

SIGMA_FLOOR = 1e-6
MAX_ITER = 500
GRAD_TOL = 1e-6
DEFAULT_NU_GRID = tuple(np.round(np.arange(1.0, 10.0 + 1e-9, 0.5), 10))


class Family(str, enum.Enum):
    LOGT_FIXED_NU = "logt"
    LOGT_FREE_NU = "logt-free"
    LOGNORMAL = "lognormal"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class FitResult:
    """Outcome of one fit.

    Log-t and log-normal fits fill ``mu``/``sigma``/``nu`` (``nu = inf`` for
    log-normal); exponential fits fill ``rate``.
    """

    family: Family
    log_likelihood: float
    converged: bool
    iterations: int
    mu: float = math.nan
    sigma: float = math.nan
    nu: float = math.nan
    rate: float = math.nan
    degenerate: bool = False

    @property
    def params(self) -> LogTParams:
        if self.family is Family.EXPONENTIAL:
            raise AttributeError("exponential fit has no log-t parameters")
        return LogTParams(self.mu, self.sigma, self.nu)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.family is Family.EXPONENTIAL:
            return -np.expm1(-self.rate * x)
        return t_cdf((np.log(x) - self.mu) / self.sigma, self.nu)


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    n: int

    @property
    def passed(self) -> bool:
        return self.p_value > 0.05


@dataclass(frozen=True)
class TailStats:
    skewness: float
    cv: float
    p90_over_p50: float
    p99_over_p50: float
    top10_share: float


@dataclass(frozen=True)
class TailLawFit:
    alpha_hat: float
    intercept: float
    r_squared: float
    n_tail_points: int


def _positive(samples, minimum: int) -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < minimum:
        raise InsufficientDataError(f"need at least {minimum} samples, got {x.size}")
    if np.any(~(x > 0)) or np.any(~np.isfinite(x)):
        raise DomainError("samples must be finite and > 0")
    return x


def nearest_rank(sorted_x: np.ndarray, p: float) -> float:
    """The ceil(p*n)-th order statistic of an ascending array."""
    n = sorted_x.size
    k = min(max(int(math.ceil(p * n)), 1), n)
    return float(sorted_x[k - 1])


# ---------------------------------------------------------------------------
# log-t likelihood


def loglik_logt(samples, params: LogTParams) -> float:
    x = _positive(samples, 1)
    lx = np.log(x)
    z = (lx - params.mu) / params.sigma
    return float(np.sum(t_logpdf(z, params.nu) - math.log(params.sigma) - lx))


def grad_loglik_logt(samples, params: LogTParams) -> tuple[float, float]:
    """Analytic (d/dmu, d/dsigma) of :func:`loglik_logt`."""
    x = _positive(samples, 1)
    z = (np.log(x) - params.mu) / params.sigma
    return _grad_z(z, params.sigma, params.nu)


def _grad_z(z, sigma, nu):
    if math.isinf(nu):
        w = np.ones_like(z)
    else:
        w = (nu + 1.0) / (nu + z * z)
    d_mu = float(np.sum(w * z)) / sigma
    d_sigma = float(np.sum(w * z * z - 1.0)) / sigma
    return d_mu, d_sigma


def _hessian_z(z, sigma, nu):
    """Hessian of the log-likelihood in (mu, sigma)."""
    if math.isinf(nu):
        w = np.ones_like(z)
        r = np.ones_like(z)
    else:
        w = (nu + 1.0) / (nu + z * z)
        r = (nu - z * z) / (nu + z * z)
    wz = w * z
    s2 = sigma * sigma
    h_mm = -float(np.sum(w * r)) / s2
    h_ms = -float(np.sum(wz + wz * r)) / s2
    h_ss = -float(np.sum(wz * z - 1.0 + wz * z * r + wz * z)) / s2
    return np.array([[h_mm, h_ms], [h_ms, h_ss]])


def _newton_polish(lx, mu, sigma, nu, steps=8):
    """Safeguarded Newton steps; a step is kept only if it shrinks the gradient
    without lowering the likelihood beyond rounding."""

    def state(m, s):
        z = (lx - m) / s
        val = float(np.sum(t_logpdf(z, nu))) - lx.size * math.log(s)
        return val, np.array(_grad_z(z, s, nu))

    cur, g = state(mu, sigma)
    for _ in range(steps):
        h = _hessian_z((lx - mu) / sigma, sigma, nu)
        try:
            delta = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(delta)):
            break
        m_new, s_new = mu + delta[0], sigma + delta[1]
        if not s_new > SIGMA_FLOOR:
            break
        new, g_new = state(m_new, s_new)
        if new < cur - 1e-10 * max(1.0, abs(cur)):
            break
        if np.max(np.abs(g_new)) >= np.max(np.abs(g)):
            break
        mu, sigma, cur, g = float(m_new), float(s_new), new, g_new
    return mu, sigma


def _robust_start(lx: np.ndarray) -> tuple[float, float]:
    mu0 = float(np.median(lx))
    s0 = 1.4826 * float(np.median(np.abs(lx - mu0)))
    if not s0 > SIGMA_FLOOR:
        s0 = float(np.std(lx))
    if not s0 > SIGMA_FLOOR:
        s0 = 1.0
    return mu0, s0


def fit_logt_fixed_nu(samples, nu: float = 3.5) -> FitResult:
    """MLE of (mu, sigma) at fixed nu by L-BFGS-B over (mu, ln sigma)."""
    x = _positive(samples, 3)
    lx = np.sort(np.log(x))
    n = lx.size
    family = Family.LOGNORMAL if math.isinf(nu) else Family.LOGT_FIXED_NU
    if lx[0] == lx[-1]:
        mu = float(lx[0])
        params = LogTParams(mu, SIGMA_FLOOR, nu)
        return FitResult(family, loglik_logt(x, params), True, 0,
                         mu=mu, sigma=SIGMA_FLOOR, nu=nu, degenerate=True)

    const = float(np.mean(lx))

    def objective(theta):
        mu, log_s = theta
        s = math.exp(log_s)
        z = (lx - mu) / s
        nll = -(float(np.mean(t_logpdf(z, nu))) - log_s - const)
        g_mu, g_s = _grad_z(z, s, nu)
        return nll, np.array([-g_mu / n, -g_s * s / n])

    mu0, s0 = _robust_start(lx)
    res = minimize(objective, np.array([mu0, math.log(s0)]), jac=True,
                   method="L-BFGS-B",
                   bounds=[(None, None), (math.log(SIGMA_FLOOR), None)],
                   options={"maxiter": MAX_ITER, "ftol": 1e-15, "gtol": 1e-12})
    mu, log_s = (float(v) for v in res.x)
    sigma = max(math.exp(log_s), SIGMA_FLOOR)
    if sigma > SIGMA_FLOOR:
        mu, sigma = _newton_polish(lx, mu, sigma, nu)
    params = LogTParams(mu, sigma, nu)
    g_mu, g_s = grad_loglik_logt(x, params)
    at_floor = sigma <= SIGMA_FLOOR * (1 + 1e-9)
    stationary = math.hypot(g_mu, g_s * sigma) <= GRAD_TOL * max(1.0, n)
    converged = res.nit < MAX_ITER and (stationary or at_floor)
    return FitResult(family, loglik_logt(x, params), converged, int(res.nit),
                     mu=mu, sigma=sigma, nu=nu, degenerate=at_floor)


def fit_logt_free_nu(samples, nu_grid: Sequence[float] = DEFAULT_NU_GRID) -> FitResult:
    """Profile the likelihood over a grid of nu; keep the best grid point."""
    if len(nu_grid) == 0:
        raise DomainError("nu_grid is empty")
    best = None
    for nu in nu_grid:
        if not nu > 0:
            raise DomainError(f"grid values must be > 0, got {nu!r}")
        fr = fit_logt_fixed_nu(samples, float(nu))
        if best is None or fr.log_likelihood > best.log_likelihood:
            best = fr
    if len(nu_grid) == 1:
        return best
    return FitResult(Family.LOGT_FREE_NU, best.log_likelihood, best.converged,
                     best.iterations, mu=best.mu, sigma=best.sigma, nu=best.nu,
                     degenerate=best.degenerate)


def fit_lognormal(samples) -> FitResult:
    x = _positive(samples, 2)
    lx = np.log(x)
    mu = float(np.mean(lx))
    sd = float(np.std(lx))
    degenerate = not sd > SIGMA_FLOOR
    sigma = SIGMA_FLOOR if degenerate else sd
    ll = loglik_logt(x, LogTParams(mu, sigma, math.inf))
    return FitResult(Family.LOGNORMAL, ll, True, 0, mu=mu, sigma=sigma,
                     nu=math.inf, degenerate=degenerate)


def fit_exponential(samples) -> FitResult:
    x = _positive(samples, 1)
    rate = 1.0 / float(np.mean(x))
    ll = float(x.size * math.log(rate) - rate * np.sum(x))
    return FitResult(Family.EXPONENTIAL, ll, True, 0, rate=rate)


def fit_family(samples, family: Family | str, nu: float = 3.5,
               nu_grid: Sequence[float] = DEFAULT_NU_GRID) -> FitResult:
    family = Family(family)
    if family is Family.LOGT_FIXED_NU:
        return fit_logt_fixed_nu(samples, nu)
    if family is Family.LOGT_FREE_NU:
        return fit_logt_free_nu(samples, nu_grid)
    if family is Family.LOGNORMAL:
        return fit_lognormal(samples)
    return fit_exponential(samples)


# ---------------------------------------------------------------------------
# goodness of fit


def kolmogorov_sf(lam: float) -> float:
    """Asymptotic Kolmogorov survival Q(lam) = 2 sum (-1)^(k-1) exp(-2 k^2 lam^2)."""
    if lam < 0.2:
        return 1.0  # 1 - Q(0.2) < 1e-12
    total = 0.0
    for k in range(1, 101):
        term = math.exp(-2.0 * k * k * lam * lam)
        total += term if k % 2 else -term
        if term < 1e-12 * max(total, 1e-300):
            break
    return min(max(2.0 * total, 0.0), 1.0)


def ks_test(samples, cdf: Callable) -> KsResult:
    """One-sample KS test against a fully specified continuous CDF."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 5:
        raise InsufficientDataError(f"KS test needs >= 5 samples, got {n}")
    f = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))
    d = min(max(d, 0.0), 1.0)
    en = math.sqrt(n)
    p = kolmogorov_sf((en + 0.12 + 0.11 / en) * d)
    return KsResult(d, p, n)


# ---------------------------------------------------------------------------
# descriptive tail statistics


def tail_stats(samples) -> TailStats:
    x = np.sort(_positive(samples, 10))
    n = x.size
    mean = float(np.mean(x))
    dev = x - mean
    m2 = float(np.mean(dev ** 2))
    m3 = float(np.mean(dev ** 3))
    skew = m3 / m2 ** 1.5 if m2 > 0 else 0.0
    cv = math.sqrt(m2) / mean
    p50 = nearest_rank(x, 0.5)
    k = int(math.ceil(0.1 * n))
    top = float(np.sum(x[n - k:])) / float(np.sum(x))
    return TailStats(skewness=skew, cv=cv,
                     p90_over_p50=nearest_rank(x, 0.9) / p50,
                     p99_over_p50=nearest_rank(x, 0.99) / p50,
                     top10_share=top)


def loglog_regression(ns, survival) -> TailLawFit:
    """Least squares ``ln S = intercept - alpha * ln n``."""
    ln_n = np.log(np.asarray(ns, dtype=float))
    ln_s = np.log(np.asarray(survival, dtype=float))
    if ln_n.size < 5:
        raise InsufficientDataError(f"need >= 5 tail points, got {ln_n.size}")
    slope, intercept = np.polyfit(ln_n, ln_s, 1)
    resid = ln_s - (intercept + slope * ln_n)
    ss_tot = float(np.sum((ln_s - ln_s.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return TailLawFit(alpha_hat=float(-slope), intercept=float(intercept),
                      r_squared=r2, n_tail_points=int(ln_n.size))


def fit_tail_slope(lengths, n_min: int = 20, n_points: int = 40,
                   min_count: int = 50) -> TailLawFit:
    """Power-law exponent of the empirical survival of integer lengths.

    Survival is read at log-spaced n >= n_min, keeping only points with at
    least ``min_count`` exceedances.
    """
    lengths = np.sort(np.asarray(lengths).ravel())
    total = lengths.size
    if total < 10_000:
        raise InsufficientDataError(f"tail fit needs >= 1e4 lengths, got {total}")
    if n_min < 1:
        raise DomainError("n_min must be >= 1")
    if total < min_count:
        raise InsufficientDataError("not enough lengths for the exceedance floor")
    # #{L > n} >= min_count  <=>  n < (min_count-th largest length)
    n_hi = int(lengths[total - min_count]) - 1
    if n_hi < n_min:
        raise InsufficientDataError("no tail points above n_min with enough exceedances")
    grid = np.unique(np.round(np.geomspace(n_min, n_hi, n_points)).astype(np.int64))
    exceed = total - np.searchsorted(lengths, grid, side="right")
    keep = exceed >= min_count
    grid, exceed = grid[keep], exceed[keep]
    if grid.size < 5:
        raise InsufficientDataError(f"only {grid.size} usable tail points")
    return loglog_regression(grid, exceed / total)


# ---------------------------------------------------------------------------
# per-prompt sample files


def _length(val, lineno, field="length"):
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise TraceParseError(f"{field} must be a number", lineno, field)
    if not val > 0:
        raise TraceParseError(f"{field} must be > 0", lineno, field)
    return float(val)


def _parse_grouped_jsonl(text: str) -> dict[str, np.ndarray]:
    groups: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise TraceParseError("record must be a JSON object", lineno)
        for key in ("prompt_id", "lengths"):
            if key not in rec:
                raise TraceParseError(f"missing field {key!r}", lineno, key)
        pid = str(rec["prompt_id"])
        if pid in groups:
            raise TraceParseError(f"duplicate prompt_id {pid!r}", lineno, "prompt_id")
        if not isinstance(rec["lengths"], list):
            raise TraceParseError("lengths must be a list", lineno, "lengths")
        groups[pid] = np.array([_length(v, lineno, "lengths") for v in rec["lengths"]])
    return groups


def _parse_grouped_csv(text: str) -> dict[str, np.ndarray]:
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None or [h.strip() for h in header] != ["prompt_id", "length"]:
        raise TraceParseError("header must be 'prompt_id,length'", 1)
    acc: dict[str, list[float]] = {}
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise TraceParseError(f"expected 2 columns, got {len(row)}", lineno)
        try:
            val = float(row[1])
        except ValueError:
            raise TraceParseError("length must be a number", lineno, "length") from None
        acc.setdefault(row[0], []).append(_length(val, lineno))
    return {k: np.array(v) for k, v in acc.items()}


def load_grouped(path) -> dict[str, np.ndarray]:
    """Samples by prompt from JSON lines or long-form CSV (chosen by suffix)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".csv":
        return _parse_grouped_csv(text)
    return _parse_grouped_jsonl(text)


def dumps_grouped(groups: dict[str, Sequence[float]]) -> str:
    out = []
    for pid, xs in groups.items():
        lengths = [int(v) if float(v).is_integer() else float(v) for v in xs]
        out.append(json.dumps({"prompt_id": pid, "lengths": lengths}) + "\n")
    return "".join(out)


@dataclass(frozen=True)
class PromptFit:
    prompt_id: str
    fit: FitResult
    ks: KsResult
    tail: TailStats | None

    def to_dict(self) -> dict:
        f = self.fit
        d = {"prompt_id": self.prompt_id, "family": f.family.value,
             "log_likelihood": f.log_likelihood, "converged": f.converged,
             "degenerate": f.degenerate, "ks_statistic": self.ks.statistic,
             "ks_p_value": self.ks.p_value, "ks_pass": self.ks.passed}
        if f.family is Family.EXPONENTIAL:
            d["rate"] = f.rate
        else:
            d.update(mu=f.mu, sigma=f.sigma, nu=None if math.isinf(f.nu) else f.nu)
        if self.tail is not None:
            d.update(skewness=self.tail.skewness, cv=self.tail.cv,
                     top10_share=self.tail.top10_share)
        return d


def fit_prompts(groups: dict[str, np.ndarray], family: Family | str,
                nu: float = 3.5) -> list[PromptFit]:
    """Fit every prompt's samples and KS-test the fit against them."""
    out = []
    for pid, xs in groups.items():
        fr = fit_family(xs, family, nu=nu)
        tail = tail_stats(xs) if xs.size >= 10 else None
        out.append(PromptFit(pid, fr, ks_test(xs, fr.cdf), tail))
    return out


def pass_rate(fits: Sequence[PromptFit]) -> float:
    if not fits:
        return 0.0
    return sum(f.ks.passed for f in fits) / len(fits)
