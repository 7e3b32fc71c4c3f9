"""Output-length predictors and the dynamic-batching prediction pipeline.

The learned encoder is replaced by stand-ins with known error: an oracle
that returns each request's true log-t parameters, a noisy variant that
perturbs them in (mu, log(1 + sigma)) space, a point-estimate baseline,
and a "fitted" predictor that re-fits a distribution family to a handful
of repeated generations (used for family ablations).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dist import CensoredLogT, LogTParams, McContext, censored_expectation, sample_logt
from .errors import ConfigError, UsageError
from .fit import Family, fit_family
from .workload import Request

SIGMA_HAT_FLOOR = 1e-6


@dataclass(frozen=True)
class PredictedDist:
    mu_hat: float
    sigma_hat: float
    nu: float = 3.5

    def __post_init__(self):
        if not (self.sigma_hat > 0) or not math.isfinite(self.sigma_hat):
            raise ConfigError(f"sigma_hat must be finite and > 0, got {self.sigma_hat!r}")

    def censored(self, x_max: float) -> CensoredLogT:
        return CensoredLogT(LogTParams(self.mu_hat, self.sigma_hat, self.nu), x_max)


@dataclass(frozen=True)
class NoiseSpec:
    mu_noise_sd: float = 0.0
    sigma_tilde_noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mu_noise_sd < 0 or self.sigma_tilde_noise_sd < 0:
            raise ConfigError("noise standard deviations must be >= 0")

    @property
    def silent(self) -> bool:
        return self.mu_noise_sd == 0 and self.sigma_tilde_noise_sd == 0


@dataclass(frozen=True)
class BatcherConfig:
    timeout_s: float = 0.003
    max_batch: int = 32
    latency_base_s: float = 0.002
    latency_per_item_s: float = 0.0001

    def __post_init__(self):
        if not self.timeout_s > 0:
            raise ConfigError("timeout_s must be > 0")
        if self.max_batch < 1:
            raise ConfigError("max_batch must be >= 1")
        if self.latency_base_s < 0 or self.latency_per_item_s < 0:
            raise ConfigError("prediction latencies must be >= 0")

    def latency(self, batch_size: int) -> float:
        return self.latency_base_s + batch_size * self.latency_per_item_s


def _require_truth(req: Request):
    if req.true_mu is None or req.true_sigma is None:
        raise ConfigError(f"request {req.id} carries no true distribution parameters")


def oracle_predict(req: Request, nu: float = 3.5) -> PredictedDist:
    _require_truth(req)
    return PredictedDist(req.true_mu, req.true_sigma, nu)


def noisy_predict(req: Request, noise: NoiseSpec, nu: float = 3.5) -> PredictedDist:
    _require_truth(req)
    if noise.silent:
        return oracle_predict(req, nu)
    rng = np.random.default_rng([noise.seed, req.id])
    eps_mu, eps_sig = rng.standard_normal(2)
    mu_hat = req.true_mu + noise.mu_noise_sd * eps_mu
    sig_tilde = math.log1p(req.true_sigma) + noise.sigma_tilde_noise_sd * eps_sig
    sigma_hat = max(math.expm1(sig_tilde), SIGMA_HAT_FLOOR)
    return PredictedDist(float(mu_hat), sigma_hat, nu)


def point_predict(req: Request, noise: NoiseSpec, mc: McContext) -> float:
    """Single-number length estimate: E[min(X, max_tokens)] of the noisy prediction."""
    pred = noisy_predict(req, noise, mc.nu)
    return censored_expectation(pred.censored(req.max_tokens), mc)


def fitted_predict(req: Request, family: Family | str, reps: int, seed: int,
                   nu: float = 3.5) -> PredictedDist:
    """Fit ``family`` to ``reps`` fresh generations of the request's true law."""
    _require_truth(req)
    family = Family(family)
    if family is Family.EXPONENTIAL:
        raise ConfigError("exponential fits cannot drive censored log-t scores")
    truth = LogTParams(req.true_mu, req.true_sigma, nu)
    draws = np.maximum(1.0, np.round(sample_logt(truth, reps, int(
        np.random.SeedSequence([seed, req.id]).generate_state(1)[0]))))
    fr = fit_family(draws, family, nu=nu)
    return PredictedDist(fr.mu, max(fr.sigma, SIGMA_HAT_FLOOR), fr.nu)


def batch_schedule(submissions: Sequence[tuple[int, float]],
                   cfg: BatcherConfig) -> list[tuple[int, float]]:
    """Greedy dynamic batching of prediction requests.

    A batch opens with its oldest pending submission and is dispatched once
    it holds ``max_batch`` items or that submission has waited ``timeout_s``,
    whichever comes first.  Returns ``(req_id, ready_time)`` in input order.
    """
    times = [t for _, t in submissions]
    if any(b < a for a, b in zip(times, times[1:])):
        raise UsageError("submissions must be sorted by submit time")
    out = []
    i = 0
    n = len(submissions)
    while i < n:
        deadline = submissions[i][1] + cfg.timeout_s
        j = i
        while j < n and j - i < cfg.max_batch and submissions[j][1] <= deadline:
            j += 1
        size = j - i
        dispatch = submissions[j - 1][1] if size == cfg.max_batch else deadline
        ready = dispatch + cfg.latency(size)
        out.extend((submissions[k][0], ready) for k in range(i, j))
        i = j
    return out
