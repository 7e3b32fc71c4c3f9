"""Synthetic workloads and JSON-lines request traces.

Two generators live here: the termination-rate mixture (each trajectory
draws an EOS rate ``p ~ Beta(alpha, 1)`` and then a geometric length), whose
survival decays like ``Gamma(alpha + 1) / n**alpha``, and a per-prompt log-t
population with Poisson arrivals used by the simulator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .dist import standard_t
from .errors import ConfigError, DomainError, TraceParseError

MAX_LENGTH = 2**31 - 1


@dataclass(frozen=True)
class Request:
    id: int
    arrival_s: float
    prompt_tokens: int
    true_output_tokens: int
    max_tokens: int
    true_mu: Optional[float] = None
    true_sigma: Optional[float] = None

    @property
    def emitted_tokens(self) -> int:
        return min(self.true_output_tokens, self.max_tokens)


@dataclass(frozen=True)
class TailLawSpec:
    alpha: float
    n: int
    seed: int = 0

    def __post_init__(self):
        if not (self.alpha > 0) or not math.isfinite(self.alpha):
            raise ConfigError(f"alpha must be finite and > 0, got {self.alpha!r}")
        if self.n < 0:
            raise ConfigError("n must be >= 0")


@dataclass(frozen=True)
class WorkloadSpec:
    n_requests: int = 400
    rps: float = 100.0
    mu_range: tuple[float, float] = (3.0, 6.0)
    sigma_range: tuple[float, float] = (0.3, 1.2)
    nu: float = 3.5
    max_tokens: int = 2048
    prompt_tokens_range: tuple[int, int] = (16, 512)
    seed: int = 0

    def __post_init__(self):
        if self.n_requests < 0:
            raise ConfigError("n_requests must be >= 0")
        if not self.rps > 0:
            raise ConfigError("rps must be > 0")
        for name in ("mu_range", "sigma_range", "prompt_tokens_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be ordered, got {(lo, hi)}")
        if not self.sigma_range[0] > 0:
            raise ConfigError("sigma_range must be positive")
        if self.prompt_tokens_range[0] < 1 or self.max_tokens < 1:
            raise ConfigError("token counts must be >= 1")


def _child_seeds(seed: int, k: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(k)]


def termination_rates(spec: TailLawSpec) -> np.ndarray:
    """Per-trajectory EOS rates with density ``alpha * p**(alpha - 1)`` on (0, 1]."""
    rng = np.random.default_rng(spec.seed)
    u = rng.random(spec.n)
    return (1.0 - u) ** (1.0 / spec.alpha)


def gen_termination_mixture(spec: TailLawSpec) -> np.ndarray:
    """Lengths ``L ~ Geometric(p)`` (support >= 1) for mixture-drawn ``p``."""
    p = termination_rates(spec)
    rng = np.random.default_rng(_child_seeds(spec.seed, 1)[0])
    p = np.maximum(p, 1e-15)  # numpy's geometric sampler rejects p == 0
    return rng.geometric(p).astype(np.int64)


def gen_prompt_samples(n_prompts: int, draws: int, mu_range=(3.0, 6.0),
                       sigma_range=(0.3, 1.2), nu: float = 3.5, seed: int = 0,
                       rounded: bool = True) -> dict[str, np.ndarray]:
    """Repeated generations per prompt, each prompt with its own log-t truth."""
    if n_prompts < 0 or draws < 1:
        raise ConfigError("n_prompts must be >= 0 and draws >= 1")
    rng = np.random.default_rng(seed)
    mus = rng.uniform(mu_range[0], mu_range[1], n_prompts)
    sigmas = rng.uniform(sigma_range[0], sigma_range[1], n_prompts)
    y = standard_t(rng, nu, n_prompts * draws).reshape(n_prompts, draws)
    with np.errstate(over="ignore"):
        x = np.minimum(np.exp(mus[:, None] + sigmas[:, None] * y), MAX_LENGTH)
    if rounded:
        x = np.maximum(np.round(x), 1.0)
    return {f"p{i:05d}": x[i] for i in range(n_prompts)}


def poisson_arrivals(rps: float, n: int, seed: int) -> np.ndarray:
    if not rps > 0:
        raise ConfigError("rps must be > 0")
    if n < 0:
        raise ConfigError("n must be >= 0")
    rng = np.random.default_rng(seed)
    return np.cumsum(rng.exponential(1.0 / rps, n))


def gen_logt_workload(spec: WorkloadSpec) -> list[Request]:
    n = spec.n_requests
    if n == 0:
        return []
    s_params, s_arrivals = _child_seeds(spec.seed, 2)
    rng = np.random.default_rng(s_params)
    mus = rng.uniform(spec.mu_range[0], spec.mu_range[1], n)
    sigmas = rng.uniform(spec.sigma_range[0], spec.sigma_range[1], n)
    y = standard_t(rng, spec.nu, n)
    with np.errstate(over="ignore"):
        raw = np.exp(mus + sigmas * y)
    lengths = np.clip(np.round(np.minimum(raw, MAX_LENGTH)), 1, MAX_LENGTH).astype(np.int64)
    lo, hi = spec.prompt_tokens_range
    prompts = rng.integers(lo, hi + 1, n)
    arrivals = poisson_arrivals(spec.rps, n, s_arrivals)
    return [
        Request(id=i, arrival_s=float(arrivals[i]), prompt_tokens=int(prompts[i]),
                true_output_tokens=int(lengths[i]), max_tokens=int(spec.max_tokens),
                true_mu=float(mus[i]), true_sigma=float(sigmas[i]))
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# trace files

_REQUIRED = ("id", "prompt_tokens", "output_tokens", "max_tokens")


def _to_record(r: Request) -> dict:
    rec = {"id": r.id, "arrival_s": r.arrival_s, "prompt_tokens": r.prompt_tokens,
           "output_tokens": r.true_output_tokens, "max_tokens": r.max_tokens}
    if r.true_mu is not None:
        rec["mu"] = r.true_mu
    if r.true_sigma is not None:
        rec["sigma"] = r.true_sigma
    return rec


def dumps_trace(requests: Iterable[Request]) -> str:
    return "".join(json.dumps(_to_record(r)) + "\n" for r in requests)


def save_trace(requests: Iterable[Request], path) -> None:
    Path(path).write_text(dumps_trace(requests), encoding="utf-8", newline="\n")


def _int_field(rec, key, lineno, minimum):
    val = rec[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or val != int(val):
        raise TraceParseError(f"field {key!r} must be an integer", lineno, key)
    if int(val) < minimum:
        raise TraceParseError(f"field {key!r} must be >= {minimum}", lineno, key)
    return int(val)


def _opt_float(rec, key, lineno):
    val = rec.get(key)
    if val is None:
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise TraceParseError(f"field {key!r} must be a number", lineno, key)
    return float(val)


def load_trace(path, rps: Optional[float] = None, seed: int = 0) -> list[Request]:
    """Read a JSON-lines trace, sorted by arrival (stable on file order).

    Records without ``arrival_s`` get Poisson arrivals at ``rps``.
    """
    parsed = []
    missing = []
    seen = set()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise TraceParseError("record must be a JSON object", lineno)
        for key in _REQUIRED:
            if key not in rec:
                raise TraceParseError(f"missing field {key!r}", lineno, key)
        rid = _int_field(rec, "id", lineno, 0)
        if rid in seen:
            raise TraceParseError(f"duplicate id {rid}", lineno, "id")
        seen.add(rid)
        arrival = _opt_float(rec, "arrival_s", lineno)
        if arrival is not None and not (arrival >= 0 and math.isfinite(arrival)):
            raise TraceParseError("arrival_s must be finite and >= 0", lineno, "arrival_s")
        if arrival is None:
            missing.append(len(parsed))
        parsed.append(dict(
            id=rid, arrival_s=arrival,
            prompt_tokens=_int_field(rec, "prompt_tokens", lineno, 1),
            true_output_tokens=_int_field(rec, "output_tokens", lineno, 1),
            max_tokens=_int_field(rec, "max_tokens", lineno, 1),
            true_mu=_opt_float(rec, "mu", lineno),
            true_sigma=_opt_float(rec, "sigma", lineno),
        ))
    if missing:
        if rps is None:
            raise ConfigError(f"{len(missing)} records lack arrival_s and no rate was given")
        for idx, t in zip(missing, poisson_arrivals(rps, len(missing), seed)):
            parsed[idx]["arrival_s"] = float(t)
    parsed.sort(key=lambda d: d["arrival_s"])
    return [Request(**d) for d in parsed]


def validate_workload(requests: Sequence[Request]) -> None:
    ids = [r.id for r in requests]
    if len(set(ids)) != len(ids):
        raise DomainError("request ids must be unique")
    arrivals = [r.arrival_s for r in requests]
    if any(b < a for a, b in zip(arrivals, arrivals[1:])):
        raise DomainError("arrivals must be sorted")
