"""Deterministic discrete-event simulator of a continuous-batching engine.

Time advances in engine iterations.  An iteration over ``b`` running
requests, of which the set ``P`` was admitted at its start, lasts
``c0 + c1*b + c2*sum(prompt_tokens(P))``; each running request emits one
token per iteration, new ones at the end of their admission iteration.
Arrivals and prediction completions that happen during an iteration are
applied, in time order, at the next iteration boundary before admission.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .dist import censored_cvar, censored_expectation, mc_context
from .errors import ConfigError
from .fit import nearest_rank
from .predictor import (BatcherConfig, NoiseSpec, PredictedDist, batch_schedule,
                        fitted_predict, noisy_predict)
from .sched import (Policy, ScoreConfig, WaitingQueue, compute_beta,
                    effective_score_config, policy_next)
from .workload import Request, validate_workload


@dataclass(frozen=True)
class EngineConfig:
    batch_capacity: int = 8
    iter_base_s: float = 0.02
    iter_per_req_s: float = 0.002
    prefill_per_token_s: float = 0.0001

    def __post_init__(self):
        if self.batch_capacity < 1:
            raise ConfigError("batch_capacity must be >= 1")
        if not self.iter_base_s > 0:
            raise ConfigError("iter_base_s must be > 0")
        if self.iter_per_req_s < 0 or self.prefill_per_token_s < 0:
            raise ConfigError("iteration cost coefficients must be >= 0")


@dataclass(frozen=True)
class PredictorConfig:
    """How the simulator obtains per-request length distributions.

    ``kind`` is ``oracle``, ``noisy`` or ``fitted``.  ``batcher=None``
    makes predictions available the instant a request arrives.
    """

    kind: str = "oracle"
    mu_noise_sd: float = 0.0
    sigma_tilde_noise_sd: float = 0.0
    family: str = "logt"
    reps: int = 20
    nu: float = 3.5
    batcher: Optional[BatcherConfig] = field(default_factory=BatcherConfig)
    mc_samples: int = 10_000
    mc_seed: int = 42
    mc_sampler: str = "quantile"

    def __post_init__(self):
        if self.kind not in ("oracle", "noisy", "fitted"):
            raise ConfigError(f"unknown predictor kind {self.kind!r}")
        if self.reps < 3:
            raise ConfigError("fitted predictor needs reps >= 3")


@dataclass
class RequestEvent:
    req_id: int
    arrival_s: float
    predict_ready_s: Optional[float]
    admit_s: float
    first_token_s: float
    completion_s: float
    emitted_tokens: int

    @property
    def ttft(self) -> float:
        return self.first_token_s - self.arrival_s

    @property
    def ptla(self) -> float:
        return (self.completion_s - self.arrival_s) / self.emitted_tokens


@dataclass
class SimReport:
    events: list
    ttft_avg: float
    ttft_p90: float
    ptla_avg: float
    ptla_p90: float
    time_at_k: dict
    throughput_at_w: dict
    heatmap: dict
    completion_length_corr: float
    policy: str = ""
    config_digest: str = ""
    seed: int = 0
    iterations: int = 0

    def headline(self) -> dict:
        return {"ttft_avg": self.ttft_avg, "ttft_p90": self.ttft_p90,
                "ptla_avg": self.ptla_avg, "ptla_p90": self.ptla_p90}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["time_at_k"] = {str(k): v for k, v in self.time_at_k.items()}
        d["throughput_at_w"] = {repr(float(k)): v for k, v in self.throughput_at_w.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False) + "\n"

    def events_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["req_id", "arrival_s", "admit_s", "first_token_s", "completion_s",
                    "emitted_tokens"])
        for e in self.events:
            w.writerow([e.req_id, repr(e.arrival_s), repr(e.admit_s), repr(e.first_token_s),
                        repr(e.completion_s), e.emitted_tokens])
        return buf.getvalue()

    def heatmap_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        t_edges, l_edges = self.heatmap["time_edges"], self.heatmap["len_edges"]
        w.writerow(["time_lo", "time_hi"] + [f"len_{l_edges[j]:g}_{l_edges[j + 1]:g}"
                                              for j in range(len(l_edges) - 1)])
        for i, row in enumerate(self.heatmap["counts"]):
            w.writerow([repr(t_edges[i]), repr(t_edges[i + 1])] + list(row))
        return buf.getvalue()


# ---------------------------------------------------------------------------
# metrics


def heatmap(events: Sequence[RequestEvent], time_bins, len_bins) -> np.ndarray:
    """Counts per (completion-time bin, emitted-length bin), edges clipped."""
    t_edges = np.asarray(time_bins, dtype=float)
    l_edges = np.asarray(len_bins, dtype=float)
    for edges in (t_edges, l_edges):
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ConfigError("bin edges must be strictly increasing with >= 2 values")
    counts = np.zeros((t_edges.size - 1, l_edges.size - 1), dtype=np.int64)
    for e in events:
        i = int(np.clip(np.searchsorted(t_edges, e.completion_s, side="right") - 1,
                        0, t_edges.size - 2))
        j = int(np.clip(np.searchsorted(l_edges, e.emitted_tokens, side="right") - 1,
                        0, l_edges.size - 2))
        counts[i, j] += 1
    return counts


def default_bins(events: Sequence[RequestEvent]) -> tuple[list, list]:
    t_max = max((e.completion_s for e in events), default=1.0)
    time_edges = np.linspace(0.0, max(t_max, 1e-9) * (1 + 1e-12), 21)
    top = max((e.emitted_tokens for e in events), default=1)
    n_pow = max(1, int(math.ceil(math.log2(top + 1))))
    len_edges = [0.0] + [float(2 ** k) for k in range(n_pow + 1)]
    return [float(v) for v in time_edges], len_edges


def summarize(events: Sequence[RequestEvent], ks: Sequence[int] = (),
              ws: Sequence[float] = (), time_bins=None, len_bins=None) -> SimReport:
    events = sorted(events, key=lambda e: e.req_id)
    if events:
        ttft = np.sort([e.ttft for e in events])
        ptla = np.sort([e.ptla for e in events])
        ttft_avg, ttft_p90 = float(np.mean(ttft)), nearest_rank(ttft, 0.9)
        ptla_avg, ptla_p90 = float(np.mean(ptla)), nearest_rank(ptla, 0.9)
    else:
        ttft_avg = ttft_p90 = ptla_avg = ptla_p90 = 0.0
    done = np.sort([e.completion_s for e in events])
    time_at_k = {int(k): float(done[k - 1]) for k in ks if 1 <= k <= done.size}
    throughput = {float(w): int(np.searchsorted(done, w, side="right")) for w in ws}
    if time_bins is None or len_bins is None:
        d_t, d_l = default_bins(events)
        time_bins = d_t if time_bins is None else time_bins
        len_bins = d_l if len_bins is None else len_bins
    counts = heatmap(events, time_bins, len_bins)
    corr = 0.0
    if len(events) > 2:
        c = np.array([e.completion_s for e in events])
        ln = np.array([e.emitted_tokens for e in events], dtype=float)
        if np.std(c) > 0 and np.std(ln) > 0:
            corr = float(np.corrcoef(c, ln)[0, 1])
    return SimReport(events=list(events), ttft_avg=ttft_avg, ttft_p90=ttft_p90,
                     ptla_avg=ptla_avg, ptla_p90=ptla_p90, time_at_k=time_at_k,
                     throughput_at_w=throughput,
                     heatmap={"time_edges": [float(v) for v in time_bins],
                              "len_edges": [float(v) for v in len_bins],
                              "counts": counts.tolist()},
                     completion_length_corr=corr)


# ---------------------------------------------------------------------------
# simulation


def predict(req: Request, cfg: PredictorConfig, seed: int) -> PredictedDist:
    if cfg.kind == "fitted":
        return fitted_predict(req, cfg.family, cfg.reps, seed, cfg.nu)
    noise = NoiseSpec(cfg.mu_noise_sd, cfg.sigma_tilde_noise_sd, seed)
    return noisy_predict(req, noise, cfg.nu)


@lru_cache(maxsize=1 << 16)
def score_inputs(req: Request, cfg: PredictorConfig, alpha: float, seed: int):
    """(E[min(X, max_tokens)], CVaR_alpha) of the request's predicted law."""
    pred = predict(req, cfg, seed)
    mc = mc_context(pred.nu, cfg.mc_samples, cfg.mc_seed, cfg.mc_sampler)
    cl = pred.censored(req.max_tokens)
    return censored_expectation(cl, mc), censored_cvar(cl, alpha, mc)


def run_sim(workload: Sequence[Request], policy: Policy | str,
            score_cfg: ScoreConfig = ScoreConfig(),
            engine_cfg: EngineConfig = EngineConfig(),
            predictor_cfg: PredictorConfig = PredictorConfig(),
            seed: int = 0, ks: Sequence[int] = (), ws: Sequence[float] = (),
            time_bins=None, len_bins=None, config_digest: str = "") -> SimReport:
    policy = Policy(policy)
    validate_workload(workload)
    score_cfg = effective_score_config(policy, score_cfg)
    reqs = {r.id: r for r in workload}
    order = sorted(workload, key=lambda r: (r.arrival_s, r.id))

    # (time, kind, req_id); arrivals (kind 0) precede predictions at equal times
    timeline = [(r.arrival_s, 0, r.id) for r in order]
    ready_at: dict[int, float] = {}
    if policy is not Policy.FCFS:
        if predictor_cfg.batcher is None:
            ready_at = {r.id: r.arrival_s for r in order}
        else:
            subs = [(r.id, r.arrival_s) for r in order]
            ready_at = dict(batch_schedule(subs, predictor_cfg.batcher))
        timeline += [(t, 1, rid) for rid, t in ready_at.items()]
    timeline.sort()

    queue = WaitingQueue(beta_at_build=compute_beta(0, score_cfg.beta_policy))
    admit_s: dict[int, float] = {}
    first_tok: dict[int, float] = {}
    events: list[RequestEvent] = []
    running: list[list] = []  # [req, emitted, target]
    cap = engine_cfg.batch_capacity
    t = 0.0
    ev = 0
    iterations = 0
    n = len(order)

    while len(events) < n:
        while ev < len(timeline) and timeline[ev][0] <= t:
            _, kind, rid = timeline[ev]
            ev += 1
            if kind == 0:
                key = reqs[rid].arrival_s if policy is Policy.FCFS else reqs[rid].max_tokens
                queue.push(rid, key)
            elif rid in queue:
                e, c = score_inputs(reqs[rid], predictor_cfg, score_cfg.cvar_alpha, seed)
                queue.update(rid, e, c, compute_beta(len(queue), score_cfg.beta_policy))
        if not running and not len(queue):
            t = max(t, timeline[ev][0])
            continue

        new_prefill = 0
        while len(running) < cap and len(queue):
            rid = policy_next(policy, queue, score_cfg)
            r = reqs[rid]
            admit_s[rid] = t
            new_prefill += r.prompt_tokens
            running.append([r, 0, r.emitted_tokens])

        b = len(running)
        t_end = t + (engine_cfg.iter_base_s + engine_cfg.iter_per_req_s * b
                     + engine_cfg.prefill_per_token_s * new_prefill)
        iterations += 1
        still = []
        for slot in running:
            r = slot[0]
            slot[1] += 1
            if slot[1] == 1:
                first_tok[r.id] = t_end
            if slot[1] >= slot[2]:
                events.append(RequestEvent(
                    req_id=r.id, arrival_s=r.arrival_s, predict_ready_s=ready_at.get(r.id),
                    admit_s=admit_s[r.id], first_token_s=first_tok[r.id],
                    completion_s=t_end, emitted_tokens=slot[2]))
            else:
                still.append(slot)
        running = still
        t = t_end

    report = summarize(events, ks, ws, time_bins, len_bins)
    report.policy = policy.value
    report.config_digest = config_digest
    report.seed = seed
    report.iterations = iterations
    return report
