"""Command-line entry point.

Every verb resolves one JSON config (the bundled canonical config, deep
merged with ``--config`` and ``--set a.b=value`` overrides; dedicated flags
are shorthands for overrides), writes its outputs plus a manifest carrying
the config digest into ``--out``, and prints a summary table on stdout.

Exit codes: 0 success, 2 config or parse error, 3 statistical check failed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import plots
from .dist import LogTParams, sample_logt
from .errors import ConfigError, InsufficientDataError, TieError
from .fit import (Family, dumps_grouped, fit_logt_fixed_nu, fit_prompts, fit_tail_slope,
                  ks_test, load_grouped, pass_rate)
from .predictor import BatcherConfig
from .sched import AdaptiveLinear, Fixed, Policy, ScoreConfig
from .sim import EngineConfig, PredictorConfig, SimReport, run_sim
from .workload import (TailLawSpec, WorkloadSpec, gen_logt_workload, gen_prompt_samples,
                       gen_termination_mixture, load_trace)

EXIT_OK, EXIT_CONFIG, EXIT_STAT = 0, 2, 3


# ---------------------------------------------------------------------------
# config handling


def default_config() -> dict:
    text = resources.files("tiesched").joinpath("configs/canonical.json").read_text("utf-8")
    return json.loads(text)


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Deep-merge ``update`` into a copy of ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = merge(out[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    dotted, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    node: dict = {}
    keys = dotted.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad override key {dotted!r}")
    cur = node
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = val
    return node


def resolve_config(path: Optional[str], overrides: Sequence[str] = (),
                   extra: Sequence[dict] = ()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = merge(cfg, user)
    for item in overrides:
        cfg = merge(cfg, parse_override(item))
    for node in extra:
        cfg = merge(cfg, node)
    return cfg


def config_digest(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def engine_from(cfg: dict) -> EngineConfig:
    try:
        return EngineConfig(**cfg["engine"])
    except TypeError as exc:
        raise ConfigError(f"bad engine section: {exc}") from None


def score_from(cfg: dict) -> ScoreConfig:
    s = cfg["score"]
    mode = s["beta_mode"]
    if mode == "adaptive":
        beta = AdaptiveLinear(float(s["beta_max"]), int(s["q_sat"]))
    elif mode == "fixed":
        beta = Fixed(float(s["beta_fixed"]))
    else:
        raise ConfigError(f"score.beta_mode must be 'adaptive' or 'fixed', got {mode!r}")
    return ScoreConfig(float(s["cvar_alpha"]), beta, float(s["rebuild_drift"]))


def predictor_from(cfg: dict) -> PredictorConfig:
    p = cfg["predictor"]
    b = dict(p["batcher"])
    enabled = b.pop("enabled")
    batcher = BatcherConfig(**b) if enabled else None
    mc = cfg["mc"]
    return PredictorConfig(kind=p["kind"], mu_noise_sd=float(p["mu_noise_sd"]),
                           sigma_tilde_noise_sd=float(p["sigma_tilde_noise_sd"]),
                           family=p["family"], reps=int(p["reps"]), nu=float(p["nu"]),
                           batcher=batcher, mc_samples=int(mc["n_samples"]),
                           mc_seed=int(mc["seed"]), mc_sampler=mc["sampler"])


def arrival_rate(cfg: dict, rps: Optional[float] = None) -> float:
    """Requests per second fed to the engine for a nominal ``rps`` value."""
    w = cfg["workload"]
    rate = float(w["rps"] if rps is None else rps) * float(w["rps_scale"])
    if not rate > 0:
        raise ConfigError("workload.rps * workload.rps_scale must be > 0")
    return rate


def workload_from(cfg: dict, seed: int, rps: Optional[float] = None):
    w = cfg["workload"]
    rate = arrival_rate(cfg, rps)
    if w["trace"] is not None:
        try:
            return load_trace(w["trace"], rps=rate, seed=seed)
        except FileNotFoundError:
            raise ConfigError(f"trace not found: {w['trace']}") from None
    spec = WorkloadSpec(n_requests=int(w["n_requests"]), rps=rate,
                        mu_range=tuple(w["mu_range"]), sigma_range=tuple(w["sigma_range"]),
                        nu=float(w["nu"]), max_tokens=int(w["max_tokens"]),
                        prompt_tokens_range=tuple(w["prompt_tokens_range"]), seed=seed)
    return gen_logt_workload(spec)


# ---------------------------------------------------------------------------
# output helpers


class Outputs:
    """Collects files for one command and writes them with a manifest."""

    def __init__(self, out_dir: str, command: str, cfg: dict):
        self.dir = Path(out_dir)
        self.command = command
        self.cfg = cfg
        self.digest = config_digest(cfg)
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str) -> None:
        self.files[name] = text

    def write(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            (self.dir / name).write_text(text, encoding="utf-8", newline="\n")
        manifest = {"command": self.command, "config": self.cfg,
                    "config_digest": self.digest, "files": sorted(self.files)}
        (self.dir / f"manifest_{self.command}.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8", newline="\n")


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[f"{v:.4g}" if isinstance(v, float) else str(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(wd) for h, wd in zip(header, widths))]
    lines += ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def _fmt_num(x: float) -> str:
    return f"{x:g}".replace(".", "p")


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args, cfg: dict) -> int:
    f = cfg["fit"]
    seed = int(cfg["seed"])
    if args.input:
        try:
            groups = load_grouped(args.input)
        except FileNotFoundError:
            raise ConfigError(f"input not found: {args.input}") from None
    else:
        w = cfg["workload"]
        groups = gen_prompt_samples(int(f["synth_prompts"]), int(f["synth_draws"]),
                                    tuple(w["mu_range"]), tuple(w["sigma_range"]),
                                    float(w["nu"]), seed)
    if not groups:
        raise ConfigError("no prompts to fit")
    families = [m.value for m in Family] if f["family"] == "all" else [Family(f["family"]).value]
    out = Outputs(args.out, "fit", cfg)
    if not args.input:
        out.add("fit_input.jsonl", dumps_grouped(groups))
    rows = []
    for fam in families:
        fits = fit_prompts(groups, fam, nu=float(f["nu"]))
        out.add(f"fit_{fam}.jsonl", "".join(
            json.dumps(pf.to_dict(), sort_keys=True) + "\n" for pf in fits))
        mean_ll = float(np.mean([pf.fit.log_likelihood for pf in fits]))
        rows.append([fam, len(fits), pass_rate(fits), mean_ll])
    header = ["family", "prompts", "ks_pass_rate", "mean_loglik"]
    out.add("fit_summary.csv", csv_text(header, rows))
    out.write()
    print(table(header, rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# tail-check


def tail_check(alpha: float, n: int, seed: int, n_min: int = 20) -> dict:
    if n < 10_000:
        raise ConfigError("tail-check needs n >= 10000 trajectories")
    lengths = gen_termination_mixture(TailLawSpec(alpha, n, seed))
    fit = fit_tail_slope(lengths, n_min=n_min)
    at = 100
    surv = float(np.mean(lengths > at))
    return {"alpha": alpha, "n": n, "seed": seed, "alpha_hat": fit.alpha_hat,
            "r_squared": fit.r_squared, "intercept": fit.intercept,
            "tail_points": fit.n_tail_points, "const_at": at,
            "const_hat": at ** alpha * surv, "const_theory": math.gamma(alpha + 1.0)}


def cmd_tail_check(args, cfg: dict) -> int:
    t = cfg["tail_check"]
    res = tail_check(float(t["alpha"]), int(t["n"]), int(cfg["seed"]), int(t["n_min"]))
    ok = abs(res["alpha_hat"] - res["alpha"]) <= float(t["tolerance"])
    res["passed"] = ok
    out = Outputs(args.out, "tail_check", cfg)
    out.add("tail_check.json", json.dumps(res, sort_keys=True, indent=1) + "\n")
    out.write()
    header = ["alpha", "alpha_hat", "r_squared", "n^a*S(n)@100", "gamma(a+1)", "pass"]
    print(table(header, [[res["alpha"], res["alpha_hat"], res["r_squared"],
                          res["const_hat"], res["const_theory"], "yes" if ok else "no"]]))
    return EXIT_OK if ok else EXIT_STAT


# ---------------------------------------------------------------------------
# simulate


def simulate_one(cfg: dict, policy: str, seed: int, rps: Optional[float] = None,
                 digest: str = "") -> SimReport:
    m = cfg["metrics"]
    return run_sim(workload_from(cfg, seed, rps), policy, score_from(cfg), engine_from(cfg),
                   predictor_from(cfg), seed=seed, ks=m["ks"], ws=m["ws"],
                   time_bins=m["time_bins"], len_bins=m["len_bins"], config_digest=digest)


def cmd_simulate(args, cfg: dict) -> int:
    seed = int(cfg["seed"])
    policies = [p.value for p in Policy] if args.policy == "all" else [Policy(args.policy).value]
    rps_list = cfg["sweep"]["rps"] if args.sweep else [cfg["workload"]["rps"]]
    out = Outputs(args.out, "simulate", cfg)
    header = ["policy", "rps", "ttft_avg", "ttft_p90", "ptla_avg", "ptla_p90"]
    rows = []
    curves: dict[str, tuple[list, list]] = {}
    for rps in rps_list:
        for pol in policies:
            rep = simulate_one(cfg, pol, seed, rps, out.digest)
            tag = f"{pol}_rps{_fmt_num(float(rps))}"
            out.add(f"report_{tag}.json", rep.to_json())
            out.add(f"events_{tag}.csv", rep.events_csv())
            out.add(f"heatmap_{tag}.csv", rep.heatmap_csv())
            if args.svg:
                out.add(f"heatmap_{tag}.svg", plots.heatmap_svg(
                    rep.heatmap["counts"], title=f"{pol} @ {rps:g} rps"))
            h = rep.headline()
            rows.append([pol, float(rps), h["ttft_avg"], h["ttft_p90"],
                         h["ptla_avg"], h["ptla_p90"]])
            xs, ys = curves.setdefault(pol, ([], []))
            xs.append(float(rps))
            ys.append(h["ptla_avg"])
    out.add("simulate_summary.csv", csv_text(header, rows))
    if args.svg and len(rps_list) > 1:
        out.add("ptla_vs_rps.svg", plots.line_chart(curves, "average per-token latency",
                                                    "nominal rps", "s / token"))
    out.write()
    print(table(header, rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def ablation_cells(cfg: dict) -> list[tuple[str, dict]]:
    """(label, score override) for SEPT, each fixed beta and adaptive beta."""
    cells = [("sept", {"beta_mode": "fixed", "beta_fixed": 0.0})]
    cells += [(f"beta={b:g}", {"beta_mode": "fixed", "beta_fixed": float(b)})
              for b in cfg["ablate"]["betas"]]
    cells.append(("adaptive", {"beta_mode": "adaptive"}))
    return cells


def run_ablation(cfg: dict) -> tuple[list[list], list[list], list[str]]:
    a = cfg["ablate"]
    m = cfg["metrics"]
    seeds = [int(cfg["seed"]) + k for k in range(int(a["seeds"]))]
    metric_names = (["ptla_avg", "ptla_p90", "ttft_avg", "ttft_p90"]
                    + [f"time_at_{k}" for k in m["ks"]]
                    + [f"throughput_at_{w:g}" for w in m["ws"]])
    per_seed, rows = [], []
    for label, score in ablation_cells(cfg):
        for fam in a["families"]:
            sub = merge(cfg, {"score": score,
                              "predictor": {"kind": "fitted", "family": fam}})
            policy = "sept" if label == "sept" else "tie"
            vals = []
            for seed in seeds:
                rep = simulate_one(sub, policy, seed)
                v = [rep.ptla_avg, rep.ptla_p90, rep.ttft_avg, rep.ttft_p90]
                v += [rep.time_at_k.get(int(k), math.nan) for k in m["ks"]]
                v += [float(rep.throughput_at_w[float(w)]) for w in m["ws"]]
                vals.append(v)
                per_seed.append([label, fam, seed] + v)
            rows.append([label, fam] + [float(x) for x in np.mean(vals, axis=0)])
    return rows, per_seed, metric_names


def cmd_ablate(args, cfg: dict) -> int:
    rows, per_seed, names = run_ablation(cfg)
    out = Outputs(args.out, "ablate", cfg)
    out.add("ablate.csv", csv_text(["score", "family"] + names, rows))
    out.add("ablate_seeds.csv", csv_text(["score", "family", "seed"] + names, per_seed))
    out.write()
    print(table(["score", "family"] + names[:4], [r[:6] for r in rows]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# repeat-sweep


def repeat_sweep(reps: Sequence[int], trials: int, seed: int, mu_range, sigma_range,
                 nu: float = 3.5, baseline: int = 100) -> list[list]:
    """Mean relative error of (mu, sigma) fitted on r draws vs ``baseline`` draws.

    Each trial draws a truth, ``baseline`` rounded generations, and fits the
    nested prefixes of length r.
    """
    reps = sorted(set(int(r) for r in reps) | {baseline})
    if reps[0] < 3 or reps[-1] > baseline:
        raise ConfigError(f"repetition counts must lie in [3, {baseline}]")
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    err_mu = np.zeros(len(reps))
    err_sig = np.zeros(len(reps))
    for _ in range(trials):
        truth = LogTParams(rng.uniform(*mu_range), rng.uniform(*sigma_range), nu)
        draws = np.maximum(1.0, np.round(sample_logt(truth, baseline, int(rng.integers(2**63)))))
        base = fit_logt_fixed_nu(draws, nu)
        for i, r in enumerate(reps):
            fr = base if r == baseline else fit_logt_fixed_nu(draws[:r], nu)
            err_mu[i] += abs(fr.mu - base.mu) / abs(base.mu)
            err_sig[i] += abs(fr.sigma - base.sigma) / base.sigma
    return [[r, float(err_mu[i] / trials), float(err_sig[i] / trials)]
            for i, r in enumerate(reps)]


def cmd_repeat_sweep(args, cfg: dict) -> int:
    r = cfg["repeat_sweep"]
    w = cfg["workload"]
    rows = repeat_sweep(r["reps"], int(r["trials"]), int(cfg["seed"]), tuple(w["mu_range"]),
                        tuple(w["sigma_range"]), float(w["nu"]), int(r["baseline"]))
    header = ["rep_count", "mu_rel_err", "sigma_rel_err"]
    out = Outputs(args.out, "repeat_sweep", cfg)
    out.add("repeat_sweep.csv", csv_text(header, rows))
    if args.svg:
        out.add("repeat_sweep.svg", plots.line_chart(
            {"mu": ([x[0] for x in rows], [x[1] for x in rows]),
             "sigma": ([x[0] for x in rows], [x[2] for x in rows])},
            "relative error vs baseline fit", "repetitions", "relative error"))
    out.write()
    print(table(header, rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# nu-sweep


def nu_sweep(groups: dict, grid: Sequence[float]) -> list[list]:
    if not groups:
        raise ConfigError("no prompts for the nu sweep")
    rows = []
    for nu in grid:
        if not nu > 0:
            raise ConfigError("nu grid values must be > 0")
        ps = [ks_test(xs, fit_logt_fixed_nu(xs, float(nu)).cdf).p_value
              for xs in groups.values()]
        rows.append([float(nu), float(np.mean(ps))])
    return rows


def cmd_nu_sweep(args, cfg: dict) -> int:
    s = cfg["nu_sweep"]
    if args.data:
        try:
            groups = load_grouped(args.data)
        except FileNotFoundError:
            raise ConfigError(f"data not found: {args.data}") from None
    else:
        w = cfg["workload"]
        groups = gen_prompt_samples(int(s["prompts"]), int(s["draws"]), tuple(w["mu_range"]),
                                    tuple(w["sigma_range"]), float(s["nu_true"]),
                                    int(cfg["seed"]))
    rows = nu_sweep(groups, s["grid"])
    out = Outputs(args.out, "nu_sweep", cfg)
    out.add("nu_sweep.csv", csv_text(["nu", "mean_p"], rows))
    if args.svg:
        out.add("nu_sweep.svg", plots.line_chart(
            {"mean KS p": ([x[0] for x in rows], [x[1] for x in rows])},
            "mean KS p-value by nu", "nu", "mean p"))
    out.write()
    best = max(rows, key=lambda x: x[1])
    print(table(["nu", "mean_p"], rows))
    print(f"best nu: {best[0]:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config merged over the bundled defaults")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. engine.batch_capacity=4")
    common.add_argument("--svg", action="store_true", help="also write SVG plots")

    ap = argparse.ArgumentParser(prog="tiesched", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit length distributions per prompt")
    p.add_argument("input", nargs="?", help="grouped samples (.jsonl or .csv); synthetic if omitted")
    p.add_argument("--family", choices=[m.value for m in Family] + ["all"])
    p.add_argument("--nu", type=float)

    p = sub.add_parser("tail-check", parents=[common], help="check the power-law tail exponent")
    p.add_argument("--alpha", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--n-min", type=int)

    p = sub.add_parser("simulate", parents=[common], help="run the serving simulator")
    p.add_argument("--policy", default="tie", choices=[m.value for m in Policy] + ["all"])
    p.add_argument("--rps", type=float, help="nominal request rate")
    p.add_argument("--sweep", action="store_true", help="run every rate in sweep.rps")
    p.add_argument("--beta-fixed", type=float, help="use a fixed risk coefficient")
    p.add_argument("--trace", help="JSON-lines request trace")

    sub.add_parser("ablate", parents=[common], help="score/family ablation grid")

    p = sub.add_parser("repeat-sweep", parents=[common], help="fit error vs repetition count")
    p.add_argument("--reps", help="comma-separated repetition counts")
    p.add_argument("--trials", type=int)

    p = sub.add_parser("nu-sweep", parents=[common], help="KS p-value across fixed nu")
    p.add_argument("--data", help="grouped samples (.jsonl or .csv); synthetic if omitted")
    return ap


def flag_overrides(args) -> list[dict]:
    """Translate dedicated flags into config overrides."""
    ov: list[dict] = []
    if args.seed is not None:
        ov.append({"seed": args.seed})
    cmd = args.command
    if cmd == "fit":
        if args.family is not None:
            ov.append({"fit": {"family": args.family}})
        if args.nu is not None:
            ov.append({"fit": {"nu": args.nu}})
    elif cmd == "tail-check":
        for flag, key in (("alpha", "alpha"), ("n", "n"), ("n_min", "n_min")):
            if getattr(args, flag) is not None:
                ov.append({"tail_check": {key: getattr(args, flag)}})
    elif cmd == "simulate":
        if args.rps is not None:
            ov.append({"workload": {"rps": args.rps}})
        if args.trace is not None:
            ov.append({"workload": {"trace": args.trace}})
        if args.beta_fixed is not None:
            ov.append({"score": {"beta_mode": "fixed", "beta_fixed": args.beta_fixed}})
    elif cmd == "repeat-sweep":
        if args.reps is not None:
            try:
                reps = [int(x) for x in args.reps.split(",") if x.strip()]
            except ValueError:
                raise ConfigError(f"--reps must be comma-separated integers: {args.reps!r}")
            ov.append({"repeat_sweep": {"reps": reps}})
        if args.trials is not None:
            ov.append({"repeat_sweep": {"trials": args.trials}})
    return ov


COMMANDS = {"fit": cmd_fit, "tail-check": cmd_tail_check, "simulate": cmd_simulate,
            "ablate": cmd_ablate, "repeat-sweep": cmd_repeat_sweep, "nu-sweep": cmd_nu_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = resolve_config(args.config, args.set, flag_overrides(args))
        return COMMANDS[args.command](args, cfg)
    except InsufficientDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAT
    except (TieError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
