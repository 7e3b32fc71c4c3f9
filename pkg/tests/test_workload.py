import json
import math

import numpy as np
import pytest

from tiesched.errors import ConfigError, DomainError, TraceParseError
from tiesched.fit import fit_tail_slope, tail_stats
from tiesched.workload import (Request, TailLawSpec, WorkloadSpec, dumps_trace,
                               gen_logt_workload, gen_prompt_samples, gen_termination_mixture,
                               load_trace, poisson_arrivals, save_trace, termination_rates,
                               validate_workload)


def test_mixture_degenerate_alpha():
    lengths = gen_termination_mixture(TailLawSpec(1e6, 10_000, seed=0))
    assert np.mean(lengths == 1) > 0.99


def test_mixture_deterministic_and_positive():
    a = gen_termination_mixture(TailLawSpec(1.5, 5000, seed=3))
    b = gen_termination_mixture(TailLawSpec(1.5, 5000, seed=3))
    assert np.array_equal(a, b)
    assert a.min() >= 1


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_mixture_rate_mean(alpha):
    p = termination_rates(TailLawSpec(alpha, 1_000_000, seed=1))
    assert p.mean() == pytest.approx(alpha / (alpha + 1), rel=0.01)
    assert p.min() > 0 and p.max() <= 1


def test_mixture_tail_exponent_and_constant():
    lengths = gen_termination_mixture(TailLawSpec(1.5, 1_000_000, seed=0))
    assert 1.35 <= fit_tail_slope(lengths).alpha_hat <= 1.65
    lengths = gen_termination_mixture(TailLawSpec(1.0, 1_000_000, seed=0))
    assert 100 * np.mean(lengths > 100) == pytest.approx(math.gamma(2.0), rel=0.2)


@pytest.mark.parametrize("alpha", [0.0, -1.0, math.inf, math.nan])
def test_tail_spec_validation(alpha):
    with pytest.raises(ConfigError):
        TailLawSpec(alpha, 10)


def test_logt_workload_deterministic_lengths():
    spec = WorkloadSpec(n_requests=20, mu_range=(math.log(50), math.log(50)),
                        sigma_range=(1e-9, 1e-9), seed=4)
    assert all(r.true_output_tokens == 50 for r in gen_logt_workload(spec))


def test_logt_workload_empty_and_reproducible():
    assert gen_logt_workload(WorkloadSpec(n_requests=0)) == []
    spec = WorkloadSpec(n_requests=50, seed=9)
    assert dumps_trace(gen_logt_workload(spec)) == dumps_trace(gen_logt_workload(spec))


def test_logt_workload_invariants():
    w = gen_logt_workload(WorkloadSpec(n_requests=2000, seed=2))
    validate_workload(w)
    arr = [r.arrival_s for r in w]
    assert arr == sorted(arr) and arr[0] >= 0
    assert all(r.true_output_tokens >= 1 for r in w)
    assert all(16 <= r.prompt_tokens <= 512 for r in w)
    assert all(3 <= r.true_mu <= 6 and 0.3 <= r.true_sigma <= 1.2 for r in w)


def test_logt_workload_heavy_tail():
    spec = WorkloadSpec(n_requests=100_000, mu_range=(3, 5), sigma_range=(0.5, 1.2))
    lengths = [r.true_output_tokens for r in gen_logt_workload(spec)]
    assert tail_stats(lengths).cv > 1


def test_workload_spec_validation():
    with pytest.raises(ConfigError):
        WorkloadSpec(rps=0)
    with pytest.raises(ConfigError):
        WorkloadSpec(mu_range=(5, 3))
    with pytest.raises(ConfigError):
        WorkloadSpec(sigma_range=(0, 1))


def test_poisson_arrivals():
    assert poisson_arrivals(100, 0, seed=0).size == 0
    t = poisson_arrivals(100, 100_000, seed=0)
    gaps = np.diff(np.concatenate([[0.0], t]))
    assert gaps.mean() == pytest.approx(0.01, rel=0.05)
    assert np.all(np.diff(t) > 0)
    with pytest.raises(ConfigError):
        poisson_arrivals(0, 5, 0)


def test_prompt_samples():
    g = gen_prompt_samples(5, 30, seed=1)
    assert len(g) == 5 and all(v.size == 30 and v.min() >= 1 for v in g.values())
    assert all(np.array_equal(v, np.round(v)) for v in g.values())


# -- traces -------------------------------------------------------------------------


def test_trace_roundtrip(tmp_path):
    w = gen_logt_workload(WorkloadSpec(n_requests=3, seed=1))
    path = tmp_path / "t.jsonl"
    save_trace(w, path)
    assert load_trace(path) == w
    raw = path.read_bytes()
    assert raw.endswith(b"\n") and b"\r" not in raw
    rec = json.loads(raw.splitlines()[0])
    assert set(rec) == {"id", "arrival_s", "prompt_tokens", "output_tokens", "max_tokens",
                        "mu", "sigma"}


def test_trace_missing_field(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text('{"id": 0, "arrival_s": 0, "prompt_tokens": 3, "output_tokens": 4, '
                    '"max_tokens": 9}\n'
                    '{"id": 1, "arrival_s": 0, "output_tokens": 4, "max_tokens": 9}\n')
    with pytest.raises(TraceParseError) as exc:
        load_trace(path)
    assert exc.value.lineno == 2 and exc.value.field == "prompt_tokens"
    assert "prompt_tokens" in str(exc.value) and "line 2" in str(exc.value)


def test_trace_sorts_unsorted_arrivals(tmp_path):
    w = [Request(5, 2.0, 1, 3, 10), Request(7, 1.0, 1, 3, 10), Request(6, 1.0, 1, 3, 10)]
    path = tmp_path / "t.jsonl"
    path.write_text(dumps_trace(w))
    out = load_trace(path)
    assert [r.id for r in out] == [7, 6, 5]


def test_trace_duplicate_and_bad_json(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text(dumps_trace([Request(1, 0.0, 1, 3, 10), Request(1, 1.0, 1, 3, 10)]))
    with pytest.raises(TraceParseError):
        load_trace(path)
    path.write_text("{oops\n")
    with pytest.raises(TraceParseError) as exc:
        load_trace(path)
    assert exc.value.lineno == 1


def test_trace_missing_arrivals(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text("".join(json.dumps({"id": i, "prompt_tokens": 1, "output_tokens": 2,
                                        "max_tokens": 5}) + "\n" for i in range(4)))
    with pytest.raises(ConfigError):
        load_trace(path)
    out = load_trace(path, rps=10.0, seed=3)
    assert [r.arrival_s for r in out] == list(poisson_arrivals(10.0, 4, 3))


def test_validate_workload():
    with pytest.raises(DomainError):
        validate_workload([Request(1, 0.0, 1, 1, 1), Request(1, 1.0, 1, 1, 1)])
    with pytest.raises(DomainError):
        validate_workload([Request(1, 2.0, 1, 1, 1), Request(2, 1.0, 1, 1, 1)])


def test_emitted_tokens_censoring():
    assert Request(0, 0.0, 1, 100, 5).emitted_tokens == 5
    assert Request(0, 0.0, 1, 3, 5).emitted_tokens == 3
