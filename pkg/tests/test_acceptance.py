"""Acceptance criteria, one test per criterion.

Every test records a short summary of what it measured; the terminal
summary prints one PASS/FAIL line per criterion. Run on its own with
``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from nof1.adaptive import ArmState, regret_ratio, run_adaptive_trial, thompson_step
from nof1.cli import main as cli_main
from nof1.datamodel import OutcomeSeries
from nof1.fit_single import ModelSpec, fit_gls
from nof1.mcmc import McmcSettings
from nof1.meta import HierPriors, SubgroupSpec, fit_hier, shrinkage_report
from nof1.power import PowerQuery, allocation_frontier, estimate_power, mc_se
from nof1.protocol import SequenceConstraints, load_protocol, planned_measurement_bounds, two_arm_protocol
from nof1.rng import stream
from nof1.sbc import SbcConfig, run_sbc
from nof1.sequences import enumerate_sequences
from nof1.simulate import GenerativeParams, ar1_noise, simulate_individual, simulate_series

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
HIER_MCMC = McmcSettings(n_chains=2, n_warmup=500, n_samples=1000)


class Clock:
    def __init__(self, limit):
        self.limit = limit
        self.t0 = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.t0

    def check(self):
        assert self.elapsed < self.limit, f"took {self.elapsed:.1f}s, limit {self.limit}s"


def summarize(record_property, text):
    record_property("summary", text)


def within(x, target, se, k=2.0):
    return abs(x - target) < k * se


# -- 1 -------------------------------------------------------------------------


def test_criterion_01_sequence_counts(record_property):
    clock = Clock(1.0)
    four = load_protocol(FIXTURES / "exercise_four_period.protocol")
    six = load_protocol(FIXTURES / "activity_six_period.protocol")
    ids4, ids6 = four.treatment_ids, six.treatment_ids
    counts = (
        len(enumerate_sequences(4, ids4)),
        len(enumerate_sequences(4, ids4, SequenceConstraints(require_balance=True))),
        len(enumerate_sequences(6, ids6, SequenceConstraints(require_balance=True))),
        len(enumerate_sequences(6, ids6, six.sequence_constraints)),
    )
    summarize(record_property, f"counts={counts} in {clock.elapsed:.3f}s")
    assert counts == (16, 6, 20, 12)
    clock.check()


# -- 2 -------------------------------------------------------------------------


def test_criterion_02_measurement_bounds(record_property):
    clock = Clock(1.0)
    # 2 to 4 periods per treatment, periods of 1 or 2 weeks, daily outcomes, 2 treatments, 12-week cap
    bounds = planned_measurement_bounds((2, 4), (1, 2), 1, 2, cap_weeks=12)
    summarize(record_property, f"bounds={bounds}")
    assert bounds == (28, 84)
    clock.check()


# -- 3 -------------------------------------------------------------------------


def ttest_oracle(a, b):
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    ss = sum((x - ma) ** 2 for x in a) + sum((x - mb) ** 2 for x in b)
    se = math.sqrt(ss / (na + nb - 2) * (1 / na + 1 / nb))
    return mb - ma, se, (mb - ma) / se


def test_criterion_03_gls_matches_t_test(record_property):
    clock = Clock(10.0)
    rng = stream(2024)
    worst = 0.0
    for i in range(100):
        K, M = int(rng.integers(1, 5)), int(rng.integers(2, 10))
        p = two_arm_protocol(K, 2, M)
        seq = "".join(rng.permutation(["A", "B"])) * K
        params = GenerativeParams(alpha=rng.normal(0, 5), delta=rng.normal(0, 2), sigma=rng.uniform(0.1, 5))
        s = simulate_individual(p, seq, params, rng_seed=i)
        a = [v for v, t in zip(s.value, s.treatment_id) if t == "A"]
        b = [v for v, t in zip(s.value, s.treatment_id) if t == "B"]
        est, se, t = ttest_oracle(a, b)
        g = fit_gls(s)
        worst = max(worst, abs(g.estimate() - est), abs(g.stderr() - se), abs(g.tvalue() - t) / max(1, abs(t)))
    summarize(record_property, f"max abs diff {worst:.2e} over 100 datasets, {clock.elapsed:.1f}s")
    assert worst < 1e-10
    clock.check()


# -- 4 -------------------------------------------------------------------------


def lag1(x):
    x = x - x.mean()
    return float(x[1:] @ x[:-1] / (x @ x))


def test_criterion_04_ar1_moments(record_property):
    clock = Clock(120.0)
    p = two_arm_protocol(5, 2, 10)
    spec = ModelSpec(error_model="ar1", ar_chain="trial")
    lines, ok = [], True
    for j, rho in enumerate((-0.5, 0.0, 0.5, 0.9)):
        r1 = lag1(ar1_noise(stream(40, j), [10_000], rho, 1.0))
        series = simulate_series(p, 200, GenerativeParams(alpha=2, delta=1, rho=rho, sigma=1),
                                 rng_seed=41 + j, ar_chain="trial")
        rho_bar = float(np.mean([fit_gls(s, spec).rho for s in series]))
        ok &= abs(r1 - rho) <= 0.02 and abs(rho_bar - rho) <= 0.05
        lines.append(f"rho={rho}: lag1={r1:.4f} fit={rho_bar:.4f}")
    summarize(record_property, "; ".join(lines) + f" ({clock.elapsed:.0f}s)")
    assert ok, lines
    clock.check()


# -- 5 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_05_sbc(record_property):
    clock = Clock(1800.0)
    res = run_sbc(SbcConfig(n_cycles=500, seed=0))
    pv = res.ks_pvalues()
    summarize(record_property, "KS p " + " ".join(f"{k}={v:.3f}" for k, v in pv.items())
              + f"; coverage={res.coverage:.3f}; nonconverged={res.nonconverged}; {clock.elapsed:.0f}s")
    assert min(pv.values()) > 0.01, pv
    assert abs(res.coverage - 0.95) <= 0.03
    clock.check()


# -- 6 -------------------------------------------------------------------------


def replicate_fits(params, n_rep, subgroup=None, n=40, K=4):
    p = two_arm_protocol(K, 2, 7)
    fits = []
    for r in range(n_rep):
        series = simulate_series(p, n, params, rng_seed=r)
        spec = ModelSpec(error_model="ar1", mcmc=McmcSettings(**{**HIER_MCMC.__dict__, "seed": r}))
        fits.append(fit_hier(series, spec, subgroup=subgroup))
    return fits


def rep_mean_se(values):
    v = np.asarray(values)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


def toy_series(lengths, delta, tau, seed):
    """Two-stage toy: m reference then m active outcomes with unit noise."""
    rng = np.random.default_rng(seed)
    out = []
    for i, m in enumerate(lengths):
        d = delta + tau * rng.standard_normal()
        y = np.r_[rng.standard_normal(m), d + rng.standard_normal(m)]
        out.append(OutcomeSeries(
            f"p{i:02d}", np.ones(2 * m), np.r_[np.ones(m), 2 * np.ones(m)],
            np.r_[np.arange(1, m + 1), np.arange(1, m + 1)], np.arange(2 * m), ["A"] * m + ["B"] * m,
            y, np.ones(2 * m),
        ))
    return out


@pytest.mark.slow
def test_criterion_06_hierarchical_recovery_and_shrinkage(record_property):
    clock = Clock(1200.0)
    notes = []

    # recovery: replicate-based Monte Carlo error of the posterior means
    truth = GenerativeParams(alpha=5, delta=0.5, sd_delta=0.3, sd_alpha=1, rho=0.3, sigma=0.5)
    fits = replicate_fits(truth, 100)
    d_mean, d_se = rep_mean_se([h["delta"].mean for h in fits])
    t_mean, t_se = rep_mean_se([h["sd_delta"].mean for h in fits])
    conv = sum(h.converged for h in fits)
    notes.append(f"delta {d_mean:.4f}+-{d_se:.4f}, sd_delta {t_mean:.4f}+-{t_se:.4f}, converged {conv}/100")
    recovery = within(d_mean, 0.5, d_se) and within(t_mean, 0.3, t_se)

    # known-variance toy: posterior mean against the conjugate closed form
    sig, tau, mu = 1.0, 0.5, 0.3
    lengths = [2, 3, 5, 10, 20, 40] * 2
    toy = toy_series(lengths, mu, tau, seed=3)
    h = fit_hier(toy, ModelSpec(mcmc=McmcSettings(n_chains=4, n_warmup=500, n_samples=2000)),
                 hyper=HierPriors(fixed={"sigma": sig, "delta": mu, "sd_delta": tau}))
    zs, wdiff = [], 0.0
    for r, m in zip(shrinkage_report(h, toy), lengths):
        v = sig**2 * 2 / m
        w = tau**2 / (tau**2 + v)
        wdiff = max(wdiff, abs(r.weight_closed_form - w))
        zs.append((r.posterior_mean - (w * r.own_estimate + (1 - w) * mu)) / r.posterior_mcse)
    zmax = float(np.max(np.abs(zs)))
    notes.append(f"toy max |z|={zmax:.2f}, weight err {wdiff:.1e}")
    toy_ok = zmax < 2 and wdiff < 1e-12

    # balanced, equal-variance case: posterior means between own and pooled
    bal = simulate_series(two_arm_protocol(4, 2, 7), 40, GenerativeParams(alpha=5, delta=0.5, sd_delta=0.3,
                                                                          sigma=0.5), rng_seed=500)
    hb = fit_hier(bal, ModelSpec(mcmc=HIER_MCMC))
    strictly, slack = 0, 0
    for r in shrinkage_report(hb, bal):
        lo, hi = sorted([r.own_estimate, r.population_mean])
        strictly += lo < r.posterior_mean < hi
        slack += lo - 2 * r.posterior_mcse < r.posterior_mean < hi + 2 * r.posterior_mcse
    notes.append(f"between {strictly}/40 strictly, {slack}/40 within 2 MC se")
    between_ok = slack == 40

    summarize(record_property, "; ".join(notes) + f"; {clock.elapsed:.0f}s")
    assert recovery, notes[0]
    assert toy_ok, notes[1]
    assert between_ok, notes[2]
    clock.check()


# -- 7 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_07_subgroup_regression(record_property):
    clock = Clock(600.0)
    truth = GenerativeParams(alpha=5, delta=1.0, subgroup_effect=0.5, sd_delta=0.3, sd_alpha=1, rho=0.3, sigma=0.5)
    fits = replicate_fits(truth, 100, subgroup=SubgroupSpec("z"))
    d1, s1 = rep_mean_se([h["delta_1"].mean for h in fits])
    d2, s2 = rep_mean_se([h["delta_2"].mean for h in fits])

    # noiseless limit: group means are delta_1 and delta_1 + delta_2
    p = two_arm_protocol(4, 2, 7)
    quiet = simulate_series(p, 40, GenerativeParams(alpha=5, delta=1.0, subgroup_effect=0.5, sigma=1e-6), rng_seed=0)
    h = fit_hier(quiet, ModelSpec(mcmc=HIER_MCMC), subgroup=SubgroupSpec("z"))
    err = 0.0
    for s in quiet:
        z = s.covariates["z"]
        err = max(err, abs(h[f"delta[{s.participant_id}]"].mean - (1.0 + 0.5 * z)))
        np.testing.assert_array_equal(h.population_mean_draws("delta", s.participant_id),
                                      h.draws["delta_1"] + z * h.draws["delta_2"])
    err = max(err, abs(h["delta_1"].mean - 1.0), abs(h["delta_2"].mean - 0.5))
    summarize(record_property, f"delta_1 {d1:.4f}+-{s1:.4f}, delta_2 {d2:.4f}+-{s2:.4f}; "
                               f"noiseless max err {err:.1e}; {clock.elapsed:.0f}s")
    assert within(d1, 1.0, s1) and within(d2, 0.5, s2)
    assert err < 1e-4
    clock.check()


# -- 8 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_08_power_engine(record_property):
    clock = Clock(1800.0)
    tmpl = two_arm_protocol(2, 2, 7)
    null = estimate_power(PowerQuery(tmpl, [(20, 2, 7)], GenerativeParams(alpha=1, delta=0, sd_delta=0.5),
                                     n_replicates=1000, seed=1))[0]
    null_ok = abs(null.power - 0.05) <= 3 * mc_se(0.05, 1000)

    designs = [(100, 2, 7), (50, 4, 7), (25, 8, 7)]
    between = allocation_frontier(PowerQuery(tmpl, designs, GenerativeParams(alpha=1, delta=0.3, sd_delta=1),
                                             n_replicates=1000, budget=2800, seed=2))
    order = [e.result.n for e in between]
    ivals = [e.result.interval for e in between]
    separated = all(ivals[i][0] > ivals[i + 1][1] for i in range(len(ivals) - 1))

    summarize(record_property,
              f"null power {null.power:.3f} (se {mc_se(0.05, 1000):.4f}); between-dominant "
              + " > ".join(f"{e.result.n}x{e.result.K * 2 * e.result.M}:{e.result.power:.3f}" for e in between)
              + f"; {clock.elapsed:.0f}s")
    assert null_ok
    assert order == [100, 50, 25] and separated
    clock.check()


# -- 9 -------------------------------------------------------------------------


def selection_freq(state, arm, n=10_000, seed=0):
    rng = stream(seed)
    return sum(thompson_step(state, rng) == arm for _ in range(n)) / n


def test_criterion_09_thompson_sampling(record_property):
    clock = Clock(600.0)
    f_deg = selection_freq(ArmState(("A", "B"), (10.0, 0.0), (np.inf, np.inf)), "A")
    f_sym = selection_freq(ArmState(("A", "B"), (0.0, 0.0), (1.0, 1.0)), "A", seed=1)
    f_gap = selection_freq(ArmState(("A", "B"), (1.0, 0.0), (1.0, 1.0)), "A", seed=2)
    freq_ok = f_deg == 1.0 and abs(f_sym - 0.5) <= 0.02 and abs(f_gap - norm.cdf(1 / np.sqrt(2))) <= 0.02

    arms = {"walk": 0.0, "resistance": 0.5, "interval": 1.0}
    traces = [run_adaptive_trial(arms, 200, rng_seed=r) for r in range(100)]
    late = np.array([t.fraction_best(50) for t in traces])
    share = float(np.mean(late > 0.8))
    r50, r100 = regret_ratio(traces, 50), regret_ratio(traces, 100)
    summarize(record_property, f"freqs {f_deg:.3f}/{f_sym:.4f}/{f_gap:.4f}; runs with >80% best late "
                               f"{share:.2f}; regret ratios {r50:.3f}, {r100:.3f}; {clock.elapsed:.1f}s")
    assert freq_ok
    assert share >= 0.9
    assert r50 < 2 and r100 < 2
    clock.check()


# -- 10 ------------------------------------------------------------------------


def _cli_runs(tmp):
    fx = FIXTURES
    sim = tmp / "sim"
    fast = ["--chains", "2", "--warmup", "200", "--samples", "200"]
    return [
        ("design", ["design", "--protocol", fx / "activity_six_period.protocol", "--draw", "5"]),
        ("simulate", ["simulate", "--protocol", fx / "exercise_abbaba.protocol", "--params",
                      fx / "series_params.json", "--n-participants", "6", "--missing-p", "0.1"]),
        ("analyze", ["analyze", "--data", sim / "data.csv", "--participant", "p002", "--error-model", "ar1",
                     "--draws", *fast]),
        ("meta", ["meta", "--data", sim / "data.csv", "--error-model", "ar1", *fast]),
        ("power", ["power", "--query", fx / "allocation.query.json", "--replicates", "50"]),
        ("adaptive", ["adaptive", "--arms", "walk=0,resistance=0.5,interval=1", "--epochs", "100",
                      "--replicates", "5"]),
    ]


def test_criterion_10_cli_determinism(record_property, tmp_path):
    clock = Clock(300.0)
    assert cli_main([str(a) for a in _cli_runs(tmp_path)[1][1]] + ["--seed", "7", "--out", str(tmp_path / "sim")]) == 0
    mismatched, compared = [], 0
    for name, argv in _cli_runs(tmp_path):
        dirs = []
        for k in (1, 2):
            out = tmp_path / f"{name}{k}"
            code = cli_main([str(a) for a in argv] + ["--seed", "7", "--out", str(out)])
            assert code == 0, name
            dirs.append(out)
        files = sorted(p.name for p in dirs[0].iterdir())
        assert files == sorted(p.name for p in dirs[1].iterdir())
        for f in files:
            a, b = (dirs[0] / f).read_bytes(), (dirs[1] / f).read_bytes()
            if f == "manifest.json":
                ma, mb = json.loads(a), json.loads(b)
                for key in ("wall_time", "output_dir"):
                    ma.pop(key), mb.pop(key)
                a, b = json.dumps(ma, sort_keys=True), json.dumps(mb, sort_keys=True)
            compared += 1
            if a != b:
                mismatched.append(f"{name}/{f}")
    summarize(record_property, f"{compared} files compared, mismatches {mismatched or 'none'}; {clock.elapsed:.0f}s")
    assert not mismatched
    clock.check()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
