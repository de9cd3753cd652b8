import warnings

import numpy as np
import pytest

from nof1.datamodel import OutcomeSeries
from nof1.errors import ValidationError
from nof1.fit_single import ModelSpec, fit_bayes
from nof1.mcmc import McmcSettings
from nof1.meta import (
    HierPriors,
    PoolingSpec,
    SubgroupSpec,
    carryover_pooled,
    fit_hier,
    shrinkage_report,
    write_hier_report,
)
from nof1.protocol import two_arm_protocol
from nof1.simulate import CarryoverSpec, GenerativeParams, MissingnessSpec, simulate_individual, simulate_series

QUICK = McmcSettings(n_chains=2, n_warmup=300, n_samples=500)


def two_stage_series(lengths, delta=0.3, tau=0.5, seed=3):
    """One block per participant: m reference measurements then m active ones, unit noise."""
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


def test_single_unpooled_individual_collapses_to_single_trial_fit():
    s = simulate_individual(two_arm_protocol(3, 2, 7), "ABBABA", GenerativeParams(delta=1, rho=0.3), rng_seed=4)
    spec = ModelSpec(error_model="ar1", mcmc=QUICK)
    h = fit_hier([s], spec, PoolingSpec(delta="unrelated", gamma="unrelated"))
    single = fit_bayes(s, spec)
    for k in ("delta", "sigma", "rho"):
        hk = "delta[p1]" if k == "delta" else k
        a, b = h[hk], single[k]
        assert abs(a.mean - b.mean) < 4 * np.hypot(a.mcse, b.mcse), k


def test_unrelated_regime_matches_independent_fits():
    series = simulate_series(two_arm_protocol(3, 2, 7), 3, GenerativeParams(delta=1, sd_delta=1), rng_seed=5)
    spec = ModelSpec(mcmc=QUICK)
    h = fit_hier(series, spec, PoolingSpec(delta="unrelated", sigma="unrelated"))
    for s in series:
        own = fit_bayes(s, spec)["delta"]
        a = h[f"delta[{s.participant_id}]"]
        assert abs(a.mean - own.mean) < 4 * np.hypot(a.mcse, own.mcse)


def test_preconditions():
    series = simulate_series(two_arm_protocol(2, 2, 4), 3, GenerativeParams(), rng_seed=1)
    with pytest.raises(ValidationError, match="need >= 2 individuals"):
        fit_hier(series[:1])
    for s in series:
        s.covariates["z"] = 1.0
    with pytest.raises(ValidationError, match="needs random pooling"):
        fit_hier(series, pooling=PoolingSpec(delta="common"), subgroup=SubgroupSpec("z"))
    with pytest.raises(ValidationError, match="missing or non-finite"):
        fit_hier(series, subgroup=SubgroupSpec("sex"))
    with pytest.raises(ValidationError):
        PoolingSpec(rho="random")


def test_single_treatment_participant_needs_pooled_delta():
    p = two_arm_protocol(2, 2, 5)
    series = [simulate_individual(p, seq, GenerativeParams(delta=1), rng_seed=i, participant_id=f"p{i}")
              for i, seq in enumerate(["ABBA", "BAAB", "AAAA"])]
    with pytest.raises(ValidationError, match="cannot inform"):
        fit_hier(series, ModelSpec(mcmc=QUICK), PoolingSpec(delta="unrelated"))
    h = fit_hier(series, ModelSpec(mcmc=QUICK))
    assert "delta[p2]" in h.posterior.params


def test_tight_hyperprior_forces_equal_effects():
    series = simulate_series(two_arm_protocol(2, 2, 7), 5, GenerativeParams(delta=1, sd_delta=2), rng_seed=2)
    h = fit_hier(series, ModelSpec(mcmc=QUICK), hyper=HierPriors(tau_scale=1e-6))
    means = [h[f"delta[{s.participant_id}]"].mean for s in series]
    assert np.ptp(means) < 1e-3
    assert np.all(h.draws["sd_delta"] >= 0)


def test_zero_data_participant_borrows_everything():
    series = two_stage_series([10] * 6)
    gone = series[0].replace(value=np.full(len(series[0]), np.nan))
    series = [gone] + series[1:]
    h = fit_hier(series, ModelSpec(mcmc=QUICK), hyper=HierPriors(fixed={"sigma": 1.0}))
    rows = shrinkage_report(h, series)
    r0 = rows[0]
    assert r0.weight == 0 and r0.weight_closed_form == 0
    assert "no_own_estimate" in r0.flag and "missing_heavy" in r0.flag
    pop = h.population_mean_draws("delta").reshape(-1)
    tau = h.draws["sd_delta"].reshape(-1)
    # with no data the individual effect is a draw from the population distribution
    ind = h.individual_draws("delta", r0.participant_id).reshape(-1)
    assert ind.mean() == pytest.approx(pop.mean(), abs=4 * r0.posterior_mcse)
    assert ind.var() == pytest.approx(pop.var() + np.mean(tau**2), rel=0.2)


def test_participant_with_most_data_gets_largest_weight():
    series = two_stage_series([6, 6, 6, 60, 6, 6], seed=8)
    h = fit_hier(series, ModelSpec(mcmc=QUICK), hyper=HierPriors(fixed={"sigma": 1.0}))
    rows = shrinkage_report(h, series)
    w = [r.weight_closed_form for r in rows]
    assert int(np.argmax(w)) == 3
    assert int(np.argmin([r.posterior_sd for r in rows])) == 3


def test_balanced_posteriors_sit_between_own_and_population():
    series = simulate_series(two_arm_protocol(2, 2, 7), 10, GenerativeParams(delta=0.5, sd_delta=0.5, sigma=1),
                             rng_seed=6)
    h = fit_hier(series, ModelSpec(mcmc=McmcSettings(n_chains=2, n_warmup=500, n_samples=1000)))
    for r in shrinkage_report(h, series):
        lo, hi = sorted([r.own_estimate, r.population_mean])
        assert lo - 2 * r.posterior_mcse < r.posterior_mean < hi + 2 * r.posterior_mcse, r


def test_carryover_recovery():
    p = two_arm_protocol(3, 2, 7)
    params = GenerativeParams(delta=1, sigma=0.5, carryover=CarryoverSpec(2, {("A", "B"): 1.0, ("B", "A"): -0.5}))
    series = simulate_series(p, 30, params, rng_seed=12)
    res = carryover_pooled(series, 2, ModelSpec(mcmc=QUICK))
    assert res.excluded == []
    for nm, truth in (("carry_A_B", 1.0), ("carry_B_A", -0.5)):
        s = res.population[nm]
        assert abs(s.mean - truth) < 3 * s.sd, nm
    assert len(res.individual["carry_A_B"]) == 30


def test_carryover_absent_transition_warns():
    p = two_arm_protocol(1, 2, 5)
    series = [simulate_individual(p, "AB", GenerativeParams(delta=1), rng_seed=i, participant_id=f"p{i}")
              for i in range(3)]
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = carryover_pooled(series, 1, ModelSpec(mcmc=QUICK), PoolingSpec(carryover="common"))
    assert res.excluded == [("B", "A")]
    assert any("B->A" in str(x.message) for x in w)


def test_carryover_single_participant_precondition():
    s = simulate_individual(two_arm_protocol(1, 2, 5), "AB", GenerativeParams())
    with pytest.warns(UserWarning), pytest.raises(ValidationError, match="at least 2 crossovers"):
        carryover_pooled([s], 1)


def test_report_files(tmp_path):
    series = simulate_series(two_arm_protocol(2, 2, 4), 4, GenerativeParams(delta=1, sd_delta=0.5),
                             missing=MissingnessSpec("mcar", 0.1), rng_seed=9)
    h = fit_hier(series, ModelSpec(mcmc=McmcSettings(n_chains=2, n_warmup=50, n_samples=50)))
    write_hier_report(h, series, tmp_path)
    assert (tmp_path / "population.csv").read_text().startswith("parameter,")
    assert len((tmp_path / "individuals.csv").read_text().splitlines()) == 5
    assert '"pooling"' in (tmp_path / "run.json").read_text()


def test_no_heterogeneity_concentrates_sd_near_zero():
    p = two_arm_protocol(4, 2, 7)
    series = simulate_series(p, 40, GenerativeParams(alpha=5, delta=0.5, rho=0.3, sigma=0.5), rng_seed=21)
    h = fit_hier(series, ModelSpec(error_model="ar1", mcmc=McmcSettings(n_chains=2, n_warmup=500, n_samples=1000)))
    assert h["sd_delta"].quantiles[97.5] < 0.2


def test_series_reference_carries_into_pooled_fit():
    p = two_arm_protocol(2, 2, 7, ids=("walk", "resistance"))
    series = simulate_series(p, 4, GenerativeParams(delta=2.0, sigma=0.1), rng_seed=3)
    h = fit_hier(series, ModelSpec(mcmc=QUICK))
    assert h.reference == "walk"
    assert h["delta"].mean > 1.5
