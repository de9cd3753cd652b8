"""Joint Bayesian analysis of a series of N-of-1 trials.

Per-participant parameters are either unrelated (fixed effects), common
(one shared value) or random (drawn from a normal population whose mean may
depend on participant covariates). Defaults follow the usual partially
random-effects layout: unrelated intercepts, random treatment effects and
trends, common autocorrelation and residual sd.
"""
from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import UnidentifiableError, ValidationError
from .fit_single import ModelSpec, build_design, default_reference, fit_gls, transitions_in
from .mcmc import (
    ColumnSpec,
    GibbsSampler,
    HalfNormal,
    ModelSetup,
    PosteriorSummary,
    effective_sample_size,
    prob_benefit,
    summarize_draws,
)

REGIMES = ("unrelated", "common", "random")


@dataclass(frozen=True)
class PoolingSpec:
    alpha: str = "unrelated"
    delta: str = "random"
    gamma: str = "random"
    rho: str = "common"
    sigma: str = "common"
    carryover: str = "common"

    def __post_init__(self):
        for name in ("alpha", "delta", "gamma", "carryover"):
            if getattr(self, name) not in REGIMES:
                raise ValidationError(f"{name} pooling must be one of {REGIMES}")
        for name in ("rho", "sigma"):
            if getattr(self, name) not in ("unrelated", "common"):
                raise ValidationError(f"{name} pooling must be 'unrelated' or 'common'")

    def for_column(self, name: str) -> str:
        if name.startswith("carry"):
            return self.carryover
        return getattr(self, name.split("_")[0])


@dataclass(frozen=True)
class SubgroupSpec:
    covariate: str
    families: tuple = ("delta",)


@dataclass(frozen=True)
class HierPriors:
    mean_sd: float = 10.0  # population means ~ N(0, mean_sd^2)
    tau_scale: float = 1.0  # population sds ~ half-normal(tau_scale)
    fixed: dict = field(default_factory=dict)


@dataclass
class HierPosterior:
    posterior: PosteriorSummary
    pooling: PoolingSpec
    subgroup: Optional[SubgroupSpec]
    participants: list
    covariates: dict
    missing_fraction: dict
    spec: ModelSpec
    hyper: HierPriors
    columns: list
    reference: str
    flags: dict = field(default_factory=dict)

    @property
    def draws(self):
        return self.posterior.draws

    @property
    def converged(self) -> bool:
        return self.posterior.converged

    def __getitem__(self, name):
        return self.posterior.params[name]

    def _draws(self, name: str) -> np.ndarray:
        """Draws of ``name``; pinned parameters come back as constant arrays."""
        d = self.posterior.draws
        if name in d:
            return d[name]
        if name in self.hyper.fixed:
            shape = next(iter(d.values())).shape
            return np.full(shape, float(self.hyper.fixed[name]))
        raise KeyError(name)

    def individual_draws(self, family: str, pid: str) -> np.ndarray:
        regime = self.pooling.for_column(family)
        if regime == "common":
            key = family
        else:
            key = f"{family}[{pid}]"
        if key in self.posterior.draws or key in self.hyper.fixed:
            return self._draws(key)
        if key.startswith("sigma") or key.startswith("rho"):
            return self._draws(family)
        raise KeyError(key)

    def population_mean_draws(self, family: str, pid: Optional[str] = None) -> np.ndarray:
        """Draws of the population mean for ``family`` (at ``pid``'s covariates)."""
        regime = self.pooling.for_column(family)
        if regime == "common":
            return self._draws(family)
        if regime != "random":
            raise ValidationError(f"{family} is not pooled")
        if self.subgroup is not None and family in self.subgroup.families:
            z = 0.0 if pid is None else self.covariates[pid]
            return self._draws(f"{family}_1") + z * self._draws(f"{family}_2")
        return self._draws(family)

    def population_names(self) -> list:
        return [k for k in self.posterior.params if "[" not in k]

    def individual_names(self) -> list:
        return [k for k in self.posterior.params if "[" in k]

    def population_csv(self, path=None) -> str:
        return _subset_csv(self.posterior, self.population_names(), path)

    def run_metadata(self) -> dict:
        return {
            "pooling": asdict(self.pooling),
            "subgroup": asdict(self.subgroup) if self.subgroup else None,
            "hyperpriors": {"mean_sd": self.hyper.mean_sd, "tau_scale": self.hyper.tau_scale,
                            "fixed": self.hyper.fixed},
            "model": {"include_trend": self.spec.include_trend, "error_model": self.spec.error_model,
                      "carryover_lag": self.spec.carryover_lag, "ar_chain": self.spec.ar_chain},
            "mcmc": asdict(self.spec.mcmc),
            "participants": self.participants,
            "reference": self.reference,
            "missing_fraction": self.missing_fraction,
            "converged": self.posterior.converged,
            "rho_accept_rate": self.posterior.rho_accept_rate,
            "nonconverged_parameters": sorted(
                k for k, v in self.posterior.params.items() if np.isfinite(v.rhat) and v.rhat > 1.05
            ),
            "flags": self.flags,
        }


def _subset_csv(post: PosteriorSummary, names, path=None) -> str:
    sub = PosteriorSummary(params={k: post.params[k] for k in names}, draws={})
    return sub.to_csv(path)


def _check_two_treatments(series_list, reference):
    treatments = sorted({t for s in series_list for t in s.treatment_id})
    if len(treatments) != 2:
        raise ValidationError(f"hierarchical model needs exactly two treatments, found {treatments}")
    reference = reference or default_reference(series_list, treatments)
    if reference not in treatments:
        raise ValidationError(f"reference {reference!r} not among {treatments}")
    return treatments, reference


def fit_hier(
    series_list,
    spec: ModelSpec = ModelSpec(),
    pooling: PoolingSpec = PoolingSpec(),
    subgroup: Optional[SubgroupSpec] = None,
    hyper: HierPriors = HierPriors(),
    transitions=None,
) -> HierPosterior:
    """Fit the multilevel model to several participants' series."""
    series_list = list(series_list)
    ids = [s.participant_id for s in series_list]
    if len(set(ids)) != len(ids):
        raise ValidationError("participant ids must be unique")
    fams = ["alpha", "delta"] + (["gamma"] if spec.include_trend else [])
    any_random = any(getattr(pooling, f) == "random" for f in fams) or (
        spec.carryover_lag is not None and pooling.carryover == "random"
    )
    if len(series_list) < 2 and any_random:
        raise ValidationError("need >= 2 individuals for random-effects pooling")
    if len(series_list) < 1:
        raise ValidationError("need >= 1 individual")
    if subgroup is not None:
        for f in subgroup.families:
            if f not in fams and not f.startswith("carry"):
                raise ValidationError(f"subgroup family {f!r} is not in the model")
            if pooling.for_column(f) != "random":
                raise ValidationError(
                    f"subgroup regression on {f} needs random pooling, not {pooling.for_column(f)!r}"
                )
        for s in series_list:
            z = s.covariates.get(subgroup.covariate)
            if z is None or not np.isfinite(z):
                raise ValidationError(
                    f"covariate {subgroup.covariate!r} missing or non-finite for {s.participant_id}"
                )

    treatments, reference = _check_two_treatments(series_list, spec.reference)
    if spec.carryover_lag is not None and transitions is None:
        transitions = sorted({t for s in series_list for t in transitions_in(s)})
    designs = []
    for s in series_list:
        d = build_design(s, spec, reference, treatments, transitions, require_identifiable=False)
        informative = d.n > 0 and d.column("delta").min() != d.column("delta").max()
        if not informative and pooling.delta == "unrelated":
            raise UnidentifiableError(
                f"participant {s.participant_id} cannot inform its treatment effect and delta is unpooled"
            )
        designs.append(d)
    columns_names = designs[0].columns
    zs = (
        np.array([float(s.covariates[subgroup.covariate]) for s in series_list])
        if subgroup is not None else None
    )
    columns = []
    for nm in columns_names:
        regime = pooling.for_column(nm)
        H, H_names = None, ()
        if regime == "random" and subgroup is not None and nm in subgroup.families:
            H = np.column_stack([np.ones(len(series_list)), zs])
            H_names = (f"{nm}_1", f"{nm}_2")
        columns.append(ColumnSpec(nm, regime, spec.priors.for_column(nm), H, H_names))

    setup = ModelSetup(
        units=[d.unit(s.participant_id) for d, s in zip(designs, series_list)],
        columns=columns,
        error_model=spec.error_model,
        rho_regime=pooling.rho,
        sigma_regime=pooling.sigma,
        sigma_prior=spec.priors.sigma,
        hyper_mean_sd=hyper.mean_sd,
        tau_prior=HalfNormal(hyper.tau_scale),
        fixed=dict(hyper.fixed),
    )
    draws, accept = GibbsSampler(setup, spec.mcmc).run()
    for nm in list(draws):
        if nm.startswith("sd_"):
            draws["var_" + nm[3:]] = draws[nm] ** 2
    params, converged = summarize_draws(draws)
    pb = None
    if pooling.delta in ("random", "common") and "delta" in draws:
        pb = prob_benefit(draws["delta"])
    post = PosteriorSummary(
        params=params, draws=draws, prob_benefit=pb, converged=converged,
        rho_accept_rate=accept, fixed=dict(hyper.fixed), settings=spec.mcmc,
    )
    missing = {s.participant_id: float(s.missing_fraction) for s in series_list}
    flags = {pid: "missing_heavy" for pid, m in missing.items() if m >= 0.5}
    return HierPosterior(
        posterior=post,
        pooling=pooling,
        subgroup=subgroup,
        participants=ids,
        covariates={s.participant_id: (float(s.covariates[subgroup.covariate]) if subgroup else 0.0)
                    for s in series_list},
        missing_fraction=missing,
        spec=spec,
        hyper=hyper,
        columns=list(columns_names),
        reference=reference,
        flags=flags,
    )


@dataclass
class ShrinkageRow:
    participant_id: str
    own_estimate: float
    own_se: float
    population_mean: float
    posterior_mean: float
    posterior_sd: float
    posterior_mcse: float
    weight: float
    weight_closed_form: float
    missing_fraction: float
    flag: str = ""


def shrinkage_report(h: HierPosterior, series_list, family: str = "delta") -> list:
    """Per-participant comparison of own-data and pooled estimates.

    ``weight`` is the interpolation weight implied by the posterior mean,
    ``(posterior - population) / (own - population)``; ``weight_closed_form``
    is ``tau^2 / (tau^2 + se^2)`` with the posterior mean of ``tau^2`` and the
    participant's own GLS standard error (computed with the residual sd when
    that is pinned in the hyperpriors). Participants whose posterior mean
    falls outside the [own, population] interval are flagged, not hidden.
    """
    if h.pooling.for_column(family) != "random":
        raise ValidationError(f"shrinkage report needs random pooling for {family}")
    sd_name = f"sd_{family}"
    if sd_name in h.hyper.fixed:
        tau2 = float(h.hyper.fixed[sd_name]) ** 2
    else:
        tau2 = float(np.mean(h.posterior.draws[sd_name] ** 2))
    own_spec = replace(h.spec, reference=h.reference)
    treatments = sorted({t for s in series_list for t in s.treatment_id})
    rows = []
    for s in series_list:
        pid = s.participant_id
        try:
            rho = h.hyper.fixed.get("rho") if own_spec.error_model == "ar1" else None
            g = fit_gls(s, own_spec, rho=rho, design=build_design(s, own_spec, h.reference, treatments))
            own, own_se = g.estimate(family), g.stderr(family)
            if "sigma" in h.hyper.fixed:
                # known residual sd: rescale the plug-in standard error
                own_se *= float(h.hyper.fixed["sigma"]) / g.sigma
        except (UnidentifiableError, ValidationError, ArithmeticError, RuntimeError):
            own, own_se = np.nan, np.inf
        ind = h.individual_draws(family, pid).reshape(-1)
        popd = h.population_mean_draws(family, pid)
        pop = float(np.mean(popd))
        x = h.individual_draws(family, pid)
        ess = effective_sample_size(x)
        post_mean = float(ind.mean())
        post_sd = float(ind.std(ddof=1))
        mcse = post_sd / np.sqrt(ess) if ess and np.isfinite(ess) else np.nan
        closed = tau2 / (tau2 + own_se**2) if np.isfinite(own_se) else 0.0
        flag = ""
        if np.isfinite(own):
            denom = own - pop
            weight = (post_mean - pop) / denom if denom != 0 else np.nan
            if np.isfinite(weight) and not 0.0 <= weight <= 1.0:
                flag = "outside_interval"
        else:
            weight = 0.0
            flag = "no_own_estimate"
        if h.flags.get(pid):
            flag = ";".join(f for f in (flag, h.flags[pid]) if f)
        rows.append(
            ShrinkageRow(pid, float(own), float(own_se), pop, post_mean, post_sd, float(mcse), float(weight),
                         float(closed), float(s.missing_fraction), flag)
        )
    return rows


def shrinkage_csv(rows, path=None) -> str:
    cols = list(ShrinkageRow.__dataclass_fields__)
    lines = [",".join(cols)]
    for r in rows:
        vals = []
        for c in cols:
            v = getattr(r, c)
            vals.append(v if isinstance(v, str) else ("" if not np.isfinite(v) else repr(float(v))))
        lines.append(",".join(vals))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    return text


@dataclass
class CarryoverResult:
    fit: HierPosterior
    transitions: list
    excluded: list
    population: dict  # transition name -> ParamSummary of the average effect
    individual: dict  # transition name -> list of ShrinkageRow


def carryover_pooled(
    series_list,
    lag: int,
    spec: ModelSpec = ModelSpec(),
    pooling: PoolingSpec = PoolingSpec(carryover="random"),
    hyper: HierPriors = HierPriors(),
) -> CarryoverResult:
    """Average and per-participant transition (carryover) effects as random effects."""
    series_list = list(series_list)
    treatments, _ = _check_two_treatments(series_list, spec.reference)
    counts = Counter()
    for s in series_list:
        seq = s.period_treatments()
        counts.update((a, b) for a, b in zip(seq, seq[1:]) if a != b)
    possible = [(a, b) for a in treatments for b in treatments if a != b]
    excluded = [t for t in possible if counts[t] == 0]
    for a, b in excluded:
        warnings.warn(f"transition {a}->{b} never occurs; its carryover term is excluded")
    kept = [t for t in possible if counts[t] > 0]
    if not kept:
        raise ValidationError("no crossovers in the data; carryover cannot be estimated")
    thin = [t for t in kept if counts[t] < 2]
    if thin:
        raise ValidationError(
            "carryover needs at least 2 crossovers of each transition type across the pooled data; "
            f"got {dict((f'{a}->{b}', counts[(a, b)]) for a, b in kept)}"
        )
    if len(series_list) < 2 and pooling.carryover == "random":
        raise ValidationError("need >= 2 individuals to pool carryover as a random effect")
    spec = replace(spec, carryover_lag=lag)
    h = fit_hier(series_list, spec, pooling, None, hyper, transitions=kept)
    names = [f"carry_{a}_{b}" for a, b in kept]
    population = {nm: h[nm] for nm in names if nm in h.posterior.params}
    individual = {}
    if pooling.carryover == "random":
        for nm in names:
            individual[nm] = shrinkage_report(h, series_list, family=nm)
    return CarryoverResult(h, kept, excluded, population, individual)


def write_hier_report(h: HierPosterior, series_list, outdir) -> None:
    outdir = Path(outdir)
    h.population_csv(outdir / "population.csv")
    if h.pooling.delta == "random":
        shrinkage_csv(shrinkage_report(h, series_list), outdir / "individuals.csv")
    else:
        _subset_csv(h.posterior, h.individual_names(), outdir / "individuals.csv")
    (outdir / "run.json").write_text(
        json.dumps(h.run_metadata(), sort_keys=True, indent=2, default=float) + "\n", encoding="utf-8"
    )
