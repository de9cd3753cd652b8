"""Single-participant treatment-effect estimation: weighted GLS and Bayesian MCMC."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, stats

from .datamodel import OutcomeSeries
from .errors import ConvergenceError, NumericalError, UnidentifiableError, ValidationError
from .mcmc import (
    ColumnSpec,
    GibbsSampler,
    HalfNormal,
    McmcSettings,
    ModelSetup,
    Normal,
    PosteriorSummary,
    RHO_BOUND,
    UnitData,
    prob_benefit,
    summarize_draws,
)

__all__ = [
    "PriorSpec", "ModelSpec", "Design", "GlsResult", "build_design", "fit_gls", "fit_bayes",
    "prob_benefit", "PosteriorSummary", "McmcSettings", "Normal", "HalfNormal",
]


@dataclass(frozen=True)
class PriorSpec:
    alpha: Normal = Normal(0.0, 1000.0)
    delta: Normal = Normal(0.0, 100.0)
    gamma: Normal = Normal(0.0, 100.0)
    sigma: HalfNormal = HalfNormal(100.0)
    carryover: Normal = Normal(0.0, 100.0)

    def for_column(self, name: str) -> Normal:
        if name.startswith("alpha"):
            return self.alpha
        if name.startswith("delta"):
            return self.delta
        if name.startswith("gamma"):
            return self.gamma
        if name.startswith("carry"):
            return self.carryover
        raise KeyError(name)


@dataclass(frozen=True)
class ModelSpec:
    include_trend: bool = False
    error_model: str = "iid"  # iid | ar1
    carryover_lag: Optional[int] = None  # None = no carryover terms
    priors: PriorSpec = field(default_factory=PriorSpec)
    mcmc: McmcSettings = field(default_factory=McmcSettings)
    ar_chain: str = "period"  # AR(1) restarts each period, or "trial"
    reference: Optional[str] = None

    def __post_init__(self):
        if self.error_model not in ("iid", "ar1"):
            raise ValidationError("error_model must be 'iid' or 'ar1'")
        if self.carryover_lag is not None and self.carryover_lag < 1:
            raise ValidationError("carryover lag must be >= 1 when active")
        if self.ar_chain not in ("period", "trial"):
            raise ValidationError("ar_chain must be 'period' or 'trial'")


def model_spec_to_dict(spec: ModelSpec) -> dict:
    pr = spec.priors
    return {
        "include_trend": spec.include_trend,
        "error_model": spec.error_model,
        "carryover_lag": spec.carryover_lag,
        "ar_chain": spec.ar_chain,
        "reference": spec.reference,
        "priors": {
            **{k: [getattr(pr, k).mean, getattr(pr, k).sd] for k in ("alpha", "delta", "gamma", "carryover")},
            "sigma": pr.sigma.scale,
        },
        "mcmc": asdict(spec.mcmc),
    }


def model_spec_from_dict(d: dict) -> ModelSpec:
    """Inverse of :func:`model_spec_to_dict`; missing keys take their defaults.

    Priors are given as ``[mean, sd]`` pairs (``sigma``: half-normal scale).
    """
    d = dict(d or {})
    unknown = set(d) - {"include_trend", "error_model", "carryover_lag", "ar_chain", "reference", "priors", "mcmc"}
    if unknown:
        raise ValidationError(f"unknown model fields {sorted(unknown)}")
    priors = dict(d.pop("priors", None) or {})
    kw = {}
    for k in ("alpha", "delta", "gamma", "carryover"):
        if k in priors:
            mean, sd = priors.pop(k)
            kw[k] = Normal(float(mean), float(sd))
    if "sigma" in priors:
        kw["sigma"] = HalfNormal(float(priors.pop("sigma")))
    if priors:
        raise ValidationError(f"unknown prior fields {sorted(priors)}")
    try:
        mcmc = McmcSettings(**(d.pop("mcmc", None) or {}))
    except TypeError as e:
        raise ValidationError(f"bad mcmc settings: {e}") from None
    return ModelSpec(priors=PriorSpec(**kw), mcmc=mcmc, **d)


@dataclass
class Design:
    columns: list
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    time_index: np.ndarray
    prev: np.ndarray
    gap: np.ndarray
    rows: np.ndarray  # positions of the used rows in the source series
    reference: str
    treatments: list

    @property
    def n(self) -> int:
        return len(self.y)

    def column(self, name) -> np.ndarray:
        return self.X[:, self.columns.index(name)]

    def unit(self, uid: str) -> UnitData:
        return UnitData(uid, self.X, self.y, self.w, self.prev, self.gap)


def transitions_in(series: OutcomeSeries) -> list:
    seq = series.period_treatments()
    return sorted({(a, b) for a, b in zip(seq, seq[1:]) if a != b})


def default_reference(series_list, treatments) -> str:
    """Reference recorded on the series (simulated data carry it), else the first id in sort order."""
    refs = {getattr(s, "attrs", {}).get("reference") for s in series_list}
    if len(refs) == 1:
        (ref,) = refs
        if ref in treatments:
            return ref
    return sorted(treatments)[0]


def delta_names(treatments, reference) -> list:
    others = [t for t in treatments if t != reference]
    return ["delta"] if len(others) == 1 else [f"delta_{t}" for t in others]


def build_design(
    series: OutcomeSeries,
    spec: ModelSpec = ModelSpec(),
    reference: Optional[str] = None,
    treatments=None,
    transitions=None,
    require_identifiable: bool = True,
) -> Design:
    """Design matrix for one series.

    Rows are the non-missing measurements with positive weight. Columns:
    ``alpha`` (intercept), ``delta`` (1 for the active treatment, 0 for the
    reference), ``gamma`` (time scaled to [0, 1] over the trial) and one
    ``carry_<from>_<to>`` indicator per crossover type, set on the first
    ``carryover_lag`` measurements of each period entered through it.
    """
    treatments = list(treatments) if treatments is not None else sorted(set(series.treatment_id))
    reference = reference or spec.reference or default_reference([series], treatments)
    if reference not in treatments:
        raise ValidationError(f"reference treatment {reference!r} not among {treatments}")
    if len(treatments) < 2:
        if require_identifiable:
            raise UnidentifiableError("treatment effect unidentifiable: series uses a single treatment")
        treatments = [reference, "__active__"]
    others = [t for t in treatments if t != reference]
    dnames = delta_names(treatments, reference)

    cols = ["alpha"] + dnames
    parts = [np.ones(len(series))]
    for t in others:
        parts.append((series.treatment_id == t).astype(float))
    if spec.include_trend:
        cols.append("gamma")
        parts.append(series.scaled_time())
    if spec.carryover_lag is not None:
        trans = transitions if transitions is not None else transitions_in(series)
        seq = series.period_treatments()
        pkey = series.period_key
        for a, b in trans:
            entered = np.zeros(len(seq), dtype=bool)
            for j in range(1, len(seq)):
                entered[j] = seq[j - 1] == a and seq[j] == b
            cols.append(f"carry_{a}_{b}")
            parts.append((entered[pkey] & (series.within_period_index <= spec.carryover_lag)).astype(float))
    Xall = np.column_stack(parts)

    use = ~np.isnan(series.value) & (series.weight > 0)
    rows = np.flatnonzero(use)
    X = Xall[rows]
    if require_identifiable:
        if len(rows) == 0:
            raise UnidentifiableError("no usable measurements")
        for nm in dnames:
            x = X[:, cols.index(nm)]
            if x.min() == x.max():
                raise UnidentifiableError(
                    "treatment effect unidentifiable: observed data cover only one treatment"
                )

    chain = series.period_key if spec.ar_chain == "period" else np.zeros(len(series), dtype=int)
    ti = series.time_index[rows]
    ch = chain[rows]
    prev = np.full(len(rows), -1, dtype=int)
    gap = np.zeros(len(rows))
    if len(rows) > 1:
        same = ch[1:] == ch[:-1]
        prev[1:][same] = np.arange(len(rows) - 1)[same]
        gap[1:][same] = (ti[1:] - ti[:-1])[same]
    return Design(
        columns=cols, X=X, y=series.value[rows].astype(float), w=series.weight[rows].astype(float),
        time_index=ti, prev=prev, gap=gap, rows=rows, reference=reference, treatments=treatments,
    )


# -- GLS ---------------------------------------------------------------------------


@dataclass
class GlsResult:
    columns: list
    coef: np.ndarray
    cov: np.ndarray
    sigma: float
    rho: float
    df: int
    n_obs: int
    loglik: float
    iterations: int = 0
    trace: list = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def tvalues(self) -> np.ndarray:
        return self.coef / self.se

    @property
    def pvalues(self) -> np.ndarray:
        return 2 * stats.t.sf(np.abs(self.tvalues), self.df)

    def estimate(self, name="delta") -> float:
        return float(self.coef[self.columns.index(name)])

    def stderr(self, name="delta") -> float:
        return float(self.se[self.columns.index(name)])

    def tvalue(self, name="delta") -> float:
        return float(self.tvalues[self.columns.index(name)])

    def pvalue(self, name="delta") -> float:
        return float(self.pvalues[self.columns.index(name)])

    def to_dict(self) -> dict:
        return {
            "columns": self.columns,
            "estimate": self.coef.tolist(),
            "se": self.se.tolist(),
            "t": self.tvalues.tolist(),
            "p": self.pvalues.tolist(),
            "sigma": self.sigma,
            "rho": self.rho,
            "df": self.df,
            "n_obs": self.n_obs,
            "loglik": self.loglik,
            "iterations": self.iterations,
        }


def _whiten(design: Design, rho: float):
    has = design.prev >= 0
    ps = np.where(has, design.prev, 0)
    phi = np.where(has, np.power(rho, design.gap), 0.0)
    v = np.where(has, (1.0 - phi * phi) / (1.0 - rho * rho), 1.0 / (1.0 - rho * rho))
    c = v / design.w
    s = 1.0 / np.sqrt(c)
    Xw = (design.X - phi[:, None] * design.X[ps]) * s[:, None]
    yw = (design.y - phi * design.y[ps]) * s
    return Xw, yw, np.log(c)


def _wls(Xw, yw):
    q, r = np.linalg.qr(Xw)
    if np.min(np.abs(np.diag(r))) < 1e-10 * max(1.0, np.max(np.abs(np.diag(r)))):
        raise NumericalError("singular design matrix")
    beta = np.linalg.solve(r, q.T @ yw)
    rinv = np.linalg.inv(r)
    return beta, rinv @ rinv.T


def _profile_loglik(design, rho, beta=None, method="reml"):
    """Gaussian log-likelihood at ``rho`` with sigma^2 profiled out.

    ``method="ml"`` evaluates the likelihood at the given coefficients;
    ``"reml"`` uses the restricted likelihood, which integrates the
    coefficients out and is free of their small-sample bias.
    """
    Xw, yw, logc = _whiten(design, rho)
    n, p = Xw.shape
    if method == "reml":
        beta = np.linalg.lstsq(Xw, yw, rcond=None)[0]
        e = yw - Xw @ beta
        rss = max(float(e @ e), 1e-300)
        m = n - p
        return (
            -0.5 * m * (np.log(2 * np.pi * rss / m) + 1.0)
            - 0.5 * float(np.sum(logc))
            - 0.5 * np.linalg.slogdet(Xw.T @ Xw)[1]
        )
    e = yw - Xw @ beta
    rss = max(float(e @ e), 1e-300)
    return -0.5 * n * (np.log(2 * np.pi * rss / n) + 1.0) - 0.5 * float(np.sum(logc))


def fit_gls(
    series,
    spec: ModelSpec = ModelSpec(),
    rho: Optional[float] = None,
    tol: float = 1e-8,
    max_iter: int = 200,
    design: Optional[Design] = None,
    method: str = "reml",
) -> GlsResult:
    """Weighted GLS fit of the single-trial model.

    With iid errors this is weighted least squares (a plain two-sample t-test
    when there are no extra terms and all weights are 1). With AR(1) errors
    the coefficients and ``rho`` are updated alternately until ``rho`` moves
    by less than ``tol`` (or the likelihood stops improving): GLS for the
    coefficients given ``rho``, then a bounded one-dimensional maximisation
    of the likelihood in ``rho``. ``method`` picks the restricted (default)
    or full likelihood for that step. Passing ``rho`` holds it fixed.
    """
    if method not in ("reml", "ml"):
        raise ValidationError("method must be 'reml' or 'ml'")
    d = design if design is not None else build_design(series, spec)
    p = d.X.shape[1]
    n = d.n
    if n <= p:
        raise NumericalError(f"{n} usable observations for {p} coefficients")
    if spec.error_model == "iid" or rho is not None:
        r = 0.0 if rho is None else float(rho)
        Xw, yw, logc = _whiten(d, r)
        beta, xtxi = _wls(Xw, yw)
        res = yw - Xw @ beta
        rss = float(res @ res)
        s2 = rss / (n - p)
        ll = -0.5 * n * (np.log(2 * np.pi * rss / n) + 1.0) - 0.5 * float(np.sum(logc))
        return GlsResult(list(d.columns), beta, s2 * xtxi, float(np.sqrt(s2)), r, n - p, n, ll)

    r = 0.0
    ll_old = -np.inf
    trace = []
    for it in range(1, max_iter + 1):
        Xw, yw, _ = _whiten(d, r)
        beta, _ = _wls(Xw, yw)
        opt = optimize.minimize_scalar(
            lambda x: -_profile_loglik(d, x, beta, method),
            bounds=(-RHO_BOUND, RHO_BOUND),
            method="bounded",
            options={"xatol": 1e-12},
        )
        r_new = float(opt.x)
        ll = -float(opt.fun)
        trace.append({"iteration": it, "rho": r_new, "loglik": ll})
        # the profile is flat to rounding near its optimum, so a stalled
        # likelihood also counts as converged
        if abs(r_new - r) < tol or abs(ll - ll_old) < 1e-10:
            r = r_new
            break
        r, ll_old = r_new, ll
    else:
        raise ConvergenceError(f"GLS/rho iteration did not converge in {max_iter} iterations", trace)
    Xw, yw, logc = _whiten(d, r)
    beta, xtxi = _wls(Xw, yw)
    res = yw - Xw @ beta
    rss = float(res @ res)
    s2 = rss / (n - p)
    ll = _profile_loglik(d, r, beta, method)
    return GlsResult(list(d.columns), beta, s2 * xtxi, float(np.sqrt(s2)), r, n - p, n, ll, it, trace)


# -- Bayes -------------------------------------------------------------------------


def fit_bayes(
    series,
    spec: ModelSpec = ModelSpec(),
    mcid: float = 0.0,
    direction: str = "greater",
    design: Optional[Design] = None,
) -> PosteriorSummary:
    """Posterior for the single-trial model by Metropolis-within-Gibbs.

    Coefficients get conjugate normal updates, the residual variance an exact
    update under its half-normal prior, and ``rho`` (AR(1) only) a reflected
    random-walk Metropolis step. Chains that fail the split-R-hat check are
    returned with ``converged=False``.
    """
    d = design if design is not None else build_design(series, spec)
    columns = [ColumnSpec(nm, "unrelated", spec.priors.for_column(nm)) for nm in d.columns]
    setup = ModelSetup(
        units=[d.unit(getattr(series, "participant_id", "unit"))],
        columns=columns,
        error_model=spec.error_model,
        sigma_prior=spec.priors.sigma,
        plain_names=True,
    )
    draws, accept = GibbsSampler(setup, spec.mcmc).run()
    params, converged = summarize_draws(draws)
    dname = next((c for c in d.columns if c.startswith("delta")), None)
    pb = prob_benefit(draws[dname], mcid, direction) if dname else None
    return PosteriorSummary(
        params=params, draws=draws, prob_benefit=pb, mcid=mcid, direction=direction,
        converged=converged, rho_accept_rate=accept, settings=spec.mcmc,
        info={"n_obs": d.n, "columns": d.columns, "reference": d.reference},
    )
