"""Simulation-based calibration of the single-trial Bayesian fit.

Each cycle draws parameters from the prior, simulates a trial from them,
fits the model with that same prior and records the rank of every true
value among (thinned) posterior draws. A calibrated sampler gives uniform
ranks; departures show up in the KS test on jittered normalised ranks.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .fit_single import ModelSpec, PriorSpec, fit_bayes
from .mcmc import RHO_BOUND, HalfNormal, McmcSettings, Normal
from .protocol import TrialProtocol, two_arm_protocol
from .rng import child_seed, stream
from .sequences import draw_block_randomized
from .simulate import GenerativeParams, simulate_individual


@dataclass(frozen=True)
class SbcConfig:
    protocol: TrialProtocol = field(default_factory=lambda: two_arm_protocol(3, 2, 7))
    n_cycles: int = 500
    n_ranks: int = 99  # thinned posterior draws per cycle
    include_trend: bool = True
    error_model: str = "ar1"
    prior_sd: float = 1.0  # alpha, delta, gamma ~ N(0, prior_sd^2); sigma ~ half-normal(prior_sd)
    mcmc: McmcSettings = McmcSettings(n_chains=2, n_warmup=300, n_samples=495)
    seed: int = 0

    def model(self) -> ModelSpec:
        n = Normal(0.0, self.prior_sd)
        pri = PriorSpec(alpha=n, delta=n, gamma=n, carryover=n, sigma=HalfNormal(self.prior_sd))
        return ModelSpec(include_trend=self.include_trend, error_model=self.error_model, priors=pri,
                         mcmc=self.mcmc)


def draw_prior(cfg: SbcConfig, rng: np.random.Generator) -> dict:
    s = cfg.prior_sd
    truth = {"alpha": s * rng.standard_normal(), "delta": s * rng.standard_normal()}
    if cfg.include_trend:
        truth["gamma"] = s * rng.standard_normal()
    truth["sigma"] = abs(s * rng.standard_normal())
    if cfg.error_model == "ar1":
        truth["rho"] = rng.uniform(-RHO_BOUND, RHO_BOUND)
    return truth


@dataclass
class SbcResult:
    config: SbcConfig
    names: list
    ranks: dict  # parameter -> int ranks in 0..n_ranks
    normalized: dict  # parameter -> jittered ranks in (0, 1)
    covered: np.ndarray  # delta inside its central 95% interval, per cycle
    nonconverged: int

    def ks_pvalues(self) -> dict:
        return {k: float(stats.kstest(v, "uniform").pvalue) for k, v in self.normalized.items()}

    @property
    def coverage(self) -> float:
        return float(np.mean(self.covered))

    def to_csv(self, path=None) -> str:
        lines = ["cycle," + ",".join(f"rank_{k}" for k in self.names) + ",delta_covered"]
        for i in range(len(self.covered)):
            lines.append(f"{i}," + ",".join(str(int(self.ranks[k][i])) for k in self.names)
                         + f",{int(self.covered[i])}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="\n")
        return text


def _thin(x: np.ndarray, n: int) -> np.ndarray:
    flat = x.reshape(-1)
    idx = np.linspace(0, flat.size - 1, n).round().astype(int)
    return flat[idx]


def sbc_cycle(cfg: SbcConfig, i: int):
    rng = stream(cfg.seed, i, 0)
    truth = draw_prior(cfg, rng)
    params = GenerativeParams(
        alpha=truth["alpha"], delta=truth["delta"], gamma=truth.get("gamma", 0.0),
        rho=truth.get("rho", 0.0), sigma=truth["sigma"],
    )
    seq = draw_block_randomized(cfg.protocol, child_seed(cfg.seed, i, 1))
    s = simulate_individual(cfg.protocol, seq, params, rng_seed=child_seed(cfg.seed, i, 2),
                            ar_chain="period", washout=False)
    spec = cfg.model()
    spec = replace(spec, mcmc=replace(spec.mcmc, seed=child_seed(cfg.seed, i, 3)))
    post = fit_bayes(s, spec)
    ranks = {}
    for k, v in truth.items():
        thinned = _thin(post.draws[k], cfg.n_ranks)
        ranks[k] = int(np.sum(thinned < v))
    d = post.draws["delta"].reshape(-1)
    lo, hi = np.quantile(d, [0.025, 0.975])
    return truth, ranks, bool(lo <= truth["delta"] <= hi), post.converged


def run_sbc(cfg: SbcConfig = SbcConfig(), progress=None) -> SbcResult:
    names = None
    ranks = {}
    covered = []
    bad = 0
    for i in range(cfg.n_cycles):
        truth, r, cov, conv = sbc_cycle(cfg, i)
        if names is None:
            names = list(truth)
            ranks = {k: [] for k in names}
        for k in names:
            ranks[k].append(r[k])
        covered.append(cov)
        bad += not conv
        if progress is not None:
            progress(i)
    jitter = stream(cfg.seed, 10**6)
    L = cfg.n_ranks
    normalized = {k: (np.asarray(v) + jitter.random(len(v))) / (L + 1) for k, v in ranks.items()}
    return SbcResult(cfg, names, {k: np.asarray(v) for k, v in ranks.items()}, normalized,
                     np.asarray(covered), bad)


__all__ = ["SbcConfig", "SbcResult", "draw_prior", "sbc_cycle", "run_sbc"]
