"""Thompson-sampling assignment for adaptive N-of-1 trials.

Each arm carries a normal posterior over its mean outcome under a known
observation variance. At every decision epoch one draw is taken per arm and
the arm with the largest draw is given for the next period; the period's
averaged outcome then updates that arm only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .protocol import TrialProtocol
from .rng import stream
from .simulate import ar1_noise


@dataclass(frozen=True)
class ArmState:
    """Conjugate normal posteriors, one per arm. Precision may be ``inf``."""

    arms: tuple
    means: tuple
    precisions: tuple
    obs_variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(str(a) for a in self.arms))
        object.__setattr__(self, "means", tuple(float(m) for m in self.means))
        object.__setattr__(self, "precisions", tuple(float(p) for p in self.precisions))
        if not self.arms:
            raise ValidationError("need at least one arm")
        if len(set(self.arms)) != len(self.arms):
            raise ValidationError("arm ids must be unique")
        if not len(self.arms) == len(self.means) == len(self.precisions):
            raise ValidationError("arms, means and precisions must have equal length")
        if any(not p > 0 for p in self.precisions):
            raise ValidationError("posterior precisions must be positive")
        if not self.obs_variance > 0:
            raise ValidationError("observation variance must be positive")

    @classmethod
    def from_prior(cls, arms, mean: float = 0.0, sd: float = 10.0, obs_variance: float = 1.0) -> "ArmState":
        k = len(arms)
        return cls(tuple(arms), (mean,) * k, (1.0 / sd**2,) * k, obs_variance)

    def index(self, arm) -> int:
        try:
            return self.arms.index(str(arm))
        except ValueError:
            raise ValidationError(f"unknown treatment {arm!r}; arms are {list(self.arms)}") from None


def posterior_draws(state: ArmState, rng: np.random.Generator) -> np.ndarray:
    prec = np.asarray(state.precisions)
    z = rng.standard_normal(len(prec))
    with np.errstate(divide="ignore"):
        scale = np.where(np.isinf(prec), 0.0, 1.0 / np.sqrt(prec))
    return np.asarray(state.means) + scale * z


def thompson_step(state: ArmState, rng: np.random.Generator) -> str:
    """One posterior draw per arm; returns the arm with the largest draw."""
    return state.arms[int(np.argmax(posterior_draws(state, rng)))]


def update_arm(state: ArmState, arm, y: float, n_obs: int = 1) -> ArmState:
    """Posterior after observing ``y``, the mean of ``n_obs`` outcomes on ``arm``."""
    i = state.index(arm)
    if n_obs < 1:
        raise ValidationError("n_obs must be >= 1")
    data_prec = n_obs / state.obs_variance
    p0, m0 = state.precisions[i], state.means[i]
    if np.isinf(p0):
        p1, m1 = p0, m0
    else:
        p1 = p0 + data_prec
        m1 = (p0 * m0 + data_prec * float(y)) / p1
    means = list(state.means)
    precs = list(state.precisions)
    means[i], precs[i] = m1, p1
    return ArmState(state.arms, tuple(means), tuple(precs), state.obs_variance)


@dataclass
class EpochRecord:
    epoch: int
    sampled: tuple  # posterior draw per arm (NaN in forced round-robin epochs)
    chosen: str
    outcome: float  # within-epoch mean outcome
    means: tuple  # posterior means after the update
    precisions: tuple
    regret: float
    cumulative_regret: float


@dataclass
class AdaptiveTrace:
    arms: tuple
    true_means: tuple
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def chosen(self) -> list:
        return [r.chosen for r in self.records]

    @property
    def cumulative_regret(self) -> np.ndarray:
        return np.array([r.cumulative_regret for r in self.records])

    @property
    def best_arm(self) -> str:
        return self.arms[int(np.argmax(self.true_means))]

    def fraction_best(self, last: Optional[int] = None) -> float:
        ch = self.chosen if last is None else self.chosen[-last:]
        return float(np.mean([c == self.best_arm for c in ch])) if ch else float("nan")

    def to_csv(self, path=None) -> str:
        head = ["epoch", "chosen", "outcome"]
        head += [f"sample_{a}" for a in self.arms]
        head += [f"mean_{a}" for a in self.arms] + [f"precision_{a}" for a in self.arms]
        head += ["cumulative_regret"]
        lines = [",".join(head)]
        for r in self.records:
            vals = [str(r.epoch), r.chosen, _fmt(r.outcome)]
            vals += [_fmt(v) for v in r.sampled] + [_fmt(v) for v in r.means] + [_fmt(v) for v in r.precisions]
            vals.append(_fmt(r.cumulative_regret))
            lines.append(",".join(vals))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="\n")
        return text


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def run_adaptive_trial(
    arm_means: dict,
    n_epochs: int,
    measurements_per_epoch: Optional[int] = None,
    rng_seed: int = 0,
    sd: float = 1.0,
    rho: float = 0.0,
    prior_mean: float = 0.0,
    prior_sd: float = 10.0,
    round_robin: bool = False,
    protocol: Optional[TrialProtocol] = None,
) -> AdaptiveTrace:
    """Simulate one adaptive trial; one epoch is one treatment period.

    ``arm_means`` maps treatment id to its true mean outcome. Within an epoch
    the outcomes follow the simulator's AR(1) noise (iid when ``rho`` is 0)
    and their average updates the chosen arm with the known variance ``sd**2``.
    With ``round_robin`` the first epochs visit every arm once before
    Thompson sampling takes over.
    """
    arm_means = dict(arm_means)
    if len(arm_means) < 1:
        raise ValidationError("need at least one arm")
    if protocol is not None:
        missing = set(protocol.treatment_ids) - set(arm_means)
        if missing:
            raise ValidationError(f"no true mean for treatments {sorted(missing)}")
        arms = tuple(protocol.treatment_ids)
        m = measurements_per_epoch or protocol.measurements_per_period
    else:
        arms = tuple(arm_means)
        m = measurements_per_epoch or 1
    if n_epochs < 1 or m < 1:
        raise ValidationError("n_epochs and measurements_per_epoch must be >= 1")
    truth = np.array([float(arm_means[a]) for a in arms])
    best = float(truth.max())
    state = ArmState.from_prior(arms, prior_mean, prior_sd, sd**2)
    ts_rng = stream(rng_seed, 0)
    y_rng = stream(rng_seed, 1)
    trace = AdaptiveTrace(arms, tuple(truth.tolist()))
    cum = 0.0
    for e in range(n_epochs):
        if round_robin and e < len(arms):
            sampled = (float("nan"),) * len(arms)
            chosen = arms[e]
        else:
            draws = posterior_draws(state, ts_rng)
            sampled = tuple(draws.tolist())
            chosen = arms[int(np.argmax(draws))]
        i = arms.index(chosen)
        y = truth[i] + ar1_noise(y_rng, [m], rho, sd)
        ybar = float(y.mean())
        state = update_arm(state, chosen, ybar, m)
        regret = best - truth[i]
        cum += regret
        trace.records.append(
            EpochRecord(e + 1, sampled, chosen, ybar, state.means, state.precisions, float(regret), float(cum))
        )
    return trace


def regret_ratio(traces: Sequence[AdaptiveTrace], n: int) -> float:
    """Mean cumulative regret at 2n epochs over mean cumulative regret at n."""
    r_n = np.mean([t.records[n - 1].cumulative_regret for t in traces])
    r_2n = np.mean([t.records[2 * n - 1].cumulative_regret for t in traces])
    return float(r_2n / r_n) if r_n > 0 else float("nan")
