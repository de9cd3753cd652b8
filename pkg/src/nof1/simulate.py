"""Synthetic N-of-1 data from the trend + AR(1) + carryover outcome model."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.signal import lfilter

from .datamodel import OutcomeSeries, apply_washout
from .errors import ValidationError
from .protocol import TrialProtocol, check_protocol
from .rng import child_seed, stream
from .sequences import TreatmentSequence, draw_block_randomized


def _transition_key(k):
    if isinstance(k, str):
        a, b = k.split(">")
        return (a, b)
    a, b = k
    return (str(a), str(b))


@dataclass(frozen=True)
class CarryoverSpec:
    lag_measurements: int
    effect_by_transition: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lag_measurements < 1:
            raise ValidationError("carryover lag must be >= 1")
        object.__setattr__(
            self,
            "effect_by_transition",
            {_transition_key(k): float(v) for k, v in dict(self.effect_by_transition).items()},
        )

    def to_dict(self):
        return {
            "lag_measurements": self.lag_measurements,
            "effect_by_transition": {f"{a}>{b}": v for (a, b), v in sorted(self.effect_by_transition.items())},
        }


@dataclass(frozen=True)
class MissingnessSpec:
    mechanism: str = "none"
    p: float = 0.0

    def __post_init__(self):
        if self.mechanism not in ("none", "mcar"):
            raise ValidationError(f"unsupported missingness mechanism {self.mechanism!r}")
        if not 0.0 <= self.p < 1.0:
            raise ValidationError("missingness probability must lie in [0, 1)")


@dataclass(frozen=True)
class GenerativeParams:
    alpha: float = 0.0
    delta: float = 0.0
    gamma: float = 0.0
    rho: float = 0.0
    sigma: float = 1.0
    carryover: Optional[CarryoverSpec] = None
    # population spread used by simulate_series
    sd_delta: float = 0.0
    sd_gamma: float = 0.0
    sd_alpha: float = 0.0
    sd_carryover: float = 0.0
    alpha_i: Optional[tuple] = None
    # subgroup regression on the treatment effect: delta_i mean = delta + subgroup_effect * z_i
    subgroup_effect: Optional[float] = None
    subgroup_fraction: float = 0.5
    subgroup_name: str = "z"

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValidationError(f"|rho| must be < 1, got {self.rho}")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if min(self.sd_delta, self.sd_gamma, self.sd_alpha, self.sd_carryover) < 0:
            raise ValidationError("population standard deviations must be >= 0")
        if isinstance(self.carryover, dict):
            object.__setattr__(self, "carryover", CarryoverSpec(**self.carryover))
        if self.alpha_i is not None:
            object.__setattr__(self, "alpha_i", tuple(float(a) for a in self.alpha_i))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["carryover"] = self.carryover.to_dict() if self.carryover else None
        d["alpha_i"] = list(self.alpha_i) if self.alpha_i is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerativeParams":
        return cls(**d)


def ar1_noise(rng: np.random.Generator, lengths: Sequence[int], rho: float, sigma: float) -> np.ndarray:
    """Concatenated AR(1) chains, each started from its stationary law.

    Innovations are N(0, sigma^2); every chain has marginal variance
    sigma^2 / (1 - rho^2).
    """
    if not abs(rho) < 1:
        raise ValidationError(f"|rho| must be < 1, got {rho}")
    n = int(sum(lengths))
    u = rng.standard_normal(n) * sigma
    out = np.empty(n)
    start = 0
    for ln in lengths:
        seg = u[start:start + ln].copy()
        if ln:
            seg[0] /= np.sqrt(1.0 - rho * rho)
            out[start:start + ln] = lfilter([1.0], [1.0, -rho], seg)
        start += ln
    return out


def slot_layout(protocol: TrialProtocol):
    """Block, period, within-period index and time index of every slot."""
    K, T, M = protocol.n_blocks, protocol.periods_per_block, protocol.measurements_per_period
    time_index = np.arange(K * T * M)
    block = time_index // (T * M) + 1
    period = (time_index // M) % T + 1
    within = time_index % M + 1
    return block, period, within, time_index


def carryover_indicator(period_treatments, within_index, period_of_slot, lag, a, b) -> np.ndarray:
    """1 on the first ``lag`` measurements of each period entered via a -> b."""
    entered = np.zeros(len(period_treatments), dtype=bool)
    for j in range(1, len(period_treatments)):
        entered[j] = period_treatments[j - 1] == a and period_treatments[j] == b
    return (entered[period_of_slot] & (within_index <= lag)).astype(float)


def mean_structure(protocol, sequence, params: GenerativeParams) -> np.ndarray:
    seq = sequence.assignments if isinstance(sequence, TreatmentSequence) else tuple(sequence)
    block, period, within, time_index = slot_layout(protocol)
    pidx = (block - 1) * protocol.periods_per_block + (period - 1)
    ref = protocol.reference_id
    x = np.array([seq[j] != ref for j in pidx], dtype=float)
    n = len(time_index)
    t_scaled = time_index / (n - 1) if n > 1 else np.zeros(n)
    mu = params.alpha + params.delta * x + params.gamma * t_scaled
    if params.carryover is not None:
        for (a, b), lam in params.carryover.effect_by_transition.items():
            mu = mu + lam * carryover_indicator(seq, within, pidx, params.carryover.lag_measurements, a, b)
    return mu


def simulate_individual(
    protocol: TrialProtocol,
    sequence,
    params: GenerativeParams,
    missing: Optional[MissingnessSpec] = None,
    rng_seed: int = 0,
    ar_chain: str = "period",
    participant_id: str = "p1",
    washout: bool = True,
    covariates: Optional[dict] = None,
) -> OutcomeSeries:
    """Simulate one participant's complete trial.

    ``ar_chain="period"`` restarts the AR(1) error at each period boundary;
    ``"trial"`` runs one chain through the whole series. Missing values are
    masked after generation, so the complete-data draw does not depend on
    the missingness setting.
    """
    check_protocol(protocol)
    seq = sequence.assignments if isinstance(sequence, TreatmentSequence) else tuple(sequence)
    if len(seq) != protocol.n_periods:
        raise ValidationError(f"sequence has {len(seq)} periods, protocol needs {protocol.n_periods}")
    unknown = set(seq) - set(protocol.treatment_ids)
    if unknown:
        raise ValidationError(f"sequence uses unknown treatments {sorted(unknown)}")
    if not abs(params.rho) < 1:
        raise ValidationError("|rho| must be < 1")
    block, period, within, time_index = slot_layout(protocol)
    M = protocol.measurements_per_period
    if ar_chain == "period":
        lengths = [M] * protocol.n_periods
    elif ar_chain == "trial":
        lengths = [len(time_index)]
    else:
        raise ValidationError(f"ar_chain must be 'period' or 'trial', got {ar_chain!r}")
    eps = ar1_noise(stream(rng_seed, 0), lengths, params.rho, params.sigma)
    y = mean_structure(protocol, seq, params) + eps
    if missing is not None and missing.mechanism == "mcar" and missing.p > 0:
        drop = stream(rng_seed, 1).random(len(y)) < missing.p
        y = np.where(drop, np.nan, y)
    pidx = (block - 1) * protocol.periods_per_block + (period - 1)
    s = OutcomeSeries(
        participant_id=participant_id,
        block=block,
        period=period,
        within_period_index=within,
        time_index=time_index,
        treatment_id=[seq[j] for j in pidx],
        value=y,
        weight=np.ones(len(y)),
        covariates=dict(covariates or {}),
        protocol=protocol.name,
        attrs={"sequence": ",".join(seq), "seed": int(rng_seed), "reference": protocol.reference_id},
    )
    if washout:
        s = apply_washout(s, protocol.effective_washout())
    return s


def draw_individual_params(hyper: GenerativeParams, n: int, rng: np.random.Generator, index: int):
    """Per-participant parameters (and covariates) drawn from the population."""
    z = None
    mean_delta = hyper.delta
    if hyper.subgroup_effect is not None:
        f = hyper.subgroup_fraction
        z = float(int((index + 1) * f) - int(index * f))
        mean_delta = hyper.delta + hyper.subgroup_effect * z
    d = rng.standard_normal(4)
    delta_i = mean_delta + hyper.sd_delta * d[0]
    gamma_i = hyper.gamma + hyper.sd_gamma * d[1]
    if hyper.alpha_i is not None:
        alpha_i = hyper.alpha_i[index % len(hyper.alpha_i)]
    else:
        alpha_i = hyper.alpha + hyper.sd_alpha * d[2]
    carry = hyper.carryover
    if carry is not None and hyper.sd_carryover > 0:
        keys = sorted(carry.effect_by_transition)
        draws = rng.standard_normal(len(keys))
        carry = CarryoverSpec(
            carry.lag_measurements,
            {k: carry.effect_by_transition[k] + hyper.sd_carryover * e for k, e in zip(keys, draws)},
        )
    ind = replace(
        hyper, alpha=float(alpha_i), delta=float(delta_i), gamma=float(gamma_i), carryover=carry,
        sd_delta=0.0, sd_gamma=0.0, sd_alpha=0.0, sd_carryover=0.0, alpha_i=None, subgroup_effect=None,
    )
    covariates = {hyper.subgroup_name: z} if z is not None else {}
    return ind, covariates


def simulate_series(
    protocol: TrialProtocol,
    n_participants: int,
    hyperparams: GenerativeParams,
    sequence_source: Union[str, TreatmentSequence, Sequence] = "randomize",
    missing: Optional[MissingnessSpec] = None,
    rng_seed: int = 0,
    ar_chain: str = "period",
    alternating_mode: bool = False,
) -> list:
    """Simulate a series of N-of-1 trials.

    ``sequence_source`` is ``"randomize"`` (block-randomised per
    participant), one fixed sequence for everyone, or a list with one
    sequence per participant. Each participant's draws come from streams
    keyed by (seed, participant index), so results do not depend on the
    order in which participants are generated.
    """
    if n_participants < 1:
        raise ValidationError("n_participants must be >= 1")
    check_protocol(protocol)
    width = max(3, len(str(n_participants)))
    out = []
    for i in range(n_participants):
        ind, cov = draw_individual_params(hyperparams, n_participants, stream(rng_seed, i, 0), i)
        if isinstance(sequence_source, str):
            if sequence_source != "randomize":
                raise ValidationError(f"unknown sequence source {sequence_source!r}")
            seq = draw_block_randomized(protocol, child_seed(rng_seed, i, 1), alternating_mode)
        elif isinstance(sequence_source, TreatmentSequence):
            seq = sequence_source
        else:
            seq = sequence_source[i]
        s = simulate_individual(
            protocol, seq, ind, missing, child_seed(rng_seed, i, 2), ar_chain,
            participant_id=f"p{i + 1:0{width}d}", covariates=cov,
        )
        truth = {"alpha": ind.alpha, "delta": ind.delta, "gamma": ind.gamma}
        if ind.carryover is not None:
            truth.update({f"carry_{a}_{b}": v for (a, b), v in ind.carryover.effect_by_transition.items()})
        out.append(s.replace(attrs={**s.attrs, "truth": truth}))
    return out


def write_sidecar(path, params: GenerativeParams, seed: int, series_list, **extra) -> None:
    doc = {
        "generative_params": params.to_dict(),
        "seed": int(seed),
        "participants": [
            {"participant_id": s.participant_id, **s.attrs, "covariates": s.covariates} for s in series_list
        ],
        **extra,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8", newline="\n")
