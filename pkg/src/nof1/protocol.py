"""Trial protocols: treatments, block structure, washout and sequence rules."""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import ProtocolError, ValidationError

WASHOUT_MODES = ("none", "drop_first_measurements", "weight_ramp")


@dataclass(frozen=True)
class Treatment:
    id: str
    description: str = ""
    is_reference: bool = False


@dataclass(frozen=True)
class WashoutPolicy:
    mode: str = "none"
    n_drop: int = 0
    ramp_weights: Optional[tuple] = None
    # drop/ramp after every period boundary, or only where the treatment changes
    crossovers_only: bool = False

    def __post_init__(self):
        if self.ramp_weights is not None:
            object.__setattr__(self, "ramp_weights", tuple(float(w) for w in self.ramp_weights))


@dataclass(frozen=True)
class SequenceConstraints:
    require_balance: bool = False
    min_crossovers: int = 0
    forbid_leading_run: Optional[tuple] = None  # (treatment id, run length)
    block_randomized: bool = False

    def __post_init__(self):
        if self.forbid_leading_run is not None:
            tid, run = self.forbid_leading_run
            object.__setattr__(self, "forbid_leading_run", (str(tid), int(run)))


@dataclass(frozen=True)
class TrialProtocol:
    treatments: tuple
    n_blocks: int
    periods_per_block: int
    period_length_days: int
    measurements_per_period: int
    washout: Optional[WashoutPolicy] = None
    sequence_constraints: SequenceConstraints = field(default_factory=SequenceConstraints)
    max_total_days: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "treatments", tuple(self.treatments))

    @property
    def treatment_ids(self) -> list:
        return [t.id for t in self.treatments]

    @property
    def reference_id(self) -> str:
        refs = [t.id for t in self.treatments if t.is_reference]
        if len(refs) != 1:
            raise ValidationError("protocol must have exactly one reference treatment")
        return refs[0]

    @property
    def n_periods(self) -> int:
        return self.n_blocks * self.periods_per_block

    @property
    def n_slots(self) -> int:
        return self.n_periods * self.measurements_per_period

    def effective_washout(self) -> WashoutPolicy:
        """The declared washout policy, or the default when none is declared.

        The default disregards the first measurement of each period when a
        period spans at least two days.
        """
        if self.washout is not None:
            return self.washout
        if self.period_length_days >= 2 and self.measurements_per_period >= 2:
            return WashoutPolicy("drop_first_measurements", n_drop=1)
        return WashoutPolicy("none")

    def with_design(self, n_blocks=None, measurements_per_period=None) -> "TrialProtocol":
        kw = {}
        if n_blocks is not None:
            kw["n_blocks"] = int(n_blocks)
        if measurements_per_period is not None:
            kw["measurements_per_period"] = int(measurements_per_period)
        return replace(self, **kw)


def validate_protocol(p: TrialProtocol) -> list:
    """Return every violated protocol invariant as a readable string."""
    v = []
    ids = [t.id for t in p.treatments]
    if len(ids) < 2:
        v.append(f"need at least 2 treatments, got {len(ids)}")
    if any(not isinstance(i, str) or not i for i in ids):
        v.append("treatment ids must be non-empty strings")
    if len(set(ids)) != len(ids):
        v.append("treatment ids must be unique")
    n_ref = sum(bool(t.is_reference) for t in p.treatments)
    if n_ref != 1:
        v.append(f"exactly one reference treatment required, got {n_ref}")
    for name in ("n_blocks", "periods_per_block", "period_length_days", "measurements_per_period"):
        val = getattr(p, name)
        if not isinstance(val, int) or isinstance(val, bool) or val < 1:
            v.append(f"{name} must be a positive integer, got {val!r}")
    if v:
        return v

    L = len(ids)
    c = p.sequence_constraints
    if c.block_randomized and p.periods_per_block % L != 0:
        v.append(f"periods_per_block not multiple of L ({p.periods_per_block} periods, {L} treatments)")
    if c.require_balance and p.n_periods % L != 0:
        v.append(f"balance requires total periods ({p.n_periods}) divisible by L ({L})")
    if c.min_crossovers < 0:
        v.append("min_crossovers must be nonnegative")
    elif c.min_crossovers > p.n_periods - 1:
        v.append(f"min_crossovers {c.min_crossovers} exceeds total periods - 1 ({p.n_periods - 1})")
    if c.forbid_leading_run is not None:
        tid, run = c.forbid_leading_run
        if tid not in ids:
            v.append(f"forbid_leading_run names unknown treatment {tid!r}")
        if run < 1:
            v.append("forbid_leading_run length must be >= 1")

    M = p.measurements_per_period
    w = p.washout
    if w is not None:
        if w.mode not in WASHOUT_MODES:
            v.append(f"unknown washout mode {w.mode!r}")
        if w.n_drop < 0:
            v.append("washout n_drop must be nonnegative")
        if w.mode == "drop_first_measurements" and w.n_drop >= M:
            v.append(f"washout n_drop ({w.n_drop}) must be < measurements_per_period ({M})")
        if w.ramp_weights is not None:
            if any(not 0.0 <= r <= 1.0 for r in w.ramp_weights):
                v.append("washout ramp_weights must lie in [0, 1]")
            if len(w.ramp_weights) >= M:
                v.append(f"washout ramp_weights length must be < measurements_per_period ({M})")
        if w.mode == "weight_ramp" and not w.ramp_weights:
            v.append("weight_ramp washout needs ramp_weights")

    if p.max_total_days is not None:
        if p.max_total_days < 1:
            v.append("max_total_days must be positive")
        elif p.n_periods * p.period_length_days > p.max_total_days:
            v.append(
                f"trial length {p.n_periods * p.period_length_days} days exceeds cap of {p.max_total_days}"
            )
    return v


def check_protocol(p: TrialProtocol) -> TrialProtocol:
    v = validate_protocol(p)
    if v:
        raise ProtocolError(v)
    return p


def trial_length_days(p: TrialProtocol) -> int:
    check_protocol(p)
    return p.n_blocks * p.periods_per_block * p.period_length_days


def planned_measurement_bounds(
    periods_per_treatment_range,
    period_length_weeks_range,
    measurements_per_day: int = 1,
    n_treatments: int = 2,
    cap_weeks: Optional[int] = None,
):
    """Smallest and largest planned measurement count over personalised designs.

    Each participant picks how many periods of each treatment to receive and
    how many weeks each period lasts; the total trial length (not the
    per-treatment exposure) is capped at ``cap_weeks``.

    >>> planned_measurement_bounds((2, 4), (1, 2), cap_weeks=12)
    (28, 84)
    """
    plo, phi = periods_per_treatment_range
    wlo, whi = period_length_weeks_range
    if plo > phi or wlo > whi or plo < 1 or wlo < 1:
        raise ValidationError("ranges must be nonempty intervals of positive integers")
    if measurements_per_day < 1 or n_treatments < 1:
        raise ValidationError("measurements_per_day and n_treatments must be positive")
    weeks = [
        n_treatments * per * wk
        for per, wk in itertools.product(range(plo, phi + 1), range(wlo, whi + 1))
    ]
    feasible = [w for w in weeks if cap_weeks is None or w <= cap_weeks]
    if not feasible:
        raise ValidationError(
            f"cap of {cap_weeks} weeks is shorter than the minimal trial ({min(weeks)} weeks)"
        )
    per_week = 7 * measurements_per_day
    return min(feasible) * per_week, max(feasible) * per_week


# -- protocol files ---------------------------------------------------------


def protocol_to_dict(p: TrialProtocol) -> dict:
    d = asdict(p)
    d["treatments"] = [asdict(t) for t in p.treatments]
    if p.washout is not None and p.washout.ramp_weights is not None:
        d["washout"]["ramp_weights"] = list(p.washout.ramp_weights)
    flr = p.sequence_constraints.forbid_leading_run
    d["sequence_constraints"]["forbid_leading_run"] = list(flr) if flr is not None else None
    return d


def protocol_from_dict(d: dict) -> TrialProtocol:
    known = {
        "treatments", "n_blocks", "periods_per_block", "period_length_days",
        "measurements_per_period", "washout", "sequence_constraints", "max_total_days", "name",
    }
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown protocol fields: {sorted(unknown)}")
    try:
        treatments = tuple(Treatment(**t) for t in d["treatments"])
        washout = WashoutPolicy(**d["washout"]) if d.get("washout") is not None else None
        constraints = SequenceConstraints(**(d.get("sequence_constraints") or {}))
        return TrialProtocol(
            treatments=treatments,
            n_blocks=d["n_blocks"],
            periods_per_block=d["periods_per_block"],
            period_length_days=d["period_length_days"],
            measurements_per_period=d["measurements_per_period"],
            washout=washout,
            sequence_constraints=constraints,
            max_total_days=d.get("max_total_days"),
            name=d.get("name", ""),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed protocol document: {exc}") from exc


def dumps_protocol(p: TrialProtocol) -> str:
    return json.dumps(protocol_to_dict(p), sort_keys=True, indent=2) + "\n"


def loads_protocol(text: str) -> TrialProtocol:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"protocol file is not valid JSON: {exc}") from exc
    return protocol_from_dict(d)


def load_protocol(path) -> TrialProtocol:
    return loads_protocol(Path(path).read_text(encoding="utf-8"))


def save_protocol(p: TrialProtocol, path) -> None:
    Path(path).write_text(dumps_protocol(p), encoding="utf-8", newline="\n")


def two_arm_protocol(
    n_blocks: int,
    periods_per_block: int,
    measurements_per_period: int,
    period_length_days: Optional[int] = None,
    ids=("A", "B"),
    washout: Optional[WashoutPolicy] = WashoutPolicy("none"),
    block_randomized: bool = True,
    **kw,
) -> TrialProtocol:
    """Convenience constructor for the common reference-vs-active layout."""
    ref, act = ids
    return TrialProtocol(
        treatments=(Treatment(ref, is_reference=True), Treatment(act)),
        n_blocks=n_blocks,
        periods_per_block=periods_per_block,
        period_length_days=period_length_days or measurements_per_period,
        measurements_per_period=measurements_per_period,
        washout=washout,
        sequence_constraints=SequenceConstraints(block_randomized=block_randomized),
        **kw,
    )
