"""Monte Carlo power and design allocation for series of N-of-1 trials.

Each replicate simulates a whole study from the assumed generative model,
analyses it, and records whether the decision rule fired. Replicates whose
analysis fails are counted as inconclusive and kept out of the power
denominator, so a fragile design cannot pass as a conservative one.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .errors import Nof1Error, ValidationError
from .fit_single import ModelSpec, fit_bayes, fit_gls, model_spec_from_dict, model_spec_to_dict
from .mcmc import McmcSettings
from .meta import fit_hier
from .protocol import TrialProtocol, check_protocol, protocol_from_dict, protocol_to_dict
from .rng import child_seed
from .simulate import GenerativeParams, MissingnessSpec, simulate_series

RESULT_COLUMNS = ("design_id", "n", "K", "M", "power", "mc_se", "inconclusive_rate")
_FAILURES = (Nof1Error, ArithmeticError, np.linalg.LinAlgError)


@dataclass(frozen=True)
class PowerQuery:
    """What to simulate, how to analyse it, and which designs to compare.

    ``designs`` lists ``(n_participants, n_blocks, measurements_per_period)``
    candidates applied to the ``protocol`` template. ``test`` is
    ``"population"`` (average effect) or ``"individual"`` (each participant's
    own effect). ``rule="gls"`` rejects when the two-sided p-value is below
    ``level``; ``rule="bayes"`` when the posterior probability of a positive
    effect exceeds ``threshold``.
    """

    protocol: TrialProtocol
    designs: tuple
    params: GenerativeParams
    test: str = "population"
    rule: str = "gls"
    level: float = 0.05
    threshold: float = 0.975
    n_replicates: int = 1000
    seed: int = 0
    sequence_source: str = "randomize"  # or "alternating"
    analysis: ModelSpec = field(default_factory=ModelSpec)
    missing: Optional[MissingnessSpec] = None
    budget: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "designs", tuple(tuple(int(v) for v in d) for d in self.designs))
        if not self.designs:
            raise ValidationError("no candidate designs")
        for d in self.designs:
            if len(d) != 3 or min(d) < 1:
                raise ValidationError(f"design must be (n_participants, n_blocks, measurements_per_period), got {d}")
        if self.test not in ("population", "individual"):
            raise ValidationError("test must be 'population' or 'individual'")
        if self.rule not in ("gls", "bayes"):
            raise ValidationError("rule must be 'gls' or 'bayes'")
        if not 0.0 < self.level < 1.0:
            raise ValidationError("level must lie in (0, 1)")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("threshold must lie in (0, 1)")
        if self.n_replicates < 1:
            raise ValidationError("n_replicates must be >= 1")
        if self.sequence_source not in ("randomize", "alternating"):
            raise ValidationError("sequence_source must be 'randomize' or 'alternating'")
        if self.test == "population" and any(d[0] < 2 for d in self.designs):
            raise ValidationError("population test needs >= 2 participants per design")
        check_protocol(self.protocol)

    def design_protocol(self, design) -> TrialProtocol:
        n, K, M = design
        return self.protocol.with_design(n_blocks=K, measurements_per_period=M)

    def design_budget(self, design) -> int:
        n, K, M = design
        return n * K * self.protocol.periods_per_block * M


@dataclass(frozen=True)
class DesignPower:
    design_id: int
    n: int
    K: int
    M: int
    power: float
    mc_se: float
    inconclusive_rate: float
    n_decisions: int
    n_inconclusive: int
    mean_runtime: float
    budget: int

    @property
    def interval(self):
        half = 1.959963984540054 * self.mc_se
        return (self.power - half, self.power + half)


@dataclass
class PowerResult:
    designs: list

    def __iter__(self):
        return iter(self.designs)

    def __getitem__(self, i) -> DesignPower:
        return self.designs[i]

    def to_csv(self, path=None) -> str:
        lines = [",".join(RESULT_COLUMNS)]
        for d in self.designs:
            lines.append(
                f"{d.design_id},{d.n},{d.K},{d.M},{d.power!r},{d.mc_se!r},{d.inconclusive_rate!r}"
            )
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="\n")
        return text


def mc_se(p: float, r: int) -> float:
    return float(np.sqrt(p * (1.0 - p) / r)) if r > 0 else float("nan")


def _decide_population(q: PowerQuery, series) -> Optional[bool]:
    if q.rule == "gls":
        est = []
        for s in series:
            try:
                est.append(fit_gls(s, q.analysis).estimate("delta"))
            except _FAILURES:
                continue
        if len(est) < 2:
            return None
        p = stats.ttest_1samp(est, 0.0).pvalue
        return bool(np.isfinite(p) and p < q.level) if np.ptp(est) > 0 else None
    h = fit_hier(series, q.analysis)
    if not h.converged:
        return None
    return bool(h.posterior.prob_benefit > q.threshold)


def _decide_individual(q: PowerQuery, s) -> Optional[bool]:
    if q.rule == "gls":
        p = fit_gls(s, q.analysis).pvalue("delta")
        return bool(p < q.level) if np.isfinite(p) else None
    post = fit_bayes(s, q.analysis)
    if not post.converged:
        return None
    return bool(post.prob_benefit > q.threshold)


def _replicate(q: PowerQuery, design, rep: int):
    """(rejections, decisions, inconclusive, seconds) for one simulated study."""
    t0 = time.perf_counter()
    n = design[0]
    series = simulate_series(
        q.design_protocol(design), n, q.params, "randomize", q.missing, child_seed(q.seed, rep),
        ar_chain=q.analysis.ar_chain, alternating_mode=q.sequence_source == "alternating",
    )
    if q.test == "population":
        try:
            d = _decide_population(q, series)
        except _FAILURES:
            d = None
        out = (0, 0, 1) if d is None else (int(d), 1, 0)
    else:
        rej = dec = inc = 0
        for s in series:
            try:
                d = _decide_individual(q, s)
            except _FAILURES:
                d = None
            if d is None:
                inc += 1
            else:
                dec += 1
                rej += int(d)
        out = (rej, dec, inc)
    return (*out, time.perf_counter() - t0)


def _run_chunk(args):
    q, design, reps = args
    return [_replicate(q, design, r) for r in reps]


def default_workers() -> int:
    v = os.environ.get("NOF1_NUM_THREADS")
    return max(1, int(v)) if v else 1


def estimate_power(q: PowerQuery, workers: Optional[int] = None) -> PowerResult:
    """Power of every candidate design in ``q``.

    Replicate ``r`` uses the seed ``child_seed(q.seed, r)`` for every design,
    so designs are compared on common random numbers and the result does not
    depend on ``workers``. For the individual test each participant is one
    decision, so the MC se counts participants times replicates.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    rows = []
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for i, design in enumerate(q.designs):
            reps = list(range(q.n_replicates))
            if pool is None:
                outs = _run_chunk((q, design, reps))
            else:
                chunks = [(q, design, reps[j::workers]) for j in range(workers)]
                outs = [o for part in pool.map(_run_chunk, chunks) for o in part]
            rej = sum(o[0] for o in outs)
            dec = sum(o[1] for o in outs)
            inc = sum(o[2] for o in outs)
            p = rej / dec if dec else float("nan")
            rows.append(
                DesignPower(
                    design_id=i + 1, n=design[0], K=design[1], M=design[2],
                    power=float(p), mc_se=mc_se(p, dec),
                    inconclusive_rate=inc / (dec + inc) if dec + inc else float("nan"),
                    n_decisions=dec, n_inconclusive=inc,
                    mean_runtime=float(np.mean([o[3] for o in outs])),
                    budget=q.design_budget(design),
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return PowerResult(rows)


@dataclass(frozen=True)
class FrontierEntry:
    rank: int
    tied_with_previous: bool
    result: DesignPower


def allocation_frontier(q: PowerQuery, budget: Optional[int] = None, tol: float = 0.05,
                        workers: Optional[int] = None) -> list:
    """Rank the candidate designs whose budget is within ``tol`` of ``budget``.

    The budget counts measurements, n * K * T * M. Designs are sorted by
    estimated power; a design whose power is within one MC standard error of
    the difference from the design ranked above it shares that design's rank.
    """
    budget = budget if budget is not None else q.budget
    if budget is None:
        raise ValidationError("allocation frontier needs a measurement budget")
    keep = [d for d in q.designs if abs(q.design_budget(d) - budget) <= tol * budget]
    if not keep:
        raise ValidationError(f"no candidate design within {tol:.0%} of the budget {budget}")
    res = estimate_power(replace(q, designs=tuple(keep)), workers)
    ordered = sorted(res.designs, key=lambda d: (-d.power, d.design_id))
    out = []
    rank = 1
    for j, d in enumerate(ordered):
        tied = False
        if j:
            prev = ordered[j - 1]
            tied = abs(prev.power - d.power) <= np.hypot(prev.mc_se, d.mc_se)
            if not tied:
                rank = j + 1
        out.append(FrontierEntry(rank, tied, d))
    return out


def frontier_csv(entries, path=None) -> str:
    lines = [",".join(("rank", "tied_with_previous", *RESULT_COLUMNS, "budget"))]
    for e in entries:
        d = e.result
        lines.append(
            f"{e.rank},{int(e.tied_with_previous)},{d.design_id},{d.n},{d.K},{d.M},"
            f"{d.power!r},{d.mc_se!r},{d.inconclusive_rate!r},{d.budget}"
        )
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    return text


# -- query files ---------------------------------------------------------------


def query_to_dict(q: PowerQuery) -> dict:
    return {
        "protocol": protocol_to_dict(q.protocol),
        "designs": [list(d) for d in q.designs],
        "params": q.params.to_dict(),
        "test": q.test,
        "rule": q.rule,
        "level": q.level,
        "threshold": q.threshold,
        "n_replicates": q.n_replicates,
        "seed": q.seed,
        "sequence_source": q.sequence_source,
        "analysis": model_spec_to_dict(q.analysis),
        "missing": None if q.missing is None else {"mechanism": q.missing.mechanism, "p": q.missing.p},
        "budget": q.budget,
    }


def query_from_dict(d: dict) -> PowerQuery:
    d = dict(d)
    allowed = set(PowerQuery.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise ValidationError(f"unknown power query fields {sorted(unknown)}")
    for k in ("protocol", "designs", "params"):
        if k not in d:
            raise ValidationError(f"power query needs {k!r}")
    d["protocol"] = protocol_from_dict(d["protocol"])
    try:
        d["params"] = GenerativeParams.from_dict(d["params"])
        if d.get("missing") is not None:
            d["missing"] = MissingnessSpec(**d["missing"])
    except TypeError as e:
        raise ValidationError(str(e)) from None
    if "analysis" in d:
        d["analysis"] = model_spec_from_dict(d["analysis"])
    return PowerQuery(**d)


def load_query(path) -> PowerQuery:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"power query is not valid JSON: {e}") from None
    return query_from_dict(doc)


def save_query(q: PowerQuery, path) -> None:
    Path(path).write_text(json.dumps(query_to_dict(q), indent=2, sort_keys=True) + "\n", encoding="utf-8")


__all__ = [
    "PowerQuery", "PowerResult", "DesignPower", "FrontierEntry", "estimate_power", "allocation_frontier",
    "frontier_csv", "query_to_dict", "query_from_dict", "load_query", "save_query", "mc_se", "McmcSettings",
]
