"""Treatment sequences: enumeration, classification, randomisation, fixed designs."""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .errors import EnumerationLimitError, ValidationError
from .protocol import SequenceConstraints, TrialProtocol, check_protocol
from .rng import stream

ENUMERATION_LIMIT = 10**6

LABELS = (
    "uninformative",
    "single_crossover",
    "alternating",
    "counterbalanced",
    "other_balanced",
    "unbalanced",
)


@dataclass(frozen=True)
class TreatmentSequence:
    assignments: tuple
    origin: str = "enumerated"

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple(self.assignments))
        if len(self.assignments) < 1:
            raise ValidationError("a treatment sequence needs at least one period")

    def __len__(self):
        return len(self.assignments)

    def __str__(self):
        if all(len(a) == 1 for a in self.assignments):
            return "".join(self.assignments)
        return ",".join(self.assignments)


@dataclass(frozen=True)
class SequenceClass:
    label: str
    n_crossovers: int
    balanced: bool


def _as_tuple(s) -> tuple:
    if isinstance(s, TreatmentSequence):
        return s.assignments
    if isinstance(s, str):
        return tuple(s)
    return tuple(s)


def count_crossovers(s) -> int:
    a = _as_tuple(s)
    if not a:
        raise ValidationError("empty sequence")
    return sum(x != y for x, y in zip(a, a[1:]))


def is_balanced(s, treatments: Optional[Sequence[str]] = None) -> bool:
    a = _as_tuple(s)
    ids = list(treatments) if treatments is not None else sorted(set(a))
    counts = Counter(a)
    return len({counts.get(t, 0) for t in ids}) == 1


def _leading_run(a: tuple, tid: str) -> int:
    n = 0
    for x in a:
        if x != tid:
            break
        n += 1
    return n


def satisfies(s, treatments, constraints: SequenceConstraints, block_size: Optional[int] = None) -> bool:
    a = _as_tuple(s)
    if constraints.require_balance and not is_balanced(a, treatments):
        return False
    if count_crossovers(a) < constraints.min_crossovers:
        return False
    if constraints.forbid_leading_run is not None:
        tid, run = constraints.forbid_leading_run
        if _leading_run(a, tid) >= run:
            return False
    if constraints.block_randomized and block_size:
        if len(a) % block_size:
            return False
        for i in range(0, len(a), block_size):
            if not is_balanced(a[i:i + block_size], treatments):
                return False
    return True


def enumerate_sequences(
    n_periods: int,
    treatments: Sequence[str],
    constraints: Optional[SequenceConstraints] = None,
    block_size: Optional[int] = None,
    limit: int = ENUMERATION_LIMIT,
) -> list:
    """All sequences of ``n_periods`` satisfying ``constraints``.

    Ordering is lexicographic with respect to the order of ``treatments``.
    ``block_size`` is only consulted when the constraints ask for block
    randomisation.
    """
    treatments = list(treatments)
    if n_periods < 1:
        raise ValidationError("n_periods must be >= 1")
    if len(treatments) < 2:
        raise ValidationError("need at least two treatments")
    total = len(treatments) ** n_periods
    if total > limit:
        raise EnumerationLimitError(
            f"{len(treatments)}^{n_periods} = {total} sequences exceeds the enumeration bound "
            f"{limit}; draw randomised sequences instead"
        )
    constraints = constraints or SequenceConstraints()
    return [
        TreatmentSequence(a, "enumerated")
        for a in itertools.product(treatments, repeat=n_periods)
        if satisfies(a, treatments, constraints, block_size)
    ]


def classify_sequence(s, treatments: Optional[Sequence[str]] = None) -> SequenceClass:
    """Place a sequence in the design taxonomy.

    For two treatments the labels are checked in order: a single treatment
    is uninformative; one crossover confounds treatment with time; strict
    alternation; balanced mirror-symmetric sequences (ABBA, BAAB, ABBAABBA)
    are counterbalanced; anything else is other_balanced or unbalanced.
    Sequences over more than two treatments get a balance-only label.
    """
    a = _as_tuple(s)
    n_x = count_crossovers(a)
    distinct = set(a)
    balanced = is_balanced(a, treatments)
    if treatments is not None and len(treatments) > 2 or len(distinct) > 2:
        return SequenceClass("other_balanced" if balanced else "unbalanced", n_x, balanced)
    if len(distinct) == 1:
        return SequenceClass("uninformative", n_x, balanced)
    if n_x == 1:
        return SequenceClass("single_crossover", n_x, balanced)
    if n_x == len(a) - 1:
        return SequenceClass("alternating", n_x, balanced)
    if balanced and a == a[::-1]:
        return SequenceClass("counterbalanced", n_x, balanced)
    return SequenceClass("other_balanced" if balanced else "unbalanced", n_x, balanced)


def draw_block_randomized(p: TrialProtocol, rng_seed: int, alternating_mode: bool = False) -> TreatmentSequence:
    """One block-randomised sequence, fully determined by ``rng_seed``.

    Each block is an independent uniform shuffle of the balanced treatment
    multiset. With ``alternating_mode`` the first block's order is repeated in
    every block (ABAB / BABA style).
    """
    check_protocol(p)
    ids = p.treatment_ids
    T = p.periods_per_block
    if T % len(ids):
        raise ValidationError(
            f"periods_per_block ({T}) must be a multiple of the number of treatments ({len(ids)})"
        )
    rng = stream(rng_seed)
    base = [t for t in ids for _ in range(T // len(ids))]
    out = []
    first = None
    for _ in range(p.n_blocks):
        if alternating_mode and first is not None:
            out.extend(first)
            continue
        block = [base[i] for i in rng.permutation(T)]
        first = block
        out.extend(block)
    return TreatmentSequence(out, "randomized")


def fixed_design(kind: str, treatments) -> TreatmentSequence:
    ref, act = treatments
    if kind == "multiple_baseline_AB":
        return TreatmentSequence((ref, act), "fixed")
    if kind == "withdrawal_reversal_ABA":
        return TreatmentSequence((ref, act, ref), "fixed")
    raise ValidationError(f"unknown fixed design {kind!r}")


def format_randomization_list(seqs, seed, constraints: SequenceConstraints) -> str:
    flr = constraints.forbid_leading_run
    header = (
        f"# seed={seed} require_balance={str(constraints.require_balance).lower()} "
        f"min_crossovers={constraints.min_crossovers} "
        f"forbid_leading_run={'none' if flr is None else f'{flr[0]}:{flr[1]}'} "
        f"block_randomized={str(constraints.block_randomized).lower()}"
    )
    lines = [header] + [",".join(_as_tuple(s)) for s in seqs]
    return "\n".join(lines) + "\n"


def parse_randomization_list(text: str) -> list:
    out = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        out.append(TreatmentSequence(tuple(line.strip().split(",")), "fixed"))
    return out


def write_randomization_list(path, seqs, seed, constraints) -> None:
    Path(path).write_text(format_randomization_list(seqs, seed, constraints), encoding="utf-8", newline="\n")
