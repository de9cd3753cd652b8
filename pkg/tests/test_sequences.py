from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from nof1.errors import EnumerationLimitError, ValidationError
from nof1.protocol import SequenceConstraints, two_arm_protocol
from nof1.sequences import (
    TreatmentSequence,
    classify_sequence,
    count_crossovers,
    draw_block_randomized,
    enumerate_sequences,
    fixed_design,
    format_randomization_list,
    is_balanced,
    parse_randomization_list,
)


def strs(seqs):
    return [str(s) for s in seqs]


def test_four_period_space():
    assert len(enumerate_sequences(4, ["A", "B"])) == 16
    bal = enumerate_sequences(4, ["A", "B"], SequenceConstraints(require_balance=True))
    assert strs(bal) == ["AABB", "ABAB", "ABBA", "BAAB", "BABA", "BBAA"]


def test_six_period_activity_filter():
    cons = SequenceConstraints(require_balance=True, min_crossovers=3, forbid_leading_run=("control", 2))
    kept = enumerate_sequences(6, ["activity", "control"], cons)
    assert len(kept) == 12
    balanced = enumerate_sequences(6, ["activity", "control"], SequenceConstraints(require_balance=True))
    assert len(balanced) == 20
    brute = [
        s for s in balanced
        if count_crossovers(s) >= 3 and s.assignments[:2] != ("control", "control")
    ]
    assert strs(brute) == strs(kept)


def test_enumeration_bound():
    with pytest.raises(EnumerationLimitError):
        enumerate_sequences(21, ["A", "B"])
    assert len(enumerate_sequences(3, ["A", "B"], limit=8)) == 8


@pytest.mark.parametrize("s,n", [("AAAA", 0), ("ABBABA", 4), ("ABAB", 3)])
def test_count_crossovers(s, n):
    assert count_crossovers(s) == n


@pytest.mark.parametrize(
    "s,label",
    [
        ("BBBB", "uninformative"),
        ("ABBA", "counterbalanced"),
        ("BAAB", "counterbalanced"),
        ("AABB", "single_crossover"),
        ("ABAB", "alternating"),
        ("BABA", "alternating"),
        ("ABBAAB", "other_balanced"),
        ("ABBBAB", "unbalanced"),
    ],
)
def test_classify(s, label):
    assert classify_sequence(s).label == label


def test_classify_more_than_two_treatments():
    c = classify_sequence("ABCCBA")
    assert c.label == "other_balanced" and c.n_crossovers == 4
    assert classify_sequence("ABCCBB").label == "unbalanced"


@given(st.lists(st.sampled_from("AB"), min_size=1, max_size=10))
def test_classification_invariant_under_relabeling(seq):
    swapped = ["B" if x == "A" else "A" for x in seq]
    a, b = classify_sequence(seq), classify_sequence(swapped)
    assert a == b


@given(st.integers(1, 10), st.integers(2, 3))
def test_unconstrained_count(n, L):
    ids = ["A", "B", "C"][:L]
    if L**n > 10**5:
        return
    seqs = enumerate_sequences(n, ids)
    assert len(seqs) == L**n
    assert [s.assignments for s in seqs] == sorted(s.assignments for s in seqs)


@given(st.integers(1, 6))
def test_balanced_count_is_binomial(half):
    n = 2 * half
    assert len(enumerate_sequences(n, ["A", "B"], SequenceConstraints(require_balance=True))) == comb(n, half)


def test_block_randomized_uniform_over_admissible_set():
    p = two_arm_protocol(2, 2, 7)
    counts = {}
    for seed in range(20000):
        s = str(draw_block_randomized(p, seed))
        counts[s] = counts.get(s, 0) + 1
    assert set(counts) == {"ABAB", "ABBA", "BAAB", "BABA"}
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


def test_single_block_two_orders():
    p = two_arm_protocol(1, 2, 7)
    draws = [str(draw_block_randomized(p, s)) for s in range(4000)]
    assert set(draws) == {"AB", "BA"}
    assert abs(np.mean([d == "AB" for d in draws]) - 0.5) < 0.03


def test_alternating_mode():
    p = two_arm_protocol(3, 2, 7)
    draws = {str(draw_block_randomized(p, s, alternating_mode=True)) for s in range(200)}
    assert draws == {"ABABAB", "BABABA"}


@given(st.integers(0, 2**64 - 1), st.integers(1, 5), st.sampled_from([2, 4, 6]))
def test_draws_are_block_balanced_and_deterministic(seed, K, T):
    p = two_arm_protocol(K, T, 7)
    s = draw_block_randomized(p, seed)
    assert s == draw_block_randomized(p, seed)
    a = s.assignments
    for i in range(0, len(a), T):
        assert is_balanced(a[i:i + T], ["A", "B"])


def test_draw_rejects_unbalanced_blocks():
    with pytest.raises(ValidationError):
        draw_block_randomized(two_arm_protocol(2, 3, 7, block_randomized=False), 0)


def test_fixed_designs():
    assert fixed_design("multiple_baseline_AB", ("A", "B")).assignments == ("A", "B")
    assert fixed_design("withdrawal_reversal_ABA", ("A", "B")).assignments == ("A", "B", "A")
    assert fixed_design("multiple_baseline_AB", ("B", "A")).assignments == ("B", "A")
    assert fixed_design("multiple_baseline_AB", ("A", "B")).origin == "fixed"


def test_randomization_list_round_trip():
    cons = SequenceConstraints(require_balance=True, forbid_leading_run=("A", 2))
    seqs = enumerate_sequences(4, ["A", "B"], cons)
    text = format_randomization_list(seqs, 7, cons)
    assert text.splitlines()[0] == (
        "# seed=7 require_balance=true min_crossovers=0 forbid_leading_run=A:2 block_randomized=false"
    )
    assert [s.assignments for s in parse_randomization_list(text)] == [s.assignments for s in seqs]


def test_sequence_needs_a_period():
    with pytest.raises(ValidationError):
        TreatmentSequence(())
