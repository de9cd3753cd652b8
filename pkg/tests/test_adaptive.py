import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from nof1.adaptive import (
    ArmState,
    posterior_draws,
    regret_ratio,
    run_adaptive_trial,
    thompson_step,
    update_arm,
)
from nof1.errors import ValidationError
from nof1.protocol import load_protocol
from nof1.rng import stream


def freq(state, arm, n=10_000, seed=0):
    rng = stream(seed)
    return sum(thompson_step(state, rng) == arm for _ in range(n)) / n


def test_degenerate_posterior_always_wins():
    s = ArmState(("A", "B"), (10.0, 0.0), (np.inf, np.inf))
    assert freq(s, "A", 1000) == 1.0


def test_symmetric_arms_split_evenly():
    s = ArmState.from_prior(("A", "B"), 0.0, 1.0)
    assert abs(freq(s, "A") - 0.5) < 0.02


def test_selection_probability_matches_normal_difference():
    s = ArmState(("A", "B"), (1.0, 0.0), (1.0, 1.0))
    assert abs(freq(s, "A") - norm.cdf(1 / np.sqrt(2))) < 0.02


def test_step_leaves_state_alone():
    s = ArmState.from_prior(("A", "B", "C"))
    before = (s.means, s.precisions)
    thompson_step(s, stream(1))
    assert (s.means, s.precisions) == before


def test_single_arm_always_chosen():
    s = ArmState.from_prior(("only",))
    rng = stream(2)
    assert {thompson_step(s, rng) for _ in range(50)} == {"only"}


def test_conjugate_update_example():
    s = update_arm(ArmState.from_prior(("A", "B"), 0.0, 10.0, 1.0), "A", 5.0)
    assert s.means[0] == pytest.approx(500 / 101)
    assert s.means[0] == pytest.approx(4.95, abs=0.001)
    assert s.precisions[0] == pytest.approx(0.01 + 1)


def test_flat_prior_limit_gives_sample_mean():
    ys = [1.0, 2.5, -0.5, 4.0]
    s = ArmState.from_prior(("A",), 0.0, 1e9, 2.0)
    for y in ys:
        s = update_arm(s, "A", y)
    assert s.means[0] == pytest.approx(np.mean(ys), abs=1e-9)


def test_update_is_local_and_checks_arm():
    s = ArmState.from_prior(("A", "B"), 1.5, 3.0)
    t = update_arm(s, "A", 2.0)
    assert t.means[1] == s.means[1] and t.precisions[1] == s.precisions[1]
    with pytest.raises(ValidationError, match="unknown treatment"):
        update_arm(s, "Z", 1.0)


def test_state_validation():
    with pytest.raises(ValidationError):
        ArmState(("A",), (0.0,), (0.0,))
    with pytest.raises(ValidationError):
        ArmState((), (), ())
    with pytest.raises(ValidationError):
        ArmState(("A", "A"), (0, 0), (1, 1))


@given(st.lists(st.tuples(st.sampled_from("AB"), st.floats(-50, 50), st.integers(1, 10)), max_size=30))
def test_precision_nondecreasing(obs):
    s = ArmState.from_prior(("A", "B"))
    for arm, y, n in obs:
        t = update_arm(s, arm, y, n)
        assert all(b >= a for a, b in zip(s.precisions, t.precisions))
        s = t


def test_posterior_draws_respect_infinite_precision():
    s = ArmState(("A", "B"), (3.0, 0.0), (np.inf, 1.0))
    d = np.array([posterior_draws(s, stream(k)) for k in range(200)])
    assert np.all(d[:, 0] == 3.0) and d[:, 1].std() > 0.5


def test_identical_arms_have_no_regret():
    t = run_adaptive_trial({"A": 0.5, "B": 0.5}, 100, rng_seed=4)
    assert t.cumulative_regret[-1] == 0
    assert len(t) == 100


def test_trial_concentrates_on_best_arm():
    t = run_adaptive_trial({"walk": 0.0, "resistance": 0.5, "interval": 1.0}, 200, rng_seed=1)
    assert t.best_arm == "interval"
    assert t.fraction_best(50) > 0.8


def test_regret_grows_sublinearly():
    traces = [run_adaptive_trial({"a": 0.0, "b": 0.5, "c": 1.0}, 200, rng_seed=s) for s in range(30)]
    assert regret_ratio(traces, 50) < 2
    assert regret_ratio(traces, 100) < 2


def test_trace_reproducible_and_csv():
    a = run_adaptive_trial({"A": 0.0, "B": 1.0}, 20, 3, rng_seed=9, rho=0.4)
    b = run_adaptive_trial({"A": 0.0, "B": 1.0}, 20, 3, rng_seed=9, rho=0.4)
    assert a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == ("epoch,chosen,outcome,sample_A,sample_B,mean_A,mean_B,precision_A,precision_B,"
                        "cumulative_regret")
    assert len(lines) == 21


def test_round_robin_visits_each_arm_first():
    t = run_adaptive_trial({"A": 0.0, "B": 1.0, "C": 2.0}, 10, round_robin=True, rng_seed=0)
    assert t.chosen[:3] == ["A", "B", "C"]
    assert t.to_csv().splitlines()[1].split(",")[3] == ""


def test_protocol_sets_epoch_length(fixtures_dir):
    p = load_protocol(fixtures_dir / "exercise_four_period.protocol")
    t = run_adaptive_trial({"walk": 0.0, "resistance": 1.0}, 5, protocol=p)
    assert t.arms == ("walk", "resistance")
    with pytest.raises(ValidationError, match="no true mean"):
        run_adaptive_trial({"walk": 0.0}, 5, protocol=p)
