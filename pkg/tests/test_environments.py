import math

import numpy as np
import pytest

from rlhf_kernel._validation import InvalidArgumentError, ValidationError
from rlhf_kernel.environments import (
    CartPoleParams,
    CartPoleState,
    PreferenceOracle,
    ThermostatParams,
    ThermostatState,
    VerifiableTask,
    cartpole_force,
    cartpole_step,
    extract_answer,
    read_preferences_jsonl,
    sample_preference,
    separable_preferences,
    thermostat_policy,
    thermostat_step,
    verifiable_reward,
    write_preferences_jsonl,
)
from rlhf_kernel.numerics import Seed
from rlhf_kernel.reward_models import FeatureMap, LinearRewardModel, PreferenceRecord


def test_thermostat_examples():
    s, r = thermostat_step(ThermostatState(70.0), "off")
    assert s.temperature == 69.0 and r == 1.0
    s, r = thermostat_step(ThermostatState(65.0), "on")
    assert s.temperature == 66.5 and r == 0.0
    assert thermostat_policy(ThermostatState(65.0)) == {"on": 1.0, "off": 0.0}
    assert thermostat_policy(ThermostatState(72.0))["off"] == 1.0
    with pytest.raises(InvalidArgumentError):
        thermostat_step(ThermostatState(70.0), "heat")


def test_thermostat_band_edges():
    assert thermostat_step(ThermostatState(70.5), "on")[1] == 1.0  # 72.0 is inside
    assert thermostat_step(ThermostatState(71.0), "on")[1] == 0.0  # 72.5 is outside


def test_thermostat_noise_is_seeded():
    params = ThermostatParams(noise_std=0.5)
    a = thermostat_step(ThermostatState(68.0), "on", params, Seed(3))
    b = thermostat_step(ThermostatState(68.0), "on", params, Seed(3))
    assert a == b and a[0].temperature != 69.5
    with pytest.raises(InvalidArgumentError):
        thermostat_step(ThermostatState(68.0), "on", params)


def test_cartpole_zero_state_is_fixed_under_zero_force():
    s, r, done = cartpole_step(CartPoleState(), 0.0)
    assert s == CartPoleState() and r == 1.0 and not done


def test_cartpole_terminates_past_angle_limit():
    s, r, done = cartpole_step(CartPoleState(theta=math.radians(13)), 0.0)
    assert done and r == 0.0
    s, r, done = cartpole_step(CartPoleState(x=2.39, x_dot=1.0), 0.0)
    assert done and r == 0.0


def test_cartpole_single_step_by_hand():
    # from (0, 0, 0.05, 0) with +10 N; constants written out independently of the module
    th = 0.05
    s_t, c_t = math.sin(th), math.cos(th)
    temp = 10.0 / 1.1
    th_acc = (9.8 * s_t - c_t * temp) / (0.5 * (4 / 3 - 0.1 * c_t**2 / 1.1))
    x_acc = temp - 0.05 * th_acc * c_t / 1.1
    nxt, r, done = cartpole_step(CartPoleState(0.0, 0.0, th, 0.0), cartpole_force(1))
    assert nxt.x == 0.0 and nxt.theta == th
    assert nxt.x_dot == pytest.approx(0.02 * x_acc, rel=1e-14)
    assert nxt.theta_dot == pytest.approx(0.02 * th_acc, rel=1e-14)
    assert nxt.theta_dot < 0 and nxt.x_dot > 0
    assert r == 1.0 and not done


def test_cartpole_validation():
    assert cartpole_force(0) == -10.0
    with pytest.raises(InvalidArgumentError):
        cartpole_force(2)
    with pytest.raises(InvalidArgumentError):
        CartPoleParams(dt=0.0)
    with pytest.raises(InvalidArgumentError):
        CartPoleState(x=float("nan"))


def _oracle(weights):
    fmap = FeatureMap(4)
    return PreferenceOracle(LinearRewardModel(fmap, np.array(weights, dtype=float)))


def test_equal_rewards_give_even_odds():
    oracle = _oracle([0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    assert oracle.prob_first([], [2], [3]) == 0.5


def test_large_gap_saturates():
    oracle = _oracle([0.0, 0.0, 50.0, 0.0, 0.0, 0.0])
    assert oracle.prob_first([], [2], [3]) == pytest.approx(1.0, abs=1e-15)
    for k in range(20):
        assert sample_preference(oracle, [], [2], [3], Seed(k)).chosen.tolist() == [2]


def test_sampled_win_rate_matches_probability():
    oracle = _oracle([0.0, 0.0, 0.8, 0.0, 0.0, 0.0])
    p = oracle.prob_first([], [2], [3])
    n = 100_000
    rng_root = Seed(5, "prefs")
    wins = sum(sample_preference(oracle, [], [2], [3], rng_root.child(k)).chosen.tolist() == [2] for k in range(n))
    assert abs(wins - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_sample_preference_needs_distinct_completions():
    with pytest.raises(InvalidArgumentError):
        sample_preference(_oracle([0.0] * 6), [], [2], [2], Seed(0))


def test_separable_preferences_are_noise_free():
    oracle = _oracle([0.3, -1.0, 0.5, 2.0, 0.1, 0.0])
    recs = separable_preferences(oracle, 200, Seed(1), max_len=4)
    assert len(recs) == 200
    for r in recs:
        assert oracle.reward(r.prompt, r.chosen) > oracle.reward(r.prompt, r.rejected)
        assert 1 <= r.chosen.size <= 4
    with pytest.raises(InvalidArgumentError):
        separable_preferences(oracle, 0, Seed(1))


def test_extract_answer_uses_last_marker():
    task = VerifiableTask((2,), answer_token=4, marker_token=3, vocab_size=5)
    assert extract_answer(task, [2, 3, 1, 3, 4]) == 4
    assert extract_answer(task, [2, 2]) is None
    assert extract_answer(task, [2, 3]) is None
    assert verifiable_reward(task, [3, 4, 0]) == 1.0
    assert verifiable_reward(task, [3, 2, 0]) == 0.0
    with pytest.raises(InvalidArgumentError):
        VerifiableTask((), answer_token=5, marker_token=3, vocab_size=5)


def test_preference_jsonl_round_trip(tmp_path):
    recs = [PreferenceRecord([1], [2, 3], [0], 5, 2), PreferenceRecord([], [4], [3, 3])]
    path = tmp_path / "prefs.jsonl"
    write_preferences_jsonl(recs, path)
    back = read_preferences_jsonl(path)
    assert [r.to_json_dict() for r in back] == [r.to_json_dict() for r in recs]
    path.write_text('{"prompt": [1], "chosen": [2]\n')
    with pytest.raises(ValidationError):
        read_preferences_jsonl(path)
