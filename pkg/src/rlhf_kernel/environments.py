"""Small worked environments and synthetic data oracles.

The thermostat and CartPole are pure transition functions. The preference and
verifiable-reward oracles generate training data for the reward-model, DPO and RL code.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import InvalidArgumentError, ValidationError
from .numerics import Seed, sigmoid
from .reward_models import LinearRewardModel, PreferenceRecord, rm_score

THERMOSTAT_TARGET = 70.0
THERMOSTAT_BAND = 2.0


@dataclass(frozen=True)
class ThermostatParams:
    heat_rate: float = 1.5
    cool_rate: float = 1.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class ThermostatState:
    temperature: float

    def __post_init__(self):
        if not math.isfinite(self.temperature):
            raise InvalidArgumentError("temperature must be finite")


def thermostat_step(
    state: ThermostatState,
    action: str,
    params: ThermostatParams = ThermostatParams(),
    seed: Seed | None = None,
) -> tuple[ThermostatState, float]:
    """Heat or cool by a fixed rate; reward 1 when the new temperature is within 2 degrees of 70."""
    if action == "on":
        t = state.temperature + params.heat_rate
    elif action == "off":
        t = state.temperature - params.cool_rate
    else:
        raise InvalidArgumentError(f"action must be 'on' or 'off', got {action!r}")
    if params.noise_std > 0:
        if seed is None:
            raise InvalidArgumentError("noisy thermostat needs a seed")
        t += params.noise_std * float(seed.rng().standard_normal())
    reward = 1.0 if abs(t - THERMOSTAT_TARGET) <= THERMOSTAT_BAND else 0.0
    return ThermostatState(t), reward


def thermostat_policy(state: ThermostatState) -> dict[str, float]:
    """Threshold rule: heater on with probability 1 below the target."""
    p_on = 1.0 if state.temperature < THERMOSTAT_TARGET else 0.0
    return {"on": p_on, "off": 1.0 - p_on}


@dataclass(frozen=True)
class CartPoleParams:
    m_c: float = 1.0
    m_p: float = 0.1
    l: float = 0.5  # noqa: E741  (pole half-length)
    g: float = 9.8
    F: float = 10.0
    dt: float = 0.02
    x_limit: float = 2.4
    theta_limit_deg: float = 12.0

    def __post_init__(self):
        for name in ("m_c", "m_p", "l", "g", "F", "dt"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"CartPoleParams.{name} must be > 0")

    @property
    def theta_limit(self) -> float:
        return math.radians(self.theta_limit_deg)


@dataclass(frozen=True)
class CartPoleState:
    x: float = 0.0
    x_dot: float = 0.0
    theta: float = 0.0
    theta_dot: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise InvalidArgumentError("CartPole state must be finite")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.x_dot, self.theta, self.theta_dot)


def cartpole_force(action: int, params: CartPoleParams = CartPoleParams()) -> float:
    """Map a discrete action (0 = push left, 1 = push right) to -F / +F."""
    if action not in (0, 1):
        raise InvalidArgumentError("CartPole action must be 0 or 1")
    return params.F if action == 1 else -params.F


def cartpole_step(
    state: CartPoleState,
    force: float,
    params: CartPoleParams = CartPoleParams(),
) -> tuple[CartPoleState, float, bool]:
    """One explicit-Euler step of the simplified cart-pole dynamics.

    ``done`` is evaluated on the new state; the step that violates a bound earns 0.
    """
    x, x_dot, theta, theta_dot = state.as_tuple()
    m_c, m_p, l, g = params.m_c, params.m_p, params.l, params.g
    total = m_c + m_p
    sin_t = math.sin(theta)
    cos_t = math.cos(theta)
    temp = (force + m_p * l * theta_dot**2 * sin_t) / total
    theta_acc = (g * sin_t - cos_t * temp) / (l * (4.0 / 3.0 - m_p * cos_t**2 / total))
    x_acc = temp - m_p * l * theta_acc * cos_t / total
    nxt = CartPoleState(
        x + params.dt * x_dot,
        x_dot + params.dt * x_acc,
        theta + params.dt * theta_dot,
        theta_dot + params.dt * theta_acc,
    )
    done = abs(nxt.x) > params.x_limit or abs(nxt.theta) > params.theta_limit
    return nxt, (0.0 if done else 1.0), done


@dataclass
class PreferenceOracle:
    """Bradley-Terry judge over a latent linear reward."""

    latent: LinearRewardModel

    def reward(self, prompt, completion) -> float:
        return rm_score(self.latent, prompt, completion)

    def prob_first(self, prompt, y1, y2) -> float:
        return float(sigmoid(self.reward(prompt, y1) - self.reward(prompt, y2)))


def sample_preference(oracle: PreferenceOracle, prompt, y1, y2, seed: Seed) -> PreferenceRecord:
    """Draw chosen/rejected with P(y1 chosen) = sigmoid(r(y1) - r(y2))."""
    y1 = np.asarray(y1, dtype=np.int64)
    y2 = np.asarray(y2, dtype=np.int64)
    if y1.shape == y2.shape and np.array_equal(y1, y2):
        raise InvalidArgumentError("completions must be distinct")
    p = oracle.prob_first(prompt, y1, y2)
    first_wins = seed.rng().random() < p
    chosen, rejected = (y1, y2) if first_wins else (y2, y1)
    return PreferenceRecord(prompt, chosen, rejected)


def separable_preferences(oracle: PreferenceOracle, n: int, seed: Seed, max_len: int = 6,
                          prompt=()) -> list[PreferenceRecord]:
    """n noiseless pairs of random completions (lengths 1..max_len): the higher latent reward wins.

    Identical completions and exact ties are redrawn, so every label is determined.
    """
    if n < 1 or max_len < 1:
        raise InvalidArgumentError("n and max_len must be >= 1")
    V = oracle.latent.features.vocab_size
    rng = seed.rng()
    out = []
    while len(out) < n:
        a = rng.integers(0, V, size=rng.integers(1, max_len + 1))
        b = rng.integers(0, V, size=rng.integers(1, max_len + 1))
        ra, rb = oracle.reward(prompt, a), oracle.reward(prompt, b)
        if ra == rb:
            continue
        out.append(PreferenceRecord(prompt, a, b) if ra > rb else PreferenceRecord(prompt, b, a))
    return out


@dataclass(frozen=True)
class VerifiableTask:
    prompt: tuple
    answer_token: int
    marker_token: int
    vocab_size: int

    def __post_init__(self):
        if not 0 <= self.answer_token < self.vocab_size:
            raise InvalidArgumentError("answer_token must be < vocab size")
        if not 0 <= self.marker_token < self.vocab_size:
            raise InvalidArgumentError("marker_token must be < vocab size")


def extract_answer(task: VerifiableTask, completion) -> int | None:
    """Token right after the last marker, or None when there is none."""
    c = np.asarray(completion, dtype=np.int64).reshape(-1)
    hits = np.flatnonzero(c == task.marker_token)
    if hits.size == 0 or hits[-1] + 1 >= c.size:
        return None
    return int(c[hits[-1] + 1])


def verifiable_reward(task: VerifiableTask, completion) -> float:
    return 1.0 if extract_answer(task, completion) == task.answer_token else 0.0


def write_preferences_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json_dict()) + "\n")


def read_preferences_jsonl(path) -> list[PreferenceRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: {exc.msg}", field="preferences") from exc
        records.append(PreferenceRecord.from_json_dict(data))
    return records
