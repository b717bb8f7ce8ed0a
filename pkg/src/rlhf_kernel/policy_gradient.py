"""Policy-gradient surrogate losses over per-token log-probabilities.

Two layers are provided. The ``*_from_logprobs`` functions take a ``(B, L)`` matrix of
new log-probabilities and return ``(loss, d loss / d new_logprobs, diagnostics)``. The
policy-level wrappers recompute those log-probabilities from a ``BigramPolicy`` and
chain the token gradient through to the flat parameter vector.

Frozen factors: old log-probs and reference log-probs are constants everywhere; the
CISPO importance weight is constant; advantages are constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import InvalidArgumentError, check_mask, check_same_shape
from .numerics import kl_estimator_grad, kl_estimator_terms
from .policy import BigramPolicy, batch_logprob_grad, batch_logprobs, pad_batch

AGGREGATIONS = ("per_sequence", "per_token", "fixed_length")


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.2

    def __post_init__(self):
        if not (self.eps_low > 0 and self.eps_high > 0):
            raise InvalidArgumentError("clip bounds must be > 0")
        if self.eps_low >= 1:
            raise InvalidArgumentError("eps_low must be < 1")

    @property
    def low(self) -> float:
        return 1.0 - self.eps_low

    @property
    def high(self) -> float:
        return 1.0 + self.eps_high


@dataclass
class TrajectoryBatch:
    """Rollouts plus everything frozen at rollout time.

    ``advantages`` may be per token ``(B, L)``, per sequence ``(B,)`` or ``(B, 1)``.
    """

    prompts: list
    completions: list
    old_logprobs: np.ndarray
    advantages: np.ndarray
    ref_logprobs: np.ndarray | None = None
    group_size: int = 1

    def __post_init__(self):
        self.completions = [np.asarray(c, dtype=np.int64).reshape(-1) for c in self.completions]
        self.prompts = [np.asarray(p, dtype=np.int64).reshape(-1) for p in self.prompts]
        if len(self.prompts) != len(self.completions):
            raise InvalidArgumentError("prompts and completions differ in length")
        _, self.completion_mask = pad_batch(self.completions, 0)
        shape = self.completion_mask.shape
        self.old_logprobs = np.asarray(self.old_logprobs, dtype=float)
        check_same_shape(self.old_logprobs, self.completion_mask, names=("old_logprobs", "completion_mask"))
        self.advantages = broadcast_advantages(self.advantages, shape)
        if self.ref_logprobs is not None:
            self.ref_logprobs = np.asarray(self.ref_logprobs, dtype=float)
            check_same_shape(self.ref_logprobs, self.completion_mask, names=("ref_logprobs", "completion_mask"))
        if self.group_size < 1 or len(self.completions) % self.group_size:
            raise InvalidArgumentError("group_size must divide the batch")

    @classmethod
    def from_policies(cls, old: BigramPolicy, ref: BigramPolicy | None, prompts, completions,
                      advantages, group_size: int = 1) -> "TrajectoryBatch":
        old_lp = batch_logprobs(old, prompts, completions)
        ref_lp = None if ref is None else batch_logprobs(ref, prompts, completions)
        return cls(list(prompts), list(completions), old_lp, advantages, ref_lp, group_size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.completion_mask.shape

    @property
    def lengths(self) -> np.ndarray:
        return self.completion_mask.sum(axis=1)

    def new_logprobs(self, policy: BigramPolicy) -> np.ndarray:
        return batch_logprobs(policy, self.prompts, self.completions, self.shape[1])

    def sequence_advantages(self) -> np.ndarray:
        """First-token advantage of each row, used as the sequence advantage."""
        return self.advantages[:, 0] if self.shape[1] else np.zeros(self.shape[0])


def broadcast_advantages(adv, shape) -> np.ndarray:
    a = np.asarray(adv, dtype=float)
    B, L = shape
    if a.shape == (B,):
        a = a[:, None]
    if a.shape == (B, 1):
        return np.repeat(a, L, axis=1)
    if a.shape != (B, L):
        raise InvalidArgumentError(f"advantages of shape {a.shape} do not fit batch {shape}")
    return a.copy()


def policy_ratio(new_logprobs, old_logprobs) -> np.ndarray:
    check_same_shape(new_logprobs, old_logprobs, names=("new_logprobs", "old_logprobs"))
    return np.exp(np.asarray(new_logprobs, float) - np.asarray(old_logprobs, float))


def aggregate_weights(mask, strategy: str = "per_sequence", L_max: int | None = None) -> np.ndarray:
    """Weights W with aggregate_loss = sum(W * per_token_loss).

    Rows with an empty mask get weight 0 under per_sequence.
    """
    m = np.asarray(mask, dtype=float)
    if m.ndim != 2:
        raise InvalidArgumentError("mask must be (B, L)")
    B = m.shape[0]
    if B == 0:
        raise InvalidArgumentError("empty batch")
    if strategy == "per_sequence":
        n = m.sum(axis=1, keepdims=True)
        return np.divide(m, B * n, out=np.zeros_like(m), where=n > 0)
    if strategy == "per_token":
        total = m.sum()
        if total == 0:
            raise InvalidArgumentError("mask selects no tokens")
        return m / total
    if strategy == "fixed_length":
        if L_max is None:
            raise InvalidArgumentError("fixed_length needs L_max")
        if L_max < m.sum(axis=1).max():
            raise InvalidArgumentError("L_max is shorter than a row of the mask")
        return m / (B * L_max)
    raise InvalidArgumentError(f"unknown aggregation {strategy!r}")


def aggregate_loss(per_token_loss, mask, strategy: str = "per_sequence", L_max: int | None = None) -> float:
    loss = np.asarray(per_token_loss, dtype=float)
    check_same_shape(loss, mask, names=("per_token_loss", "mask"))
    w = aggregate_weights(mask, strategy, L_max)
    # masked-out entries may hold garbage; never multiply them in
    terms = np.where(w != 0, w * loss, 0.0).ravel()
    total = 0.0
    for t in terms:
        total += t
    return float(total)


def sequence_contributions(per_token_loss, mask, strategy: str, L_max: int | None = None) -> np.ndarray:
    """Per-row term inside the batch mean (e.g. 1.4 and 1.9 for fixed_length, L_max = 10)."""
    m = np.asarray(mask, dtype=float)
    loss = np.where(m > 0, np.asarray(per_token_loss, dtype=float), 0.0)
    sums = loss.sum(axis=1)
    if strategy == "per_sequence":
        return sums / m.sum(axis=1)
    if strategy == "fixed_length":
        return sums / L_max
    if strategy == "per_token":
        return sums / m.sum()
    raise InvalidArgumentError(f"unknown aggregation {strategy!r}")


def _ppo_terms(new, old, adv, clip: ClipConfig):
    ratio = np.exp(new - old)
    l1 = -adv * ratio
    l2 = -adv * np.clip(ratio, clip.low, clip.high)
    use_clipped = l2 > l1
    per_tok = np.where(use_clipped, l2, l1)
    # the clipped branch only wins strictly when the clamp is active, where it is flat
    d_tok = np.where(use_clipped, 0.0, -adv * ratio)
    return per_tok, d_tok, use_clipped


def _check_tokens(new, old, adv, mask):
    new = np.asarray(new, dtype=float)
    old = np.asarray(old, dtype=float)
    mask = check_mask(mask, new.shape)
    adv = broadcast_advantages(adv, new.shape)
    check_same_shape(new, old, names=("new_logprobs", "old_logprobs"))
    return new, old, adv, mask


def diagnostics(new_logprobs, old_logprobs, advantages, mask, clip: ClipConfig = ClipConfig()) -> dict:
    new, old, adv, mask = _check_tokens(new_logprobs, old_logprobs, advantages, mask)
    n = mask.sum()
    if n == 0:
        raise InvalidArgumentError("mask selects no tokens")
    _, _, use_clipped = _ppo_terms(new, old, adv, clip)
    return {
        "clip_fraction": float((use_clipped * mask).sum() / n),
        "approx_kl": float((0.5 * (new - old) ** 2 * mask).sum() / n),
    }


def reinforce_from_logprobs(new_logprobs, advantages, mask, aggregation: str = "per_token", L_max=None):
    """-aggregate(A * log pi)."""
    new = np.asarray(new_logprobs, dtype=float)
    mask = check_mask(mask, new.shape)
    adv = broadcast_advantages(advantages, new.shape)
    w = aggregate_weights(mask, aggregation, L_max)
    loss = aggregate_loss(-adv * new, mask, aggregation, L_max)
    return loss, -w * adv, {}


def ppo_from_logprobs(new_logprobs, old_logprobs, advantages, mask, clip: ClipConfig = ClipConfig(),
                      aggregation: str = "per_sequence", L_max=None):
    new, old, adv, mask = _check_tokens(new_logprobs, old_logprobs, advantages, mask)
    per_tok, d_tok, _ = _ppo_terms(new, old, adv, clip)
    w = aggregate_weights(mask, aggregation, L_max)
    loss = aggregate_loss(per_tok, mask, aggregation, L_max)
    return loss, w * d_tok, diagnostics(new, old, adv, mask, clip)


def grpo_from_logprobs(new_logprobs, old_logprobs, ref_logprobs, advantages, mask,
                       clip: ClipConfig = ClipConfig(), beta: float = 0.0, kl_estimator: str = "k3",
                       aggregation: str = "per_sequence", L_max=None):
    """PPO clipped term plus beta * per-token KL to the reference, aggregated together."""
    if beta < 0:
        raise InvalidArgumentError("beta must be >= 0")
    new, old, adv, mask = _check_tokens(new_logprobs, old_logprobs, advantages, mask)
    per_tok, d_tok, _ = _ppo_terms(new, old, adv, clip)
    if beta > 0:
        if ref_logprobs is None:
            raise InvalidArgumentError("beta > 0 needs reference log-probs")
        lr = new - np.asarray(ref_logprobs, dtype=float)
        per_tok = per_tok + beta * kl_estimator_terms(lr, kl_estimator)
        d_tok = d_tok + beta * kl_estimator_grad(lr, kl_estimator)
    w = aggregate_weights(mask, aggregation, L_max)
    loss = aggregate_loss(per_tok, mask, aggregation, L_max)
    return loss, w * d_tok, diagnostics(new, old, adv, mask, clip)


def gspo_sequence_ratio(new_logprobs, old_logprobs, mask) -> np.ndarray:
    """exp of the masked mean per-token log-ratio of each row."""
    new = np.asarray(new_logprobs, dtype=float)
    mask = check_mask(mask, new.shape)
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise InvalidArgumentError("GSPO needs nonempty completions")
    diff = np.where(mask > 0, new - np.asarray(old_logprobs, dtype=float), 0.0)
    return np.exp(diff.sum(axis=1) / lengths)


def gspo_from_logprobs(new_logprobs, old_logprobs, seq_advantages, mask, clip: ClipConfig = ClipConfig()):
    new, old, _, mask = _check_tokens(new_logprobs, old_logprobs, np.zeros(len(new_logprobs)), mask)
    A = np.asarray(seq_advantages, dtype=float).reshape(-1)
    if A.size != new.shape[0]:
        raise InvalidArgumentError("need one advantage per sequence")
    rho = gspo_sequence_ratio(new, old, mask)
    l1 = -A * rho
    l2 = -A * np.clip(rho, clip.low, clip.high)
    use_clipped = l2 > l1
    per_seq = np.where(use_clipped, l2, l1)
    G = new.shape[0]
    loss = float(per_seq.sum() / G)
    lengths = mask.sum(axis=1)
    # d rho_i / d new_{i,t} = rho_i / |a_i| on every completion token
    d_seq = np.where(use_clipped, 0.0, -A * rho) / G
    d_new = (d_seq / lengths)[:, None] * mask
    diag = {
        "clip_fraction": float(use_clipped.mean()),
        "approx_kl": float((0.5 * (new - old) ** 2 * mask).sum() / mask.sum()),
        "mean_ratio": float(rho.mean()),
    }
    return loss, d_new, diag


def cispo_from_logprobs(new_logprobs, old_logprobs, advantages, mask, clip: ClipConfig = ClipConfig(),
                        frozen_weights=None):
    """-(1 / sum|a_i|) * sum sg(clip(rho)) * A * log pi.

    ``frozen_weights`` replaces the computed clipped ratio, so a finite-difference check
    can differentiate the loss with the weight held constant.
    """
    new, old, adv, mask = _check_tokens(new_logprobs, old_logprobs, advantages, mask)
    if frozen_weights is None:
        weight = np.clip(np.exp(new - old), clip.low, clip.high)
    else:
        weight = np.asarray(frozen_weights, dtype=float)
        check_same_shape(weight, new, names=("frozen_weights", "new_logprobs"))
    w = aggregate_weights(mask, "per_token")
    loss = aggregate_loss(-weight * adv * new, mask, "per_token")
    ratio = np.exp(new - old)
    n = mask.sum()
    diag = {
        "clip_fraction": float((((ratio < clip.low) | (ratio > clip.high)) * mask).sum() / n),
        "approx_kl": float((0.5 * (new - old) ** 2 * mask).sum() / n),
    }
    return loss, -w * weight * adv, diag


def cispo_weights(new_logprobs, old_logprobs, clip: ClipConfig = ClipConfig()) -> np.ndarray:
    return np.clip(policy_ratio(new_logprobs, old_logprobs), clip.low, clip.high)


def apply_kl_penalty(quantity, per_token_kl, beta: float, placement: str = "reward_level", mask=None):
    """Reward-level: rewards - beta * kl per token. Loss-level: loss + beta * masked-mean(kl)."""
    if beta < 0:
        raise InvalidArgumentError("beta must be >= 0")
    kl = np.asarray(per_token_kl, dtype=float)
    if placement == "reward_level":
        r = np.asarray(quantity, dtype=float)
        check_same_shape(r, kl, names=("rewards", "per_token_kl"))
        return r - beta * kl
    if placement == "loss_level":
        m = np.ones_like(kl) if mask is None else check_mask(mask, kl.shape)
        if m.sum() == 0:
            raise InvalidArgumentError("mask selects no tokens")
        return float(quantity) + beta * float((kl * m).sum() / m.sum())
    raise InvalidArgumentError(f"unknown placement {placement!r}")


# policy-level wrappers ---------------------------------------------------------


def _chain(policy: BigramPolicy, batch: TrajectoryBatch, loss, d_new, diag):
    grad = batch_logprob_grad(policy, batch.prompts, batch.completions, d_new)
    return loss, grad, diag


def reinforce_loss(policy: BigramPolicy, batch: TrajectoryBatch, aggregation: str = "per_token", L_max=None):
    new = batch.new_logprobs(policy)
    loss, d_new, _ = reinforce_from_logprobs(new, batch.advantages, batch.completion_mask, aggregation, L_max)
    return _chain(policy, batch, loss, d_new, {})[:2]


def ppo_loss(policy: BigramPolicy, batch: TrajectoryBatch, clip: ClipConfig = ClipConfig(),
             aggregation: str = "per_sequence", L_max=None):
    new = batch.new_logprobs(policy)
    out = ppo_from_logprobs(new, batch.old_logprobs, batch.advantages, batch.completion_mask, clip,
                            aggregation, L_max)
    return _chain(policy, batch, *out)


def grpo_loss(policy: BigramPolicy, batch: TrajectoryBatch, clip: ClipConfig = ClipConfig(), beta: float = 0.0,
              kl_estimator: str = "k3", aggregation: str = "per_sequence", L_max=None):
    new = batch.new_logprobs(policy)
    out = grpo_from_logprobs(new, batch.old_logprobs, batch.ref_logprobs, batch.advantages,
                             batch.completion_mask, clip, beta, kl_estimator, aggregation, L_max)
    return _chain(policy, batch, *out)


def gspo_loss(policy: BigramPolicy, batch: TrajectoryBatch, clip: ClipConfig = ClipConfig()):
    new = batch.new_logprobs(policy)
    out = gspo_from_logprobs(new, batch.old_logprobs, batch.sequence_advantages(), batch.completion_mask, clip)
    return _chain(policy, batch, *out)


def cispo_loss(policy: BigramPolicy, batch: TrajectoryBatch, clip: ClipConfig = ClipConfig(), frozen_weights=None):
    new = batch.new_logprobs(policy)
    out = cispo_from_logprobs(new, batch.old_logprobs, batch.advantages, batch.completion_mask, clip,
                              frozen_weights)
    return _chain(policy, batch, *out)
