"""Returns, baselines and advantage estimators over (B, L) reward grids."""

from __future__ import annotations

import numpy as np

from ._validation import InvalidArgumentError, check_finite, check_same_shape, check_unit_interval
from .numerics import STD_EPS


def _grid(rewards, done=None, mask=None):
    r = check_finite(rewards, "rewards")
    if r.ndim == 1:
        r = r[None, :]
    d = np.zeros_like(r) if done is None else np.asarray(done, dtype=float).reshape(r.shape)
    m = np.ones_like(r) if mask is None else np.asarray(mask, dtype=float).reshape(r.shape)
    return r, d, m


def mc_returns(rewards, done=None, completion_mask=None, gamma: float = 1.0) -> np.ndarray:
    """G_t = r_t + gamma * (1 - done_t) * G_{t+1}, right to left, zeroed off the mask."""
    check_unit_interval(gamma, "gamma")
    if done is not None:
        check_same_shape(rewards, done, names=("rewards", "done"))
    r, d, m = _grid(rewards, done, completion_mask)
    out = np.zeros_like(r)
    running = np.zeros(r.shape[0])
    for t in range(r.shape[1] - 1, -1, -1):
        running = r[:, t] + gamma * (1.0 - d[:, t]) * running
        out[:, t] = running
    return (out * m).reshape(np.shape(rewards))


def rloo_advantage(rewards) -> np.ndarray:
    """r_k minus the mean of the other K - 1 rewards."""
    r = check_finite(rewards, "rewards").reshape(-1)
    K = r.size
    if K < 2:
        raise InvalidArgumentError("RLOO needs K >= 2")
    return r - (r.sum() - r) / (K - 1)


def rloo_advantage_alt(rewards) -> np.ndarray:
    """Scaled-mean form: K / (K - 1) * (r_k - mean(r))."""
    r = check_finite(rewards, "rewards").reshape(-1)
    K = r.size
    if K < 2:
        raise InvalidArgumentError("RLOO needs K >= 2")
    return K / (K - 1) * (r - r.mean())


def grpo_advantage(rewards, mode: str = "grpo", eps: float = STD_EPS, ddof: int = 1) -> np.ndarray:
    """Group-normalized advantages; ``dr_grpo`` drops the std division."""
    r = check_finite(rewards, "rewards").reshape(-1)
    if r.size < 2:
        raise InvalidArgumentError("group must have K >= 2")
    centered = r - r.mean()
    if mode == "dr_grpo":
        return centered
    if mode == "grpo":
        return centered / (r.std(ddof=ddof) + eps)
    raise InvalidArgumentError(f"unknown mode {mode!r}")


def group_advantages(rewards, group_size: int, estimator: str, eps: float = STD_EPS) -> np.ndarray:
    """Apply a group estimator to consecutive blocks of ``group_size`` sequence rewards."""
    r = np.asarray(rewards, dtype=float).reshape(-1)
    if group_size < 2 or r.size % group_size:
        raise InvalidArgumentError("batch must split into groups of size >= 2")
    blocks = r.reshape(-1, group_size)
    if estimator == "rloo":
        out = [rloo_advantage(b) for b in blocks]
    elif estimator in ("grpo", "dr_grpo"):
        out = [grpo_advantage(b, estimator, eps) for b in blocks]
    elif estimator == "mean_baseline":
        out = [b - b.mean() for b in blocks]
    else:
        raise InvalidArgumentError(f"unknown estimator {estimator!r}")
    return np.concatenate(out)


def grpo_process_advantage(step_rewards, eps: float = STD_EPS) -> list[np.ndarray]:
    """Process-supervision variant: normalize every step reward with group-wide statistics,
    then give each step the sum of normalized rewards from that step onward.

    ``step_rewards`` holds one array of per-step rewards per completion in the group.
    """
    steps = [check_finite(s, "step_rewards").reshape(-1) for s in step_rewards]
    pooled = np.concatenate(steps) if steps else np.zeros(0)
    if pooled.size < 2:
        raise InvalidArgumentError("need at least 2 step rewards in the group")
    mu, sd = pooled.mean(), pooled.std(ddof=1)
    out = []
    for s in steps:
        z = (s - mu) / (sd + eps)
        out.append(np.cumsum(z[::-1])[::-1])
    return out


def td_residual(rewards, values, done=None, gamma: float = 1.0) -> np.ndarray:
    """delta_t = r_t + gamma * (1 - done_t) * V_{t+1} - V_t, with V past the row end taken as 0."""
    check_same_shape(rewards, values, names=("rewards", "values"))
    if done is not None:
        check_same_shape(rewards, done, names=("rewards", "done"))
    check_unit_interval(gamma, "gamma")
    r, d, _ = _grid(rewards, done)
    v = check_finite(values, "values").reshape(r.shape)
    nxt = np.zeros_like(v)
    nxt[:, :-1] = v[:, 1:]
    return (r + gamma * (1.0 - d) * nxt - v).reshape(np.shape(rewards))


def gae(rewards, values, done=None, gamma: float = 1.0, lam: float = 0.95):
    """Backward GAE recursion with terminal resets; returns (advantages, value_targets)."""
    check_same_shape(rewards, values, names=("rewards", "values"))
    if done is not None:
        check_same_shape(rewards, done, names=("rewards", "done"))
    check_unit_interval(gamma, "gamma")
    check_unit_interval(lam, "lam")
    r, d, _ = _grid(rewards, done)
    v = check_finite(values, "values").reshape(r.shape)
    B, L = r.shape
    adv = np.zeros_like(r)
    next_v = np.zeros(B)
    acc = np.zeros(B)
    for t in range(L - 1, -1, -1):
        not_done = 1.0 - d[:, t]
        delta = r[:, t] + gamma * not_done * next_v - v[:, t]
        acc = delta + gamma * lam * not_done * acc
        adv[:, t] = acc
        next_v = v[:, t]
    shape = np.shape(rewards)
    return adv.reshape(shape), (adv + v).reshape(shape)


def value_loss(values, old_values, targets, completion_mask, eps_v: float | None = None):
    """Clipped value regression; returns (loss, grad wrt values, advantages).

    ``eps_v=None`` disables clipping. Rows with an empty mask contribute 0 to the batch mean.
    """
    check_same_shape(values, old_values, targets, completion_mask,
                     names=("values", "old_values", "targets", "completion_mask"))
    v = check_finite(values, "values")
    y = check_finite(targets, "targets")
    m = np.asarray(completion_mask, dtype=float)
    if v.ndim == 1:
        v, y, m = v[None], y[None], m[None]
        vo = np.asarray(old_values, dtype=float)[None]
    else:
        vo = np.asarray(old_values, dtype=float)
    unclipped = 0.5 * (v - y) ** 2
    if eps_v is None:
        per_tok = unclipped
        d_tok = v - y
    else:
        v_clip = np.clip(v, vo - eps_v, vo + eps_v)
        clipped = 0.5 * (v_clip - y) ** 2
        use_clip = clipped > unclipped
        per_tok = np.where(use_clip, clipped, unclipped)
        # clipped branch is constant in v wherever the clamp is active
        inside = (v >= vo - eps_v) & (v <= vo + eps_v)
        d_tok = np.where(use_clip, np.where(inside, v_clip - y, 0.0), v - y)
    denom = np.maximum(m.sum(axis=1), 1.0)
    B = v.shape[0]
    loss = float(((per_tok * m).sum(axis=1) / denom).mean())
    grad = d_tok * m / denom[:, None] / B
    adv = y - v
    shape = np.shape(values)
    return loss, grad.reshape(shape), adv.reshape(shape)
