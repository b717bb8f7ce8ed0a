"""Direct alignment losses and the exactly enumerated KL-regularized optimum.

Sequence log-probabilities sum over completion tokens only; the prompt is context.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import InvalidArgumentError
from .numerics import log_sigmoid, sigmoid
from .policy import BigramPolicy, TokenSequence, completion_distribution, logprob_grad
from .reward_models import PreferenceRecord

VARIANTS = ("dpo", "ipo", "cdpo", "dpo_nll")


@dataclass
class DpoBatch:
    """Preference records with an optional nonnegative weight per record.

    The loss is the weighted mean of per-record terms; unit weights give a plain mean.
    """

    records: list
    beta: float = 0.1
    weights: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if not self.records:
            raise InvalidArgumentError("empty DPO batch")
        if not self.beta > 0:
            raise InvalidArgumentError("beta must be > 0")
        for i, r in enumerate(self.records):
            if r.chosen.shape == r.rejected.shape and np.array_equal(r.chosen, r.rejected):
                raise InvalidArgumentError(f"record {i}: chosen equals rejected")
        w = np.ones(len(self.records)) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.records),) or np.any(w < 0) or w.sum() <= 0:
            raise InvalidArgumentError("weights must be nonnegative, one per record, not all zero")
        self.weights = w / w.sum()


def _seq_logprob(policy: BigramPolicy, table, prompt, completion) -> float:
    rows = policy.context_rows(prompt, completion)
    return float(table[rows, completion].sum())


def pair_logprobs(policy: BigramPolicy, records) -> np.ndarray:
    """(n, 2) array of [log pi(chosen | x), log pi(rejected | x)]."""
    table = policy.row_log_probs()
    return np.array(
        [[_seq_logprob(policy, table, r.prompt, r.chosen), _seq_logprob(policy, table, r.prompt, r.rejected)]
         for r in records]
    ).reshape(len(records), 2)


def cache_reference_logprobs(ref: BigramPolicy, batch: DpoBatch) -> np.ndarray:
    """Precompute reference log-probs once so training never re-scores with the reference."""
    return pair_logprobs(ref, batch.records)


def _pair_grad(policy: BigramPolicy, records, coef_c, coef_r) -> np.ndarray:
    """sum_i coef_c[i] * grad log pi(y_c) + coef_r[i] * grad log pi(y_r)."""
    rows, tgts, ws = [], [], []
    for r, a, b in zip(records, coef_c, coef_r):
        for y, c in ((r.chosen, a), (r.rejected, b)):
            rows.append(policy.context_rows(r.prompt, y))
            tgts.append(y)
            ws.append(np.full(y.size, c))
    return logprob_grad(policy, np.concatenate(rows), np.concatenate(tgts), np.concatenate(ws))


def inner_logits(policy, ref, batch: DpoBatch, ref_cache=None) -> np.ndarray:
    """h_i = beta * [(log pi_c - log ref_c) - (log pi_r - log ref_r)]."""
    lp = pair_logprobs(policy, batch.records)
    ref_lp = cache_reference_logprobs(ref, batch) if ref_cache is None else np.asarray(ref_cache, dtype=float)
    return batch.beta * ((lp[:, 0] - ref_lp[:, 0]) - (lp[:, 1] - ref_lp[:, 1]))


def _logistic_pair_loss(policy, ref, batch, ref_cache, eps: float):
    """(1 - eps) * -log sigma(h) + eps * -log sigma(-h), weighted mean, with gradient."""
    h = inner_logits(policy, ref, batch, ref_cache)
    w = batch.weights
    per = -(1.0 - eps) * log_sigmoid(h) - eps * log_sigmoid(-h)
    loss = float(w @ per)
    # d per / d h = -(1 - eps) * sigma(-h) + eps * sigma(h)
    dh = w * (-(1.0 - eps) * np.asarray(sigmoid(-h)) + eps * np.asarray(sigmoid(h)))
    coef = batch.beta * dh
    return loss, _pair_grad(policy, batch.records, coef, -coef)


def dpo_loss(policy: BigramPolicy, ref: BigramPolicy, batch: DpoBatch, ref_cache=None):
    return _logistic_pair_loss(policy, ref, batch, ref_cache, 0.0)


def cdpo_loss(policy: BigramPolicy, ref: BigramPolicy, batch: DpoBatch, label_noise_eps: float, ref_cache=None):
    if not 0.0 <= label_noise_eps < 0.5:
        raise InvalidArgumentError("label_noise_eps must lie in [0, 0.5)")
    return _logistic_pair_loss(policy, ref, batch, ref_cache, label_noise_eps)


def ipo_loss(policy: BigramPolicy, ref: BigramPolicy, batch: DpoBatch, tau: float, ref_cache=None):
    """Weighted mean of (h - 1 / (2 tau))^2 with h the unscaled log-ratio difference."""
    if not tau > 0:
        raise InvalidArgumentError("tau must be > 0")
    h = inner_logits(policy, ref, batch, ref_cache) / batch.beta
    target = 1.0 / (2.0 * tau)
    w = batch.weights
    loss = float(w @ (h - target) ** 2)
    coef = 2.0 * w * (h - target)
    return loss, _pair_grad(policy, batch.records, coef, -coef)


def dpo_nll_loss(policy: BigramPolicy, ref: BigramPolicy, batch: DpoBatch, alpha: float, ref_cache=None):
    """DPO plus alpha times the length-normalized NLL of the chosen prompt-plus-completion stream."""
    if alpha < 0:
        raise InvalidArgumentError("alpha must be >= 0")
    loss, grad = dpo_loss(policy, ref, batch, ref_cache)
    if alpha == 0:
        return loss, grad
    table = policy.row_log_probs()
    rows, tgts, ws = [], [], []
    nll = 0.0
    for r, w in zip(batch.records, batch.weights):
        stream = np.concatenate([r.prompt, r.chosen])
        srows = policy.stream_rows(stream)
        n = stream.size
        nll -= w * float(table[srows, stream].sum()) / n
        rows.append(srows)
        tgts.append(stream)
        ws.append(np.full(n, -w / n))
    grad = grad + alpha * logprob_grad(policy, np.concatenate(rows), np.concatenate(tgts), np.concatenate(ws))
    return loss + alpha * nll, grad


def dpo_gradient_weights(policy, ref, batch: DpoBatch, ref_cache=None) -> np.ndarray:
    """sigma(r_hat(y_r) - r_hat(y_c)) per record: large when the implicit ordering is wrong."""
    return np.asarray(sigmoid(-inner_logits(policy, ref, batch, ref_cache))).reshape(-1)


def implicit_reward(policy: BigramPolicy, ref: BigramPolicy, prompt, completion, beta: float) -> float:
    seq = np.asarray(completion, dtype=np.int64).reshape(-1)
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    return beta * (
        _seq_logprob(policy, policy.row_log_probs(), prompt, seq)
        - _seq_logprob(ref, ref.row_log_probs(), prompt, seq)
    )


def partition_function(ref: BigramPolicy, reward_fn, beta: float, prompt, max_len: int) -> float:
    seqs, probs = completion_distribution(ref, prompt, max_len)
    r = np.array([reward_fn(s) for s in seqs])
    total = 0.0
    for p, e in zip(probs, np.exp(r / beta)):
        total += p * e
    return total


def optimal_policy(ref: BigramPolicy, reward_fn, beta: float, prompt, max_len: int):
    """pi*(y) = pi_ref(y) exp(r(y) / beta) / Z over every enumerated outcome.

    Returns ``(sequences, probabilities)``; truncated outcomes are listed individually.
    ``reward_fn`` receives a ``TokenSequence``.
    """
    if not beta > 0:
        raise InvalidArgumentError("beta must be > 0")
    seqs, probs = completion_distribution(ref, prompt, max_len)
    r = np.array([reward_fn(s) for s in seqs], dtype=float)
    # log-space normalization avoids overflow when r / beta is large
    logits = np.log(np.maximum(probs, np.finfo(float).tiny)) + r / beta
    logits[probs == 0] = -np.inf
    logits -= logits.max()
    weights = np.exp(logits)
    return seqs, weights / weights.sum()


def rlhf_objective(probs, ref_probs, rewards, beta: float) -> float:
    """E_p[r] - beta * KL(p || ref) for explicit distributions."""
    p = np.asarray(probs, dtype=float)
    q = np.asarray(ref_probs, dtype=float)
    support = p > 0
    kl = float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))
    return float(p @ np.asarray(rewards, dtype=float)) - beta * kl


def exhaustive_soft_preferences(seqs, rewards) -> tuple[list[PreferenceRecord], np.ndarray]:
    """Every ordered pair once, labelled softly by the Bradley-Terry probability.

    Each unordered pair {a, b} yields two records, (a over b) with weight sigma(r_a - r_b)
    and (b over a) with the complement.
    """
    records, weights = [], []
    n = len(seqs)
    for i in range(n):
        for j in range(i + 1, n):
            p = float(sigmoid(rewards[i] - rewards[j]))
            a, b = seqs[i], seqs[j]
            records.append(PreferenceRecord(a.prompt, a.completion, b.completion))
            weights.append(p)
            records.append(PreferenceRecord(a.prompt, b.completion, a.completion))
            weights.append(1.0 - p)
    return records, np.array(weights)


def variant_loss(variant: str, policy, ref, batch: DpoBatch, ref_cache=None, tau: float = 0.1,
                 label_noise_eps: float = 0.1, alpha: float = 1.0):
    if variant == "dpo":
        return dpo_loss(policy, ref, batch, ref_cache)
    if variant == "ipo":
        return ipo_loss(policy, ref, batch, tau, ref_cache)
    if variant == "cdpo":
        return cdpo_loss(policy, ref, batch, label_noise_eps, ref_cache)
    if variant == "dpo_nll":
        return dpo_nll_loss(policy, ref, batch, alpha, ref_cache)
    raise InvalidArgumentError(f"unknown DPO variant {variant!r}")


def train_dpo(policy: BigramPolicy, ref: BigramPolicy, batch: DpoBatch, lr: float = 5e-3, steps: int = 100,
              variant: str = "dpo", **variant_kwargs) -> list[dict]:
    """Full-batch gradient descent; updates ``policy`` in place and returns per-step metrics.

    Metrics per step (measured before the update): dpo_loss, margin, logp_chosen,
    logp_rejected, implicit_reward_accuracy.
    """
    ref_cache = cache_reference_logprobs(ref, batch)
    trace = []
    w = batch.weights
    for step in range(steps):
        loss, grad = variant_loss(variant, policy, ref, batch, ref_cache, **variant_kwargs)
        lp = pair_logprobs(policy, batch.records)
        h = batch.beta * ((lp[:, 0] - ref_cache[:, 0]) - (lp[:, 1] - ref_cache[:, 1]))
        trace.append({
            "step": step,
            "dpo_loss": loss,
            "margin": float(w @ (lp[:, 0] - lp[:, 1])),
            "logp_chosen": float(w @ lp[:, 0]),
            "logp_rejected": float(w @ lp[:, 1]),
            "implicit_reward_accuracy": float(w @ (h > 0)),
        })
        policy.update(-lr * grad)
    return trace


def sequence_table(seqs: list[TokenSequence]) -> dict:
    """Map each outcome key to its position, for aligning two enumerations."""
    return {s.key() + (s.truncated,): i for i, s in enumerate(seqs)}


def variant_kwargs(variant: str, tau: float = 0.1, label_noise_eps: float = 0.1, alpha: float = 1.0) -> dict:
    """Keyword arguments that ``variant_loss`` needs for ``variant``."""
    table = {"dpo": {}, "ipo": {"tau": tau}, "cdpo": {"label_noise_eps": label_noise_eps},
             "dpo_nll": {"alpha": alpha}}
    if variant not in table:
        raise InvalidArgumentError(f"unknown DPO variant {variant!r}")
    return table[variant]
