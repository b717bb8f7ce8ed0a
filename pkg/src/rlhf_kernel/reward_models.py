"""Linear reward models and the reward-model losses.

Each loss returns ``(loss, grad)`` where ``grad`` is the analytic gradient with
respect to the model's flat weight vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.stats import kendalltau

from ._validation import InvalidArgumentError, ValidationError
from .numerics import log_sigmoid, log_softmax, sigmoid, softmax

HEAD_KINDS = ("sequence", "outcome", "process")
IGNORE = -100
# PRM class order: incorrect (-1), neutral (0), correct (+1)
PRM_CLASSES = (-1, 0, 1)


@dataclass(frozen=True)
class FeatureMap:
    """Token counts, optional bigram counts, optional repeat count, length and bias.

    Features are computed on the completion only; the prompt's last token is used as
    the left context of the first bigram.
    """

    vocab_size: int
    bigrams: bool = False
    repeats: bool = False
    length: bool = True
    bias: bool = True

    @property
    def dim(self) -> int:
        V = self.vocab_size
        return V + (V * V if self.bigrams else 0) + int(self.repeats) + int(self.length) + int(self.bias)

    def __call__(self, prompt, completion) -> np.ndarray:
        V = self.vocab_size
        completion = np.asarray(completion, dtype=np.int64).reshape(-1)
        prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
        parts = [np.bincount(completion, minlength=V).astype(float)[:V]]
        if self.bigrams:
            big = np.zeros((V, V))
            stream = np.concatenate([prompt[-1:], completion])
            if prompt.size:
                prev, cur = stream[:-1], stream[1:]
            else:
                prev, cur = completion[:-1], completion[1:]
            np.add.at(big, (prev, cur), 1.0)
            parts.append(big.ravel())
        if self.repeats:
            parts.append(np.array([float(np.sum(completion[1:] == completion[:-1]))]))
        if self.length:
            parts.append(np.array([float(completion.size)]))
        if self.bias:
            parts.append(np.array([1.0]))
        return np.concatenate(parts)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "bigrams": self.bigrams,
            "repeats": self.repeats,
            "length": self.length,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureMap":
        return cls(**data)


@dataclass
class LinearRewardModel:
    features: FeatureMap
    weights: np.ndarray = None
    head_kind: str = "sequence"

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise InvalidArgumentError(f"head_kind must be one of {HEAD_KINDS}")
        n = self.n_weights
        if self.weights is None:
            self.weights = np.zeros(n)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.weights.size != n:
            raise InvalidArgumentError(f"expected {n} weights, got {self.weights.size}")
        if not np.all(np.isfinite(self.weights)):
            raise InvalidArgumentError("weights must be finite")

    @property
    def n_weights(self) -> int:
        k = len(PRM_CLASSES) if self.head_kind == "process" else 1
        return k * self.features.dim

    def with_weights(self, w) -> "LinearRewardModel":
        return LinearRewardModel(self.features, np.array(w, dtype=float), self.head_kind)

    def to_dict(self) -> dict:
        return {
            "head_kind": self.head_kind,
            "feature_spec": self.features.to_dict(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LinearRewardModel":
        return cls(FeatureMap.from_dict(data["feature_spec"]), data["weights"], data["head_kind"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "LinearRewardModel":
        return cls.from_dict(json.loads(text))


@dataclass
class PreferenceRecord:
    prompt: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray
    rating_chosen: int | None = None
    rating_rejected: int | None = None
    margin: float | None = None

    def __post_init__(self):
        self.prompt = np.asarray(self.prompt, dtype=np.int64).reshape(-1)
        self.chosen = np.asarray(self.chosen, dtype=np.int64).reshape(-1)
        self.rejected = np.asarray(self.rejected, dtype=np.int64).reshape(-1)

    def get_margin(self) -> float:
        """Explicit margin, else rating difference, else 0 (ties give 0 as well)."""
        if self.margin is not None:
            return float(self.margin)
        if self.rating_chosen is not None and self.rating_rejected is not None:
            return float(self.rating_chosen - self.rating_rejected)
        return 0.0

    def to_json_dict(self) -> dict:
        return {
            "prompt": self.prompt.tolist(),
            "chosen": self.chosen.tolist(),
            "rejected": self.rejected.tolist(),
            "rating_chosen": self.rating_chosen,
            "rating_rejected": self.rating_rejected,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "PreferenceRecord":
        for key in ("prompt", "chosen", "rejected"):
            if key not in data:
                raise ValidationError(f"preference record missing {key!r}", field=key)
        return cls(
            data["prompt"],
            data["chosen"],
            data["rejected"],
            data.get("rating_chosen"),
            data.get("rating_rejected"),
        )


@dataclass
class RankedGroup:
    prompt: np.ndarray
    completions: list
    ranking: Sequence[int] = field(default_factory=list)

    def __post_init__(self):
        K = len(self.completions)
        if sorted(self.ranking) != list(range(K)):
            raise InvalidArgumentError("ranking must be a permutation of range(K)")


def _require_head(rm: LinearRewardModel, kind: str) -> None:
    if rm.head_kind != kind:
        raise InvalidArgumentError(f"expected a {kind!r} head, got {rm.head_kind!r}")


def rm_score(rm: LinearRewardModel, prompt, completion) -> float:
    """Scalar reward logit r(y | x) for a sequence head."""
    _require_head(rm, "sequence")
    return float(rm.weights @ rm.features(prompt, completion))


def _pair_features(rm: LinearRewardModel, records) -> np.ndarray:
    """Feature difference phi(chosen) - phi(rejected) per record."""
    return np.array(
        [rm.features(r.prompt, r.chosen) - rm.features(r.prompt, r.rejected) for r in records]
    )


def _pairwise_logistic(rm, diffs, margins, weights, form="sigmoid"):
    """sum_i weights_i * -log sigmoid(w . d_i - m_i), with gradient."""
    z = diffs @ rm.weights - margins
    if form == "sigmoid":
        per = -log_sigmoid(z)
    elif form == "logexp":
        # log(1 + exp(r_r - r_c)); logaddexp is the overflow-safe evaluation
        per = np.logaddexp(0.0, -z)
    else:
        raise InvalidArgumentError(f"unknown form {form!r}")
    loss = float(weights @ per)
    # d/dz -log sigmoid(z) = -sigmoid(-z)
    coef = -weights * np.asarray(sigmoid(-z))
    return loss, coef @ diffs


def bt_loss(rm: LinearRewardModel, records, form: str = "sigmoid"):
    """Mean Bradley-Terry negative log-likelihood over a batch of preference records."""
    _require_head(rm, "sequence")
    if len(records) == 0:
        raise InvalidArgumentError("empty batch")
    d = _pair_features(rm, records)
    n = len(records)
    return _pairwise_logistic(rm, d, np.zeros(n), np.full(n, 1.0 / n), form)


def bt_margin_loss(rm: LinearRewardModel, records, margins=None):
    """Mean of -log sigmoid(r_c - r_r - m); margins default to rating differences."""
    _require_head(rm, "sequence")
    if len(records) == 0:
        raise InvalidArgumentError("empty batch")
    m = np.array([r.get_margin() for r in records]) if margins is None else np.asarray(margins, float)
    if not np.all(np.isfinite(m)):
        raise InvalidArgumentError("margins must be finite")
    d = _pair_features(rm, records)
    n = len(records)
    return _pairwise_logistic(rm, d, m, np.full(n, 1.0 / n))


def bt_weighted_loss(rm: LinearRewardModel, groups, normalization: str = "per_prompt"):
    """Pairs weighted by 1 / C(K, 2) within each prompt group.

    ``groups`` is a list of ``(K, records)`` pairs, one per prompt. With
    ``normalization="per_prompt"`` the per-prompt sums are averaged over prompts.
    ``"global"`` is a plain average over all pairs regardless of group.
    """
    _require_head(rm, "sequence")
    diffs, weights = [], []
    for K, records in groups:
        n_pairs = K * (K - 1) // 2
        if K < 2 or len(records) != n_pairs:
            raise ValidationError(f"prompt group with K={K} needs {n_pairs} pairs, got {len(records)}")
        seen = set()
        for r in records:
            key = frozenset((tuple(r.chosen.tolist()), tuple(r.rejected.tolist())))
            seen.add(key)
        if len(seen) != n_pairs:
            raise ValidationError("prompt group has duplicate pairs")
        diffs.append(_pair_features(rm, records))
        weights.append(np.full(n_pairs, 1.0 / n_pairs))
    if not diffs:
        raise InvalidArgumentError("empty batch")
    d = np.concatenate(diffs)
    w = np.concatenate(weights)
    if normalization == "per_prompt":
        w = w / len(groups)
    elif normalization == "global":
        w = np.full(w.size, 1.0 / w.size)
    else:
        raise InvalidArgumentError(f"unknown normalization {normalization!r}")
    return _pairwise_logistic(rm, d, np.zeros(d.shape[0]), w)


def plackett_luce_loss(rm: LinearRewardModel, group: RankedGroup):
    """-log of the Plackett-Luce likelihood of the ranking."""
    _require_head(rm, "sequence")
    K = len(group.completions)
    if K < 2:
        raise InvalidArgumentError("K must be >= 2")
    phi = np.array([rm.features(group.prompt, group.completions[j]) for j in group.ranking])
    r = phi @ rm.weights
    loss = 0.0
    grad = np.zeros_like(rm.weights)
    for k in range(K - 1):  # the final stage contributes log 1 = 0
        tail = r[k:]
        lse = np.logaddexp.reduce(tail)
        loss += lse - r[k]
        p = np.exp(tail - lse)
        grad += p @ phi[k:] - phi[k]
    return float(loss), grad


def prefix_features(rm: LinearRewardModel, tokens) -> np.ndarray:
    """Feature vector of every prefix tokens[:t + 1] of a flat token stream, shape (T, D)."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    return np.array([rm.features([], tokens[: t + 1]) for t in range(tokens.size)]).reshape(
        tokens.size, rm.features.dim
    )


def token_scores(rm: LinearRewardModel, tokens) -> np.ndarray:
    """Per-position correctness probabilities (outcome head) or class probabilities (process head)."""
    phi = prefix_features(rm, tokens)
    if rm.head_kind == "outcome":
        return np.asarray(sigmoid(phi @ rm.weights)).reshape(-1)
    if rm.head_kind == "process":
        W = rm.weights.reshape(len(PRM_CLASSES), -1)
        return softmax(phi @ W.T)
    raise InvalidArgumentError("token_scores needs an outcome or process head")


def orm_loss(rm: LinearRewardModel, tokens, labels):
    """Binary cross-entropy on labelled positions; ``IGNORE`` (-100) positions are skipped."""
    _require_head(rm, "outcome")
    labels = np.asarray(labels).reshape(-1)
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if labels.size != tokens.size:
        raise InvalidArgumentError("labels must align with tokens")
    keep = labels != IGNORE
    if not keep.any():
        raise InvalidArgumentError("no labelled positions")
    phi = prefix_features(rm, tokens)[keep]
    y = labels[keep].astype(float)
    z = phi @ rm.weights
    per = -(y * log_sigmoid(z) + (1 - y) * log_sigmoid(-z))
    n = keep.sum()
    loss = float(per.sum() / n)
    grad = (np.asarray(sigmoid(z)).reshape(-1) - y) @ phi / n
    return loss, grad


def prm_loss(rm: LinearRewardModel, tokens, step_labels):
    """3-class cross-entropy at step-boundary positions only.

    ``step_labels`` holds -1, 0, +1 at boundaries and ``IGNORE`` elsewhere.
    """
    _require_head(rm, "process")
    labels = np.asarray(step_labels).reshape(-1)
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if labels.size != tokens.size:
        raise InvalidArgumentError("labels must align with tokens")
    keep = labels != IGNORE
    if not keep.any():
        raise InvalidArgumentError("no step boundaries")
    cls = np.array([PRM_CLASSES.index(int(v)) for v in labels[keep]])
    # only boundary prefixes are featurized
    positions = np.flatnonzero(keep)
    phi = np.array([rm.features([], tokens[: t + 1]) for t in positions])
    W = rm.weights.reshape(len(PRM_CLASSES), -1)
    logits = phi @ W.T
    logp = log_softmax(logits)
    n = positions.size
    loss = float(-logp[np.arange(n), cls].sum() / n)
    err = np.exp(logp)
    err[np.arange(n), cls] -= 1.0
    grad = err.T @ phi / n
    return loss, grad.reshape(-1)


def aggregate_token_scores(probs, method: str = "mean", m: int | None = None) -> float:
    """Collapse per-token correctness probabilities into one score."""
    p = np.asarray(probs, dtype=float).reshape(-1)
    if p.size == 0:
        raise InvalidArgumentError("empty probability vector")
    if np.any(p <= 0) or np.any(p > 1):
        raise InvalidArgumentError("probabilities must lie in (0, 1]")
    if method == "mean":
        return float(p.mean())
    if method == "min":
        return float(p.min())
    if method == "sum_log":
        return float(np.log(p).sum())
    if method == "last_m":
        if m is None or m < 1:
            raise InvalidArgumentError("last_m needs m >= 1")
        return float(p[-m:].mean())
    raise InvalidArgumentError(f"unknown aggregation {method!r}")


def preference_probability(rm: LinearRewardModel, prompt, y1, y2) -> float:
    """P(y1 preferred over y2 | x) under the Bradley-Terry model."""
    return float(sigmoid(rm_score(rm, prompt, y1) - rm_score(rm, prompt, y2)))


def all_pairs(K: int):
    return list(combinations(range(K), 2))


def train_bt(
    rm: LinearRewardModel,
    records,
    lr: float = 0.1,
    epochs: int = 1,
    batch_size: int = 16,
    seed=None,
    margin: bool = False,
) -> tuple[LinearRewardModel, list[float]]:
    """Minibatch gradient descent on the Bradley-Terry loss; returns the model and loss trace.

    Records are visited in a shuffled order when ``seed`` is given, else in input order.
    """
    if len(records) == 0:
        raise InvalidArgumentError("no training records")
    if lr < 0 or epochs < 0 or batch_size < 1:
        raise InvalidArgumentError("lr, epochs and batch_size must be nonnegative / positive")
    w = rm.weights.copy()
    trace = []
    n = len(records)
    for epoch in range(epochs):
        order = np.arange(n) if seed is None else seed.child("epoch", epoch).rng().permutation(n)
        for start in range(0, n, batch_size):
            batch = [records[i] for i in order[start : start + batch_size]]
            model = rm.with_weights(w)
            loss, grad = bt_margin_loss(model, batch) if margin else bt_loss(model, batch)
            w = w - lr * grad
            trace.append(loss)
    return rm.with_weights(w), trace


def kendall_tau(a, b) -> float:
    """Kendall rank correlation (tau-b) between two score vectors."""
    return float(kendalltau(a, b).statistic)
