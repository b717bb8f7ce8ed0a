"""scikit-learn style wrappers around the trainers (fit / predict / score / get_params)."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import InvalidArgumentError
from .dpo import DpoBatch, train_dpo, variant_kwargs
from .numerics import Seed
from .policy import BigramPolicy, Vocab, snapshot
from .reward_models import FeatureMap, LinearRewardModel, rm_score, train_bt
from .sft import train_sft


def _check_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise InvalidArgumentError(f"{type(est).__name__} is not fitted")


class BradleyTerryRewardModel(BaseEstimator):
    """Linear Bradley-Terry reward model.

    ``fit`` takes a list of ``PreferenceRecord``; ``predict`` takes ``(prompt, completion)``
    pairs and returns reward logits; ``score`` is pairwise accuracy on preference records.
    """

    def __init__(self, vocab_size=5, bigrams=False, repeats=False, length=True, bias=True,
                 learning_rate=0.1, epochs=1, batch_size=16, seed=0, use_margin=False):
        self.vocab_size = vocab_size
        self.bigrams = bigrams
        self.repeats = repeats
        self.length = length
        self.bias = bias
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.use_margin = use_margin

    def fit(self, X, y=None):
        fmap = FeatureMap(self.vocab_size, self.bigrams, self.repeats, self.length, self.bias)
        self.model_, self.loss_trace_ = train_bt(
            LinearRewardModel(fmap), list(X), self.learning_rate, self.epochs, self.batch_size,
            Seed(self.seed, "bt-fit"), self.use_margin,
        )
        return self

    def predict(self, X) -> np.ndarray:
        _check_fitted(self, "model_")
        return np.array([rm_score(self.model_, p, c) for p, c in X])

    def score(self, X, y=None) -> float:
        _check_fitted(self, "model_")
        hits = [rm_score(self.model_, r.prompt, r.chosen) > rm_score(self.model_, r.prompt, r.rejected) for r in X]
        return float(np.mean(hits))


class SFTPolicy(BaseEstimator):
    """Bigram policy fit by masked NLL on ``(tokens, mask)`` examples."""

    def __init__(self, vocab_size=5, eos_id=0, pad_id=1, learning_rate=0.5, epochs=10):
        self.vocab_size = vocab_size
        self.eos_id = eos_id
        self.pad_id = pad_id
        self.learning_rate = learning_rate
        self.epochs = epochs

    def fit(self, X, y=None):
        self.policy_ = BigramPolicy.uniform(Vocab(self.vocab_size, self.eos_id, self.pad_id))
        self.loss_trace_ = train_sft(self.policy_, list(X), self.learning_rate, self.epochs)
        return self

    def predict_proba(self, contexts) -> np.ndarray:
        """Next-token distribution after each context token (None for begin-of-sequence)."""
        _check_fitted(self, "policy_")
        probs = self.policy_.row_probs()
        return np.array([probs[0 if c is None else 1 + int(c)] for c in contexts])

    def predict(self, contexts) -> np.ndarray:
        return np.argmax(self.predict_proba(contexts), axis=1)


class DPOPolicy(BaseEstimator):
    """Tabular DPO (or a variant) starting from, and regularized toward, ``reference``."""

    def __init__(self, reference=None, beta=0.1, variant="dpo", learning_rate=5e-3, steps=100,
                 tau=0.1, label_noise_eps=0.1, alpha=1.0):
        self.reference = reference
        self.beta = beta
        self.variant = variant
        self.learning_rate = learning_rate
        self.steps = steps
        self.tau = tau
        self.label_noise_eps = label_noise_eps
        self.alpha = alpha

    def fit(self, X, y=None, sample_weight=None):
        if self.reference is None:
            raise InvalidArgumentError("DPOPolicy needs a reference policy")
        ref = snapshot(self.reference)
        self.policy_ = BigramPolicy(ref.vocab, ref.init_logits, ref.trans_logits)
        batch = DpoBatch(list(X), self.beta, sample_weight)
        kwargs = variant_kwargs(self.variant, self.tau, self.label_noise_eps, self.alpha)
        self.trace_ = train_dpo(self.policy_, ref, batch, self.learning_rate, self.steps, self.variant, **kwargs)
        return self

    def predict_proba(self, contexts) -> np.ndarray:
        _check_fitted(self, "policy_")
        probs = self.policy_.row_probs()
        return np.array([probs[0 if c is None else 1 + int(c)] for c in contexts])
