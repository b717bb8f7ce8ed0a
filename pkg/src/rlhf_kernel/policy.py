"""Bigram softmax policy over a small abstract vocabulary.

Parameters live in a ``(V + 1) x V`` logits table. Row 0 holds the begin-of-sequence
logits (used when there is no previous token); row ``1 + v`` holds the transition
logits after token ``v``. The flattened parameter vector is ``[init_logits, trans_logits]``
with ``V + V**2`` entries.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ._validation import CapacityError, InvalidArgumentError
from .numerics import Seed, log_softmax, softmax

ENUMERATION_LIMIT = 10**6


@dataclass(frozen=True)
class Vocab:
    size: int
    eos_id: int = 0
    pad_id: int = 1

    def __post_init__(self):
        if not 2 <= self.size <= 64:
            raise InvalidArgumentError("vocab size must lie in [2, 64]")
        if not (0 <= self.eos_id < self.size and 0 <= self.pad_id < self.size):
            raise InvalidArgumentError("eos_id and pad_id must be < vocab size")
        if self.eos_id == self.pad_id:
            raise InvalidArgumentError("eos_id and pad_id must differ")


@dataclass(frozen=True)
class TokenSequence:
    prompt: np.ndarray
    completion: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "prompt", np.asarray(self.prompt, dtype=np.int64))
        object.__setattr__(self, "completion", np.asarray(self.completion, dtype=np.int64))

    def __len__(self):
        return len(self.completion)

    def key(self) -> tuple:
        return tuple(self.prompt.tolist()), tuple(self.completion.tolist())


def _as_ids(tokens) -> np.ndarray:
    return np.asarray(tokens, dtype=np.int64).reshape(-1)


class BigramPolicy:
    """Autoregressive policy p(y_t | y_{t-1}) = softmax(trans_logits[y_{t-1}])."""

    def __init__(self, vocab: Vocab, init_logits=None, trans_logits=None, frozen: bool = False):
        self.vocab = vocab
        V = vocab.size
        table = np.zeros((V + 1, V))
        if init_logits is not None:
            table[0] = np.asarray(init_logits, dtype=float)
        if trans_logits is not None:
            table[1:] = np.asarray(trans_logits, dtype=float).reshape(V, V)
        if not np.all(np.isfinite(table)):
            raise InvalidArgumentError("policy logits must be finite")
        self._table = table
        self._frozen = frozen
        if frozen:
            self._table.setflags(write=False)

    # construction -----------------------------------------------------
    @classmethod
    def uniform(cls, vocab: Vocab) -> "BigramPolicy":
        return cls(vocab)

    @classmethod
    def random(cls, vocab: Vocab, seed: Seed, scale: float = 1.0) -> "BigramPolicy":
        rng = seed.rng()
        table = rng.normal(0.0, scale, size=(vocab.size + 1, vocab.size))
        return cls(vocab, table[0], table[1:])

    def with_params(self, theta) -> "BigramPolicy":
        V = self.vocab.size
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise InvalidArgumentError(f"expected {self.n_params} parameters, got {theta.size}")
        return BigramPolicy(self.vocab, theta[:V], theta[V:].reshape(V, V))

    # views -------------------------------------------------------------
    @property
    def n_params(self) -> int:
        V = self.vocab.size
        return V + V * V

    @property
    def params(self) -> np.ndarray:
        return self._table.reshape(-1).copy()

    @property
    def init_logits(self) -> np.ndarray:
        return self._table[0].copy()

    @property
    def trans_logits(self) -> np.ndarray:
        return self._table[1:].copy()

    @property
    def frozen(self) -> bool:
        return self._frozen

    def row_log_probs(self) -> np.ndarray:
        """Log-softmax of every row of the logits table, shape (V + 1, V)."""
        return log_softmax(self._table)

    def row_probs(self) -> np.ndarray:
        return softmax(self._table)

    def update(self, delta) -> None:
        """In-place additive parameter update (single-writer)."""
        if self._frozen:
            raise InvalidArgumentError("cannot update a frozen snapshot")
        delta = np.asarray(delta, dtype=float).reshape(self._table.shape)
        self._table += delta

    def snapshot(self) -> "BigramPolicy":
        return snapshot(self)

    # context rows --------------------------------------------------------
    def context_rows(self, prompt, completion) -> np.ndarray:
        """Row index of the conditioning context for each completion position."""
        prompt = _as_ids(prompt)
        completion = _as_ids(completion)
        first = 0 if prompt.size == 0 else 1 + int(prompt[-1])
        rows = np.empty(completion.size, dtype=np.int64)
        if completion.size:
            rows[0] = first
            rows[1:] = 1 + completion[:-1]
        return rows

    def stream_rows(self, tokens) -> np.ndarray:
        """Context rows for a flat token stream scored from the begin-of-sequence row."""
        return self.context_rows([], tokens)

    # serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab.size,
            "eos_id": self.vocab.eos_id,
            "pad_id": self.vocab.pad_id,
            "init_logits": self._table[0].tolist(),
            "trans_logits": self._table[1:].tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BigramPolicy":
        vocab = Vocab(int(data["vocab_size"]), int(data["eos_id"]), int(data["pad_id"]))
        return cls(vocab, data["init_logits"], data["trans_logits"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "BigramPolicy":
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return f"BigramPolicy(V={self.vocab.size}, frozen={self._frozen})"


def snapshot(policy: BigramPolicy) -> BigramPolicy:
    """Frozen copy; later updates to ``policy`` do not affect it."""
    if policy.frozen:
        return policy
    return BigramPolicy(policy.vocab, policy.init_logits, policy.trans_logits, frozen=True)


def _check_ids(policy: BigramPolicy, *arrays) -> None:
    V = policy.vocab.size
    for arr in arrays:
        if arr.size and (arr.min() < 0 or arr.max() >= V):
            raise InvalidArgumentError("token id out of range for vocabulary")


def sequence_logprob(policy: BigramPolicy, seq: TokenSequence) -> tuple[float, np.ndarray]:
    """Total and per-token log-probability of ``seq.completion`` given its prompt."""
    prompt = _as_ids(seq.prompt)
    completion = _as_ids(seq.completion)
    _check_ids(policy, prompt, completion)
    rows = policy.context_rows(prompt, completion)
    per_token = policy.row_log_probs()[rows, completion]
    total = 0.0
    for v in per_token:
        total += v
    return float(total), per_token


def token_logprobs(policy: BigramPolicy, prompt, completion, logp_table=None) -> np.ndarray:
    prompt = _as_ids(prompt)
    completion = _as_ids(completion)
    table = policy.row_log_probs() if logp_table is None else logp_table
    return table[policy.context_rows(prompt, completion), completion]


def logprob_grad(policy: BigramPolicy, rows, targets, weights) -> np.ndarray:
    """Gradient of ``sum_t weights[t] * log p(targets[t] | rows[t])`` w.r.t. the parameters."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    V = policy.vocab.size
    probs = policy.row_probs()
    grad = np.zeros((V + 1, V))
    # d log softmax(z)[y] / dz = onehot(y) - softmax(z)
    np.add.at(grad, (rows, targets), weights)
    row_weight = np.zeros(V + 1)
    np.add.at(row_weight, rows, weights)
    grad -= row_weight[:, None] * probs
    return grad.reshape(-1)


def sequence_logprob_grad(policy: BigramPolicy, seq: TokenSequence) -> np.ndarray:
    rows = policy.context_rows(seq.prompt, seq.completion)
    return logprob_grad(policy, rows, seq.completion, np.ones(len(seq.completion)))


def batch_logprobs(policy: BigramPolicy, prompts, completions, length: int | None = None) -> np.ndarray:
    """Per-token log-probs for a batch, right-padded with zeros to ``length``."""
    completions = [_as_ids(c) for c in completions]
    L = max((c.size for c in completions), default=0) if length is None else length
    table = policy.row_log_probs()
    out = np.zeros((len(completions), L))
    for i, (p, c) in enumerate(zip(prompts, completions)):
        out[i, : c.size] = token_logprobs(policy, p, c, table)
    return out


def batch_logprob_grad(policy: BigramPolicy, prompts, completions, dlogp) -> np.ndarray:
    """Chain a (B, L) matrix of d(loss)/d(logprob) through to the parameters."""
    rows, targets, weights = [], [], []
    for i, (p, c) in enumerate(zip(prompts, completions)):
        c = _as_ids(c)
        rows.append(policy.context_rows(p, c))
        targets.append(c)
        weights.append(np.asarray(dlogp[i, : c.size], dtype=float))
    if not rows:
        return np.zeros(policy.n_params)
    return logprob_grad(policy, np.concatenate(rows), np.concatenate(targets), np.concatenate(weights))


def sample_completion(
    policy: BigramPolicy,
    prompt,
    temperature: float,
    max_len: int,
    seed: Seed,
) -> TokenSequence:
    """Sample until eos or ``max_len`` tokens; temperature 0 is greedy (lowest index on ties)."""
    if temperature < 0:
        raise InvalidArgumentError("temperature must be nonnegative")
    if max_len < 1:
        raise InvalidArgumentError("max_len must be >= 1")
    prompt = _as_ids(prompt)
    _check_ids(policy, prompt)
    rng = seed.rng()
    table = policy._table
    eos = policy.vocab.eos_id
    row = 0 if prompt.size == 0 else 1 + int(prompt[-1])
    out: list[int] = []
    for _ in range(max_len):
        logits = table[row]
        if temperature == 0:
            tok = int(np.argmax(logits))
        else:
            probs = softmax(logits / temperature)
            u = rng.random()
            tok = int(np.searchsorted(np.cumsum(probs), u, side="right"))
            tok = min(tok, policy.vocab.size - 1)
        out.append(tok)
        if tok == eos:
            break
        row = 1 + tok
    truncated = out[-1] != eos
    return TokenSequence(prompt, np.array(out, dtype=np.int64), truncated)


def enumerate_completions(
    policy: BigramPolicy,
    prompt,
    max_len: int,
    expand_truncated: bool = False,
) -> list[tuple[TokenSequence, float]]:
    """Every eos-terminated completion of length <= max_len with its probability.

    Truncated completions (``max_len`` tokens without eos) are either pooled into one
    bucket flagged ``truncated=True`` with an empty completion, or listed one by one
    when ``expand_truncated`` is set.
    """
    V = policy.vocab.size
    if max_len < 1:
        raise InvalidArgumentError("max_len must be >= 1")
    if V**max_len > ENUMERATION_LIMIT:
        raise CapacityError(f"V**max_len = {V}**{max_len} exceeds {ENUMERATION_LIMIT}")
    prompt = _as_ids(prompt)
    _check_ids(policy, prompt)
    logp = policy.row_log_probs()
    eos = policy.vocab.eos_id
    non_eos = [v for v in range(V) if v != eos]
    start = 0 if prompt.size == 0 else 1 + int(prompt[-1])

    results: list[tuple[TokenSequence, float]] = []
    truncated: list[tuple[TokenSequence, float]] = []
    for n in range(max_len):
        # n non-eos tokens followed by eos
        for body in itertools.product(non_eos, repeat=n):
            lp, row = 0.0, start
            for tok in body:
                lp += logp[row, tok]
                row = 1 + tok
            lp += logp[row, eos]
            results.append((TokenSequence(prompt, np.array(body + (eos,))), float(np.exp(lp))))
    for body in itertools.product(non_eos, repeat=max_len):
        lp, row = 0.0, start
        for tok in body:
            lp += logp[row, tok]
            row = 1 + tok
        truncated.append((TokenSequence(prompt, np.array(body), truncated=True), float(np.exp(lp))))

    if expand_truncated:
        return results + truncated
    mass = 0.0
    for _, p in truncated:
        mass += p
    results.append((TokenSequence(prompt, np.array([], dtype=np.int64), truncated=True), mass))
    return results


def completion_distribution(policy: BigramPolicy, prompt, max_len: int) -> tuple[list[TokenSequence], np.ndarray]:
    """Fully expanded outcome list and probability vector, in a fixed order."""
    pairs = enumerate_completions(policy, prompt, max_len, expand_truncated=True)
    return [s for s, _ in pairs], np.array([p for _, p in pairs])


def greedy_decode(policy: BigramPolicy, prompt, max_len: int) -> TokenSequence:
    return sample_completion(policy, prompt, 0.0, max_len, Seed(0, "greedy"))


def pad_batch(sequences: Iterable[Sequence[int]], pad_id: int, length: int | None = None):
    seqs = [_as_ids(s) for s in sequences]
    L = max((s.size for s in seqs), default=0) if length is None else length
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        ids[i, : s.size] = s
        mask[i, : s.size] = 1.0
    return ids, mask
