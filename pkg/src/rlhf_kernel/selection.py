"""Rejection sampling and best-of-N selection.

Row and column indices returned to callers are 1-based (prompt i, completion j);
flat indices into the row-major reward matrix are 0-based. Ties always go to the
lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import InvalidArgumentError, check_finite
from .numerics import Seed
from .policy import BigramPolicy, TokenSequence, sample_completion
from .sft import Conversation, train_sft, write_sft_jsonl


@dataclass
class CompletionMatrix:
    prompts: list
    cells: list  # cells[i][j] is a TokenSequence conditioned on prompts[i]

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.cells), (len(self.cells[0]) if self.cells else 0)


def generate_matrix(policy: BigramPolicy, prompts, N: int, temperature: float, max_len: int,
                    seed: Seed) -> CompletionMatrix:
    """N independent samples per prompt; cell (i, j) draws from its own derived stream."""
    if N < 1:
        raise InvalidArgumentError("N must be >= 1")
    cells = [
        [sample_completion(policy, p, temperature, max_len, seed.child("cell", i, j)) for j in range(N)]
        for i, p in enumerate(prompts)
    ]
    return CompletionMatrix(list(prompts), cells)


def score_matrix(matrix: CompletionMatrix, reward_fn) -> np.ndarray:
    """R[i, j] = reward_fn(cell) for a callable taking a ``TokenSequence``."""
    M, N = matrix.shape
    R = np.zeros((M, N))
    for i in range(M):
        for j in range(N):
            R[i, j] = reward_fn(matrix.cells[i][j])
    return R


def _as_matrix(R) -> np.ndarray:
    R = check_finite(R, "reward matrix")
    if R.ndim != 2 or R.size == 0:
        raise InvalidArgumentError("reward matrix must be a nonempty 2-d array")
    return R


def select_top_per_prompt(R) -> list[int]:
    """1-based argmax column of each row (np.argmax already returns the first maximum)."""
    R = _as_matrix(R)
    return [int(j) + 1 for j in np.argmax(R, axis=1)]


def top_k_flat_indices(R, K: int) -> list[int]:
    """0-based row-major indices of the K largest entries, by value then ascending index."""
    R = _as_matrix(R)
    flat = R.ravel()
    if not 1 <= K <= flat.size:
        raise InvalidArgumentError(f"K must lie in [1, {flat.size}]")
    order = np.lexsort((np.arange(flat.size), -flat))
    return [int(k) for k in order[:K]]


def select_top_k_overall(R, K: int) -> list[tuple[int, int]]:
    """1-based (i, j) of the K largest entries: i = k // N + 1, j = k % N + 1."""
    N = _as_matrix(R).shape[1]
    return [(k // N + 1, k % N + 1) for k in top_k_flat_indices(R, K)]


def best_of_n(rewards) -> int:
    r = check_finite(rewards, "rewards").reshape(-1)
    if r.size == 0:
        raise InvalidArgumentError("N must be >= 1")
    return int(np.argmax(r)) + 1


def select(matrix: CompletionMatrix, R, method: str = "per_prompt", K: int | None = None,
           dedup: bool = False) -> list[tuple[int, int]]:
    """Pick cells by either rule; ``dedup`` drops repeated (prompt, completion) pairs, keeping the first."""
    if method == "per_prompt":
        picks = [(i + 1, j) for i, j in enumerate(select_top_per_prompt(R))]
    elif method == "top_k":
        if K is None:
            raise InvalidArgumentError("top_k selection needs K")
        picks = select_top_k_overall(R, K)
    else:
        raise InvalidArgumentError(f"unknown selection method {method!r}")
    if not dedup:
        return picks
    seen, kept = set(), []
    for i, j in picks:
        key = matrix.cells[i - 1][j - 1].key()
        if key not in seen:
            seen.add(key)
            kept.append((i, j))
    return kept


def sft_examples(selected) -> list[tuple[np.ndarray, np.ndarray]]:
    """prompt + completion streams with the prompt masked out."""
    out = []
    for seq in selected:
        tokens = np.concatenate([seq.prompt, seq.completion]).astype(np.int64)
        mask = np.concatenate([np.zeros(seq.prompt.size), np.ones(seq.completion.size)])
        out.append((tokens, mask))
    return out


def finetune_on_selected(policy: BigramPolicy, selected, epochs: int, lr: float):
    """Masked-NLL fine-tuning on a copy of ``policy``; returns (new policy, loss trace)."""
    if not selected:
        raise InvalidArgumentError("nothing selected")
    if lr < 0:
        raise InvalidArgumentError("lr must be >= 0")
    tuned = BigramPolicy(policy.vocab, policy.init_logits, policy.trans_logits)
    trace = train_sft(tuned, sft_examples(selected), lr, epochs)
    return tuned, trace


def export_selected(path, matrix: CompletionMatrix, R, picks) -> None:
    """Write picked cells as SFT JSONL with source_row / source_col / reward provenance."""
    R = np.asarray(R, dtype=float)
    items, extra = [], []
    for i, j in picks:
        seq: TokenSequence = matrix.cells[i - 1][j - 1]
        conv = Conversation([("user", seq.prompt.tolist()), ("assistant", seq.completion.tolist())])
        items.append((conv, "final_turn_only"))
        extra.append({"source_row": i, "source_col": j, "reward": float(R[i - 1, j - 1])})
    write_sft_jsonl(items, path, extra)


def rejection_sampling_round(policy: BigramPolicy, prompts, N: int, reward_fn, seed: Seed, *,
                             temperature: float = 1.0, max_len: int = 4, epochs: int = 10,
                             lr: float = 0.5, method: str = "per_prompt", K: int | None = None,
                             dedup: bool = False):
    """generate -> score -> select -> fine-tune. Returns (tuned policy, matrix, R, picks, trace)."""
    matrix = generate_matrix(policy, prompts, N, temperature, max_len, seed)
    R = score_matrix(matrix, reward_fn)
    picks = select(matrix, R, method, K, dedup)
    selected = [matrix.cells[i - 1][j - 1] for i, j in picks]
    tuned, trace = finetune_on_selected(policy, selected, epochs, lr)
    return tuned, matrix, R, picks, trace
