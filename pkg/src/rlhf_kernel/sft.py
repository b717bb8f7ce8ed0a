"""Instruction fine-tuning: conversations, loss masks, chat rendering, NLL and distillation losses."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import InvalidArgumentError, ValidationError, check_mask
from .policy import BigramPolicy, logprob_grad

ROLES = ("system", "user", "assistant", "tool")
STRATEGIES = ("final_turn_only", "assistant_all")
IM_START = "<|im_start|>"
IM_END = "<|im_end|>"
ALTERNATION_MESSAGE = "Conversation roles must alternate user/assistant/user/assistant/..."


@dataclass(frozen=True)
class Message:
    role: str
    content: object  # token-id array, or a plain string for rendering only

    def tokens(self) -> np.ndarray:
        if isinstance(self.content, str):
            raise InvalidArgumentError("string content has no token ids")
        return np.asarray(self.content, dtype=np.int64).reshape(-1)


@dataclass
class Conversation:
    messages: list = field(default_factory=list)

    def __post_init__(self):
        self.messages = [m if isinstance(m, Message) else Message(m[0], m[1]) for m in self.messages]

    def validate(self) -> None:
        """Optional leading system turn, then user-side and assistant turns alternating.

        The user side of a round is either one user message or a run of tool outputs
        answering the preceding assistant turn.
        """
        msgs = self.messages
        for i, m in enumerate(msgs):
            if m.role not in ROLES:
                raise ValidationError(f"unknown role {m.role!r}", field=f"messages[{i}].role")
            if m.role == "system" and i != 0:
                raise ValidationError("system message must come first", field=f"messages[{i}].role")
        body = msgs[1:] if msgs and msgs[0].role == "system" else msgs
        prev = None
        for i, m in enumerate(body):
            if m.role == "user":
                ok = prev in (None, "assistant")
            elif m.role == "assistant":
                ok = prev in ("user", "tool")
            else:  # tool
                ok = prev in ("assistant", "tool")
            if not ok:
                raise ValidationError(ALTERNATION_MESSAGE, field="messages")
            prev = m.role

    def to_json_dict(self, strategy: str | None = None) -> dict:
        out = {
            "messages": [
                {"role": m.role, "content": m.content if isinstance(m.content, str) else m.tokens().tolist()}
                for m in self.messages
            ]
        }
        if strategy is not None:
            out["strategy"] = strategy
        return out


def flatten(conv: Conversation) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated token stream and the message index of each position."""
    parts = [m.tokens() for m in conv.messages]
    if not parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    owner = np.concatenate([np.full(p.size, i, dtype=np.int64) for i, p in enumerate(parts)])
    return np.concatenate(parts), owner


def build_mask(conv: Conversation, strategy: str = "final_turn_only") -> np.ndarray:
    """Loss mask over the flattened stream; only assistant tokens can be 1."""
    if strategy not in STRATEGIES:
        raise InvalidArgumentError(f"strategy must be one of {STRATEGIES}")
    conv.validate()
    _, owner = flatten(conv)
    assistant = [i for i, m in enumerate(conv.messages) if m.role == "assistant"]
    keep = assistant[-1:] if strategy == "final_turn_only" else assistant
    return np.isin(owner, keep).astype(float)


def unroll(conv: Conversation) -> list[tuple[np.ndarray, np.ndarray]]:
    """One example per assistant turn, each predicting that turn with all prior context masked."""
    conv.validate()
    examples = []
    for i, m in enumerate(conv.messages):
        if m.role == "assistant":
            prefix = Conversation(conv.messages[: i + 1])
            examples.append((flatten(prefix)[0], build_mask(prefix, "final_turn_only")))
    return examples


def _render_content(content) -> str:
    if isinstance(content, str):
        return content.strip()
    return " ".join(str(int(t)) for t in np.asarray(content).reshape(-1))


def render_chat_template(conv: Conversation, add_generation_cue: bool = False) -> str:
    try:
        conv.validate()
    except ValidationError as exc:
        if exc.field == "messages":
            raise
        raise ValidationError(f"{ALTERNATION_MESSAGE} ({exc})", field=exc.field) from exc
    out = [f"{IM_START}{m.role}\n{_render_content(m.content)}{IM_END}\n" for m in conv.messages]
    if add_generation_cue:
        out.append(f"{IM_START}assistant\n")
    return "".join(out)


def _masked_positions(policy: BigramPolicy, tokens, mask):
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    mask = check_mask(mask, tokens.shape)
    n = mask.sum()
    if n == 0:
        raise InvalidArgumentError("mask selects no positions")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= policy.vocab.size):
        raise InvalidArgumentError("token id out of range for vocabulary")
    return tokens, mask, n, policy.stream_rows(tokens)


def nll_loss(policy: BigramPolicy, tokens, mask) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over masked positions of a stream scored from BOS."""
    tokens, mask, n, rows = _masked_positions(policy, tokens, mask)
    logp = policy.row_log_probs()[rows, tokens]
    loss = -float(np.sum(mask * logp)) / n
    grad = -logprob_grad(policy, rows, tokens, mask / n)
    return loss, grad


def kd_loss(student: BigramPolicy, teacher: BigramPolicy, tokens, mask) -> tuple[float, np.ndarray]:
    """Cross-entropy from teacher to student next-token distributions at masked positions."""
    if student.vocab != teacher.vocab:
        raise InvalidArgumentError("student and teacher must share a vocabulary")
    tokens, mask, n, rows = _masked_positions(student, tokens, mask)
    sel = rows[mask.astype(bool)]
    p_t = teacher.row_probs()[sel]
    logp_s = student.row_log_probs()[sel]
    loss = -float(np.sum(p_t * logp_s)) / n
    V = student.vocab.size
    grad = np.zeros((V + 1, V))
    # d/dz of -sum_v p_t(v) log softmax(z)_v = softmax(z) - p_t
    np.add.at(grad, sel, np.exp(logp_s) - p_t)
    return loss, grad.reshape(-1) / n


def weighted_sequence_nll(policy: BigramPolicy, prompt, completions, weights) -> tuple[float, np.ndarray]:
    """-sum_i w_i log pi(y_i | x) over whole completions, with gradient."""
    weights = np.asarray(weights, dtype=float)
    table = policy.row_log_probs()
    loss = 0.0
    rows_all, tgt_all, w_all = [], [], []
    for y, w in zip(completions, weights):
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        rows = policy.context_rows(prompt, y)
        loss -= w * float(table[rows, y].sum())
        rows_all.append(rows)
        tgt_all.append(y)
        w_all.append(np.full(y.size, w))
    grad = -logprob_grad(policy, np.concatenate(rows_all), np.concatenate(tgt_all), np.concatenate(w_all))
    return loss, grad


def train_sft(
    policy: BigramPolicy,
    examples,
    lr: float,
    epochs: int = 1,
) -> list[float]:
    """Full-batch gradient descent on the mean per-example NLL; updates ``policy`` in place."""
    if not examples:
        raise InvalidArgumentError("no SFT examples")
    trace = []
    for _ in range(epochs):
        total, grad = 0.0, np.zeros(policy.n_params)
        for tokens, mask in examples:
            loss, g = nll_loss(policy, tokens, mask)
            total += loss
            grad += g
        trace.append(total / len(examples))
        policy.update(-lr * grad / len(examples))
    return trace


def read_sft_jsonl(path) -> list[tuple[Conversation, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: {exc.msg}", field="messages") from exc
        if "messages" not in data:
            raise ValidationError(f"line {lineno}: missing 'messages'", field="messages")
        strategy = data.get("strategy", "final_turn_only")
        if strategy not in STRATEGIES:
            raise ValidationError(f"line {lineno}: bad strategy {strategy!r}", field="strategy")
        conv = Conversation([(m["role"], m["content"]) for m in data["messages"]])
        conv.validate()
        out.append((conv, strategy))
    return out


def write_sft_jsonl(items, path, extra=None) -> None:
    """Write ``(conversation, strategy)`` pairs; ``extra`` holds optional per-line fields."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, (conv, strategy) in enumerate(items):
            row = conv.to_json_dict(strategy)
            if extra is not None:
                row.update(extra[k])
            fh.write(json.dumps(row) + "\n")
