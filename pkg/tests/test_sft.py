import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlhf_kernel._validation import InvalidArgumentError, ValidationError
from rlhf_kernel.numerics import Seed
from rlhf_kernel.policy import BigramPolicy, Vocab
from rlhf_kernel.sft import (
    Conversation,
    build_mask,
    flatten,
    kd_loss,
    nll_loss,
    read_sft_jsonl,
    render_chat_template,
    train_sft,
    unroll,
    write_sft_jsonl,
)

VOCAB = Vocab(5, 0, 1)


def test_render_single_turn_with_cue():
    conv = Conversation([("system", "Answer in one word."), ("user", "Colour of the sky?")])
    assert render_chat_template(conv, add_generation_cue=True) == (
        "<|im_start|>system\nAnswer in one word.<|im_end|>\n"
        "<|im_start|>user\nColour of the sky?<|im_end|>\n"
        "<|im_start|>assistant\n"
    )


def test_render_multi_turn():
    conv = Conversation([
        ("system", "Answer in one word."),
        ("user", "Colour of the sky?"),
        ("assistant", "  Blue. "),
        ("user", "Certain?"),
    ])
    text = render_chat_template(conv, add_generation_cue=True)
    assert text == (
        "<|im_start|>system\nAnswer in one word.<|im_end|>\n"
        "<|im_start|>user\nColour of the sky?<|im_end|>\n"
        "<|im_start|>assistant\nBlue.<|im_end|>\n"
        "<|im_start|>user\nCertain?<|im_end|>\n"
        "<|im_start|>assistant\n"
    )
    assert not render_chat_template(conv).endswith("<|im_start|>assistant\n")


def test_render_empty_conversation():
    assert render_chat_template(Conversation([])) == ""
    assert render_chat_template(Conversation([]), add_generation_cue=True) == "<|im_start|>assistant\n"


def test_consecutive_user_turns_rejected():
    conv = Conversation([("user", "a"), ("user", "b")])
    with pytest.raises(ValidationError, match="Conversation roles must alternate"):
        render_chat_template(conv)
    with pytest.raises(ValidationError):
        build_mask(Conversation([("user", [2]), ("user", [3])]))


def test_role_rules():
    with pytest.raises(ValidationError):
        Conversation([("user", [2]), ("system", [3])]).validate()
    with pytest.raises(ValidationError):
        Conversation([("narrator", [2])]).validate()
    with pytest.raises(ValidationError):
        Conversation([("assistant", [2])]).validate()
    Conversation([("user", [2]), ("assistant", [3]), ("tool", [4]), ("tool", [2]), ("assistant", [0])]).validate()


def _chat():
    return Conversation([
        ("system", [4]),
        ("user", [2, 3]),
        ("assistant", [3, 0]),
        ("user", [4]),
        ("assistant", [2, 2, 0]),
    ])


def test_masks():
    conv = _chat()
    assert build_mask(conv, "final_turn_only").tolist() == [0, 0, 0, 0, 0, 0, 1, 1, 1]
    assert build_mask(conv, "assistant_all").tolist() == [0, 0, 0, 1, 1, 0, 1, 1, 1]
    with pytest.raises(InvalidArgumentError):
        build_mask(conv, "everything")


def test_tool_turns_are_never_trained_on():
    conv = Conversation([("user", [2]), ("assistant", [3]), ("tool", [4, 4]), ("assistant", [2, 0])])
    assert build_mask(conv, "assistant_all").tolist() == [0, 1, 0, 0, 1, 1]


def test_unroll_one_example_per_assistant_turn():
    examples = unroll(_chat())
    assert len(examples) == 2
    tokens, mask = examples[0]
    assert tokens.tolist() == [4, 2, 3, 3, 0] and mask.tolist() == [0, 0, 0, 1, 1]
    tokens, mask = examples[1]
    assert tokens.tolist() == flatten(_chat())[0].tolist()
    assert mask.tolist() == build_mask(_chat()).tolist()


def test_nll_perfect_fit_is_zero():
    trans = np.full((6, 5), -400.0)
    trans[0, 3] = 400.0  # BOS -> 3
    trans[4, 2] = 400.0  # 3 -> 2
    trans[3, 0] = 400.0  # 2 -> EOS
    pol = BigramPolicy(VOCAB, trans[0], trans[1:])
    loss, grad = nll_loss(pol, [3, 2, 0], [1, 1, 1])
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(grad)) < 1e-12


def test_nll_uniform_is_log_vocab():
    loss, _ = nll_loss(BigramPolicy.uniform(VOCAB), [1, 2, 3, 4], [0, 1, 1, 1])
    assert loss == pytest.approx(math.log(5), abs=1e-15)


def test_nll_needs_a_selected_position():
    with pytest.raises(InvalidArgumentError):
        nll_loss(BigramPolicy.uniform(VOCAB), [1, 2], [0, 0])
    with pytest.raises(InvalidArgumentError):
        nll_loss(BigramPolicy.uniform(VOCAB), [1, 2], [1, 2])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4))
def test_nll_ignores_masked_out_targets(seed, replacement):
    pol = BigramPolicy.random(VOCAB, Seed(seed))
    tokens = np.array([2, 3, 4, 1, 2])
    mask = np.array([0, 1, 1, 0, 0])
    # only the last position is both unselected and not a context for a selected one
    other = tokens.copy()
    other[4] = replacement
    a, b = nll_loss(pol, tokens, mask), nll_loss(pol, other, mask)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_kd_equal_models_is_entropy_with_zero_gradient():
    pol = BigramPolicy.random(VOCAB, Seed(1))
    tokens, mask = [2, 3, 4], [1, 1, 1]
    loss, grad = kd_loss(pol, pol.with_params(pol.params), tokens, mask)
    rows = pol.stream_rows(np.array(tokens))
    p = pol.row_probs()[rows]
    entropy = float(-(p * np.log(p)).sum(axis=1).mean())
    assert loss == pytest.approx(entropy, abs=1e-13)
    assert np.max(np.abs(grad)) < 1e-15


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_kd_minimized_at_teacher(seed_t, seed_s):
    teacher = BigramPolicy.random(VOCAB, Seed(seed_t, "t"))
    student = BigramPolicy.random(VOCAB, Seed(seed_s, "s"))
    tokens, mask = [2, 3, 4, 0], [1, 1, 1, 1]
    assert kd_loss(student, teacher, tokens, mask)[0] >= kd_loss(teacher, teacher, tokens, mask)[0] - 1e-12


def test_kd_minus_forward_kl_is_constant():
    teacher = BigramPolicy.random(VOCAB, Seed(2, "t"))
    tokens, mask = np.array([2, 3, 4, 0]), np.array([1, 0, 1, 1.0])
    rows = teacher.stream_rows(tokens)[mask > 0]
    pt = teacher.row_probs()[rows]
    gaps = []
    for s in range(5):
        student = BigramPolicy.random(VOCAB, Seed(s, "s"))
        ps = student.row_probs()[rows]
        kl = float((pt * (np.log(pt) - np.log(ps))).sum(axis=1).mean())
        gaps.append(kd_loss(student, teacher, tokens, mask)[0] - kl)
    assert np.ptp(gaps) < 1e-10


def test_kd_needs_shared_vocab():
    with pytest.raises(InvalidArgumentError):
        kd_loss(BigramPolicy.uniform(VOCAB), BigramPolicy.uniform(Vocab(4, 0, 1)), [1], [1])


def test_template_is_injective_on_message_lists():
    convs = [
        Conversation([("user", "a b"), ("assistant", "c")]),
        Conversation([("user", "a"), ("assistant", "b c")]),
        Conversation([("system", "a b"), ("user", "c")]),
        Conversation([("user", "a b c")]),
    ]
    texts = {render_chat_template(c) for c in convs}
    assert len(texts) == len(convs)


def test_train_sft_reduces_loss():
    pol = BigramPolicy.uniform(VOCAB)
    examples = unroll(_chat())
    trace = train_sft(pol, examples, lr=1.0, epochs=30)
    assert trace[-1] < trace[0]
    assert np.all(np.diff(trace) <= 1e-12)


def test_jsonl_round_trip(tmp_path):
    path = tmp_path / "sft.jsonl"
    write_sft_jsonl([(_chat(), "assistant_all")], path)
    [(conv, strategy)] = read_sft_jsonl(path)
    assert strategy == "assistant_all"
    assert flatten(conv)[0].tolist() == flatten(_chat())[0].tolist()
    path.write_text('{"messages": [{"role": "user", "content": [1]}], "strategy": "all"}\n')
    with pytest.raises(ValidationError):
        read_sft_jsonl(path)
