import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlhf_kernel._validation import CapacityError, InvalidArgumentError
from rlhf_kernel.numerics import Seed, finite_diff_grad, relative_error, softmax
from rlhf_kernel.policy import (
    BigramPolicy,
    TokenSequence,
    Vocab,
    batch_logprobs,
    completion_distribution,
    enumerate_completions,
    greedy_decode,
    pad_batch,
    sample_completion,
    sequence_logprob,
    sequence_logprob_grad,
    snapshot,
)

V5 = Vocab(5, 0, 1)


def test_vocab_validation():
    for args in [(1, 0, 1), (65, 0, 1), (4, 0, 0), (4, 4, 1)]:
        with pytest.raises(InvalidArgumentError):
            Vocab(*args)


def test_empty_completion_logprob():
    total, per = sequence_logprob(BigramPolicy.random(V5, Seed(0)), TokenSequence([2], []))
    assert total == 0.0 and per.size == 0


def test_uniform_single_token():
    total, _ = sequence_logprob(BigramPolicy.uniform(Vocab(4, 0, 1)), TokenSequence([], [2]))
    assert total == pytest.approx(math.log(0.25), abs=1e-15)


def test_logprob_matches_row_softmax_product():
    pol = BigramPolicy.random(V5, Seed(1), 1.0)
    seq = TokenSequence([3, 4], [2, 2, 0])
    total, per = sequence_logprob(pol, seq)
    init, trans = pol.init_logits, pol.trans_logits
    want = [softmax(trans[4])[2], softmax(trans[2])[2], softmax(trans[2])[0]]
    assert np.allclose(np.exp(per), want, rtol=1e-13)
    assert total == pytest.approx(float(np.log(want).sum()), abs=1e-13)
    empty_prompt = TokenSequence([], [3])
    assert sequence_logprob(pol, empty_prompt)[0] == pytest.approx(math.log(softmax(init)[3]), abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 4), max_size=2), st.lists(st.integers(0, 4), min_size=1, max_size=5))
def test_sequence_logprob_gradient(seed, prompt, completion):
    pol = BigramPolicy.random(V5, Seed(seed), 1.0)
    seq = TokenSequence(prompt, completion)
    fd = finite_diff_grad(lambda th: sequence_logprob(pol.with_params(th), seq)[0], pol.params)
    assert relative_error(sequence_logprob_grad(pol, seq), fd) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 2), max_size=2), st.integers(1, 4))
def test_enumeration_sums_to_one(seed, prompt, max_len):
    pol = BigramPolicy.random(Vocab(3, 0, 1), Seed(seed), 2.0)
    pooled = enumerate_completions(pol, prompt, max_len)
    assert abs(sum(p for _, p in pooled) - 1.0) < 1e-10
    _, probs = completion_distribution(pol, prompt, max_len)
    assert abs(probs.sum() - 1.0) < 1e-10


def test_enumeration_hand_case():
    pol = BigramPolicy.random(Vocab(2, 0, 1), Seed(3))
    out = enumerate_completions(pol, [], 1)
    p_eos = softmax(pol.init_logits)[0]
    assert [(s.completion.tolist(), s.truncated) for s, _ in out] == [([0], False), ([], True)]
    assert out[0][1] == pytest.approx(p_eos) and out[1][1] == pytest.approx(1 - p_eos)
    expanded = enumerate_completions(pol, [], 1, expand_truncated=True)
    assert [(s.completion.tolist(), s.truncated) for s, _ in expanded] == [([0], False), ([1], True)]


def test_enumerated_probabilities_equal_exp_logprob():
    pol = BigramPolicy.random(V5, Seed(4))
    seqs, probs = completion_distribution(pol, [2], 3)
    for s, p in zip(seqs, probs):
        assert p == pytest.approx(math.exp(sequence_logprob(pol, s)[0]), rel=1e-12)


def test_enumeration_capacity_guard():
    with pytest.raises(CapacityError):
        enumerate_completions(BigramPolicy.uniform(Vocab(64, 0, 1)), [], 4)


def test_sampling_is_deterministic_and_capped():
    pol = BigramPolicy.random(V5, Seed(5))
    a = sample_completion(pol, [2], 1.0, 6, Seed(9, "s"))
    b = sample_completion(pol, [2], 1.0, 6, Seed(9, "s"))
    assert a.key() == b.key() and a.truncated == b.truncated
    assert 1 <= len(a) <= 6
    assert a.truncated == (a.completion[-1] != 0)
    with pytest.raises(InvalidArgumentError):
        sample_completion(pol, [2], -0.5, 4, Seed(0))


def test_single_token_frequencies_match_softmax():
    pol = BigramPolicy.random(V5, Seed(6), 1.0)
    n = 100_000
    rng_root = Seed(6, "freq")
    counts = np.zeros(5)
    for k in range(n // 100):
        for j in range(100):
            tok = sample_completion(pol, [3], 1.0, 1, rng_root.child(k, j)).completion[0]
            counts[tok] += 1
    probs = softmax(pol.trans_logits[3])
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) <= 3 * sigma)


def test_greedy_follows_argmax_path():
    trans = np.full((5, 5), -5.0)
    trans[2, 3] = 5.0
    trans[3, 0] = 5.0
    init = np.full(5, -5.0)
    init[2] = 5.0
    pol = BigramPolicy(V5, init, trans)
    assert greedy_decode(pol, [], 5).completion.tolist() == [2, 3, 0]
    seqs, probs = completion_distribution(pol, [], 3)
    assert seqs[int(np.argmax(probs))].completion.tolist() == [2, 3, 0]


def test_greedy_tie_goes_to_lowest_index():
    pol = BigramPolicy.uniform(V5)
    assert greedy_decode(pol, [], 3).completion.tolist() == [0]


def test_snapshot_isolation():
    pol = BigramPolicy.random(V5, Seed(7))
    snap = snapshot(pol)
    seq = TokenSequence([1], [2, 4, 0])
    before = sequence_logprob(snap, seq)[0]
    assert before == sequence_logprob(pol, seq)[0]
    pol.update(np.ones(pol.n_params) * np.arange(pol.n_params) * 0.01)
    assert sequence_logprob(snap, seq)[0] == before
    assert np.array_equal(snapshot(snap).params, snap.params)
    with pytest.raises(Exception):
        snap.update(np.zeros(snap.n_params))


def test_json_round_trip_and_field_names():
    pol = BigramPolicy.random(Vocab(4, 2, 3), Seed(8))
    doc = json.loads(pol.to_json())
    assert set(doc) == {"vocab_size", "eos_id", "pad_id", "init_logits", "trans_logits"}
    back = BigramPolicy.from_json(pol.to_json())
    assert back.vocab == pol.vocab and np.array_equal(back.params, pol.params)


def test_pad_batch_and_batch_logprobs():
    ids, mask = pad_batch([[2, 0], [3, 4, 0], []], pad_id=1)
    assert ids.tolist() == [[2, 0, 1], [3, 4, 0], [1, 1, 1]]
    assert mask.tolist() == [[1, 1, 0], [1, 1, 1], [0, 0, 0]]
    pol = BigramPolicy.random(V5, Seed(9))
    lp = batch_logprobs(pol, [[2], [2], [2]], [[2, 0], [3, 4, 0], []])
    assert lp[0, 2] == 0.0 and lp.shape == (3, 3)
    assert lp[1].sum() == pytest.approx(sequence_logprob(pol, TokenSequence([2], [3, 4, 0]))[0])


def test_out_of_range_tokens_rejected():
    with pytest.raises(InvalidArgumentError):
        sequence_logprob(BigramPolicy.uniform(V5), TokenSequence([], [7]))
