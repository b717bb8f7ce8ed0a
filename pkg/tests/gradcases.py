"""Random instances for the finite-difference gradient oracle.

Each builder takes an integer seed and returns ``(f, x0, analytic_grad)`` where ``f``
maps a flat parameter vector to the scalar loss. Builders for piecewise losses
return ``None`` when a clip boundary lies within reach of the difference step, and
the caller moves on to the next seed.
"""

import numpy as np

from rlhf_kernel.dpo import DpoBatch, cdpo_loss, dpo_loss, dpo_nll_loss, ipo_loss
from rlhf_kernel.numerics import Seed
from rlhf_kernel.policy import BigramPolicy, Vocab, sample_completion
from rlhf_kernel.policy_gradient import (
    ClipConfig,
    TrajectoryBatch,
    cispo_loss,
    cispo_weights,
    gspo_loss,
    gspo_sequence_ratio,
    grpo_loss,
    ppo_loss,
    reinforce_loss,
)
from rlhf_kernel.reward_models import (
    IGNORE,
    FeatureMap,
    LinearRewardModel,
    PreferenceRecord,
    RankedGroup,
    bt_loss,
    bt_margin_loss,
    orm_loss,
    plackett_luce_loss,
    prm_loss,
)
from rlhf_kernel.sft import kd_loss, nll_loss

V = 5
VOCAB = Vocab(V, 0, 1)
KINK_GAP = 1e-3


def _rng(name, seed):
    return Seed(seed, f"grad/{name}").rng()


def _policy(name, seed, tag, scale=1.0):
    return BigramPolicy.random(VOCAB, Seed(seed, f"grad/{name}/{tag}"), scale)


def _seq(rng, lo=1, hi=5):
    return rng.integers(0, V, size=rng.integers(lo, hi + 1))


def _distinct_pair(rng):
    while True:
        a, b = _seq(rng), _seq(rng)
        if not (a.shape == b.shape and np.array_equal(a, b)):
            return a, b


def _policy_case(pol, loss_fn):
    def f(theta):
        return loss_fn(pol.with_params(theta))[0]
    return f, pol.params.copy(), loss_fn(pol)[1]


def _rm_case(rm, loss_fn):
    def f(w):
        return loss_fn(rm.with_weights(w))[0]
    return f, rm.weights.copy(), loss_fn(rm)[1]


# supervised ----------------------------------------------------------------


def nll(seed):
    rng = _rng("nll", seed)
    tokens = rng.integers(0, V, size=8)
    mask = (rng.random(8) < 0.6).astype(float)
    mask[rng.integers(8)] = 1.0
    return _policy_case(_policy("nll", seed, "p"), lambda p: nll_loss(p, tokens, mask))


def kd(seed):
    rng = _rng("kd", seed)
    tokens = rng.integers(0, V, size=8)
    mask = (rng.random(8) < 0.6).astype(float)
    mask[rng.integers(8)] = 1.0
    teacher = _policy("kd", seed, "teacher")
    return _policy_case(_policy("kd", seed, "student"), lambda p: kd_loss(p, teacher, tokens, mask))


# reward models -------------------------------------------------------------


def _sequence_rm(name, seed):
    fmap = FeatureMap(V, bigrams=True)
    return LinearRewardModel(fmap, _rng(name, seed + 10_000).normal(0, 0.5, fmap.dim))


def _records(rng, n, prompt_len=2):
    out = []
    for _ in range(n):
        a, b = _distinct_pair(rng)
        out.append(PreferenceRecord(rng.integers(0, V, size=prompt_len), a, b))
    return out


def bt(seed):
    rng = _rng("bt", seed)
    records = _records(rng, 6)
    form = "sigmoid" if seed % 2 == 0 else "logexp"
    return _rm_case(_sequence_rm("bt", seed), lambda rm: bt_loss(rm, records, form))


def bt_margin(seed):
    rng = _rng("bt_margin", seed)
    records = _records(rng, 6)
    margins = rng.uniform(0, 2, size=6)
    return _rm_case(_sequence_rm("bt_margin", seed), lambda rm: bt_margin_loss(rm, records, margins))


def plackett_luce(seed):
    rng = _rng("plackett_luce", seed)
    K = int(rng.integers(3, 6))
    comps = []
    while len(comps) < K:
        c = _seq(rng)
        if all(not (c.shape == d.shape and np.array_equal(c, d)) for d in comps):
            comps.append(c)
    group = RankedGroup(rng.integers(0, V, size=2), comps, list(rng.permutation(K)))
    return _rm_case(_sequence_rm("plackett_luce", seed), lambda rm: plackett_luce_loss(rm, group))


def orm(seed):
    rng = _rng("orm", seed)
    tokens = rng.integers(0, V, size=7)
    labels = rng.integers(0, 2, size=7)
    labels[rng.random(7) < 0.3] = IGNORE
    labels[-1] = rng.integers(0, 2)
    fmap = FeatureMap(V, bigrams=True)
    rm = LinearRewardModel(fmap, rng.normal(0, 0.5, fmap.dim), head_kind="outcome")
    return _rm_case(rm, lambda m: orm_loss(m, tokens, labels))


def prm(seed):
    rng = _rng("prm", seed)
    tokens = rng.integers(0, V, size=8)
    labels = np.full(8, IGNORE)
    boundaries = np.flatnonzero(rng.random(8) < 0.5)
    if boundaries.size == 0:
        boundaries = np.array([7])
    labels[boundaries] = rng.integers(-1, 2, size=boundaries.size)
    fmap = FeatureMap(V, bigrams=True)
    rm = LinearRewardModel(fmap, rng.normal(0, 0.5, 3 * fmap.dim), head_kind="process")
    return _rm_case(rm, lambda m: prm_loss(m, tokens, labels))


# policy gradient -----------------------------------------------------------


def _rollouts(name, seed, G=4, n_prompts=2, offset=0.4):
    """Old policy, a perturbed current policy, reference, and a sampled batch."""
    rng = _rng(name, seed)
    old = _policy(name, seed, "old")
    ref = _policy(name, seed, "ref")
    cur = old.with_params(old.params + rng.normal(0, offset, old.n_params))
    prompts, comps = [], []
    for i in range(n_prompts):
        prompt = rng.integers(0, V, size=2)
        for j in range(G):
            s = sample_completion(old, prompt, 1.0, 5, Seed(seed, f"grad/{name}/roll/{i}/{j}"))
            prompts.append(prompt)
            comps.append(s.completion)
    adv = rng.normal(0, 1, size=len(comps))
    batch = TrajectoryBatch.from_policies(old, ref, prompts, comps, adv, group_size=G)
    return cur, batch


def _token_kink_free(batch, pol, clip):
    lr = (batch.new_logprobs(pol) - batch.old_logprobs)[batch.completion_mask > 0]
    return np.all(np.abs(lr - np.log(clip.low)) > KINK_GAP) and np.all(np.abs(lr - np.log(clip.high)) > KINK_GAP)


def reinforce(seed):
    cur, batch = _rollouts("reinforce", seed)
    agg = ("per_token", "per_sequence", "fixed_length")[seed % 3]
    return _policy_case(cur, lambda p: reinforce_loss(p, batch, agg, L_max=5))


def ppo(seed):
    cur, batch = _rollouts("ppo", seed)
    clip = ClipConfig(0.2, 0.28)
    if not _token_kink_free(batch, cur, clip):
        return None
    agg = ("per_sequence", "per_token", "fixed_length")[seed % 3]
    return _policy_case(cur, lambda p: ppo_loss(p, batch, clip, agg, L_max=5)[:2])


def grpo(seed):
    cur, batch = _rollouts("grpo", seed)
    clip = ClipConfig(0.2, 0.2)
    if not _token_kink_free(batch, cur, clip):
        return None
    est = ("k1", "k2", "k3")[seed % 3]
    return _policy_case(cur, lambda p: grpo_loss(p, batch, clip, beta=0.1, kl_estimator=est)[:2])


def gspo(seed):
    cur, batch = _rollouts("gspo", seed)
    clip = ClipConfig(0.1, 0.1) if seed % 2 else ClipConfig(0.2, 0.2)
    rho = gspo_sequence_ratio(batch.new_logprobs(cur), batch.old_logprobs, batch.completion_mask)
    gap = np.minimum(np.abs(np.log(rho) - np.log(clip.low)), np.abs(np.log(rho) - np.log(clip.high)))
    if np.any(gap < KINK_GAP):
        return None
    return _policy_case(cur, lambda p: gspo_loss(p, batch, clip)[:2])


def cispo(seed):
    cur, batch = _rollouts("cispo", seed)
    clip = ClipConfig(0.2, 0.28)
    # the importance weight carries a stop-gradient, so it is frozen at the evaluation point
    w = cispo_weights(batch.new_logprobs(cur), batch.old_logprobs, clip)
    return _policy_case(cur, lambda p: cispo_loss(p, batch, clip, frozen_weights=w)[:2])


# direct alignment ----------------------------------------------------------


def _dpo_setup(name, seed):
    rng = _rng(name, seed)
    records = _records(rng, 5)
    weights = rng.uniform(0.2, 1.0, size=5) if seed % 2 else None
    batch = DpoBatch(records, beta=float(rng.uniform(0.05, 1.0)), weights=weights)
    return rng, batch, _policy(name, seed, "ref", 0.5), _policy(name, seed, "pi")


def dpo(seed):
    _, batch, ref, pol = _dpo_setup("dpo", seed)
    return _policy_case(pol, lambda p: dpo_loss(p, ref, batch))


def ipo(seed):
    rng, batch, ref, pol = _dpo_setup("ipo", seed)
    tau = float(rng.uniform(0.05, 1.0))
    return _policy_case(pol, lambda p: ipo_loss(p, ref, batch, tau))


def cdpo(seed):
    rng, batch, ref, pol = _dpo_setup("cdpo", seed)
    eps = float(rng.uniform(0.0, 0.45))
    return _policy_case(pol, lambda p: cdpo_loss(p, ref, batch, eps))


def dpo_nll(seed):
    rng, batch, ref, pol = _dpo_setup("dpo_nll", seed)
    alpha = float(rng.uniform(0.1, 2.0))
    return _policy_case(pol, lambda p: dpo_nll_loss(p, ref, batch, alpha))


CASES = {
    "nll": nll,
    "kd": kd,
    "bt": bt,
    "bt_margin": bt_margin,
    "plackett_luce": plackett_luce,
    "orm": orm,
    "prm": prm,
    "reinforce": reinforce,
    "ppo": ppo,
    "grpo": grpo,
    "gspo": gspo,
    "cispo": cispo,
    "dpo": dpo,
    "ipo": ipo,
    "cdpo": cdpo,
    "dpo_nll": dpo_nll,
}


def instances(name, count, max_tries=200):
    """The first ``count`` usable instances of a loss, in seed order."""
    out = []
    for seed in range(max_tries):
        case = CASES[name](seed)
        # an all-flat instance has nothing to compare, so it does not count
        if case is not None and np.linalg.norm(case[2]) > 1e-8:
            out.append(case)
            if len(out) == count:
                return out
    raise RuntimeError(f"only {len(out)} usable {name} instances in {max_tries} seeds")
