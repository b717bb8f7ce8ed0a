"""Experiment configuration, training loops and deterministic metrics output."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._validation import InvalidArgumentError, ValidationError
from .advantage import gae, group_advantages, value_loss
from .environments import (
    CartPoleParams,
    CartPoleState,
    PreferenceOracle,
    ThermostatParams,
    ThermostatState,
    VerifiableTask,
    cartpole_force,
    cartpole_step,
    sample_preference,
    thermostat_step,
    verifiable_reward,
)
from .numerics import Seed, kl_estimator_grad, kl_estimator_terms, whiten
from .policy import (
    ENUMERATION_LIMIT,
    BigramPolicy,
    TokenSequence,
    Vocab,
    batch_logprob_grad,
    batch_logprobs,
    enumerate_completions,
    logprob_grad,
    pad_batch,
    sample_completion,
    snapshot,
)
from .policy_gradient import (
    AGGREGATIONS,
    ClipConfig,
    aggregate_loss,
    aggregate_weights,
    cispo_from_logprobs,
    diagnostics,
    gspo_from_logprobs,
    ppo_from_logprobs,
    reinforce_from_logprobs,
)
from .reward_models import FeatureMap, LinearRewardModel, rm_score, train_bt

SEED_ENV_VAR = "RLHF_KERNEL_SEED"
ALGORITHMS = (
    "sft", "rm", "ppo", "grpo", "rloo", "gspo", "cispo", "dpo", "ipo", "cdpo", "dpo_nll",
    "rejection_sampling", "rlvr",
)
RL_ALGORITHMS = ("ppo", "grpo", "rloo", "gspo", "cispo", "rlvr")
DPO_ALGORITHMS = ("dpo", "ipo", "cdpo", "dpo_nll")
PATH_FIELDS = ("preference_path", "sft_path", "corpus_path", "reward_model_path", "policy_path")
MIN_SPLIT = 50


@dataclass
class ExperimentConfig:
    algorithm: str = "grpo"
    vocab_size: int = 5
    eos_id: int = 0
    pad_id: int = 1
    max_len: int = 4
    prompts: list = field(default_factory=lambda: [[]])
    group_size: int = 8
    beta: float = 0.05
    gamma: float = 1.0
    lam: float = 0.95
    eps_low: float = 0.2
    eps_high: float = 0.2
    eps_v: float | None = None
    kl_placement: str = "reward_level"
    kl_estimator: str = "k1"
    aggregation: str = "per_sequence"
    l_max: int | None = None
    learning_rate: float = 0.1
    value_learning_rate: float = 0.5
    steps: int = 50
    gradient_steps_per_batch: int = 1
    whiten_advantages: bool = False
    temperature: float = 1.0
    seed: int = 0
    truncation_penalty: float = -1.0
    policy_init: str = "uniform"
    init_scale: float = 0.5
    reward_model: dict | None = None
    verifiable_task: dict | None = None
    exact_probe: bool = True
    # data paths (resolved relative to the config file)
    preference_path: str | None = None
    sft_path: str | None = None
    corpus_path: str | None = None
    reward_model_path: str | None = None
    policy_path: str | None = None
    # supervised / preference training
    epochs: int = 1
    batch_size: int = 16
    rm_features: dict | None = None
    dpo_tau: float = 0.1
    cdpo_eps: float = 0.1
    dpo_alpha: float = 1.0
    pretrain_gamma: float = 0.0
    # rejection sampling
    n_samples: int = 4
    selection: str = "per_prompt"
    top_k: int | None = None
    dedup: bool = False
    # environment simulation
    env: str = "cartpole"
    env_steps: int = 100
    env_policy: str = "lean"
    initial_state: list | None = None
    cartpole: dict = field(default_factory=dict)
    thermostat: dict = field(default_factory=dict)
    # over-optimization
    overopt_pairs: int = 2000
    overopt_split: str = "disjoint"
    overopt_test_features: str = "full"
    overopt_repeat_weight: float = -2.0
    overopt_rm_epochs: int = 20
    overopt_rm_lr: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def fail(name, msg):
            raise ValidationError(f"{name}: {msg}", field=name)

        if self.algorithm not in ALGORITHMS:
            fail("algorithm", f"must be one of {ALGORITHMS}")
        try:
            Vocab(self.vocab_size, self.eos_id, self.pad_id)
        except InvalidArgumentError as exc:
            fail("vocab_size", str(exc))
        if not isinstance(self.max_len, int) or self.max_len < 1:
            fail("max_len", "must be an integer >= 1")
        if not isinstance(self.prompts, list) or not self.prompts:
            fail("prompts", "must be a nonempty list of token lists")
        for p in self.prompts:
            if not isinstance(p, list) or any((not isinstance(t, int)) or not 0 <= t < self.vocab_size for t in p):
                fail("prompts", "token ids must be integers below vocab_size")
        if not isinstance(self.group_size, int) or self.group_size < 2:
            fail("group_size", "must be an integer >= 2")
        if not (isinstance(self.beta, (int, float)) and self.beta >= 0 and math.isfinite(self.beta)):
            fail("beta", "must be a finite number >= 0")
        for name in ("gamma", "lam"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                fail(name, "must lie in [0, 1]")
        for name in ("eps_low", "eps_high"):
            if not getattr(self, name) > 0:
                fail(name, "must be > 0")
        if self.eps_low >= 1:
            fail("eps_low", "must be < 1")
        if self.eps_v is not None and not self.eps_v > 0:
            fail("eps_v", "must be > 0 or null")
        if self.kl_placement not in ("reward_level", "loss_level"):
            fail("kl_placement", "must be reward_level or loss_level")
        if self.kl_estimator not in ("k1", "k2", "k3"):
            fail("kl_estimator", "must be k1, k2 or k3")
        if self.aggregation not in AGGREGATIONS:
            fail("aggregation", f"must be one of {AGGREGATIONS}")
        if self.aggregation == "fixed_length" and (self.l_max is None or self.l_max < self.max_len):
            fail("l_max", "fixed_length aggregation needs l_max >= max_len")
        if not self.learning_rate >= 0:
            fail("learning_rate", "must be >= 0")
        if not isinstance(self.steps, int) or self.steps < 0:
            fail("steps", "must be an integer >= 0")
        if not isinstance(self.gradient_steps_per_batch, int) or self.gradient_steps_per_batch < 1:
            fail("gradient_steps_per_batch", "must be an integer >= 1")
        if self.temperature < 0:
            fail("temperature", "must be >= 0")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            fail("seed", "must be a 64-bit unsigned integer")
        if not math.isfinite(self.truncation_penalty):
            fail("truncation_penalty", "must be finite")
        if self.policy_init not in ("uniform", "random"):
            fail("policy_init", "must be uniform or random")
        if self.selection not in ("per_prompt", "top_k"):
            fail("selection", "must be per_prompt or top_k")
        if self.env not in ("cartpole", "thermostat"):
            fail("env", "must be cartpole or thermostat")
        if self.env_policy not in ("lean", "alternate", "random", "threshold"):
            fail("env_policy", "must be lean, alternate, random or threshold")
        if not 0.0 <= self.cdpo_eps < 0.5:
            fail("cdpo_eps", "must lie in [0, 0.5)")
        if not self.dpo_tau > 0:
            fail("dpo_tau", "must be > 0")
        if self.dpo_alpha < 0:
            fail("dpo_alpha", "must be >= 0")
        if self.pretrain_gamma < 0:
            fail("pretrain_gamma", "must be >= 0")
        if self.overopt_split not in ("disjoint", "identical"):
            fail("overopt_split", "must be disjoint or identical")
        if self.overopt_test_features not in ("full", "proxy"):
            fail("overopt_test_features", "must be full or proxy")
        if self.verifiable_task is not None:
            for key in ("answer_token", "marker_token"):
                if key not in self.verifiable_task:
                    fail("verifiable_task", f"missing {key!r}")

    # I/O ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object", field="config")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ValidationError(f"{key}: unknown config key", field=key)
        data = dict(data)
        base = Path(base_dir) if base_dir is not None else None
        for key in PATH_FIELDS:
            if data.get(key) is not None:
                path = Path(data[key])
                if base is not None and not path.is_absolute():
                    path = base / path
                if not path.exists():
                    raise ValidationError(f"{key}: file not found: {path}", field=key)
                data[key] = str(path)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ValidationError(str(exc), field="config") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size, self.eos_id, self.pad_id)

    def clip(self) -> ClipConfig:
        return ClipConfig(self.eps_low, self.eps_high)

    def root_seed(self) -> Seed:
        return Seed(self.seed, "run")


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    """Read a JSON config; precedence for the seed is CLI override, then env var, then file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {path}", field="config") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc.msg}", field="config") from exc
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object", field="config")
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ValidationError(f"{SEED_ENV_VAR} must be an integer", field="seed") from exc
    if seed_override is not None:
        data["seed"] = int(seed_override)
    return ExperimentConfig.from_dict(data, path.parent)


# metrics ------------------------------------------------------------------------


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.12g}"


def metrics_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = list(rows[0].keys()) if rows else ["step"]
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(format_value(row.get(c)) for c in columns))
    return "\n".join(lines) + "\n"


def write_metrics_csv(rows: list[dict], path, columns: list[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv(rows, columns))


# exact outcome space ------------------------------------------------------------


class OutcomeSpace:
    """Every outcome (eos-terminated or truncated) for one prompt, laid out for vector math."""

    def __init__(self, vocab: Vocab, prompt, max_len: int):
        ref = BigramPolicy.uniform(vocab)
        pairs = enumerate_completions(ref, prompt, max_len, expand_truncated=True)
        self.prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
        self.sequences: list[TokenSequence] = [s for s, _ in pairs]
        rows, targets, ids = [], [], []
        for k, s in enumerate(self.sequences):
            rows.append(ref.context_rows(self.prompt, s.completion))
            targets.append(s.completion)
            ids.append(np.full(s.completion.size, k))
        self.rows = np.concatenate(rows)
        self.targets = np.concatenate(targets)
        self.seq_ids = np.concatenate(ids)
        self.truncated = np.array([s.truncated for s in self.sequences])

    def __len__(self):
        return len(self.sequences)

    def log_probs(self, policy: BigramPolicy) -> np.ndarray:
        lp = policy.row_log_probs()[self.rows, self.targets]
        return np.bincount(self.seq_ids, weights=lp, minlength=len(self))

    def probs(self, policy: BigramPolicy) -> np.ndarray:
        return np.exp(self.log_probs(policy))

    def score_grad(self, policy: BigramPolicy, coef) -> np.ndarray:
        """Gradient of sum_y coef[y] * log pi(y)."""
        return logprob_grad(policy, self.rows, self.targets, np.asarray(coef, dtype=float)[self.seq_ids])

    def rewards(self, scorer, truncation_penalty: float) -> np.ndarray:
        return np.array([gated_reward(s, scorer, truncation_penalty) for s in self.sequences])


def exact_kl(p, q) -> float:
    support = p > 0
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


# rewards ----------------------------------------------------------------------------


def gated_reward(seq: TokenSequence, scorer, truncation_penalty: float) -> float:
    """Score only eos-terminated completions; every truncated one gets the penalty instead."""
    if seq.truncated:
        return float(truncation_penalty)
    return float(scorer(seq))


def build_scorer(config: ExperimentConfig):
    """Reward callable on TokenSequence from the configured RM or verifiable task."""
    if config.algorithm == "rlvr" or config.verifiable_task is not None:
        if config.verifiable_task is None:
            raise ValidationError("verifiable_task: required for rlvr", field="verifiable_task")
        vt = config.verifiable_task
        task = VerifiableTask(tuple(vt.get("prompt", [])), int(vt["answer_token"]), int(vt["marker_token"]),
                              config.vocab_size)
        return lambda s: verifiable_reward(task, s.completion)
    rm = load_reward_model(config)
    return lambda s: rm_score(rm, s.prompt, s.completion)


def load_reward_model(config: ExperimentConfig) -> LinearRewardModel:
    if config.reward_model is not None:
        data = config.reward_model
    elif config.reward_model_path is not None:
        data = json.loads(Path(config.reward_model_path).read_text(encoding="utf-8"))
    else:
        raise ValidationError("reward_model: a reward model or reward_model_path is required", field="reward_model")
    try:
        rm = LinearRewardModel.from_dict(data)
    except (KeyError, TypeError, InvalidArgumentError) as exc:
        raise ValidationError(f"reward_model: {exc}", field="reward_model") from exc
    if rm.features.vocab_size != config.vocab_size:
        raise ValidationError("reward_model: vocab size differs from config", field="reward_model")
    return rm


def initial_policy(config: ExperimentConfig) -> BigramPolicy:
    if config.policy_path is not None:
        policy = BigramPolicy.from_json(Path(config.policy_path).read_text(encoding="utf-8"))
        if policy.vocab != config.vocab():
            raise ValidationError("policy_path: vocabulary differs from config", field="policy_path")
        return policy
    if config.policy_init == "random":
        return BigramPolicy.random(config.vocab(), config.root_seed().child("init"), config.init_scale)
    return BigramPolicy.uniform(config.vocab())


def read_corpus_jsonl(path) -> list[np.ndarray]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(np.asarray(json.loads(line)["tokens"], dtype=np.int64))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"corpus line {lineno}: expected {{\"tokens\": [ids]}}", field="corpus_path") from exc
    if not out:
        raise ValidationError("corpus is empty", field="corpus_path")
    return out


def corpus_logprob(policy: BigramPolicy, corpus) -> tuple[float, np.ndarray]:
    """Mean per-token log-prob over corpus streams (scored from BOS) and its gradient."""
    rows = np.concatenate([policy.stream_rows(t) for t in corpus])
    tgts = np.concatenate(corpus)
    n = tgts.size
    value = float(policy.row_log_probs()[rows, tgts].sum() / n)
    return value, logprob_grad(policy, rows, tgts, np.full(n, 1.0 / n))


# RL loop ------------------------------------------------------------------------------


class TabularCritic:
    """V(s) indexed by the policy's context row (the bigram Markov state)."""

    def __init__(self, n_rows: int):
        self.table = np.zeros(n_rows)

    def values(self, rows_grid, mask) -> np.ndarray:
        return self.table[rows_grid] * mask


def _rows_grid(policy, prompts, completions, L):
    grid = np.zeros((len(completions), L), dtype=np.int64)
    for i, (p, c) in enumerate(zip(prompts, completions)):
        grid[i, : c.size] = policy.context_rows(p, c)
    return grid


def run_rlhf(config: ExperimentConfig, scorer=None, corpus=None, policy: BigramPolicy | None = None):
    """sample -> score (eos-gated) -> advantage -> policy-gradient step, once per config step.

    Returns ``(rows, policy)`` where ``rows`` are metrics dicts, one per step, measured on
    the rollout policy before its update. With ``corpus`` and ``config.pretrain_gamma > 0``
    the objective gains ``pretrain_gamma * mean corpus log-prob``.
    """
    if config.algorithm not in RL_ALGORITHMS:
        raise ValidationError(f"algorithm: train-rl supports {RL_ALGORITHMS}", field="algorithm")
    scorer = build_scorer(config) if scorer is None else scorer
    policy = initial_policy(config) if policy is None else policy
    ref = snapshot(policy)
    vocab = config.vocab()
    root = config.root_seed()
    clip = config.clip()
    G = config.group_size
    prompts = [np.asarray(p, dtype=np.int64) for p in config.prompts]
    critic = TabularCritic(vocab.size + 1) if config.algorithm == "ppo" else None
    spaces = None
    if config.exact_probe and vocab.size**config.max_len <= ENUMERATION_LIMIT // 10:
        spaces = [OutcomeSpace(vocab, p, config.max_len) for p in prompts]
        space_rewards = [sp.rewards(scorer, config.truncation_penalty) for sp in spaces]
    mix = corpus is not None and config.pretrain_gamma > 0

    rows = []
    for step in range(config.steps):
        old = snapshot(policy)
        batch_prompts, completions, seqs = [], [], []
        for i, p in enumerate(prompts):
            for g in range(G):
                s = sample_completion(old, p, config.temperature, config.max_len, root.child("step", step, i, g))
                seqs.append(s)
                batch_prompts.append(p)
                completions.append(s.completion)
        B = len(seqs)
        _, mask = pad_batch(completions, 0, config.max_len)
        L = config.max_len
        old_lp = batch_logprobs(old, batch_prompts, completions, L)
        ref_lp = batch_logprobs(ref, batch_prompts, completions, L)
        seq_reward = np.array([gated_reward(s, scorer, config.truncation_penalty) for s in seqs])
        token_kl = (old_lp - ref_lp) * mask  # k1 terms on the sampled tokens
        seq_kl = token_kl.sum(axis=1)
        lengths = mask.sum(axis=1).astype(int)

        # advantages
        beta_r = config.beta if config.kl_placement == "reward_level" else 0.0
        if config.algorithm == "ppo":
            grid = np.zeros((B, L))
            grid[np.arange(B), lengths - 1] = seq_reward
            grid = (grid - beta_r * token_kl) * mask
            done = np.zeros((B, L))
            done[np.arange(B), lengths - 1] = 1.0
            rgrid = _rows_grid(old, batch_prompts, completions, L)
            values = critic.values(rgrid, mask)
            adv, targets = gae(grid, values, done, config.gamma, config.lam)
            adv = adv * mask
            _, v_grad, _ = value_loss(values, values, targets * mask, mask, config.eps_v)
            critic_update = np.zeros_like(critic.table)
            np.add.at(critic_update, rgrid[mask > 0], v_grad[mask > 0])
        else:
            shaped = seq_reward - beta_r * seq_kl
            estimator = {"rloo": "rloo", "grpo": "grpo", "rlvr": "grpo", "gspo": "grpo", "cispo": "grpo"}[
                config.algorithm
            ]
            seq_adv = group_advantages(shaped, G, estimator)
            adv = np.repeat(seq_adv[:, None], L, axis=1) * mask
        if config.whiten_advantages:
            adv = whiten(adv, mask) if mask.sum() >= 2 else adv

        # policy update(s); old log-probs stay fixed across inner steps
        for inner in range(config.gradient_steps_per_batch):
            new_lp = batch_logprobs(policy, batch_prompts, completions, L)
            alg = config.algorithm
            if alg == "rloo":
                loss, d_new, _ = reinforce_from_logprobs(new_lp, adv, mask, config.aggregation, config.l_max)
                diag = diagnostics(new_lp, old_lp, adv, mask, clip)
            elif alg == "gspo":
                loss, d_new, diag = gspo_from_logprobs(new_lp, old_lp, adv[:, 0], mask, clip)
            elif alg == "cispo":
                loss, d_new, diag = cispo_from_logprobs(new_lp, old_lp, adv, mask, clip)
            else:
                loss, d_new, diag = ppo_from_logprobs(new_lp, old_lp, adv, mask, clip, config.aggregation,
                                                      config.l_max)
            if config.kl_placement == "loss_level" and config.beta > 0:
                lr_ = new_lp - ref_lp
                kl_terms = kl_estimator_terms(lr_, config.kl_estimator)
                loss += config.beta * aggregate_loss(kl_terms, mask, config.aggregation, config.l_max)
                w = aggregate_weights(mask, config.aggregation, config.l_max)
                d_new = d_new + config.beta * w * kl_estimator_grad(lr_, config.kl_estimator)
            grad = batch_logprob_grad(policy, batch_prompts, completions, d_new)
            if mix:
                corpus_lp, corpus_grad = corpus_logprob(policy, corpus)
                loss -= config.pretrain_gamma * corpus_lp
                grad = grad - config.pretrain_gamma * corpus_grad
            if inner == 0:
                first_loss, first_diag = loss, diag
            policy.update(-config.learning_rate * grad)
        if critic is not None:
            critic.table -= config.value_learning_rate * critic_update

        mean_reward = float(seq_reward.mean())
        kl_to_ref = float(seq_kl.mean())
        row = {
            "step": step,
            "loss": first_loss,
            "objective": mean_reward - config.beta * kl_to_ref,
            "mean_reward": mean_reward,
            "kl_to_ref": kl_to_ref,
            "clip_fraction": first_diag["clip_fraction"],
            "approx_kl": first_diag["approx_kl"],
        }
        if spaces is not None:
            exp_r, exp_kl = 0.0, 0.0
            for sp, r in zip(spaces, space_rewards):
                p = sp.probs(old)
                exp_r += float(p @ r) / len(spaces)
                exp_kl += exact_kl(p, sp.probs(ref)) / len(spaces)
            row["expected_reward"] = exp_r
            row["exact_kl"] = exp_kl
        if corpus is not None:
            row["corpus_nll"] = -corpus_logprob(old, corpus)[0]
        rows.append(row)
    return rows, policy


def run_pretrain_mix(config: ExperimentConfig, scorer=None, corpus=None):
    """run_rlhf with the pretraining log-likelihood term mixed into every step."""
    if corpus is None:
        if config.corpus_path is None:
            raise ValidationError("corpus_path: required for pretraining mix", field="corpus_path")
        corpus = read_corpus_jsonl(config.corpus_path)
    return run_rlhf(config, scorer=scorer, corpus=corpus)


# over-optimization ----------------------------------------------------------------------


def latent_reward_model(config: ExperimentConfig, seed: Seed) -> LinearRewardModel:
    """Token-count rewards plus a penalized hidden 'repeats' feature (adjacent identical tokens)."""
    V = config.vocab_size
    fmap = FeatureMap(V, repeats=True, length=False, bias=True)
    w = np.zeros(fmap.dim)
    content = [t for t in range(V) if t not in (config.eos_id, config.pad_id)]
    w[content] = seed.child("latent").rng().uniform(0.3, 1.0, size=len(content))
    w[V] = config.overopt_repeat_weight
    return LinearRewardModel(fmap, w)


def _terminated_pairs(ref: BigramPolicy, config: ExperimentConfig, n_pairs: int, seed: Seed):
    prompt = np.asarray(config.prompts[0], dtype=np.int64)
    pairs = []
    k = 0
    while len(pairs) < n_pairs:
        a = sample_completion(ref, prompt, 1.0, config.max_len, seed.child("pair", k, 0))
        b = sample_completion(ref, prompt, 1.0, config.max_len, seed.child("pair", k, 1))
        k += 1
        if a.truncated or b.truncated or np.array_equal(a.completion, b.completion):
            continue
        pairs.append((prompt, a.completion, b.completion, k))
    return pairs


def run_overoptimization(config: ExperimentConfig):
    """Train/test reward models on split preference data, then optimize the policy on the train RM.

    Policy optimization is exact gradient ascent on E_pi[train RM] - beta * KL over the
    enumerated outcome space, so every logged quantity is an exact expectation.
    Returns ``(rows, policy, train_rm, test_rm)``; rows carry step, train_rm, test_rm, kl.
    """
    n = config.overopt_pairs
    if n < 2 * MIN_SPLIT:
        raise ValidationError(f"overopt_pairs: need at least {2 * MIN_SPLIT} pairs", field="overopt_pairs")
    root = config.root_seed().child("overopt")
    vocab = config.vocab()
    ref = initial_policy(config)
    ref = snapshot(ref)
    latent = latent_reward_model(config, root)
    oracle = PreferenceOracle(latent)
    pairs = _terminated_pairs(ref, config, n, root)
    records = [sample_preference(oracle, p, a, b, root.child("label", k)) for p, a, b, k in pairs]
    half = n // 2
    train_data = records[:half]
    test_data = records[:half] if config.overopt_split == "identical" else records[half : 2 * half]

    V = config.vocab_size
    proxy = FeatureMap(V, repeats=False, length=False, bias=True)
    full = FeatureMap(V, repeats=True, length=False, bias=True)
    test_map = full if config.overopt_test_features == "full" else proxy
    train_rm, _ = train_bt(LinearRewardModel(proxy), train_data, config.overopt_rm_lr, config.overopt_rm_epochs,
                           config.batch_size, root.child("train_rm"))
    test_rm, _ = train_bt(LinearRewardModel(test_map), test_data, config.overopt_rm_lr, config.overopt_rm_epochs,
                          config.batch_size, root.child("test_rm"))

    space = OutcomeSpace(vocab, config.prompts[0], config.max_len)
    penalty = config.truncation_penalty
    r_train = space.rewards(lambda s: rm_score(train_rm, s.prompt, s.completion), penalty)
    r_test = space.rewards(lambda s: rm_score(test_rm, s.prompt, s.completion), penalty)
    ref_lp = space.log_probs(ref)
    policy = BigramPolicy(vocab, ref.init_logits, ref.trans_logits)

    rows = []
    for step in range(config.steps + 1):
        lp = space.log_probs(policy)
        p = np.exp(lp)
        rows.append({
            "step": step,
            "train_rm": float(p @ r_train),
            "test_rm": float(p @ r_test),
            "kl": exact_kl(p, np.exp(ref_lp)),
        })
        if step == config.steps:
            break
        shaped = r_train - config.beta * (lp - ref_lp)
        coef = p * (shaped - p @ shaped)
        policy.update(config.learning_rate * space.score_grad(policy, coef))
    return rows, policy, train_rm, test_rm


def curve_shape_ok(rows) -> bool:
    """Test-RM maximum strictly before the final step, train-RM final value its maximum."""
    train = np.array([r["train_rm"] for r in rows])
    test = np.array([r["test_rm"] for r in rows])
    return int(np.argmax(test)) < len(test) - 1 and train[-1] >= train.max()


# environment simulation ----------------------------------------------------------------


def simulate_env(config: ExperimentConfig) -> tuple[list[dict], dict]:
    """Roll a fixed control rule through the configured environment; returns (rows, final model)."""
    seed = config.root_seed().child("env")
    rows = []
    if config.env == "cartpole":
        params = CartPoleParams(**config.cartpole)
        state = CartPoleState(*(config.initial_state or [0.0, 0.0, 0.05, 0.0]))
        rng = seed.rng()
        for t in range(config.env_steps):
            if config.env_policy == "lean":
                action = 1 if state.theta + 0.5 * state.theta_dot > 0 else 0
            elif config.env_policy == "alternate":
                action = t % 2
            else:
                action = int(rng.random() < 0.5)
            force = cartpole_force(action, params)
            nxt, reward, done = cartpole_step(state, force, params)
            rows.append({
                "step": t, "x": state.x, "x_dot": state.x_dot, "theta": state.theta,
                "theta_dot": state.theta_dot, "action": action, "force": force,
                "next_x": nxt.x, "next_x_dot": nxt.x_dot, "next_theta": nxt.theta,
                "next_theta_dot": nxt.theta_dot, "reward": reward, "done": done,
            })
            state = nxt
            if done:
                break
        model = {"env": "cartpole", "params": asdict(params), "final_state": list(state.as_tuple())}
    else:
        params = ThermostatParams(**config.thermostat)
        state = ThermostatState(float((config.initial_state or [65.0])[0]))
        rng = seed.rng()
        for t in range(config.env_steps):
            if config.env_policy in ("threshold", "lean"):
                action = "on" if state.temperature < 70.0 else "off"
            elif config.env_policy == "alternate":
                action = "on" if t % 2 == 0 else "off"
            else:
                action = "on" if rng.random() < 0.5 else "off"
            nxt, reward = thermostat_step(state, action, params, seed.child("noise", t))
            rows.append({"step": t, "temperature": state.temperature, "action": action,
                         "next_temperature": nxt.temperature, "reward": reward})
            state = nxt
        model = {"env": "thermostat", "params": asdict(params), "final_state": [state.temperature]}
    return rows, model
