"""Softmax family, KL divergences, whitening, seeding and the finite-difference oracle.

Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._validation import (
    InfiniteDivergenceError,
    InvalidArgumentError,
    check_finite,
    check_prob_vector,
)

# Guard shared by whitening and the GRPO std denominator.
STD_EPS = 1e-4


@dataclass(frozen=True)
class Seed:
    """Root seed plus a stream label; each (root, stream) pair is an independent stream."""

    root: int
    stream: str = "main"

    def __post_init__(self):
        if not 0 <= int(self.root) < 2**64:
            raise InvalidArgumentError("Seed.root must be a 64-bit unsigned integer")

    def child(self, *labels) -> "Seed":
        suffix = "/".join(str(label) for label in labels)
        return Seed(self.root, f"{self.stream}/{suffix}")

    def key(self) -> int:
        digest = hashlib.blake2b(
            f"{int(self.root)}|{self.stream}".encode(), digest_size=16
        ).digest()
        return int.from_bytes(digest, "little")

    def rng(self) -> np.random.Generator:
        # Philox is counter-based, so draws depend only on (key, draw index).
        return np.random.Generator(np.random.Philox(key=self.key()))


def log_softmax(logits) -> np.ndarray:
    """Log-probabilities along the last axis, computed with max subtraction."""
    z = check_finite(logits, "logits")
    if z.size == 0 or z.shape[-1] == 0:
        raise InvalidArgumentError("logits must have length >= 1")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow for large |x|."""
    x = np.asarray(x, dtype=float)
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def kl_categorical(p, q) -> float:
    """Exact KL(p || q) over a shared finite support; 0 log 0 counts as 0."""
    p = check_prob_vector(p, "p", atol=1e-9)
    q = check_prob_vector(q, "q", atol=1e-9)
    if p.shape != q.shape:
        raise InvalidArgumentError("p and q must share a support")
    support = p > 0
    if np.any(q[support] == 0):
        raise InfiniteDivergenceError("q(x) = 0 where p(x) > 0")
    terms = p[support] * (np.log(p[support]) - np.log(q[support]))
    # ascending-index summation keeps the result bit-stable
    total = 0.0
    for t in terms:
        total += t
    return max(total, 0.0)


def kl_estimator_terms(log_ratios, variant: str = "k1") -> np.ndarray:
    """Per-sample KL estimator terms for log_ratios = log p(x) - log q(x), x ~ p."""
    lr = np.asarray(log_ratios, dtype=float)
    if variant == "k1":
        return lr.copy()
    if variant == "k2":
        return 0.5 * lr**2
    if variant == "k3":
        return np.expm1(-lr) + lr
    raise InvalidArgumentError(f"unknown KL estimator {variant!r}")


def kl_estimator_grad(log_ratios, variant: str = "k1") -> np.ndarray:
    """Derivative of each estimator term with respect to log p."""
    lr = np.asarray(log_ratios, dtype=float)
    if variant == "k1":
        return np.ones_like(lr)
    if variant == "k2":
        return lr.copy()
    if variant == "k3":
        return 1.0 - np.exp(-lr)
    raise InvalidArgumentError(f"unknown KL estimator {variant!r}")


def kl_mc_estimate(log_ratios, variant: str = "k1") -> float:
    lr = np.asarray(log_ratios, dtype=float).ravel()
    if lr.size == 0:
        raise InvalidArgumentError("empty sample")
    return float(kl_estimator_terms(lr, variant).mean())


def whiten(values, mask=None, eps: float = STD_EPS) -> np.ndarray:
    """Standardize the masked entries (sample std); unmasked entries become 0.

    If the masked variance is at most ``eps`` the masked entries are returned as zeros.
    """
    v = check_finite(values, "values")
    m = np.ones_like(v) if mask is None else np.asarray(mask, dtype=float)
    if m.shape != v.shape:
        raise InvalidArgumentError("values and mask must have the same shape")
    sel = m.astype(bool)
    n = int(sel.sum())
    if n < 2:
        raise InvalidArgumentError("whiten needs at least 2 selected entries")
    kept = v[sel]
    mu = kept.mean()
    var = ((kept - mu) ** 2).sum() / (n - 1)
    out = np.zeros_like(v)
    if var > eps:
        out[sel] = (kept - mu) / np.sqrt(var)
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"f is not finite near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    """Norm-wise relative error of ``a`` against reference ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(b), np.linalg.norm(a), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())
