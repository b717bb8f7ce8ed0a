"""Exceptions and small input-checking helpers shared across the package."""

from __future__ import annotations

import numpy as np


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class CapacityError(RuntimeError):
    """An exhaustive computation would exceed its size guard."""


class ValidationError(ValueError):
    """Structured input (conversation, dataset, config) is malformed.

    ``field`` names the offending field when there is one.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class InfiniteDivergenceError(ArithmeticError):
    """KL(p || q) is infinite because q has zero mass where p does not."""


def check_finite(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} must be finite")
    return arr


def check_prob_vector(p, name: str = "p", atol: float = 1e-12) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidArgumentError(f"{name} must be a non-empty 1-d vector")
    if np.any(arr < 0) or abs(arr.sum() - 1.0) > max(atol, 1e-12 * arr.size):
        raise InvalidArgumentError(f"{name} must be nonnegative and sum to 1")
    return arr


def check_mask(mask, shape, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask, dtype=float)
    if arr.shape != tuple(shape):
        raise InvalidArgumentError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidArgumentError(f"{name} must be binary")
    return arr


def check_same_shape(*arrays, names=None) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) > 1:
        label = ", ".join(names) if names else "inputs"
        raise InvalidArgumentError(f"shape mismatch among {label}: {sorted(shapes)}")


def check_unit_interval(value: float, name: str) -> float:
    if not 0.0 <= value <= 1.0:
        raise InvalidArgumentError(f"{name} must lie in [0, 1], got {value}")
    return float(value)
