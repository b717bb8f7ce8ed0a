"""Desk-scale RLHF algorithms on an enumerable bigram policy."""

from ._validation import (
    CapacityError,
    InfiniteDivergenceError,
    InvalidArgumentError,
    ValidationError,
)
from .numerics import Seed
from .policy import BigramPolicy, TokenSequence, Vocab
from .reward_models import FeatureMap, LinearRewardModel, PreferenceRecord, RankedGroup
from .policy_gradient import ClipConfig, TrajectoryBatch
from .harness import ExperimentConfig

__all__ = [
    "BigramPolicy",
    "CapacityError",
    "ClipConfig",
    "ExperimentConfig",
    "FeatureMap",
    "InfiniteDivergenceError",
    "InvalidArgumentError",
    "LinearRewardModel",
    "PreferenceRecord",
    "RankedGroup",
    "Seed",
    "TokenSequence",
    "TrajectoryBatch",
    "ValidationError",
    "Vocab",
]
__version__ = "0.1.0"
