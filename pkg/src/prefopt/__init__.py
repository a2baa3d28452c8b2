"""Desk-scale laboratory for preference-optimisation objectives on toy
autoregressive policies, with exact oracles for every quantity that can be
enumerated."""

from .errors import (
    CapacityError,
    ConfigError,
    GenerationError,
    InvalidInputError,
    NumericError,
    PrefOptError,
    SupportError,
    TrainingError,
    ZeroProbabilityError,
)
from .losses import OBJECTIVES, LossSpec
from .prefdata import LatentReward, PreferenceDataset, PreferenceExample, gen_dataset
from .seqmodel import LogBilinearPolicy, TabularPolicy
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "GenerationError", "InvalidInputError", "NumericError",
    "PrefOptError", "SupportError", "TrainingError", "ZeroProbabilityError",
    "OBJECTIVES", "LossSpec", "LatentReward", "PreferenceDataset", "PreferenceExample",
    "gen_dataset", "LogBilinearPolicy", "TabularPolicy", "TrainConfig", "train",
]
