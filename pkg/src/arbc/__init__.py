"""Agnostic behavior cloning for autoregressive sequence models."""
from .core import (
    AutoregressiveMdp,
    Dataset,
    RewardFunction,
    SeqDistribution,
    Trajectory,
    exact_seq_distribution,
    hellinger_squared,
    sample_dataset,
    tv_distance,
    worst_case_regret,
)
from .errors import ArbcError

__version__ = "0.1.0"
