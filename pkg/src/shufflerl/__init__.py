"""Deep-RL trading lab: matrix-state portfolio MDP, ticker-block feature
shuffling, and a two-conv + batch-norm policy network trained with PPO."""

__version__ = "0.1.0"

from shufflerl.errors import (
    ConfigError,
    DataError,
    EpisodeDoneError,
    InsufficientHistoryError,
    NonFiniteError,
    ShuffleRlError,
    UndefinedMetricError,
)

__all__ = [
    "__version__",
    "ShuffleRlError",
    "DataError",
    "ConfigError",
    "EpisodeDoneError",
    "InsufficientHistoryError",
    "NonFiniteError",
    "UndefinedMetricError",
]
