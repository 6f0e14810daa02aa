"""One-shot architecture search for compact transformer encoders.

A numpy transformer with independent width hyper-parameters, a weight-sharing
supernet, batch-wise one-shot training, a latency predictor, evolutionary and
rule-based search, and the evaluation tools to check how well supernet
proxies rank architectures.
"""

from .errors import (BoundsError, CheckpointError, ContractError, DimensionError, InfeasibleError,
                     MeasurementError, NumericError, OracleError, PlmSearchError, ValidationError)
from .search import KD, PRETRAIN, EvoParams, SearchSpace
from .supernet import Model, Strategy, SuperNet, build_supernet, extract_submodel, materialize
from .transformer import ArchConfig

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "SearchSpace", "EvoParams", "PRETRAIN", "KD",
    "SuperNet", "Model", "Strategy", "build_supernet", "extract_submodel", "materialize",
    "PlmSearchError", "DimensionError", "NumericError", "ContractError", "ValidationError", "BoundsError",
    "OracleError", "MeasurementError", "InfeasibleError", "CheckpointError",
]
