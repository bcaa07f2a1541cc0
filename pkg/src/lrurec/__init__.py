"""Linear recurrent unit sequential recommender in NumPy."""

from .data import SplitDataset, build_split, filter_min_interactions, read_interactions
from .estimator import LRURecommender, check_sequences
from .evaluate import MetricResult, evaluate
from .lru import LruParams, init_lru, lambda_of, lru_forward, lru_forward_sequential
from .model import (
    ModelParams,
    init_model,
    init_session,
    load_checkpoint,
    model_forward,
    model_step,
    save_checkpoint,
)
from .train import TrainConfig, TrainReport, train

__all__ = [
    "LRURecommender",
    "LruParams",
    "MetricResult",
    "ModelParams",
    "SplitDataset",
    "TrainConfig",
    "TrainReport",
    "build_split",
    "check_sequences",
    "evaluate",
    "filter_min_interactions",
    "init_lru",
    "init_model",
    "init_session",
    "lambda_of",
    "load_checkpoint",
    "lru_forward",
    "lru_forward_sequential",
    "model_forward",
    "model_step",
    "read_interactions",
    "save_checkpoint",
    "train",
]
__version__ = "0.1.0"
