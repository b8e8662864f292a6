"""motionmix: desk-scale multimodal trajectory prediction.

Sparse scene encoding with gated context fusion, anchor-based Gaussian-mixture
trajectory decoding, bagged ensemble training, EM mode aggregation, and a
benchmark metric suite — all on a small self-contained reverse-mode autodiff
core.
"""

from .aggregation import ModePool, aggregate, em_iterate, greedy_init, pool_union
from .autodiff import Value, backward
from .data_io import (
    SyntheticConfig,
    generate_dataset,
    generate_synthetic,
    load_dataset,
    load_predictions,
    load_scenario,
    save_predictions,
    save_scenario,
)
from .errors import (
    DimensionError,
    DomainError,
    MotionMixError,
    NumericError,
    ParseError,
    ValidationError,
)
from .metrics import (
    MetricsReport,
    classify_bucket,
    evaluate_cases,
    m_ap,
    min_ade,
    min_de,
    miss_rate,
    overlap_rate,
    tri_check,
)
from .model import ModelConfig, PredictionModel
from .params import ParamBundle, load_checkpoint, save_checkpoint
from .predictor import GaussianMixtureTrajectory, integrate_controls
from .scene import AgentTrack, Polyline, Scenario, to_agent_frame, validate_scenario
from .trainer import TrainConfig, kmeans_anchors, prepare_examples, train

__version__ = "0.1.0"

__all__ = [
    "AgentTrack",
    "DimensionError",
    "DomainError",
    "GaussianMixtureTrajectory",
    "MetricsReport",
    "ModePool",
    "ModelConfig",
    "MotionMixError",
    "NumericError",
    "ParamBundle",
    "ParseError",
    "Polyline",
    "PredictionModel",
    "Scenario",
    "SyntheticConfig",
    "TrainConfig",
    "ValidationError",
    "Value",
    "aggregate",
    "backward",
    "classify_bucket",
    "em_iterate",
    "evaluate_cases",
    "generate_dataset",
    "generate_synthetic",
    "greedy_init",
    "integrate_controls",
    "kmeans_anchors",
    "load_checkpoint",
    "load_dataset",
    "load_predictions",
    "load_scenario",
    "m_ap",
    "min_ade",
    "min_de",
    "miss_rate",
    "overlap_rate",
    "pool_union",
    "prepare_examples",
    "save_checkpoint",
    "save_predictions",
    "save_scenario",
    "to_agent_frame",
    "tri_check",
    "train",
    "validate_scenario",
]
