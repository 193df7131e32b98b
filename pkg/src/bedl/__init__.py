"""Moment-matched Bayesian neural nets with evidential heads, trained by
empirical Bayes with an optional PAC-derived complexity penalty."""

from .layers import (
    GaussianActivation,
    LayerSpec,
    MomentNetwork,
    WeightDistribution,
    build_network,
)
from .objectives import (
    ClassificationHeadConfig,
    HyperpriorConfig,
    ObjectiveReport,
    PacConfig,
    RegressionHeadConfig,
)
from .tensor import NumericsError, Parameter, Tensor
from .train import TrainConfig, evaluate, train

__all__ = [
    "ClassificationHeadConfig",
    "GaussianActivation",
    "HyperpriorConfig",
    "LayerSpec",
    "MomentNetwork",
    "NumericsError",
    "ObjectiveReport",
    "PacConfig",
    "Parameter",
    "RegressionHeadConfig",
    "Tensor",
    "TrainConfig",
    "WeightDistribution",
    "build_network",
    "evaluate",
    "train",
]
