"""Implicit and explicit stochastic gradient descent for statistical estimation."""

__version__ = "0.1.0"

from .asymptotics import (  # noqa: E402
    AsympVariance,
    FisherInfo,
    adagrad_variance,
    averaged_variance,
    mest_variance,
    optimal_gamma1,
    stability_max_gain,
    sgd_variance,
    theorem2_variance,
)
from .cox import cox_fit  # noqa: E402
from .data import Dataset, SurvivalDataset  # noqa: E402
from .engine import FitResult, LearningRate, SgdConfig, fit  # noqa: E402
from .models import huber, logistic, normal, poisson, squared  # noqa: E402

__all__ = [
    "AsympVariance", "FisherInfo", "adagrad_variance", "averaged_variance", "mest_variance",
    "optimal_gamma1", "stability_max_gain", "sgd_variance", "theorem2_variance", "cox_fit", "Dataset",
    "SurvivalDataset", "FitResult", "LearningRate", "SgdConfig", "fit", "huber", "logistic",
    "normal", "poisson", "squared",
]
