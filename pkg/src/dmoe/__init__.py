"""Deviated Gaussian mixtures of experts: simulation, EM fitting and Voronoi losses."""

__version__ = "0.1.0"

from .exceptions import DmoeError, InvalidInputError, NumericalError
from .model import Atom, Dataset, DeviatedModel, MixingMeasure, ParameterBox, sample_dataset
from .em_fit import EmConfig, FitResult, InitStrategy, fit_mle
from .voronoi_loss import loss_d1, loss_d2, loss_d3, loss_d4, loss_vanishing, classify_regime
from .metrics import DistanceConfig, hellinger, total_variation
from .estimator import DeviatedMoERegressor

__all__ = [
    "__version__",
    "Atom",
    "Dataset",
    "DeviatedModel",
    "DeviatedMoERegressor",
    "DmoeError",
    "DistanceConfig",
    "EmConfig",
    "FitResult",
    "InitStrategy",
    "InvalidInputError",
    "MixingMeasure",
    "NumericalError",
    "ParameterBox",
    "classify_regime",
    "fit_mle",
    "hellinger",
    "loss_d1",
    "loss_d2",
    "loss_d3",
    "loss_d4",
    "loss_vanishing",
    "sample_dataset",
    "total_variation",
]
