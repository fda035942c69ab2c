"""scikit-learn style wrapper around the EM fit."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .em_fit import EmConfig, InitStrategy, e_step, fit_mle
from .model import Dataset, DeviatedModel, ParameterBox, log_deviated_density
from .validation import as_dataset, as_measure, seed_from, validate_x, validate_xy


class DeviatedMoERegressor(RegressorMixin, BaseEstimator):
    """Deviated Gaussian mixture of experts with a known reference mixture.

    Parameters
    ----------
    g0 : MixingMeasure or dict
        Reference mixture of linear Gaussian experts.
    n_experts : int
        Number of fitted experts ``k``.
    max_iter, tol, n_restarts, weight_floor
        EM settings.
    init : {"data_driven", "random_in_box"}
    sigma_min : float
        Lower bound on fitted variances.
    random_state : int, Generator or None

    Attributes
    ----------
    lambda_ : float
    mixture_ : MixingMeasure
    log_likelihood_ : float
    n_iter_ : int
    converged_ : bool
    """

    def __init__(
        self,
        g0=None,
        n_experts=2,
        max_iter=1000,
        tol=1e-8,
        n_restarts=5,
        weight_floor=1e-3,
        init="data_driven",
        sigma_min=1e-4,
        random_state=None,
    ):
        self.g0 = g0
        self.n_experts = n_experts
        self.max_iter = max_iter
        self.tol = tol
        self.n_restarts = n_restarts
        self.weight_floor = weight_floor
        self.init = init
        self.sigma_min = sigma_min
        self.random_state = random_state

    def _config(self, dim: int) -> EmConfig:
        init = InitStrategy(self.init)
        if init is InitStrategy.PERTURB_TRUTH:
            raise ValueError("perturb_truth needs the true model; use fit_mle directly")
        box = ParameterBox(np.full(dim, -10.0), np.full(dim, 10.0), sigma_low=self.sigma_min)
        return EmConfig(
            k=self.n_experts,
            max_iters=self.max_iter,
            tol=self.tol,
            restarts=self.n_restarts,
            weight_floor=self.weight_floor,
            box=box,
            init=init,
            seed=seed_from(self.random_state),
        )

    def fit(self, X, y):
        data = as_dataset(X, y)
        g0 = as_measure(self.g0, data.dim)
        result = fit_mle(data, g0, self._config(data.dim))
        self.g0_ = g0
        self.lambda_ = result.lambda_hat
        self.mixture_ = result.G_hat
        self.log_likelihood_ = result.log_likelihood
        self.n_iter_ = result.n_iter
        self.converged_ = result.converged
        self.n_features_in_ = data.dim
        return self

    @property
    def model_(self) -> DeviatedModel:
        check_is_fitted(self, "mixture_")
        return DeviatedModel(self.lambda_, self.mixture_, self.g0_)

    def predict(self, X):
        """Conditional mean ``E[Y | X]``."""
        model = self.model_
        X = validate_x(X, self.n_features_in_)
        g0_mean = (X @ model.g0.a.T + model.g0.b) @ model.g0.weights
        mix_mean = (X @ model.mixture.a.T + model.mixture.b) @ model.mixture.weights
        return (1.0 - model.lam) * g0_mean + model.lam * mix_mean

    def score_samples(self, X, y):
        """Per-sample conditional log-density."""
        model = self.model_
        X, y = validate_xy(X, y)
        return log_deviated_density(model, X, y)

    def score(self, X, y, sample_weight=None):
        """Mean conditional log-likelihood (higher is better)."""
        return float(np.average(self.score_samples(X, y), weights=sample_weight))

    def predict_proba(self, X, y):
        """Posterior membership, column 0 for ``g0`` then one per expert."""
        X, y = validate_xy(X, y)
        return e_step(self.model_, Dataset(X, y))
