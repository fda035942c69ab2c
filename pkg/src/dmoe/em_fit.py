"""Maximum likelihood fitting of the deviated model by EM.

The reference density ``g0`` is known, so the likelihood is that of a
``(k + 1)``-component mixture whose component 0 is frozen. The E-step yields
responsibilities ``(n, k + 1)``; the M-step updates the proportion ``lam``,
the mixture weights (with a floor), and each expert by weighted least squares.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import FitFailureError, InvalidInputError, NumericalDegeneracyError
from .model import (
    Dataset,
    DeviatedModel,
    MixingMeasure,
    ParameterBox,
    log_likelihood,
    weighted_log_components,
)

logger = logging.getLogger(__name__)

RIDGE_JITTER = 1e-8
MIN_CELL_MASS = 1e-12


class InitStrategy(str, Enum):
    RANDOM_IN_BOX = "random_in_box"
    PERTURB_TRUTH = "perturb_truth"
    DATA_DRIVEN = "data_driven"


@dataclass(frozen=True)
class EmConfig:
    """Settings for :func:`fit_mle`.

    ``truth`` is only consulted by the ``perturb_truth`` initialisation and is
    a ``(lam, MixingMeasure)`` pair.
    """

    k: int = 2
    max_iters: int = 1000
    tol: float = 1e-8
    restarts: int = 10
    weight_floor: float = 1e-3
    box: Optional[ParameterBox] = None
    init: InitStrategy = InitStrategy.DATA_DRIVEN
    init_scale: float = 0.5
    truth: Optional[Tuple[float, MixingMeasure]] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "init", InitStrategy(self.init))
        if self.k < 1:
            raise InvalidInputError("k must be at least 1")
        if not (0.0 < self.weight_floor < 1.0 / self.k):
            raise InvalidInputError("weight floor must lie in (0, 1/k)")
        if self.max_iters < 0:
            raise InvalidInputError("max_iters must be nonnegative")
        if self.restarts < 1:
            raise InvalidInputError("restarts must be at least 1")
        if self.tol <= 0:
            raise InvalidInputError("tol must be positive")
        if self.init is InitStrategy.PERTURB_TRUTH and self.truth is None:
            raise InvalidInputError("perturb_truth initialisation needs a truth")

    def box_for(self, dim: int) -> ParameterBox:
        box = self.box or ParameterBox.default(dim)
        if box.dim != dim:
            raise InvalidInputError("parameter box dimension does not match the data")
        return box

    def to_dict(self) -> dict:
        doc = {
            "k": self.k,
            "max_iters": self.max_iters,
            "tol": self.tol,
            "restarts": self.restarts,
            "weight_floor": self.weight_floor,
            "box": None if self.box is None else self.box.to_dict(),
            "init": self.init.value,
            "init_scale": self.init_scale,
            "seed": self.seed,
        }
        if self.truth is not None:
            doc["truth"] = {"lambda": self.truth[0], "mixture": self.truth[1].to_dict()}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "EmConfig":
        doc = dict(doc)
        if doc.get("box") is not None:
            doc["box"] = ParameterBox.from_dict(doc["box"])
        if doc.get("truth") is not None:
            t = doc["truth"]
            doc["truth"] = (float(t["lambda"]), MixingMeasure.from_dict(t["mixture"]))
        return cls(**doc)


@dataclass
class FitResult:
    lambda_hat: float
    G_hat: MixingMeasure
    log_likelihood: float
    trace: np.ndarray
    clip_flags: np.ndarray
    restart: int
    converged: bool
    n_iter: int
    init: str
    restart_log_likelihoods: List[float] = field(default_factory=list)
    max_row_error: float = 0.0
    restart_min_increments: List[float] = field(default_factory=list)

    def model(self, g0: MixingMeasure) -> DeviatedModel:
        return DeviatedModel(self.lambda_hat, self.G_hat, g0)

    def increments(self) -> np.ndarray:
        return np.diff(self.trace)

    def min_unclipped_increment(self) -> float:
        """Smallest log-likelihood change over iterations without clip events."""
        inc = self.increments()
        keep = ~self.clip_flags
        return float(inc[keep].min()) if np.any(keep) else math.inf

    def to_dict(self, g0: MixingMeasure) -> dict:
        return {
            "model": self.model(g0).to_dict(),
            "log_likelihood": self.log_likelihood,
            "trace": self.trace.tolist(),
            "clip_iterations": np.flatnonzero(self.clip_flags).tolist(),
            "restart": self.restart,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "init": self.init,
            "restart_log_likelihoods": self.restart_log_likelihoods,
        }


# ---------------------------------------------------------------------------
# E and M steps
# ---------------------------------------------------------------------------

def _e_step(model: DeviatedModel, data: Dataset):
    L = weighted_log_components(model, data.covariates, data.responses)
    top = L.max(axis=1)
    if np.any(np.isneginf(top)):
        bad = int(np.flatnonzero(np.isneginf(top))[0])
        raise NumericalDegeneracyError(
            f"every component underflows at data index {bad}", index=bad
        )
    P = np.exp(L - top[:, None])
    k0 = model.g0.n_atoms
    # aggregate the g0 components before normalising so degenerate rows are exact
    resp = np.empty((P.shape[0], P.shape[1] - k0 + 1))
    resp[:, 0] = P[:, :k0].sum(axis=1)
    resp[:, 1:] = P[:, k0:]
    total = resp.sum(axis=1)
    resp /= total[:, None]
    loglik = float(np.sum(top + np.log(total)))
    return resp, loglik


def e_step(model: DeviatedModel, data: Dataset) -> np.ndarray:
    """Posterior membership probabilities, shape (n, k + 1).

    Column 0 is the reference density ``g0``; column ``i`` the i-th expert.
    """
    return _e_step(model, data)[0]


def project_weights(p: np.ndarray, floor: float) -> Tuple[np.ndarray, bool]:
    """Raise weights below ``floor`` to it, rescaling the others to keep sum one."""
    p = np.asarray(p, dtype=float) / np.sum(p)
    fixed = np.zeros(p.shape, dtype=bool)
    touched = False
    while True:
        low = (p < floor) & ~fixed
        if not np.any(low):
            break
        touched = True
        fixed |= low
        free = ~fixed
        remaining = 1.0 - floor * fixed.sum()
        p = np.where(fixed, floor, p)
        p[free] = p[free] / p[free].sum() * remaining
    return p, touched


def weighted_least_squares(X: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Weighted regression of ``y`` on ``(X, 1)``; returns ``(a, b, mse)``.

    Falls back to a ridge jitter on the normal equations when they are
    singular.
    """
    Z = np.column_stack([X, np.ones(X.shape[0])])
    Zw = Z * w[:, None]
    A = Z.T @ Zw
    rhs = Zw.T @ y
    try:
        if np.linalg.cond(A) > 1e12:
            raise np.linalg.LinAlgError
        coef = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        coef = np.linalg.solve(A + RIDGE_JITTER * np.eye(A.shape[0]), rhs)
    resid = y - Z @ coef
    mse = float(np.dot(w, resid**2) / np.sum(w))
    return coef[:-1], float(coef[-1]), mse


def _m_step(resp: np.ndarray, data: Dataset, cfg: EmConfig, previous: DeviatedModel):
    n = data.n
    box = cfg.box_for(data.dim)
    mix_mass = resp[:, 1:].sum(axis=0)
    lam = float(np.clip(1.0 - resp[:, 0].sum() / n, 0.0, 1.0))
    prev = previous.mixture
    clipped = False
    if mix_mass.sum() <= MIN_CELL_MASS:
        # no data assigned to the experts: keep their parameters
        return DeviatedModel(lam, prev, previous.g0), clipped

    weights, floored = project_weights(np.maximum(mix_mass, 0.0), cfg.weight_floor)
    clipped |= floored
    a = np.array(prev.a)
    b = np.array(prev.b)
    s = np.array(prev.sigma)
    for i in range(resp.shape[1] - 1):
        if mix_mass[i] <= MIN_CELL_MASS:
            continue
        a[i], b[i], s[i] = weighted_least_squares(data.covariates, data.responses, resp[:, i + 1])
    a, b, s, box_clip = box.clip(a, b, s)
    clipped |= box_clip
    mixture = MixingMeasure(weights, a, b, s)
    return DeviatedModel(lam, mixture, previous.g0), clipped


def m_step(resp: np.ndarray, data: Dataset, cfg: EmConfig, previous: DeviatedModel) -> DeviatedModel:
    """Maximise the expected complete-data log-likelihood.

    ``previous`` supplies ``g0`` and the expert parameters kept when a
    component receives no responsibility mass.
    """
    if resp.shape != (data.n, previous.mixture.n_atoms + 1):
        raise InvalidInputError("responsibility matrix has the wrong shape")
    return _m_step(resp, data, cfg, previous)[0]


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _perturb_truth(cfg: EmConfig, g0: MixingMeasure, rng: np.random.Generator) -> DeviatedModel:
    lam_star, G_star = cfg.truth
    scale = cfg.init_scale
    box = cfg.box_for(G_star.dim)
    idx = np.arange(cfg.k) % G_star.n_atoms
    copies = np.bincount(idx, minlength=G_star.n_atoms)
    w = G_star.weights[idx] / copies[idx]
    a = G_star.a[idx].copy()
    b = G_star.b[idx].copy()
    s = G_star.sigma[idx].copy()
    if scale > 0:
        a = a + scale * np.maximum(np.abs(a), 0.1) * rng.standard_normal(a.shape)
        b = b + scale * np.maximum(np.abs(b), 0.1) * rng.standard_normal(b.shape)
        s = s * np.exp(scale * rng.standard_normal(s.shape))
        w = w * np.exp(scale * rng.standard_normal(w.shape))
        lam_c = min(max(lam_star, 0.02), 0.98)
        logit = math.log(lam_c / (1.0 - lam_c)) + scale * rng.standard_normal()
        lam = 1.0 / (1.0 + math.exp(-logit))
    else:
        lam = lam_star
    a, b, s, _ = box.clip(a, b, s)
    w, _ = project_weights(w, cfg.weight_floor)
    return DeviatedModel(lam, MixingMeasure(w, a, b, s), g0)


def _random_in_box(cfg: EmConfig, g0: MixingMeasure, dim: int, rng) -> DeviatedModel:
    box = cfg.box_for(dim)
    a = rng.uniform(box.a_low, box.a_high, size=(cfg.k, dim))
    b = rng.uniform(box.b_low, box.b_high, size=cfg.k)
    s = rng.uniform(box.sigma_low, box.sigma_high, size=cfg.k)
    w, _ = project_weights(rng.dirichlet(np.ones(cfg.k)), cfg.weight_floor)
    lam = rng.uniform(0.1, 0.9)
    return DeviatedModel(lam, MixingMeasure(w, a, b, s), g0)


def _data_driven(cfg: EmConfig, data: Dataset, g0: MixingMeasure, rng) -> DeviatedModel:
    box = cfg.box_for(data.dim)
    a_pool, b_pool, mse = weighted_least_squares(data.covariates, data.responses, np.ones(data.n))
    resid = data.responses - data.covariates @ a_pool
    levels = (np.arange(cfg.k) + rng.uniform(0.2, 0.8, size=cfg.k)) / cfg.k
    b = np.quantile(resid, levels)
    s = np.full(cfg.k, max(mse / cfg.k, box.sigma_low))
    a = np.tile(a_pool, (cfg.k, 1)) + 0.1 * rng.standard_normal((cfg.k, data.dim))
    a, b, s, _ = box.clip(a, b, s)
    w = np.full(cfg.k, 1.0 / cfg.k)
    return DeviatedModel(0.5, MixingMeasure(w, a, b, s), g0)


def init_params(data: Dataset, g0: MixingMeasure, cfg: EmConfig, seed=None) -> DeviatedModel:
    """Starting point for one EM run, reproducible under ``seed``."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    if cfg.init is InitStrategy.PERTURB_TRUTH:
        if cfg.truth[1].n_atoms > cfg.k:
            raise InvalidInputError("perturb_truth needs k at least the true order")
        return _perturb_truth(cfg, g0, rng)
    if cfg.init is InitStrategy.RANDOM_IN_BOX:
        return _random_in_box(cfg, g0, data.dim, rng)
    return _data_driven(cfg, data, g0, rng)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def run_em(start: DeviatedModel, data: Dataset, cfg: EmConfig, restart: int = 0) -> FitResult:
    """Iterate E/M steps from ``start`` until the budget or the tolerance is hit."""
    model = start
    resp, ll = _e_step(model, data)
    row_err = float(np.max(np.abs(resp.sum(axis=1) - 1.0)))
    trace = [ll]
    clips = []
    converged = False
    for _ in range(cfg.max_iters):
        new_model, clipped = _m_step(resp, data, cfg, model)
        new_resp, new_ll = _e_step(new_model, data)
        row_err = max(row_err, float(np.max(np.abs(new_resp.sum(axis=1) - 1.0))))
        trace.append(new_ll)
        clips.append(clipped)
        if clipped:
            logger.debug("restart %d iteration %d: clip event", restart, len(clips))
        model, resp = new_model, new_resp
        if new_ll - ll < cfg.tol:
            converged = True
            break
        ll = new_ll
    return FitResult(
        lambda_hat=model.lam,
        G_hat=model.mixture,
        log_likelihood=trace[-1],
        trace=np.array(trace),
        clip_flags=np.array(clips, dtype=bool),
        restart=restart,
        converged=converged,
        n_iter=len(clips),
        init=cfg.init.value,
        max_row_error=row_err,
    )


def fit_mle(data: Dataset, g0: MixingMeasure, cfg: EmConfig) -> FitResult:
    """Best-of-restarts EM estimate of ``(lam, G)``.

    Raises
    ------
    FitFailureError
        If every restart hits a numerical degeneracy.
    """
    if data.dim != g0.dim:
        raise InvalidInputError("dataset and g0 dimensions differ")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    best = None
    failures = []
    finals = []
    increments = []
    row_err = 0.0
    for r, ss in enumerate(seeds):
        try:
            start = init_params(data, g0, cfg, seed=ss)
            result = run_em(start, data, cfg, restart=r)
        except NumericalDegeneracyError as exc:
            failures.append(f"restart {r}: {exc}")
            finals.append(-math.inf)
            continue
        finals.append(result.log_likelihood)
        increments.append(result.min_unclipped_increment())
        row_err = max(row_err, result.max_row_error)
        if best is None or result.log_likelihood > best.log_likelihood:
            best = result
    if best is None:
        raise FitFailureError("all EM restarts degenerated", diagnostics=failures)
    best.restart_log_likelihoods = finals
    best.restart_min_increments = increments
    best.max_row_error = row_err
    return best


def refit(result: FitResult, data: Dataset, g0: MixingMeasure, cfg: EmConfig) -> FitResult:
    """Continue EM from a previous estimate (warm start)."""
    start = DeviatedModel(result.lambda_hat, result.G_hat, g0)
    return run_em(start, data, replace(cfg, restarts=1), restart=result.restart)


__all__ = [
    "EmConfig",
    "FitResult",
    "InitStrategy",
    "e_step",
    "m_step",
    "fit_mle",
    "init_params",
    "run_em",
    "refit",
    "project_weights",
    "weighted_least_squares",
    "log_likelihood",
]
