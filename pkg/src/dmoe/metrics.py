"""Distances between deviated models and the TV-versus-loss probe.

Both distances factor as an expectation over the covariate density of a 1-D
integral in ``y``:

    V(p, q) = 1/2 E_X int |p(y|X) - q(y|X)| dy
    h(p, q)^2 = 1/2 E_X int (sqrt p(y|X) - sqrt q(y|X))^2 dy

The outer expectation is Monte Carlo over shared covariate draws. The inner
integral uses composite Gauss-Legendre panels whose breakpoints sit every
half standard deviation within 8 standard deviations of every component mean
of both models, so every panel is narrower than the narrowest Gaussian
active on it. Mass outside the panels is below 1e-14. The kinks of ``|p - q|``
are not located, which limits the inner TV integral to about 1e-6 absolute
accuracy, well below the Monte Carlo error of the outer average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import InvalidInputError, QuadratureError
from .model import LOG_2PI, DeviatedModel, MixingMeasure, standard_normal_covariates

MASS_TOL = 1e-6


@dataclass(frozen=True)
class DistanceConfig:
    n_covariates: int = 2000
    seed: int = 0
    half_width: float = 8.0
    panel_step: float = 0.5
    nodes: int = 8
    chunk: int = 256
    covariate_sampler: Optional[Callable] = None

    def __post_init__(self):
        if self.n_covariates < 1:
            raise InvalidInputError("n_covariates must be at least 1")
        if self.half_width <= 0 or self.panel_step <= 0 or self.nodes < 2:
            raise InvalidInputError("invalid quadrature settings")

    def to_dict(self) -> dict:
        return {
            "n_covariates": self.n_covariates,
            "seed": self.seed,
            "half_width": self.half_width,
            "panel_step": self.panel_step,
            "nodes": self.nodes,
        }


@dataclass(frozen=True)
class DistanceEstimate:
    estimate: float
    std_error: float

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "std_error": self.std_error}


def _stack(model: DeviatedModel):
    """All weighted Gaussian components of a deviated model."""
    w = np.concatenate([(1.0 - model.lam) * model.g0.weights, model.lam * model.mixture.weights])
    a = np.vstack([model.g0.a, model.mixture.a])
    b = np.concatenate([model.g0.b, model.mixture.b])
    s = np.concatenate([model.g0.sigma, model.mixture.sigma])
    keep = w > 0
    return w[keep], a[keep], b[keep], s[keep]


def _density(y: np.ndarray, mu: np.ndarray, w, s) -> np.ndarray:
    """Mixture density at ``y`` (rows, points) with per-row means ``mu`` (rows, C)."""
    z = y[..., None] - mu[:, None, :]
    log_f = -0.5 * (LOG_2PI + np.log(s)) - 0.5 * z**2 / s
    return np.exp(log_f) @ w


def _per_covariate(m1, m2, X, cfg, half_width, kind):
    comps1, comps2 = _stack(m1), _stack(m2)
    w1, a1, b1, s1 = comps1
    w2, a2, b2, s2 = comps2
    mu1 = X @ a1.T + b1
    mu2 = X @ a2.T + b2
    mu = np.hstack([mu1, mu2])
    sd = np.sqrt(np.concatenate([s1, s2]))
    steps = np.arange(-half_width, half_width + 1e-12, cfg.panel_step)
    brk = (mu[:, :, None] + sd[None, :, None] * steps[None, None, :]).reshape(X.shape[0], -1)
    brk = np.sort(brk, axis=1)
    lo, hi = brk[:, :-1], brk[:, 1:]
    nodes, weights = np.polynomial.legendre.leggauss(cfg.nodes)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    y = (mid[:, :, None] + half[:, :, None] * nodes[None, None, :]).reshape(X.shape[0], -1)
    qw = (half[:, :, None] * weights[None, None, :]).reshape(X.shape[0], -1)
    p = _density(y, mu1, w1, s1)
    q = _density(y, mu2, w2, s2)
    mass_p = np.sum(qw * p, axis=1)
    mass_q = np.sum(qw * q, axis=1)
    if kind == "tv":
        vals = 0.5 * np.sum(qw * np.abs(p - q), axis=1)
    else:
        vals = 0.5 * np.sum(qw * (np.sqrt(p) - np.sqrt(q)) ** 2, axis=1)
    mass_err = max(np.max(np.abs(mass_p - 1.0)), np.max(np.abs(mass_q - 1.0)))
    return vals, mass_err


def _integrate(m1: DeviatedModel, m2: DeviatedModel, cfg: DistanceConfig, kind: str) -> np.ndarray:
    if m1.dim != m2.dim:
        raise InvalidInputError("models must share the covariate dimension")
    rng = np.random.default_rng(cfg.seed)
    sampler = cfg.covariate_sampler or standard_normal_covariates
    X = np.asarray(sampler(rng, cfg.n_covariates, m1.dim), dtype=float).reshape(cfg.n_covariates, m1.dim)
    out = np.empty(cfg.n_covariates)
    for start in range(0, cfg.n_covariates, cfg.chunk):
        sl = slice(start, start + cfg.chunk)
        for half_width in (cfg.half_width, 1.5 * cfg.half_width):
            vals, mass_err = _per_covariate(m1, m2, X[sl], cfg, half_width, kind)
            if mass_err <= MASS_TOL:
                break
        else:
            raise QuadratureError(f"inner quadrature lost {mass_err:.2e} of probability mass")
        out[sl] = vals
    return out


def total_variation(m1: DeviatedModel, m2: DeviatedModel, cfg: DistanceConfig = DistanceConfig()) -> DistanceEstimate:
    """Monte Carlo estimate of the total variation distance, with standard error."""
    vals = _integrate(m1, m2, cfg, "tv")
    est = float(np.clip(vals.mean(), 0.0, 1.0))
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return DistanceEstimate(est, se)


def hellinger(m1: DeviatedModel, m2: DeviatedModel, cfg: DistanceConfig = DistanceConfig()) -> DistanceEstimate:
    """Monte Carlo estimate of the Hellinger distance.

    The standard error is propagated from that of the squared distance by the
    delta method.
    """
    vals = _integrate(m1, m2, cfg, "hellinger")
    h2 = float(np.clip(vals.mean(), 0.0, 1.0))
    se2 = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    h = math.sqrt(h2)
    se = se2 / (2.0 * h) if h > 0 else se2
    return DistanceEstimate(h, se)


# ---------------------------------------------------------------------------
# lower-bound probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeShell:
    epsilon: float
    min_ratio: float
    samples: int
    skipped: int

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "min_ratio": self.min_ratio,
            "samples": self.samples,
            "skipped": self.skipped,
        }


@dataclass
class ProbeReport:
    shells: List[ProbeShell] = field(default_factory=list)

    @property
    def epsilons(self) -> List[float]:
        return [s.epsilon for s in self.shells]

    @property
    def min_ratios(self) -> List[float]:
        return [s.min_ratio for s in self.shells]

    def to_dict(self) -> dict:
        return {"shells": [s.to_dict() for s in self.shells]}

    def csv_rows(self) -> List[Tuple[float, float, int]]:
        return [(s.epsilon, s.min_ratio, s.samples) for s in self.shells]


def _split_truth(G_star: MixingMeasure, k: int):
    idx = np.arange(k) % G_star.n_atoms
    copies = np.bincount(idx, minlength=G_star.n_atoms)
    return idx, G_star.weights[idx] / copies[idx]


def _perturbed(lam_star, G_star, g0, k, direction, t):
    """Point ``t`` along a perturbation ray from the truth (k fitted atoms)."""
    idx, w0 = _split_truth(G_star, k)
    d_lam, d_w, d_a, d_b, d_s = direction
    lam = float(np.clip(lam_star + t * d_lam, 0.0, 1.0))
    w = w0 * np.exp(t * d_w)
    w = w / w.sum()
    a = G_star.a[idx] + t * d_a
    b = G_star.b[idx] + t * d_b
    s = G_star.sigma[idx] * np.exp(t * d_s)
    return DeviatedModel(lam, MixingMeasure(w, a, b, s), g0)


def _random_direction(rng, k, dim):
    d_lam = rng.standard_normal()
    d_w = rng.standard_normal(k)
    d_a = rng.standard_normal((k, dim))
    d_b = rng.standard_normal(k)
    d_s = rng.standard_normal(k)
    return d_lam, d_w, d_a, d_b, d_s


def _ray_to_shell(loss_at, eps, t_max=4.0, iters=60):
    """Smallest ``t`` (by bisection) with ``loss_at(t) = eps``, or None."""
    hi = 1e-6
    while loss_at(hi) < eps:
        hi *= 2.0
        if hi > t_max:
            return None
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if loss_at(mid) < eps:
            lo = mid
        else:
            hi = mid
    return hi


def tv_lower_bound_probe(
    truth: Tuple[float, MixingMeasure, MixingMeasure],
    loss_fn: Callable[[float, MixingMeasure], float],
    eps_grid: Sequence[float],
    samples_per_eps: int,
    cfg: DistanceConfig = DistanceConfig(n_covariates=400),
    k: Optional[int] = None,
    seed: int = 0,
    rel_tol: float = 0.05,
) -> ProbeReport:
    """Minimum of ``V / loss`` over perturbations of the truth on loss shells.

    Each sample draws a random direction in ``(lam, log w, a, b, log sigma)``
    and moves along it until the loss reaches ``epsilon`` (bisection). The
    same directions are reused on every shell, so shells differ only in scale.
    ``loss_fn(lam, G)`` evaluates the loss against the truth.
    """
    lam_star, G_star, g0 = truth
    eps_grid = [float(e) for e in eps_grid]
    if any(e <= 0 for e in eps_grid):
        raise InvalidInputError("epsilon shells must be positive")
    if any(b >= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise InvalidInputError("epsilon grid must be strictly decreasing")
    k = G_star.n_atoms if k is None else int(k)
    true_model = DeviatedModel(lam_star, G_star, g0)
    rng = np.random.default_rng(seed)
    directions = [_random_direction(rng, k, G_star.dim) for _ in range(samples_per_eps)]
    report = ProbeReport()
    for eps in eps_grid:
        ratios, skipped = [], 0
        for direction in directions:
            def loss_at(t, direction=direction):
                m = _perturbed(lam_star, G_star, g0, k, direction, t)
                return loss_fn(m.lam, m.mixture)

            t = _ray_to_shell(loss_at, eps)
            if t is None:
                skipped += 1
                continue
            model = _perturbed(lam_star, G_star, g0, k, direction, t)
            loss = loss_fn(model.lam, model.mixture)
            if abs(loss - eps) > rel_tol * eps:
                skipped += 1
                continue
            ratios.append(total_variation(model, true_model, cfg).estimate / loss)
        min_ratio = float(min(ratios)) if ratios else math.nan
        report.shells.append(ProbeShell(eps, min_ratio, len(ratios), skipped))
    return report
