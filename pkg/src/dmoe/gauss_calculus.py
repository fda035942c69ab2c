"""Derivatives of the Gaussian kernel ``f(y | mu, sigma)`` (``sigma`` a variance).

Location derivatives are closed form through probabilists' Hermite
polynomials,

    d^n f / d mu^n = sigma^(-n/2) He_n(z) f,   z = (y - mu) / sqrt(sigma),

and variance derivatives reduce to location derivatives through the heat
equation ``d^2 f / d mu^2 = 2 df / d sigma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import InvalidGridError, InvalidInputError, InvalidStepError, UnsupportedOrderError
from .model import LOG_2PI, MixingMeasure

MAX_ORDER = 16
DISTINGUISHABILITY_THRESHOLD = 1e-8


@dataclass(frozen=True)
class DerivativeOrder:
    """Order ``l1`` in the mean and ``l2`` in the variance."""

    l1: int
    l2: int
    max_order: int = MAX_ORDER

    def __post_init__(self):
        if self.l1 < 0 or self.l2 < 0:
            raise InvalidInputError("derivative orders must be non-negative")
        if self.l1 + self.l2 > self.max_order:
            raise UnsupportedOrderError(f"l1 + l2 = {self.l1 + self.l2} exceeds {self.max_order}")

    @property
    def location_order(self) -> int:
        return self.l1 + 2 * self.l2


def _check_sigma(sigma):
    if np.any(np.asarray(sigma) <= 0):
        raise InvalidInputError("sigma must be positive")


def hermite_e(n: int, z):
    """Probabilists' Hermite polynomial ``He_n`` by the three-term recurrence."""
    z = np.asarray(z, dtype=float)
    prev, cur = np.ones_like(z), z.copy()
    if n == 0:
        return prev
    for k in range(1, n):
        prev, cur = cur, z * cur - k * prev
    return cur


def gaussian_pdf(y, mu, sigma):
    y, mu, sigma = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (y, mu, sigma)))
    return np.exp(-0.5 * (LOG_2PI + np.log(sigma)) - 0.5 * (y - mu) ** 2 / sigma)


def mean_derivative(order: int, y, mu, sigma, max_order: int = MAX_ORDER):
    """``order``-th derivative of ``f(y | mu, sigma)`` with respect to ``mu``.

    Order 1 equals ``((y - mu) / sigma) f``. Broadcasts over array inputs.
    """
    if int(order) != order or order < 0:
        raise InvalidInputError("order must be a non-negative integer")
    if order > max_order:
        raise UnsupportedOrderError(f"order {order} exceeds {max_order}")
    _check_sigma(sigma)
    y, mu, sigma = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (y, mu, sigma)))
    z = (y - mu) / np.sqrt(sigma)
    out = sigma ** (-0.5 * order) * hermite_e(int(order), z) * gaussian_pdf(y, mu, sigma)
    return out if out.ndim else float(out)


def mixed_partial(ord: DerivativeOrder, y, mu, sigma):
    """``d^(l1+l2) f / d mu^l1 d sigma^l2`` via ``2^-l2`` times a location derivative."""
    return mean_derivative(ord.location_order, y, mu, sigma, max_order=max(ord.max_order, ord.location_order)) / 2.0**ord.l2


def sigma_derivative(y, mu, sigma):
    """Closed-form ``df / d sigma`` (independent of the Hermite route)."""
    _check_sigma(sigma)
    y, mu, sigma = (np.asarray(v, dtype=float) for v in (y, mu, sigma))
    out = gaussian_pdf(y, mu, sigma) * ((y - mu) ** 2 / (2.0 * sigma**2) - 0.5 / sigma)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PdeResidual:
    finite_difference: float
    exact: float


def check_heat_pde(y: float, mu: float, sigma: float, fd_step: float) -> PdeResidual:
    """Residuals of ``d^2 f / d mu^2 - 2 df / d sigma`` at one point.

    ``finite_difference`` uses central differences in both directions with
    step ``fd_step``. ``exact`` compares the Hermite second location
    derivative against the closed-form variance derivative.
    """
    if fd_step <= 0:
        raise InvalidStepError("fd_step must be positive")
    if sigma <= 2.0 * fd_step:
        raise InvalidStepError(f"sigma={sigma} must exceed twice the step {fd_step}")
    h = fd_step
    f = lambda m, s: float(gaussian_pdf(y, m, s))
    d2_mu = (f(mu + h, sigma) - 2.0 * f(mu, sigma) + f(mu - h, sigma)) / h**2
    d_sigma = (f(mu, sigma + h) - f(mu, sigma - h)) / (2.0 * h)
    fd = abs(d2_mu - 2.0 * d_sigma)
    exact = abs(mean_derivative(2, y, mu, sigma) - 2.0 * sigma_derivative(y, mu, sigma))
    return PdeResidual(fd, exact)


# ---------------------------------------------------------------------------
# distinguishability rank test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Evaluation lattice: every ``x`` is paired with every ``y``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).reshape(-1))

    @property
    def n_points(self) -> int:
        return self.x.shape[0] * self.y.size

    def points(self):
        X = np.repeat(self.x, self.y.size, axis=0)
        Y = np.tile(self.y, self.x.shape[0])
        return X, Y


def default_grid(G_star: MixingMeasure, g0: MixingMeasure, n_x: int = 64, n_y: int = 64, x_box: float = 3.0) -> GridSpec:
    """Tensor lattice: Gauss-Hermite nodes in ``x`` and equispaced ``y``.

    The ``x`` nodes are rescaled so the outermost sits at ``x_box``; in
    higher dimension each coordinate uses a fixed shuffle of the same nodes.
    The ``y`` range covers every component mean over the ``x`` nodes with
    6 standard deviations of the widest component on either side.
    """
    dim = G_star.dim
    nodes, _ = np.polynomial.hermite_e.hermegauss(n_x)
    nodes = nodes * (x_box / np.max(np.abs(nodes)))
    rng = np.random.default_rng(0)
    cols = [nodes] + [rng.permutation(nodes) for _ in range(dim - 1)]
    x = np.column_stack(cols)
    a = np.vstack([G_star.a, g0.a])
    b = np.concatenate([G_star.b, g0.b])
    means = x @ a.T + b
    sd = math.sqrt(max(G_star.sigma.max(), g0.sigma.max()))
    y = np.linspace(means.min() - 6 * sd, means.max() + 6 * sd, n_y)
    return GridSpec(x, y)


@dataclass(frozen=True)
class DistinguishabilityScore:
    smallest_singular_value: float
    is_distinguishable: bool
    n_functions: int

    def to_dict(self) -> dict:
        return {
            "smallest_singular_value": self.smallest_singular_value,
            "is_distinguishable": self.is_distinguishable,
            "n_functions": self.n_functions,
        }


def distinguishability_score(
    G_star: MixingMeasure,
    g0: MixingMeasure,
    r: Sequence[int],
    grid: Optional[GridSpec] = None,
    threshold: float = DISTINGUISHABILITY_THRESHOLD,
) -> DistinguishabilityScore:
    """Numerical rank test for linear independence of the derivative family.

    For atom ``i`` the family ``d^(l1+l2) f / d mu^l1 d sigma^l2`` with
    ``l1 + l2 <= r_i`` spans the same space as the location derivatives of
    orders ``0..2 r_i`` (each variance derivative is half of two location
    derivatives), so only those distinct functions enter the matrix, plus one
    column for ``g0``. Columns are normalised to unit length and the smallest
    singular value is compared against ``threshold``.

    Independence on a finite lattice is numerical evidence only; dependence
    is detected reliably.
    """
    r = [int(v) for v in r]
    if len(r) != G_star.n_atoms:
        raise InvalidInputError(f"r must have one entry per atom ({G_star.n_atoms}), got {len(r)}")
    if any(v < 0 for v in r):
        raise InvalidInputError("r entries must be non-negative")
    if any(2 * v > MAX_ORDER for v in r):
        raise UnsupportedOrderError(f"orders up to {MAX_ORDER} are supported")
    if g0.dim != G_star.dim:
        raise InvalidInputError("g0 and G_star must share the covariate dimension")
    grid = default_grid(G_star, g0) if grid is None else grid
    if grid.x.shape[1] != G_star.dim:
        raise InvalidGridError("grid x dimension does not match the model")
    n_functions = sum(2 * v + 1 for v in r) + 1
    if grid.n_points < 2 * n_functions:
        raise InvalidGridError(f"grid has {grid.n_points} points; need at least {2 * n_functions}")
    X, Y = grid.points()
    columns = []
    for i in range(G_star.n_atoms):
        mu = X @ G_star.a[i] + G_star.b[i]
        for order in range(2 * r[i] + 1):
            columns.append(mean_derivative(order, Y, mu, G_star.sigma[i]))
    g0_mu = X @ g0.a.T + g0.b
    columns.append(np.exp(-0.5 * (LOG_2PI + np.log(g0.sigma)) - 0.5 * (Y[:, None] - g0_mu) ** 2 / g0.sigma) @ g0.weights)
    M = np.column_stack(columns)
    norms = np.linalg.norm(M, axis=0)
    if np.any(norms == 0):
        return DistinguishabilityScore(0.0, False, n_functions)
    sv = np.linalg.svd(M / norms, compute_uv=False)
    smallest = float(sv[-1])
    return DistinguishabilityScore(smallest, smallest > threshold, n_functions)
