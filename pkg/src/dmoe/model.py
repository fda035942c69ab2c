"""Deviated Gaussian mixture of experts: domain types, densities and sampling.

The conditional density of a response ``y`` given covariates ``x`` is

    (1 - lam) * g0(y | x) + lam * sum_i p_i * N(y; a_i . x + b_i, sigma_i)

where ``g0`` is a known Gaussian mixture of experts and ``sigma_i`` is a
*variance*. All types are immutable once built; arrays are flagged read-only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .exceptions import InvalidInputError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
WEIGHT_SUM_TOL = 1e-12


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _require_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise InvalidInputError(f"{name} must be finite")


@dataclass(frozen=True)
class Atom:
    """One expert: slope ``a`` (length d), intercept ``b`` and variance ``sigma``."""

    a: np.ndarray
    b: float
    sigma: float

    def __post_init__(self):
        a = np.array(self.a, dtype=float).reshape(-1)
        _require_finite("a", a)
        _require_finite("b", self.b)
        _require_finite("sigma", self.sigma)
        if self.sigma <= 0:
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @property
    def theta(self) -> np.ndarray:
        """Concatenated parameter vector ``(a, b, sigma)``."""
        return np.concatenate([self.a, [self.b, self.sigma]])

    def __eq__(self, other):
        if not isinstance(other, Atom):
            return NotImplemented
        return (
            np.array_equal(self.a, other.a)
            and self.b == other.b
            and self.sigma == other.sigma
        )

    def __hash__(self):
        return hash((tuple(self.a), self.b, self.sigma))

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, doc: dict) -> "Atom":
        return cls(a=doc["a"], b=doc["b"], sigma=doc["sigma"])


class MixingMeasure:
    """Discrete measure ``sum_i p_i * delta_(a_i, b_i, sigma_i)``.

    Parameters are held as stacked arrays: ``weights`` (k,), ``a`` (k, d),
    ``b`` (k,) and ``sigma`` (k,).

    Parameters
    ----------
    weights : array_like
        Positive weights summing to one.
    a, b, sigma : array_like
        Atom parameters.
    floor : float, optional
        When given, every weight must be at least ``floor`` (estimation
        candidates live in the floored class).
    """

    __slots__ = ("weights", "a", "b", "sigma")

    def __init__(self, weights, a, b, sigma, *, floor: Optional[float] = None):
        w = np.array(weights, dtype=float).reshape(-1)
        k = w.shape[0]
        if k < 1:
            raise InvalidInputError("a mixing measure needs at least one atom")
        a = np.array(a, dtype=float)
        if a.ndim == 1:
            a = a.reshape(k, -1)
        b = np.array(b, dtype=float).reshape(-1)
        s = np.array(sigma, dtype=float).reshape(-1)
        if a.ndim != 2 or a.shape[0] != k or b.shape[0] != k or s.shape[0] != k:
            raise InvalidInputError("weights, a, b and sigma must have matching lengths")
        for name, arr in (("weights", w), ("a", a), ("b", b), ("sigma", s)):
            _require_finite(name, arr)
        if np.any(s <= 0):
            raise InvalidInputError("every sigma must be positive")
        if np.any(w <= 0) or np.any(w > 1):
            raise InvalidInputError("weights must lie in (0, 1]")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidInputError(f"weights sum to {w.sum()!r}, not 1")
        if floor is not None and np.any(w < floor):
            raise InvalidInputError(f"weights must be at least {floor}")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "b", _frozen(b))
        object.__setattr__(self, "sigma", _frozen(s))

    def __setattr__(self, name, value):
        raise AttributeError("MixingMeasure is immutable")

    def __reduce__(self):
        return (MixingMeasure, (self.weights, self.a, self.b, self.sigma))

    @classmethod
    def from_atoms(cls, weights, atoms: Sequence[Atom], **kwargs) -> "MixingMeasure":
        atoms = list(atoms)
        if not atoms:
            raise InvalidInputError("a mixing measure needs at least one atom")
        dims = {atom.dim for atom in atoms}
        if len(dims) != 1:
            raise InvalidInputError("all atoms must share the covariate dimension")
        return cls(
            weights,
            np.stack([atom.a for atom in atoms]),
            [atom.b for atom in atoms],
            [atom.sigma for atom in atoms],
            **kwargs,
        )

    @classmethod
    def single(cls, a, b, sigma) -> "MixingMeasure":
        return cls.from_atoms([1.0], [Atom(a, b, sigma)])

    @classmethod
    def normalized(cls, weights, a, b, sigma) -> "MixingMeasure":
        """Build after rescaling ``weights`` to sum to one."""
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum(), a, b, sigma)

    @property
    def n_atoms(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.a.shape[1]

    @property
    def atoms(self) -> list:
        return [Atom(self.a[i], self.b[i], self.sigma[i]) for i in range(self.n_atoms)]

    @property
    def thetas(self) -> np.ndarray:
        """Stacked ``(a, b, sigma)`` vectors, shape (k, d + 2)."""
        return np.column_stack([self.a, self.b, self.sigma])

    def permuted(self, order) -> "MixingMeasure":
        order = np.asarray(order)
        return MixingMeasure(
            self.weights[order], self.a[order], self.b[order], self.sigma[order]
        )

    def allclose(self, other: "MixingMeasure", atol: float = 1e-12) -> bool:
        """Equality up to atom order (greedy matching) within ``atol``."""
        if self.n_atoms != other.n_atoms or self.dim != other.dim:
            return False
        unused = list(range(other.n_atoms))
        for i in range(self.n_atoms):
            hit = None
            for j in unused:
                if np.allclose(self.thetas[i], other.thetas[j], rtol=0, atol=atol) and abs(
                    self.weights[i] - other.weights[j]
                ) <= atol:
                    hit = j
                    break
            if hit is None:
                return False
            unused.remove(hit)
        return True

    def __eq__(self, other):
        if not isinstance(other, MixingMeasure):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
            and np.array_equal(self.sigma, other.sigma)
        )

    __hash__ = None

    def __repr__(self):
        parts = ", ".join(
            f"{w:.4g}*({', '.join(f'{v:.4g}' for v in th)})"
            for w, th in zip(self.weights, self.thetas)
        )
        return f"MixingMeasure[{parts}]"

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "atoms": [atom.to_dict() for atom in self.atoms],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MixingMeasure":
        try:
            atoms = [Atom.from_dict(item) for item in doc["atoms"]]
            return cls.from_atoms(doc["weights"], atoms)
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed mixing measure document: {exc}") from exc


@dataclass(frozen=True)
class ParameterBox:
    """Compact parameter set: coordinate bounds on ``a``, ``b`` and ``sigma``."""

    a_low: np.ndarray
    a_high: np.ndarray
    b_low: float = -10.0
    b_high: float = 10.0
    sigma_low: float = 1e-4
    sigma_high: float = 25.0

    def __post_init__(self):
        lo = np.array(self.a_low, dtype=float).reshape(-1)
        hi = np.array(self.a_high, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise InvalidInputError("a bounds must have the same dimension")
        if np.any(lo >= hi) or self.b_low >= self.b_high or self.sigma_low >= self.sigma_high:
            raise InvalidInputError("every lower bound must be below its upper bound")
        if self.sigma_low <= 0:
            raise InvalidInputError("sigma lower bound must be positive")
        object.__setattr__(self, "a_low", _frozen(lo))
        object.__setattr__(self, "a_high", _frozen(hi))

    @classmethod
    def default(cls, dim: int) -> "ParameterBox":
        return cls(a_low=np.full(dim, -10.0), a_high=np.full(dim, 10.0))

    @property
    def dim(self) -> int:
        return self.a_low.shape[0]

    def contains(self, a, b, sigma) -> bool:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        return bool(
            np.all((a >= self.a_low) & (a <= self.a_high))
            and np.all((b >= self.b_low) & (b <= self.b_high))
            and np.all((sigma >= self.sigma_low) & (sigma <= self.sigma_high))
        )

    def clip(self, a, b, sigma):
        """Project parameters into the box; returns ``(a, b, sigma, clipped)``."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        a_c = np.clip(a, self.a_low, self.a_high)
        b_c = np.clip(b, self.b_low, self.b_high)
        s_c = np.clip(sigma, self.sigma_low, self.sigma_high)
        clipped = not (
            np.array_equal(a_c, a) and np.array_equal(b_c, b) and np.array_equal(s_c, sigma)
        )
        return a_c, b_c, s_c, clipped

    def to_dict(self) -> dict:
        return {
            "a_low": self.a_low.tolist(),
            "a_high": self.a_high.tolist(),
            "b_low": self.b_low,
            "b_high": self.b_high,
            "sigma_low": self.sigma_low,
            "sigma_high": self.sigma_high,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParameterBox":
        return cls(**doc)


@dataclass(frozen=True)
class DeviatedModel:
    """``(1 - lam) * g0 + lam * p_G`` with a known reference mixture ``g0``."""

    lam: float
    mixture: MixingMeasure
    g0: MixingMeasure

    def __post_init__(self):
        lam = float(self.lam)
        if not (0.0 <= lam <= 1.0) or not math.isfinite(lam):
            raise InvalidInputError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.mixture.dim != self.g0.dim:
            raise InvalidInputError("mixture and g0 must share the covariate dimension")
        object.__setattr__(self, "lam", lam)

    @property
    def dim(self) -> int:
        return self.mixture.dim

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "mixture": self.mixture.to_dict(), "g0": self.g0.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "DeviatedModel":
        try:
            return cls(
                lam=doc["lambda"],
                mixture=MixingMeasure.from_dict(doc["mixture"]),
                g0=MixingMeasure.from_dict(doc["g0"]),
            )
        except KeyError as exc:
            raise InvalidInputError(f"model document lacks {exc}") from exc


@dataclass(frozen=True)
class Dataset:
    """Covariates (n, d), stored column-major, and responses (n,)."""

    covariates: np.ndarray
    responses: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        X = np.asfortranarray(np.array(self.covariates, dtype=float))
        if X.ndim == 1:
            X = np.asfortranarray(X.reshape(-1, 1))
        y = np.ascontiguousarray(np.array(self.responses, dtype=float).reshape(-1))
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise InvalidInputError("covariates and responses must have matching row counts")
        if y.shape[0] < 1:
            raise InvalidInputError("a dataset needs at least one row")
        _require_finite("covariates", X)
        _require_finite("responses", y)
        object.__setattr__(self, "covariates", _frozen(X))
        object.__setattr__(self, "responses", _frozen(y))

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def dim(self) -> int:
        return self.covariates.shape[1]

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.vstack([self.covariates, other.covariates]),
            np.concatenate([self.responses, other.responses]),
            self.seed,
        )

    def to_csv(self, path) -> None:
        header = [f"x{j + 1}" for j in range(self.dim)] + ["y"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row, yv in zip(self.covariates, self.responses):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(yv))])

    @classmethod
    def from_csv(cls, path, seed: Optional[int] = None) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise InvalidInputError(f"{path} is empty") from None
            expected = [f"x{j + 1}" for j in range(len(header) - 1)] + ["y"]
            if header != expected:
                raise InvalidInputError(f"unexpected CSV header {header}")
            try:
                rows = np.array([[float(v) for v in row] for row in reader if row])
            except ValueError as exc:
                raise InvalidInputError(f"non-numeric CSV entry: {exc}") from exc
        if rows.size == 0:
            raise InvalidInputError(f"{path} has no data rows")
        return cls(rows[:, :-1], rows[:, -1], seed)


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def _as_points(x, y, dim):
    """Broadcast ``x``/``y`` to (n, d) and (n,); report whether input was scalar."""
    y_arr = np.asarray(y, dtype=float)
    scalar = y_arr.ndim == 0
    y_arr = y_arr.reshape(-1)
    X = np.asarray(x, dtype=float)
    if X.ndim == 0:
        X = np.full((y_arr.shape[0], dim), float(X))
    elif X.ndim == 1:
        if dim == 1 and X.shape[0] == y_arr.shape[0] and not scalar:
            X = X.reshape(-1, 1)
        else:
            X = np.broadcast_to(X.reshape(1, -1), (y_arr.shape[0], X.shape[0]))
    if X.shape[1] != dim:
        raise InvalidInputError(f"covariates have dimension {X.shape[1]}, expected {dim}")
    if X.shape[0] != y_arr.shape[0]:
        if y_arr.shape[0] == 1:
            y_arr = np.full(X.shape[0], y_arr[0])
            scalar = False
        else:
            raise InvalidInputError("covariates and responses must align")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y_arr))):
        raise InvalidInputError("non-finite covariate or response")
    return X, y_arr, scalar


def component_logpdf(measure: MixingMeasure, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Log Gaussian expert densities, shape (n, k), without the weights."""
    mean = X @ measure.a.T + measure.b
    resid = y[:, None] - mean
    with np.errstate(over="ignore"):
        return -0.5 * (LOG_2PI + np.log(measure.sigma)) - 0.5 * resid**2 / measure.sigma


def expert_density(atom: Atom, x, y):
    """Gaussian density of ``y`` with mean ``a . x + b`` and variance ``sigma``."""
    X, yv, scalar = _as_points(x, y, atom.dim)
    mean = X @ atom.a + atom.b
    out = np.exp(-0.5 * (LOG_2PI + math.log(atom.sigma)) - 0.5 * (yv - mean) ** 2 / atom.sigma)
    return float(out[0]) if scalar else out


def mixture_density(measure: MixingMeasure, x, y):
    X, yv, scalar = _as_points(x, y, measure.dim)
    out = np.exp(logsumexp(component_logpdf(measure, X, yv), b=measure.weights, axis=1))
    return float(out[0]) if scalar else out


def weighted_log_components(model: DeviatedModel, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-point log of every weighted component, shape (n, k0 + k).

    The first ``k0`` columns hold ``(1 - lam) p0_j f0_j`` and the rest
    ``lam p_i f_i``. Zero-weight columns are ``-inf``.
    """
    with np.errstate(divide="ignore"):
        log_ref = np.log1p(-model.lam) + np.log(model.g0.weights)
        log_mix = np.log(model.lam) + np.log(model.mixture.weights)
    return np.hstack(
        [
            component_logpdf(model.g0, X, y) + log_ref,
            component_logpdf(model.mixture, X, y) + log_mix,
        ]
    )


def log_deviated_density(model: DeviatedModel, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return logsumexp(weighted_log_components(model, X, y), axis=1)


def deviated_density(model: DeviatedModel, x, y):
    X, yv, scalar = _as_points(x, y, model.dim)
    out = np.exp(log_deviated_density(model, X, yv))
    return float(out[0]) if scalar else out


def log_likelihood(model: DeviatedModel, data: Dataset) -> float:
    """Sum of log conditional densities, evaluated with log-sum-exp.

    Returns ``-inf`` (and logs a warning) if some point has zero density under
    every component.
    """
    if data.dim != model.dim:
        raise InvalidInputError("dataset and model dimensions differ")
    per_point = log_deviated_density(model, data.covariates, data.responses)
    if np.any(np.isneginf(per_point)):
        bad = int(np.flatnonzero(np.isneginf(per_point))[0])
        logger.warning("data point %d has zero density under every component", bad)
        return -math.inf
    return float(np.sum(per_point))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

CovariateSampler = Callable[[np.random.Generator, int, int], np.ndarray]


def standard_normal_covariates(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return rng.standard_normal((n, dim))


def sample_dataset(
    model: DeviatedModel,
    n: int,
    seed,
    covariate_sampler: Optional[CovariateSampler] = None,
) -> Dataset:
    """Draw ``n`` i.i.d. pairs from the deviated model.

    ``seed`` may be an int or a :class:`numpy.random.SeedSequence`; the same
    seed always yields an identical dataset.
    """
    if int(n) < 1:
        raise InvalidInputError("n must be at least 1")
    n = int(n)
    rng = np.random.default_rng(seed)
    sampler = covariate_sampler or standard_normal_covariates
    X = np.asarray(sampler(rng, n, model.dim), dtype=float).reshape(n, model.dim)
    probs = np.concatenate(
        [(1.0 - model.lam) * model.g0.weights, model.lam * model.mixture.weights]
    )
    probs = probs / probs.sum()
    comp = rng.choice(probs.shape[0], size=n, p=probs)
    a = np.vstack([model.g0.a, model.mixture.a])
    b = np.concatenate([model.g0.b, model.mixture.b])
    s = np.concatenate([model.g0.sigma, model.mixture.sigma])
    mean = np.einsum("ij,ij->i", X, a[comp]) + b[comp]
    y = mean + np.sqrt(s[comp]) * rng.standard_normal(n)
    int_seed = seed if isinstance(seed, (int, np.integer)) else None
    return Dataset(X, y, int_seed)


def measure_from_lists(weights: Iterable[float], atoms: Iterable[Sequence[float]]) -> MixingMeasure:
    """Convenience builder from ``(a, b, sigma)`` triples with scalar or vector ``a``."""
    built = []
    for a, b, s in atoms:
        built.append(Atom(np.atleast_1d(a), b, s))
    return MixingMeasure.from_atoms(list(weights), built)
