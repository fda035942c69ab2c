"""Solvability of the moment-type polynomial system behind the loss exponents.

For ``m`` triplets ``(s_l, t1_l, t2_l)`` and ``beta = 1..r`` the system reads

    sum_l sum_{n1 + 2 n2 = beta} s_l^2 t1_l^n1 t2_l^n2 / (n1! n2!) = 0.

A solution is non-trivial when every ``s_l`` is non-zero and some ``t1_l`` is
non-zero. ``r_bar(m)`` is the smallest ``r`` with no non-trivial solution; the
known values are tabulated and :func:`verify_r_bar` checks them numerically.

The system is homogeneous: ``s -> c s`` scales every equation by ``c^2`` and
``(t1, t2) -> (c t1, c^2 t2)`` scales equation ``beta`` by ``c^beta``. The
search therefore works on a normalised representative (``sum s^2 = 1`` with
``s_l^2 >= s_min^2``, and ``sum s^2 (t1^2 + |t2|) = 1``) and scores candidates
by the scale-free relative residual.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .exceptions import InvalidInputError

MAX_FACTORIAL = 16
FACTORIALS = np.array([math.factorial(i) for i in range(MAX_FACTORIAL + 1)], dtype=float)

_KNOWN = {1: 1, 2: 4, 3: 6}
LOWER_BOUND_LARGE_M = 7


@dataclass(frozen=True)
class Undefined:
    """Marker for ``r_bar(m)`` values that are only known from below."""

    m: int
    lower_bound: int = LOWER_BOUND_LARGE_M


def r_bar(m: int):
    """Tabulated solvability exponent, or :class:`Undefined` for ``m >= 4``."""
    if int(m) != m or m < 1:
        raise InvalidInputError(f"m must be a positive integer, got {m}")
    m = int(m)
    if m in _KNOWN:
        return _KNOWN[m]
    return Undefined(m)


@dataclass(frozen=True)
class PolySystemQuery:
    m: int
    r: int

    def __post_init__(self):
        if self.m < 1 or self.r < 1:
            raise InvalidInputError("m and r must be at least 1")
        if self.r > MAX_FACTORIAL:
            raise InvalidInputError(f"r above {MAX_FACTORIAL} is not supported")


@dataclass(frozen=True)
class SearchConfig:
    starts: int = 200
    s_min: float = 0.1
    tol: float = 1e-10
    max_nfev: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.s_min <= 0 or self.tol <= 0:
            raise InvalidInputError("s_min and tol must be positive")
        if self.starts < 1:
            raise InvalidInputError("starts must be at least 1")


@lru_cache(maxsize=None)
def _term_table(r: int):
    n1, n2, coef, first = [], [], [], []
    for beta in range(1, r + 1):
        first.append(len(n1))
        for j in range(beta // 2 + 1):
            n1.append(beta - 2 * j)
            n2.append(j)
            coef.append(1.0 / (FACTORIALS[beta - 2 * j] * FACTORIALS[j]))
    return np.array(n1), np.array(n2), np.array(coef), np.array(first)


def _equation_terms(r, s, t1, t2):
    n1, n2, coef, first = _term_table(r)
    T = (t1[None, :] ** n1[:, None]) * (t2[None, :] ** n2[:, None])
    return T, coef, first


def equations(query: PolySystemQuery, s, t1, t2) -> np.ndarray:
    """Left-hand sides of the ``r`` equations."""
    s, t1, t2 = (np.asarray(v, dtype=float).reshape(-1) for v in (s, t1, t2))
    if not (s.shape == t1.shape == t2.shape == (query.m,)):
        raise InvalidInputError("s, t1, t2 must each have length m")
    T, coef, first = _equation_terms(query.r, s, t1, t2)
    return np.add.reduceat((T @ s**2) * coef, first)


def residual(query: PolySystemQuery, s, t1, t2) -> float:
    """Sum of squared equation values."""
    return float(np.sum(equations(query, s, t1, t2) ** 2))


def relative_residual(query: PolySystemQuery, s, t1, t2) -> float:
    """Sum over equations of (value / sum of absolute term values)^2.

    Invariant under both scalings of the system. Infinite when every
    ``t1`` vanishes (trivial point).
    """
    s, t1, t2 = (np.asarray(v, dtype=float).reshape(-1) for v in (s, t1, t2))
    T, coef, first = _equation_terms(query.r, s, t1, t2)
    w = s**2
    num = np.add.reduceat((T @ w) * coef, first)
    den = np.add.reduceat((np.abs(T) @ w) * coef, first)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(den > 0, num / den, np.where(num == 0, 0.0, np.inf))
    if not np.any(t1 != 0):
        return math.inf
    return float(np.sum(ratio**2))


def normalize(s, t1, t2, s_min: float = 0.0):
    """Canonical representative: ``sum s^2 = 1`` and ``sum s^2 (t1^2 + |t2|) = 1``."""
    s, t1, t2 = (np.asarray(v, dtype=float).reshape(-1) for v in (s, t1, t2))
    w = s**2 / np.sum(s**2)
    scale = np.sum(w * (t1**2 + np.abs(t2)))
    c = 1.0 / math.sqrt(scale)
    return np.sqrt(w) * np.sign(np.where(s == 0, 1.0, s)), c * t1, c * c * t2


def _unpack(p: np.ndarray, m: int, w_min: float):
    u, t1, t2 = p[:m], p[m : 2 * m], p[2 * m :]
    e = np.exp(u - u.max())
    w = w_min + (1.0 - m * w_min) * e / e.sum()
    scale = np.sum(w * (t1**2 + np.abs(t2)))
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
        t1 = np.ones(m)
    c = 1.0 / math.sqrt(scale)
    return np.sqrt(w), c * t1, c * c * t2


@dataclass
class SearchResult:
    m: int
    r: int
    found: bool
    best_residual: float
    best_raw_residual: float
    starts: int
    seed: int
    s: Optional[list] = None
    t1: Optional[list] = None
    t2: Optional[list] = None

    def to_dict(self) -> dict:
        return asdict(self)


def find_nontrivial(query: PolySystemQuery, cfg: SearchConfig = SearchConfig()) -> SearchResult:
    """Multistart search for a non-trivial solution.

    Each start is polished by a trust-region least-squares solve (finite
    difference Jacobian) of the relative equations on the normalised
    manifold. The first start whose relative and raw residuals both fall
    below ``cfg.tol`` is returned; otherwise the best point is reported.
    """
    m, r = query.m, query.r
    w_min = cfg.s_min**2
    if m * w_min >= 1:
        raise InvalidInputError("s_min too large for this m")
    T_n1, T_n2, coef, first = _term_table(r)
    rng = np.random.default_rng(cfg.seed)

    def rel_eqs(p):
        s, t1, t2 = _unpack(p, m, w_min)
        T = (t1[None, :] ** T_n1[:, None]) * (t2[None, :] ** T_n2[:, None])
        w = s**2
        num = np.add.reduceat((T @ w) * coef, first)
        den = np.add.reduceat((np.abs(T) @ w) * coef, first)
        return num / np.maximum(den, 1e-300)

    best = (math.inf, math.inf, None)
    for start in range(cfg.starts):
        p0 = np.concatenate(
            [rng.standard_normal(m), rng.uniform(-1, 1, m), rng.uniform(-2, 2, m)]
        )
        try:
            sol = least_squares(
                rel_eqs, p0, xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=cfg.max_nfev
            )
            p = sol.x
        except (ValueError, FloatingPointError):
            continue
        s, t1, t2 = _unpack(p, m, w_min)
        rel = relative_residual(query, s, t1, t2)
        raw = residual(query, s, t1, t2)
        if rel < best[0]:
            best = (rel, raw, (s, t1, t2))
        if rel < cfg.tol and raw < cfg.tol:
            return SearchResult(m, r, True, rel, raw, start + 1, cfg.seed, s.tolist(), t1.tolist(), t2.tolist())
    rel, raw, point = best
    out = SearchResult(m, r, False, rel, raw, cfg.starts, cfg.seed)
    if point is not None:
        out.s, out.t1, out.t2 = (v.tolist() for v in point)
    return out


@dataclass
class VerificationReport:
    m: int
    r_bar: int
    below: Optional[SearchResult]
    at: SearchResult

    @property
    def consistent(self) -> bool:
        ok_at = not self.at.found
        ok_below = self.below is None or self.below.found
        return ok_at and ok_below

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "r_bar": self.r_bar,
            "consistent": self.consistent,
            "checks": [c.to_dict() for c in (self.below, self.at) if c is not None],
        }


def verify_r_bar(m: int, cfg: SearchConfig = SearchConfig()) -> VerificationReport:
    """Check that a solution exists at ``r_bar(m) - 1`` and none at ``r_bar(m)``.

    The absence of a solution is numerical evidence only: the report carries
    the best relative residual and the number of starts.
    """
    rb = r_bar(m)
    if isinstance(rb, Undefined):
        raise InvalidInputError(f"r_bar({m}) is not known exactly")
    below = find_nontrivial(PolySystemQuery(m, rb - 1), cfg) if rb > 1 else None
    at = find_nontrivial(PolySystemQuery(m, rb), cfg)
    return VerificationReport(m, rb, below, at)
