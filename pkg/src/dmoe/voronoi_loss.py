"""Voronoi-cell losses between fitted and true mixing measures.

Fitted atoms are assigned to their nearest reference atom (Euclidean norm on
``(a, b, sigma)``, ties to the lowest reference index). A reference atom
fitted by one atom contributes first-order parameter gaps; an over-fitted
atom contributes ``|da|^2 + |db|^r + |dsigma|^(r/2)`` where ``r = r_bar(|cell|)``.

Losses:

* :func:`loss_d1` - distinguishable setting, compares ``(lam, G)`` to ``(lam*, G*)``.
* :func:`loss_d3` - plain discrepancy between two mixing measures.
* :func:`loss_d2` - partial overlap of ``g0`` with ``G*``.
* :func:`loss_d4` - full overlap of ``g0`` with ``G*``.
* :func:`loss_vanishing` - metrics for ``lam* = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import (
    DegenerateNormalizerError,
    InvalidConfigurationError,
    InvalidInputError,
    InvalidProportionError,
    MissingReferenceError,
    RegimeMismatchError,
    UnsupportedCellSizeError,
)
from .model import Atom, MixingMeasure
from .polysys import Undefined, r_bar

DEFAULT_MATCH_TOL = 1e-9
RATIO_RTOL = 1e-9


class Branch(str, Enum):
    D1 = "D1"
    D3_BAR = "D3-against-Gbar"
    D3_TILDE = "D3-against-Gtilde"
    NEGATIVE_MASS = "NegativeMass"
    VANISHING_LAMBDA = "VanishingLambda"
    VANISHING_LAMBDA_D3 = "VanishingLambdaTimesD3"
    D3 = "D3"


class Regime(str, Enum):
    DISTINGUISHABLE = "Distinguishable"
    PARTIAL_OVERLAP = "PartialOverlap"
    FULL_OVERLAP = "FullOverlap"


class RBarTable:
    """Exponent lookup for cell cardinalities.

    Cardinalities without a known value raise :class:`UnsupportedCellSizeError`
    unless ``surrogate`` is given, in which case that exponent is used as a
    lower-bound stand-in.
    """

    def __init__(self, overrides: Optional[Mapping[int, int]] = None, surrogate: Optional[int] = None):
        self.overrides = dict(overrides or {})
        self.surrogate = surrogate

    def __call__(self, m: int) -> int:
        if m in self.overrides:
            return self.overrides[m]
        value = r_bar(m)
        if isinstance(value, Undefined):
            if self.surrogate is None:
                raise UnsupportedCellSizeError(m)
            return self.surrogate
        return value


DEFAULT_RBAR = RBarTable()


@dataclass(frozen=True)
class VoronoiAssignment:
    cell_of: Tuple[int, ...]
    cells: Tuple[Tuple[int, ...], ...]

    @property
    def cardinalities(self) -> Tuple[int, ...]:
        return tuple(len(c) for c in self.cells)


@dataclass(frozen=True)
class OverlapInfo:
    k_bar: int
    matching: Tuple[Tuple[int, int], ...]  # (g0 index, G* index)
    tol: float
    regime: Regime
    k0: int = 0
    k_star: int = 0

    def star_index_of(self, i0: int) -> Optional[int]:
        for a, b in self.matching:
            if a == i0:
                return b
        return None

    def g0_index_of(self, j: int) -> Optional[int]:
        for a, b in self.matching:
            if b == j:
                return a
        return None


@dataclass
class LossReport:
    value: float
    branch: Branch
    terms: Dict[str, float]
    regime: Optional[Regime] = None
    flags: Dict[str, object] = field(default_factory=dict)

    def scaled(self, factor: float, branch: Branch) -> "LossReport":
        terms = {k: factor * v for k, v in self.terms.items()}
        return LossReport(math.fsum(terms.values()), branch, terms, self.regime, dict(self.flags))

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "branch": self.branch.value,
            "regime": None if self.regime is None else self.regime.value,
            "terms": dict(self.terms),
            "flags": dict(self.flags),
        }


def _report(terms: Dict[str, float], branch: Branch, regime=None, **flags) -> LossReport:
    return LossReport(math.fsum(terms.values()), branch, terms, regime, flags)


# ---------------------------------------------------------------------------
# cells and overlap
# ---------------------------------------------------------------------------

def _thetas(atoms) -> np.ndarray:
    if isinstance(atoms, MixingMeasure):
        return atoms.thetas
    atoms = list(atoms)
    if not atoms:
        raise InvalidInputError("reference atom list is empty")
    return np.stack([atom.theta for atom in atoms])


def assign_cells(G: MixingMeasure, reference_atoms) -> VoronoiAssignment:
    """Nearest-reference assignment of every fitted atom."""
    ref = _thetas(reference_atoms)
    fit = G.thetas
    if ref.shape[1] != fit.shape[1]:
        raise InvalidInputError("fitted and reference atoms differ in dimension")
    dist = np.linalg.norm(fit[:, None, :] - ref[None, :, :], axis=2)
    # argmin returns the first minimiser, i.e. the lowest reference index on ties
    cell_of = tuple(int(j) for j in np.argmin(dist, axis=1))
    cells = tuple(tuple(i for i, c in enumerate(cell_of) if c == j) for j in range(ref.shape[0]))
    return VoronoiAssignment(cell_of, cells)


def classify_regime(
    G_star: MixingMeasure, g0: Optional[MixingMeasure], tol: float = DEFAULT_MATCH_TOL
) -> OverlapInfo:
    """Count atoms shared by ``g0`` and ``G*`` via greedy nearest-pair matching."""
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    if g0 is None:
        return OverlapInfo(0, (), tol, Regime.DISTINGUISHABLE, 0, G_star.n_atoms)
    dist = np.linalg.norm(g0.thetas[:, None, :] - G_star.thetas[None, :, :], axis=2)
    order = np.argsort(dist, axis=None, kind="stable")
    used0, used_star, matching = set(), set(), []
    for flat in order:
        i, j = np.unravel_index(flat, dist.shape)
        if dist[i, j] > tol:
            break
        if i in used0 or j in used_star:
            continue
        used0.add(int(i))
        used_star.add(int(j))
        matching.append((int(i), int(j)))
    matching.sort()
    k_bar = len(matching)
    if k_bar == 0:
        regime = Regime.DISTINGUISHABLE
    elif k_bar == g0.n_atoms:
        regime = Regime.FULL_OVERLAP
    else:
        regime = Regime.PARTIAL_OVERLAP
    return OverlapInfo(k_bar, tuple(matching), tol, regime, g0.n_atoms, G_star.n_atoms)


# ---------------------------------------------------------------------------
# D1 / D3
# ---------------------------------------------------------------------------

def _cell_terms(G: MixingMeasure, ref: MixingMeasure, rbar, fit_scale: float, ref_scale: float):
    """Per-cell parameter gaps and weight gaps shared by D1 and D3.

    The weight gap of cell ``j`` is ``|fit_scale * mass(cell_j) - ref_scale * p_ref_j|``.
    """
    cells = assign_cells(G, ref)
    params, weights = {}, {}
    for j, cell in enumerate(cells.cells):
        size = len(cell)
        value = 0.0
        if size == 1:
            i = cell[0]
            da = np.linalg.norm(G.a[i] - ref.a[j])
            value = G.weights[i] * (da + abs(G.b[i] - ref.b[j]) + abs(G.sigma[i] - ref.sigma[j]))
        elif size > 1:
            r = rbar(size)
            parts = []
            for i in cell:
                da2 = float(np.sum((G.a[i] - ref.a[j]) ** 2))
                db = abs(G.b[i] - ref.b[j])
                ds = abs(G.sigma[i] - ref.sigma[j])
                parts.append(G.weights[i] * (da2 + db**r + ds ** (r / 2.0)))
            value = math.fsum(parts)
        params[j] = float(value)
        mass = math.fsum(fit_scale * G.weights[i] for i in cell)
        weights[j] = abs(mass - ref_scale * ref.weights[j])
    return cells, params, weights


def loss_d1(lam: float, G: MixingMeasure, lam_star: float, G_star: MixingMeasure, rbar=DEFAULT_RBAR) -> LossReport:
    """Voronoi loss for the distinguishable setting.

    ``|lam - lam*| + (lam + lam*) * [parameter gaps + sum_j |lam * mass(A_j) - lam* p*_j|]``
    """
    _check_proportion(lam)
    _check_proportion(lam_star)
    if G.dim != G_star.dim:
        raise InvalidInputError("fitted and true measures differ in dimension")
    cells, params, wgaps = _cell_terms(G, G_star, rbar, lam, lam_star)
    outer = lam + lam_star
    terms = {"lambda": abs(lam - lam_star)}
    for j in range(G_star.n_atoms):
        terms[f"cell{j}.params"] = outer * params[j]
        terms[f"cell{j}.weight"] = outer * wgaps[j]
    return _report(terms, Branch.D1, cardinalities=list(cells.cardinalities))


def loss_d3(G: MixingMeasure, G_ref: MixingMeasure, rbar=DEFAULT_RBAR) -> LossReport:
    """Discrepancy between two mixing measures with Voronoi cells around ``G_ref``."""
    cells, params, wgaps = _cell_terms(G, G_ref, rbar, 1.0, 1.0)
    terms = {}
    for j in range(G_ref.n_atoms):
        terms[f"cell{j}.params"] = params[j]
        terms[f"cell{j}.weight"] = wgaps[j]
    return _report(terms, Branch.D3, cardinalities=list(cells.cardinalities))


def _check_proportion(lam):
    if not (0.0 <= lam <= 1.0):
        raise InvalidInputError(f"mixing proportion must lie in [0, 1], got {lam}")


# ---------------------------------------------------------------------------
# overlap constructions
# ---------------------------------------------------------------------------

def _overlap(G_star, G0, overlap):
    return overlap if overlap is not None else classify_regime(G_star, G0)


def overline_G(
    lam: float,
    lam_star: float,
    G0: MixingMeasure,
    G_star: MixingMeasure,
    overlap: Optional[OverlapInfo] = None,
) -> MixingMeasure:
    """``(1 - lam*/lam) G0 + (lam*/lam) G*`` with shared atoms merged.

    Atoms of ``G*`` come first (in order), then the unshared atoms of ``G0``.
    Zero-weight atoms are dropped.
    """
    if lam <= 0:
        raise InvalidProportionError("the combined measure needs lam > 0")
    overlap = _overlap(G_star, G0, overlap)
    ratio = lam_star / lam
    weights, atoms = [], []
    for j in range(G_star.n_atoms):
        w = ratio * G_star.weights[j]
        i0 = overlap.g0_index_of(j)
        if i0 is not None:
            w = (lam_star * G_star.weights[j] + (lam - lam_star) * G0.weights[i0]) / lam
        weights.append(w)
        atoms.append(Atom(G_star.a[j], G_star.b[j], G_star.sigma[j]))
    matched0 = {i for i, _ in overlap.matching}
    for i in range(G0.n_atoms):
        if i in matched0:
            continue
        weights.append((1.0 - ratio) * G0.weights[i])
        atoms.append(Atom(G0.a[i], G0.b[i], G0.sigma[i]))
    weights = np.array(weights)
    if np.any(weights < 0):
        raise InvalidProportionError(
            f"combined measure has negative weights at lam={lam}: {weights.tolist()}"
        )
    keep = weights > 0
    kept = weights[keep]
    return MixingMeasure.from_atoms(kept / kept.sum(), [a for a, k in zip(atoms, keep) if k])


def _require_full(overlap: OverlapInfo):
    if overlap.regime is not Regime.FULL_OVERLAP:
        raise RegimeMismatchError(f"operation needs full overlap, got {overlap.regime.value}")


def proportion_set_membership(
    lam: float,
    lam_star: float,
    G0: MixingMeasure,
    G_star: MixingMeasure,
    overlap: Optional[OverlapInfo] = None,
) -> Tuple[bool, Tuple[int, ...]]:
    """Whether ``lam`` lies in the admissible set, and the violating ``g0`` indices.

    Index ``i`` violates when ``(lam* - lam) p0_i > lam* p*_i``; ``lam = 0``
    is always treated as outside the admissible set.
    """
    _check_proportion(lam)
    overlap = _overlap(G_star, G0, overlap)
    _require_full(overlap)
    violating = []
    for i0, j in overlap.matching:
        if (lam_star - lam) * G0.weights[i0] > lam_star * G_star.weights[j]:
            violating.append(i0)
    in_T = lam > 0 and not violating
    return in_T, tuple(violating)


def is_ratio_independent(
    I_lambda: Sequence[int],
    G0: MixingMeasure,
    G_star: MixingMeasure,
    overlap: Optional[OverlapInfo] = None,
) -> bool:
    """True if ``|I| <= 1`` or all ratios ``p0_i / p*_i`` over ``I`` agree."""
    I_lambda = list(I_lambda)
    if len(I_lambda) <= 1:
        return True
    overlap = _overlap(G_star, G0, overlap)
    _require_full(overlap)
    ratios = []
    for i0 in I_lambda:
        p_star = G_star.weights[overlap.star_index_of(i0)]
        ratios.append(math.inf if p_star == 0 else G0.weights[i0] / p_star)
    first = ratios[0]
    for other in ratios[1:]:
        if math.isinf(first) or math.isinf(other):
            if not (math.isinf(first) and math.isinf(other)):
                return False
        elif not math.isclose(first, other, rel_tol=RATIO_RTOL, abs_tol=0.0):
            return False
    return True


def tilde_G(
    lam: float,
    lam_star: float,
    G0: MixingMeasure,
    G_star: MixingMeasure,
    I_lambda: Sequence[int],
    overlap: Optional[OverlapInfo] = None,
) -> Tuple[MixingMeasure, float]:
    """Positive part of the combined measure, renormalised; returns ``(measure, s)``."""
    overlap = _overlap(G_star, G0, overlap)
    _require_full(overlap)
    excluded = set(I_lambda)
    raw, atoms = [], []
    for j in range(G_star.n_atoms):
        i0 = overlap.g0_index_of(j)
        if i0 is None:
            w = lam_star * G_star.weights[j]
        elif i0 in excluded:
            continue
        else:
            w = lam_star * G_star.weights[j] + (lam - lam_star) * G0.weights[i0]
        raw.append(w)
        atoms.append(Atom(G_star.a[j], G_star.b[j], G_star.sigma[j]))
    s = math.fsum(raw)
    if not s > 0:
        raise DegenerateNormalizerError(f"normaliser s(lam) = {s} is not positive")
    raw = np.array(raw)
    keep = raw > 0
    return MixingMeasure.from_atoms(raw[keep] / s, [a for a, k in zip(atoms, keep) if k]), s


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------

def loss_d2(
    lam: float,
    G: MixingMeasure,
    lam_star: float,
    G_star: MixingMeasure,
    G0: MixingMeasure,
    k_fit: Optional[int] = None,
    rbar=DEFAULT_RBAR,
    overlap: Optional[OverlapInfo] = None,
) -> LossReport:
    """Loss for the partial-overlap regime.

    Reduces to D1 when the fitted order is below ``k* + k0 - k_bar`` or when
    ``lam <= lam*``; otherwise compares ``G`` with the combined measure.
    """
    overlap = _overlap(G_star, G0, overlap)
    if overlap.regime is not Regime.PARTIAL_OVERLAP:
        raise RegimeMismatchError(f"D2 needs partial overlap, got {overlap.regime.value}")
    k = G.n_atoms if k_fit is None else int(k_fit)
    threshold = G_star.n_atoms + G0.n_atoms - overlap.k_bar
    if k < threshold or lam <= lam_star:
        rep = loss_d1(lam, G, lam_star, G_star, rbar)
        rep.regime = overlap.regime
        rep.flags.update(k_bar=overlap.k_bar, k_threshold=threshold)
        return rep
    target = overline_G(lam, lam_star, G0, G_star, overlap)
    rep = loss_d3(G, target, rbar)
    rep.branch = Branch.D3_BAR
    rep.regime = overlap.regime
    rep.flags.update(k_bar=overlap.k_bar, k_threshold=threshold)
    return rep


def loss_d4(
    lam: float,
    G: MixingMeasure,
    lam_star: float,
    G_star: MixingMeasure,
    G0: MixingMeasure,
    rbar=DEFAULT_RBAR,
    overlap: Optional[OverlapInfo] = None,
) -> LossReport:
    """Loss for the full-overlap regime (``g0`` atoms all shared with ``G*``)."""
    overlap = _overlap(G_star, G0, overlap)
    _require_full(overlap)
    if G_star.allclose(G0, atol=overlap.tol):
        raise InvalidConfigurationError("G* equals G0; this is the lam* = 0 setting")
    in_T, I_lam = proportion_set_membership(lam, lam_star, G0, G_star, overlap)
    flags = {"in_T": in_T, "I_lambda": list(I_lam), "lambda_zero": lam == 0}
    if in_T:
        rep = loss_d3(G, overline_G(lam, lam_star, G0, G_star, overlap), rbar)
        rep.branch = Branch.D3_BAR
        rep.regime = overlap.regime
        rep.flags.update(flags)
        return rep
    ratio_indep = is_ratio_independent(I_lam, G0, G_star, overlap)
    flags["ratio_independent"] = ratio_indep
    if ratio_indep:
        target, s = tilde_G(lam, lam_star, G0, G_star, I_lam, overlap)
        rep = loss_d3(G, target, rbar).scaled(s, Branch.D3_TILDE)
        rep.regime = overlap.regime
        rep.flags.update(flags, s_lambda=s)
        return rep
    terms = {}
    for i0 in I_lam:
        j = overlap.star_index_of(i0)
        terms[f"negative_mass{i0}"] = (lam_star - lam) * G0.weights[i0] - lam_star * G_star.weights[j]
    return _report(terms, Branch.NEGATIVE_MASS, overlap.regime, **flags)


def loss_vanishing(
    lam_hat: float,
    G_hat: Optional[MixingMeasure] = None,
    G0: Optional[MixingMeasure] = None,
    distinguishable: bool = True,
    rbar=DEFAULT_RBAR,
) -> LossReport:
    """Metrics for ``lam* = 0``: ``lam_hat`` or ``lam_hat * D3(G_hat, G0)``."""
    _check_proportion(lam_hat)
    if distinguishable:
        return _report({"lambda": float(lam_hat)}, Branch.VANISHING_LAMBDA)
    if G0 is None or G_hat is None:
        raise MissingReferenceError("the non-distinguishable metric needs G_hat and G0")
    rep = loss_d3(G_hat, G0, rbar).scaled(float(lam_hat), Branch.VANISHING_LAMBDA_D3)
    rep.regime = None
    return rep
