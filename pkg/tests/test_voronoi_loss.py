import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmoe.exceptions import (
    DegenerateNormalizerError,
    InvalidConfigurationError,
    InvalidProportionError,
    MissingReferenceError,
    RegimeMismatchError,
    UnsupportedCellSizeError,
)
from dmoe.model import Atom, MixingMeasure, measure_from_lists
from dmoe.voronoi_loss import (
    Branch,
    RBarTable,
    Regime,
    assign_cells,
    classify_regime,
    is_ratio_independent,
    loss_d1,
    loss_d2,
    loss_d3,
    loss_d4,
    loss_vanishing,
    overline_G,
    proportion_set_membership,
    tilde_G,
)

THIRD = [1 / 3, 1 / 3, 1 / 3]
G0_ND = measure_from_lists(THIRD, [[0.2, 0.1, 0.01], [0.1, 0.1, 0.01], [0.21, 0.11, 0.01215]])
GS_ND = measure_from_lists(THIRD, [[0.2, 0.1, 0.01], [0.1, 0.4, 0.25], [1.1, 0.3, 0.25]])
G0_D = measure_from_lists([0.5, 0.5], [[0.2, 0.1, 0.01], [0.1, 0.0, 0.01]])
GS_D = measure_from_lists([1.0], [[1.0, 1.0, 1.0]])


def one(a=1.0, b=1.0, s=1.0):
    return measure_from_lists([1.0], [[a, b, s]])


# -- regimes and cells -------------------------------------------------------

def test_classify_partial_overlap():
    info = classify_regime(GS_ND, G0_ND)
    assert info.k_bar == 1
    assert info.regime is Regime.PARTIAL_OVERLAP
    assert info.matching == ((0, 0),)


def test_classify_full_and_disjoint():
    assert classify_regime(GS_ND, GS_ND).regime is Regime.FULL_OVERLAP
    assert classify_regime(GS_ND, GS_ND).k_bar == 3
    info = classify_regime(GS_D, G0_D)
    assert info.k_bar == 0 and info.regime is Regime.DISTINGUISHABLE
    assert classify_regime(GS_D, None).regime is Regime.DISTINGUISHABLE


def test_assign_cells_tie_goes_to_first_reference():
    refs = [Atom([0.0], 0.0, 1.0), Atom([0.0], 2.0, 1.0)]
    G = measure_from_lists([1.0], [[0.0, 1.0, 1.0]])
    cells = assign_cells(G, refs)
    assert cells.cell_of == (0,)
    assert cells.cardinalities == (1, 0)


def test_assign_cells_overfit_geometry():
    G = measure_from_lists([0.5, 0.5], [[1.05, 0.98, 1.0], [0.97, 1.02, 1.1]])
    assert assign_cells(G, GS_D).cardinalities == (2,)


# -- D1 / D3 hand values -----------------------------------------------------

def test_d1_zero_at_truth():
    assert loss_d1(0.5, GS_ND, 0.5, GS_ND).value == 0.0


def test_d1_exact_fitted_a_offset():
    delta = 0.03
    rep = loss_d1(1.0, one(a=1 + delta), 1.0, one())
    assert rep.value == pytest.approx(2 * delta, abs=1e-15)


@pytest.mark.parametrize("delta", [0.1, 0.01])
def test_d1_overfit_b_pair_uses_rbar2(delta):
    G = measure_from_lists([0.5, 0.5], [[1, 1 + delta, 1], [1, 1 - delta, 1]])
    rep = loss_d1(1.0, G, 1.0, one())
    assert rep.value == pytest.approx(2 * delta**4, rel=1e-12)


def test_d3_sigma_offset():
    delta = 0.2
    assert loss_d3(one(s=1 + delta), one()).value == pytest.approx(delta, abs=1e-15)


def test_d3_overfit_triple_uses_rbar3():
    delta = 0.1
    G = measure_from_lists(THIRD, [[1, 1 + delta, 1], [1, 1 - delta, 1], [1, 1, 1]])
    assert loss_d3(G, one()).value == pytest.approx(2 / 3 * delta**6, rel=1e-9)


def test_value_equals_sum_of_terms():
    G = measure_from_lists([0.2, 0.3, 0.5], [[0.3, 0.2, 0.02], [0.15, 0.45, 0.2], [1.0, 0.25, 0.3]])
    rep = loss_d1(0.4, G, 0.5, GS_ND)
    assert abs(rep.value - math.fsum(rep.terms.values())) < 1e-12


def test_four_atom_cell_needs_surrogate():
    G = measure_from_lists([0.25] * 4, [[1, 1 + e, 1] for e in (0.1, -0.1, 0.05, -0.05)])
    with pytest.raises(UnsupportedCellSizeError) as info:
        loss_d1(1.0, G, 1.0, one())
    assert info.value.cardinality == 4
    rep = loss_d1(1.0, G, 1.0, one(), rbar=RBarTable(surrogate=7))
    assert rep.value > 0


def test_weight_term_is_scaled_in_d1_only():
    # the fitted weight mismatch enters D1 multiplied by (lam + lam*), D3 unscaled
    G = measure_from_lists([0.5, 0.5], [[1, 1, 1], [0.1, 0.4, 0.25]])
    ref = measure_from_lists([0.3, 0.7], [[1, 1, 1], [0.1, 0.4, 0.25]])
    d1 = loss_d1(0.5, G, 0.5, ref)
    assert d1.terms["cell0.weight"] == pytest.approx(1.0 * abs(0.25 - 0.15))
    assert loss_d3(G, ref).terms["cell0.weight"] == pytest.approx(0.2)


# -- permutation and zero properties ------------------------------------------

measures = st.integers(1, 3).flatmap(
    lambda k: st.tuples(
        st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k),
        st.lists(
            st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 3)),
            min_size=k,
            max_size=k,
        ),
    )
)


def _build(spec):
    w, atoms = spec
    w = np.array(w) / np.sum(w)
    return measure_from_lists(w, atoms)


@settings(max_examples=60, deadline=None)
@given(measures, measures, st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.randoms(use_true_random=False))
def test_permutation_invariance(fit_spec, ref_spec, lam, lam_star, rnd):
    G, ref = _build(fit_spec), _build(ref_spec)
    p = list(range(G.n_atoms))
    q = list(range(ref.n_atoms))
    rnd.shuffle(p)
    rnd.shuffle(q)
    try:
        base1 = loss_d1(lam, G, lam_star, ref).value
        base3 = loss_d3(G, ref).value
    except UnsupportedCellSizeError:
        return
    # the tie rule depends on reference order, so ties are skipped
    d = np.linalg.norm(G.thetas[:, None] - ref.thetas[None], axis=2)
    s = np.sort(d, axis=1)
    if s.shape[1] > 1 and np.any(s[:, 1] - s[:, 0] < 1e-9):
        return
    assert abs(loss_d1(lam, G.permuted(p), lam_star, ref.permuted(q)).value - base1) < 1e-12
    assert abs(loss_d3(G.permuted(p), ref.permuted(q)).value - base3) < 1e-12


@settings(max_examples=40, deadline=None)
@given(measures)
def test_d3_self_is_zero(spec):
    G = _build(spec)
    if len({tuple(t) for t in G.thetas}) < G.n_atoms:
        return
    assert loss_d3(G, G).value == 0.0


def test_d1_zero_iff_equal_on_constructed_cases():
    rng = np.random.default_rng(7)
    for _ in range(50):
        k = rng.integers(1, 4)
        w = rng.dirichlet(np.ones(k))
        atoms = [[rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.1, 2)] for _ in range(k)]
        G = measure_from_lists(w, atoms)
        lam = rng.uniform(0.05, 1)
        assert loss_d1(lam, G.permuted(rng.permutation(k)), lam, G).value == 0.0
        # a single coordinate change must make it positive
        bumped = [list(a) for a in atoms]
        bumped[rng.integers(k)][rng.integers(3)] += 1e-3
        assert loss_d1(lam, measure_from_lists(w, bumped), lam, G).value > 0.0
        assert loss_d1(min(lam + 1e-3, 1.0) if lam < 1 else lam - 1e-3, G, lam, G).value > 0.0


def test_d1_zero_lambda_star():
    assert loss_d1(0.0, GS_D, 0.0, GS_D).value == 0.0


# -- overlap constructions ----------------------------------------------------

def test_overline_g_at_lam_star_is_g_star():
    assert overline_G(0.5, 0.5, G0_ND, GS_ND).allclose(GS_ND)


def test_overline_g_partial_hand_values():
    out = overline_G(0.75, 0.5, G0_ND, GS_ND)
    assert out.n_atoms == 5
    assert out.weights[0] == pytest.approx(1 / 3, abs=1e-15)
    assert out.weights[1] == pytest.approx(2 / 9)
    assert out.weights[3] == pytest.approx(1 / 9)
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_overline_g_full_overlap_identity():
    assert overline_G(1.0, 0.5, GS_ND, GS_ND).allclose(GS_ND)


def test_overline_g_negative_weight_raises():
    G0 = measure_from_lists([0.5, 0.5], [[0, 0, 1], [1, 1, 1]])
    with pytest.raises(InvalidProportionError):
        overline_G(0.25, 0.5, G0, GS_D)


def test_d2_routes_to_d1_below_threshold():
    G = measure_from_lists([0.25] * 4, [[0.2, 0.1, 0.01], [0.1, 0.4, 0.25], [1.1, 0.3, 0.25], [1.0, 0.3, 0.2]])
    d2 = loss_d2(0.6, G, 0.5, GS_ND, G0_ND, k_fit=4)
    d1 = loss_d1(0.6, G, 0.5, GS_ND)
    assert d2.value == d1.value and d2.branch is Branch.D1


def test_d2_uses_overline_above_threshold():
    target = overline_G(0.75, 0.5, G0_ND, GS_ND)
    d2 = loss_d2(0.75, target, 0.5, GS_ND, G0_ND, k_fit=5)
    assert d2.branch is Branch.D3_BAR and d2.value == 0.0


def test_d2_boundary_goes_to_d1():
    G = overline_G(0.75, 0.5, G0_ND, GS_ND)
    rep = loss_d2(0.5, G, 0.5, GS_ND, G0_ND, k_fit=5)
    assert rep.branch is Branch.D1
    assert rep.value == loss_d1(0.5, G, 0.5, GS_ND).value


def test_d2_requires_partial_overlap():
    with pytest.raises(RegimeMismatchError):
        loss_d2(0.5, GS_D, 0.5, GS_D, G0_D)


def test_proportion_set_hand_example():
    G0 = measure_from_lists([0.5, 0.5], [[0, 0, 1], [1, 1, 1]])
    Gs = measure_from_lists([0.1, 0.9], [[0, 0, 1], [1, 1, 1]])
    in_T, I = proportion_set_membership(0.3, 0.5, G0, Gs)
    assert not in_T and I == (0,)
    assert proportion_set_membership(0.5, 0.5, G0, Gs) == (True, ())
    assert proportion_set_membership(0.9, 0.5, G0, Gs) == (True, ())
    in_T0, I0 = proportion_set_membership(0.0, 0.5, G0, Gs)
    assert not in_T0 and I0 == (0,)


def test_ratio_independence_examples():
    atoms = [[0, 0, 1], [1, 1, 1], [2, 2, 1]]
    G0 = measure_from_lists([0.4, 0.2, 0.4], atoms)
    Gs = measure_from_lists([0.2, 0.1, 0.7], atoms)
    assert is_ratio_independent([0], G0, Gs)
    assert is_ratio_independent([0, 1], G0, Gs)
    Gs2 = measure_from_lists([0.2, 0.15, 0.65], atoms)
    assert not is_ratio_independent([0, 1], G0, Gs2)


def test_tilde_g_hand_example():
    atoms = [[0, 0, 1], [1, 1, 1]]
    G0 = measure_from_lists([0.8, 0.2], atoms)
    Gs = measure_from_lists([0.1, 0.9], atoms)
    in_T, I = proportion_set_membership(0.2, 0.5, G0, Gs)
    assert I == (0,)
    G_t, s = tilde_G(0.2, 0.5, G0, Gs, I)
    assert s == pytest.approx(0.39, abs=1e-15)
    assert G_t.n_atoms == 1 and G_t.weights[0] == 1.0
    rep = loss_d4(0.2, G_t, 0.5, Gs, G0)
    assert rep.branch is Branch.D3_TILDE and rep.value == 0.0


def test_tilde_g_empty_index_set_matches_overline():
    atoms = [[0, 0, 1], [1, 1, 1]]
    G0 = measure_from_lists([0.8, 0.2], atoms)
    Gs = measure_from_lists([0.1, 0.9], atoms)
    G_t, s = tilde_G(0.7, 0.5, G0, Gs, ())
    assert s == pytest.approx(0.7)
    assert G_t.allclose(overline_G(0.7, 0.5, G0, Gs), atol=1e-12)


def test_tilde_g_degenerate_normaliser():
    atoms = [[0, 0, 1], [1, 1, 1]]
    G0 = measure_from_lists([0.5, 0.5], atoms)
    Gs = measure_from_lists([0.1, 0.9], atoms)
    with pytest.raises(DegenerateNormalizerError):
        tilde_G(0.0, 0.5, G0, Gs, (0, 1))


def test_d4_in_t_equals_d3_against_overline():
    atoms = [[0, 0, 1], [1, 1, 1]]
    G0 = measure_from_lists([0.8, 0.2], atoms)
    Gs = measure_from_lists([0.1, 0.9], atoms)
    G = measure_from_lists([0.3, 0.7], [[0.1, 0, 1], [1, 1.1, 1]])
    rep = loss_d4(0.7, G, 0.5, Gs, G0)
    assert rep.branch is Branch.D3_BAR
    assert rep.value == loss_d3(G, overline_G(0.7, 0.5, G0, Gs)).value


def test_d4_negative_mass_branch():
    atoms = [[0, 0, 1], [1, 1, 1], [2, 2, 1]]
    G0 = measure_from_lists([0.4, 0.2, 0.4], atoms)
    Gs = measure_from_lists([0.2, 0.15, 0.65], atoms)
    lam, lam_star = 0.05, 0.5
    in_T, I = proportion_set_membership(lam, lam_star, G0, Gs)
    assert I == (0, 1)
    rep = loss_d4(lam, measure_from_lists([1.0], [[2, 2, 1]]), lam_star, Gs, G0)
    assert rep.branch is Branch.NEGATIVE_MASS
    expected = (0.45 * 0.4 - 0.5 * 0.2) + (0.45 * 0.2 - 0.5 * 0.15)
    assert rep.value == pytest.approx(expected, abs=1e-15)


def test_d4_rejects_g_star_equal_g0():
    with pytest.raises(InvalidConfigurationError):
        loss_d4(0.5, GS_ND, 0.5, GS_ND, GS_ND)


def test_vanishing_metrics():
    assert loss_vanishing(0.0).value == 0.0
    assert loss_vanishing(0.1).value == 0.1
    assert loss_vanishing(0.0, GS_D, GS_D, distinguishable=False).value == 0.0
    delta = 0.3
    rep = loss_vanishing(0.2, one(s=1 + delta), one(), distinguishable=False)
    assert rep.value == pytest.approx(0.2 * delta)
    assert rep.branch is Branch.VANISHING_LAMBDA_D3
    with pytest.raises(MissingReferenceError):
        loss_vanishing(0.2, distinguishable=False)


def test_report_serialises():
    doc = loss_d2(0.6, GS_ND, 0.5, GS_ND, G0_ND).to_dict()
    assert doc["branch"] == "D1" and doc["regime"] == "PartialOverlap"
