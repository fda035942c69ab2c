import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from dmoe.exceptions import InvalidInputError
from dmoe.model import (
    Atom,
    Dataset,
    DeviatedModel,
    MixingMeasure,
    ParameterBox,
    deviated_density,
    expert_density,
    log_likelihood,
    measure_from_lists,
    mixture_density,
    sample_dataset,
)

SQRT_2PI_INV = 0.3989422804014327
G0 = measure_from_lists([0.5, 0.5], [[0.2, 0.1, 0.01], [0.1, 0.0, 0.01]])
GS = measure_from_lists([1.0], [[1.0, 1.0, 1.0]])
TRUTH = DeviatedModel(0.5, GS, G0)


def naive_pdf(y, mean, var):
    return math.exp(-((y - mean) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)


# -- types -------------------------------------------------------------------

def test_atom_rejects_bad_sigma():
    with pytest.raises(InvalidInputError):
        Atom([0.0], 0.0, 0.0)
    with pytest.raises(InvalidInputError):
        Atom([np.nan], 0.0, 1.0)


def test_measure_weight_validation():
    with pytest.raises(InvalidInputError):
        measure_from_lists([0.5, 0.6], [[0, 0, 1], [1, 1, 1]])
    with pytest.raises(InvalidInputError):
        measure_from_lists([1.0, 0.0], [[0, 0, 1], [1, 1, 1]])


def test_measure_floor():
    with pytest.raises(InvalidInputError):
        MixingMeasure([0.999, 0.001], [[0.0], [1.0]], [0, 1], [1, 1], floor=0.01)


def test_measure_arrays_are_read_only():
    with pytest.raises(ValueError):
        GS.weights[0] = 0.3


def test_json_round_trip():
    doc = TRUTH.to_dict()
    assert set(doc) == {"lambda", "mixture", "g0"}
    back = DeviatedModel.from_dict(json.loads(json.dumps(doc)))
    assert back.lam == 0.5 and back.mixture.allclose(GS) and back.g0.allclose(G0)


def test_box_validation_and_clip():
    with pytest.raises(InvalidInputError):
        ParameterBox([1.0], [0.0])
    box = ParameterBox.default(1)
    a, b, s, clipped = box.clip(np.array([[20.0]]), np.array([0.0]), np.array([1e-9]))
    assert clipped and a[0, 0] == 10.0 and s[0] == box.sigma_low


# -- densities ---------------------------------------------------------------

def test_expert_density_standard_normal_mode():
    assert expert_density(Atom([0.0], 0.0, 1.0), 0.0, 0.0) == pytest.approx(SQRT_2PI_INV, abs=1e-15)


def test_expert_density_symmetric():
    atom = Atom([0.0], 0.0, 1.0)
    assert expert_density(atom, 0.0, 3.0) == expert_density(atom, 0.0, -3.0)


def test_expert_density_truth_atom():
    assert expert_density(Atom([1.0], 1.0, 1.0), 0.5, 1.5) == pytest.approx(SQRT_2PI_INV, abs=1e-15)


def test_mixture_density_two_term_hand_sum():
    expected = 0.5 * naive_pdf(0.0, 0.1, 0.01) + 0.5 * naive_pdf(0.0, 0.0, 0.01)
    assert mixture_density(G0, 0.0, 0.0) == pytest.approx(expected, rel=1e-14)


def test_mixture_merge_invariance():
    split = measure_from_lists([0.5, 0.5], [[1, 1, 1], [1, 1, 1]])
    ys = np.linspace(-3, 3, 7)
    assert np.allclose(mixture_density(split, 0.3, ys), mixture_density(GS, 0.3, ys), rtol=1e-15)


def test_deviated_density_endpoints_and_midpoint():
    x, y = 0.4, 0.7
    g0 = mixture_density(G0, x, y)
    pg = mixture_density(GS, x, y)
    assert deviated_density(DeviatedModel(0.0, GS, G0), x, y) == pytest.approx(g0, rel=1e-14)
    assert deviated_density(DeviatedModel(1.0, GS, G0), x, y) == pytest.approx(pg, rel=1e-14)
    assert deviated_density(TRUTH, x, y) == pytest.approx(0.5 * (g0 + pg), rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(-3, 3), st.floats(-4, 4))
def test_deviated_density_is_convex_combination(lam, x, y):
    m = DeviatedModel(lam, GS, G0)
    g0, pg = mixture_density(G0, x, y), mixture_density(GS, x, y)
    v = deviated_density(m, x, y)
    assert min(g0, pg) * (1 - 1e-12) <= v <= max(g0, pg) * (1 + 1e-12)


@pytest.mark.parametrize("x", [-1.0, 0.0, 2.0])
def test_density_integrates_to_one(x):
    pts = [0.2 * x + 0.1, 0.1 * x, x + 1.0]
    val, _ = integrate.quad(lambda y: deviated_density(TRUTH, x, y), -30, 30, points=pts, limit=200)
    assert val == pytest.approx(1.0, abs=1e-6)


def test_permuting_atoms_leaves_density_unchanged():
    G = measure_from_lists([0.2, 0.3, 0.5], [[0.2, 0.1, 0.01], [0.1, 0.4, 0.25], [1.1, 0.3, 0.25]])
    ys = np.linspace(-1, 2, 11)
    np.testing.assert_allclose(mixture_density(G, 0.3, ys), mixture_density(G.permuted([2, 0, 1]), 0.3, ys), rtol=1e-14)


# -- likelihood --------------------------------------------------------------

def test_log_likelihood_single_point_at_mode():
    m = DeviatedModel(1.0, measure_from_lists([1.0], [[0, 0, 1]]), G0)
    data = Dataset(np.zeros((1, 1)), np.zeros(1))
    assert log_likelihood(m, data) == pytest.approx(math.log(SQRT_2PI_INV), abs=1e-14)


def test_log_likelihood_additive():
    data = sample_dataset(TRUTH, 50, 3)
    assert log_likelihood(TRUTH, data.concat(data)) == pytest.approx(2 * log_likelihood(TRUTH, data), rel=1e-14)


def test_log_likelihood_naive_oracle():
    X = np.array([-1.2, -0.3, 0.0, 0.5, 1.7])
    Y = np.array([0.05, 0.2, 0.1, 1.4, 2.2])
    total = 0.0
    for x, y in zip(X, Y):
        g0 = 0.5 * naive_pdf(y, 0.2 * x + 0.1, 0.01) + 0.5 * naive_pdf(y, 0.1 * x, 0.01)
        total += math.log(0.5 * g0 + 0.5 * naive_pdf(y, x + 1.0, 1.0))
    assert log_likelihood(TRUTH, Dataset(X, Y)) == pytest.approx(total, abs=1e-12)


def test_log_likelihood_far_point_is_finite():
    data = Dataset(np.zeros((1, 1)), np.array([60.0]))
    assert np.isfinite(log_likelihood(TRUTH, data))


# -- sampling ----------------------------------------------------------------

def test_sample_mean_standard_normal():
    m = DeviatedModel(1.0, measure_from_lists([1.0], [[0, 0, 1]]), G0)
    data = sample_dataset(m, 100_000, 11)
    assert abs(data.responses.mean()) < 3 * 10**-2.5


def test_sample_variance_is_sigma():
    m = DeviatedModel(1.0, measure_from_lists([1.0], [[0, 0, 2.5]]), G0)
    assert sample_dataset(m, 100_000, 5).responses.var() == pytest.approx(2.5, rel=0.03)


def test_lambda_zero_matches_g0_marginal():
    # with X ~ N(0, 1) each g0 component has marginal N(b, a^2 + sigma)
    data = sample_dataset(DeviatedModel(0.0, GS, G0), 100_000, 9)

    def cdf(y):
        return 0.5 * stats.norm.cdf(y, 0.1, math.sqrt(0.04 + 0.01)) + 0.5 * stats.norm.cdf(y, 0.0, math.sqrt(0.01 + 0.01))

    assert stats.kstest(data.responses, cdf).statistic < 0.01


def test_sampling_is_deterministic():
    a = sample_dataset(TRUTH, 200, 42)
    b = sample_dataset(TRUTH, 200, 42)
    assert np.array_equal(a.covariates, b.covariates) and np.array_equal(a.responses, b.responses)
    ss = np.random.SeedSequence(5)
    assert np.array_equal(sample_dataset(TRUTH, 20, ss).responses, sample_dataset(TRUTH, 20, np.random.SeedSequence(5)).responses)


def test_sample_rejects_zero_n():
    with pytest.raises(InvalidInputError):
        sample_dataset(TRUTH, 0, 1)


def test_dataset_csv_round_trip(tmp_path):
    data = sample_dataset(TRUTH, 30, 1)
    path = tmp_path / "d.csv"
    data.to_csv(path)
    assert path.read_text().splitlines()[0] == "x1,y"
    back = Dataset.from_csv(path)
    assert np.array_equal(back.covariates, data.covariates)
    assert np.array_equal(back.responses, data.responses)


def test_dataset_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(InvalidInputError):
        Dataset.from_csv(path)


def test_dataset_layout():
    data = sample_dataset(TRUTH, 10, 1)
    assert data.covariates.flags["F_CONTIGUOUS"]
    assert data.responses.flags["C_CONTIGUOUS"]
