import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denoising_ebm import evaluation as E
from denoising_ebm import models as M
from denoising_ebm.noise import make_rng

MU = np.array([0.5, -1.0])
COV = np.array([[1.0, 0.3], [0.3, 0.5]])


def affine_model(A, c):
    """Linear architecture whose denoiser is exactly ``y -> A y + c``."""
    d = len(c)
    p = M.ModelParams.zeros(M.Architecture("linear", (d,), d))
    p.values["dec/skip"] = A.T.copy()
    p.values["dec/b"] = np.asarray(c, dtype=float)
    return p


# AUROC


def test_auroc_perfect_and_reversed():
    assert E.auroc([2.0, 3.0], [0.0, 1.0]) == 1.0
    assert E.auroc([0.0, 1.0], [2.0, 3.0]) == 0.0


def test_auroc_all_ties_is_half():
    assert E.auroc(np.ones(5), np.ones(7)) == 0.5


def test_auroc_rejects_empty():
    with pytest.raises(ValueError):
        E.auroc([], [1.0])


scores = st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=30)


@settings(max_examples=200, deadline=None)
@given(pos=scores, neg=scores)
def test_auroc_equals_pair_count(pos, neg):
    # small integer scores force plenty of ties
    assert E.auroc(pos, neg) == E.auroc_bruteforce(pos, neg)


@settings(max_examples=50, deadline=None)
@given(pos=scores, neg=scores)
def test_auroc_swap_symmetry(pos, neg):
    assert E.auroc(pos, neg) + E.auroc(neg, pos) == pytest.approx(1.0, abs=1e-12)


# MMD


def test_mmd_identical_sets_is_zero():
    a = make_rng(0).standard_normal((50, 2))
    assert E.mmd(a, a, 1.0, unbiased=False) == pytest.approx(0.0, abs=1e-12)


def test_mmd_single_points_closed_form():
    a, b = np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]])
    assert E.mmd(a, b, 1.0, unbiased=False) == pytest.approx(2 - 2 * np.exp(-0.5), rel=1e-12)


def test_unbiased_mmd_is_symmetric_and_separates():
    rng = make_rng(1)
    a, b = rng.standard_normal((200, 2)), rng.standard_normal((300, 2))
    assert E.mmd(a, b, 1.0) == pytest.approx(E.mmd(b, a, 1.0), rel=1e-12)
    same = abs(E.mmd(a, b, 1.0))
    far = E.mmd(a, b + 2.0, 1.0)
    assert far > 20 * same


def test_mmd_argument_checks():
    with pytest.raises(ValueError):
        E.mmd(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        E.mmd(np.zeros((1, 2)), np.zeros((3, 2)), 1.0)
    with pytest.raises(ValueError):
        E.mmd(np.zeros((3, 2)), np.zeros((3, 2)), 0.0)


def test_median_bandwidth_of_unit_square_corners():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    # pairwise distances: four sides of length 1, two diagonals
    assert E.median_bandwidth(pts) == 1.0


# mode coverage


def test_mode_coverage_counts():
    centers = np.array([[0.0, 0.0], [5.0, 0.0]])
    samples = np.array([[0.1, 0.0], [0.0, 0.2], [5.0, 0.1], [2.5, 0.0]])
    frac, unassigned = E.mode_coverage(samples, centers, 0.5)
    np.testing.assert_allclose(frac, [0.5, 0.25])
    assert unassigned == 0.25
    with pytest.raises(ValueError):
        E.mode_coverage(samples, centers, 0.0)


# scores


def test_analytic_score_at_mean_is_zero():
    np.testing.assert_array_equal(E.analytic_gaussian_score(MU, COV, 0.1, MU[None]), 0.0)


def test_analytic_score_matches_log_density_gradient():
    x = make_rng(2).standard_normal((4, 2))
    g = E.analytic_gaussian_score(MU, COV, 0.2, x)
    h = 1e-6
    for j in range(2):
        dx = np.zeros(2)
        dx[j] = h
        fd = (E.gaussian_log_density(MU, COV, 0.2, x + dx) - E.gaussian_log_density(MU, COV, 0.2, x - dx)) / (2 * h)
        np.testing.assert_allclose(g[:, j], fd, rtol=1e-6)


def test_optimal_denoiser_recovers_score_exactly():
    # the posterior-mean denoiser's residual over sigma^2 is the noised score
    sigma = 0.1
    A, c = E.optimal_linear_denoiser(MU, COV, sigma)
    pts = E.points_within(MU, COV, 2.0, 200, make_rng(3))
    field = E.score_field(affine_model(A, c), MU, COV, sigma, pts)
    assert field.cosine().min() >= 1 - 1e-9
    assert np.median(field.relative_error()) <= 1e-6


def test_score_field_csv(tmp_path):
    A, c = E.optimal_linear_denoiser(MU, COV, 0.1)
    field = E.score_field(affine_model(A, c), MU, COV, 0.1, E.points_within(MU, COV, 2.0, 5, make_rng(4)))
    E.write_score_csv(tmp_path / "s" / "score.csv", field)
    rows = list(csv.reader(open(tmp_path / "s" / "score.csv")))
    assert rows[0] == ["x0", "x1", "est0", "est1", "oracle0", "oracle1"] and len(rows) == 6


def test_points_within_radius():
    pts = E.points_within(MU, COV, 2.0, 1000, make_rng(5))
    assert pts.shape == (1000, 2)
    maha = np.sqrt(np.einsum("ni,ij,nj->n", pts - MU, np.linalg.inv(COV), pts - MU))
    assert maha.max() <= 2.0 + 1e-9
    assert maha.max() > 1.9


def test_degenerate_covariance_rejected():
    with pytest.raises(ValueError):
        E.analytic_gaussian_score(MU, -np.eye(2), 0.1, MU[None])


# Jacobians


def test_jacobian_of_affine_denoiser():
    A = np.array([[0.5, 0.1], [-0.2, 0.9]])
    p = affine_model(A, np.zeros(2))
    jac = E.reconstruction_jacobian(p, make_rng(6).standard_normal((3, 2)), 0.1)
    for j in jac:
        np.testing.assert_allclose(j, A, atol=1e-14)
    spec = E.jacobian_spectrum(p, np.zeros((1, 2)), 0.1)
    np.testing.assert_allclose(np.sort(spec[0].real)[::-1], np.sort(np.linalg.eigvals(A).real)[::-1])


def test_jacobian_matches_finite_differences():
    p = M.ModelParams.init(M.Architecture("mlp", (3,), 2, hidden=8), make_rng(7))
    x = make_rng(8).standard_normal((2, 3))
    jac = E.reconstruction_jacobian(p, x, 0.3)
    h = 1e-6
    for i in range(3):
        dx = np.zeros(3)
        dx[i] = h
        fd = (M.reconstruct(p, x + dx, 0.3) - M.reconstruct(p, x - dx, 0.3)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, i], fd, rtol=1e-5, atol=1e-9)


def test_spectrum_dimension_guard():
    p = M.ModelParams.init(M.Architecture("mlp", (3,), 2, hidden=4), make_rng(9))
    with pytest.raises(ValueError):
        E.jacobian_spectrum(p, np.zeros((1, 3)), 0.1, max_dim=2)


# OOD


def test_ood_scores_identical_sets_give_half():
    p = M.ModelParams.init(M.Architecture("mlp", (2,), 2, hidden=8), make_rng(10))
    x = make_rng(11).standard_normal((40, 2))
    # both sets see the same corruptions when the stream is replayed
    a = E.ood_score(p, x, rng=make_rng(12))
    b = E.ood_score(p, x, rng=make_rng(12))
    assert E.auroc(a, b) == 0.5
    assert np.all(a <= 0)


def test_ood_report_csv(tmp_path):
    p = M.ModelParams.init(M.Architecture("mlp", (2,), 2, hidden=8), make_rng(13))
    rep = E.ood_report(p, np.zeros((5, 2)), np.ones((4, 2)), 0.1, draws=2)
    rep.write_csv(tmp_path / "ood.csv")
    rows = dict(csv.reader(open(tmp_path / "ood.csv")))
    assert float(rows["auroc"]) == rep.auroc and rows["n_in"] == "5" and rows["n_out"] == "4"
    with pytest.raises(ValueError):
        E.ood_score(p, np.zeros((2, 2)), 0.0)
