"""Oracles and metrics: score recovery, gradient identity, Jacobian spectra, MMD, mode coverage, OOD."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import diffcore as D
from . import models as M
from .noise import make_rng

OOD_SIGMA = 0.05


@dataclass
class ScoreField:
    points: np.ndarray
    estimated: np.ndarray
    oracle: np.ndarray

    def __post_init__(self):
        if not (self.points.shape == self.estimated.shape == self.oracle.shape):
            raise ValueError("points and scores must share a shape")

    def cosine(self) -> np.ndarray:
        num = np.sum(self.estimated * self.oracle, axis=1)
        den = np.linalg.norm(self.estimated, axis=1) * np.linalg.norm(self.oracle, axis=1)
        return num / den

    def relative_error(self) -> np.ndarray:
        return np.linalg.norm(self.estimated - self.oracle, axis=1) / np.linalg.norm(self.oracle, axis=1)


def dae_score(params: M.ModelParams, x_tilde, sigma) -> np.ndarray:
    """Score implied by the denoiser: ``(r(x_tilde) - x_tilde) / sigma^2``."""
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    s = M.sigma_vector(sigma, len(x_tilde))
    r = M.reconstruct(params, x_tilde, s)
    return (r - x_tilde) / (s * s).reshape((-1,) + (1,) * (x_tilde.ndim - 1))


def analytic_gaussian_score(mu, cov, sigma: float, x_tilde) -> np.ndarray:
    """``-(cov + sigma^2 I)^{-1} (x_tilde - mu)``, the score of the noised Gaussian."""
    mu = np.asarray(mu, dtype=np.float64)
    cov_s = np.asarray(cov, dtype=np.float64) + sigma**2 * np.eye(mu.size)
    try:
        chol = np.linalg.cholesky(cov_s)
    except np.linalg.LinAlgError:
        raise ValueError("cov + sigma^2 I is not positive definite") from None
    diff = np.atleast_2d(np.asarray(x_tilde, dtype=np.float64)) - mu
    sol = np.linalg.solve(chol.T, np.linalg.solve(chol, diff.T)).T
    return -sol.reshape(np.shape(x_tilde))


def gaussian_log_density(mu, cov, sigma: float, x) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    cov_s = np.asarray(cov, dtype=np.float64) + sigma**2 * np.eye(mu.size)
    diff = np.atleast_2d(x) - mu
    _, logdet = np.linalg.slogdet(cov_s)
    quad = np.einsum("ni,ij,nj->n", diff, np.linalg.inv(cov_s), diff)
    return -0.5 * (quad + logdet + mu.size * np.log(2 * np.pi))


def optimal_linear_denoiser(mu, cov, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares optimal affine denoiser ``r(y) = A y + c`` for Gaussian data.

    ``A = cov (cov + sigma^2 I)^{-1}``, ``c = (I - A) mu``; equals the posterior mean.
    """
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    A = cov @ np.linalg.inv(cov + sigma**2 * np.eye(mu.size))
    return A, (np.eye(mu.size) - A) @ mu


def points_within(mu, cov, n_std: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws from ``N(mu, cov)`` kept only if their Mahalanobis distance is at most ``n_std``."""
    mu, cov = np.asarray(mu, dtype=np.float64), np.asarray(cov, dtype=np.float64)
    chol = np.linalg.cholesky(cov)
    out: list[np.ndarray] = []
    have = 0
    while have < n:
        u = rng.standard_normal((2 * n, mu.size))
        u = u[np.linalg.norm(u, axis=1) <= n_std]
        out.append(mu + u @ chol.T)
        have += len(u)
    return np.concatenate(out)[:n]


def score_field(params: M.ModelParams, mu, cov, sigma: float, points) -> ScoreField:
    points = np.asarray(points, dtype=np.float64)
    return ScoreField(points, dae_score(params, points, sigma), analytic_gaussian_score(mu, cov, sigma, points))


# Jacobians


def reconstruction_jacobian(params: M.ModelParams, x_tilde, sigma) -> np.ndarray:
    """Per-example Jacobian ``dr/dx_tilde`` of shape (N, d, d), one reverse pass per output coordinate."""
    x_tilde = M._check_data(params, x_tilde)
    n = len(x_tilde)
    d = params.arch.data_dim
    s = M.sigma_vector(sigma, n)
    P = params.tensors()
    jac = np.empty((n, d, d))
    for j in range(d):
        xt = D.Tensor(x_tilde, requires_grad=True)
        r = D.reshape(M.reconstruct_t(params.arch, P, xt, s), (n, d))
        seed = np.zeros((n, d))
        seed[:, j] = 1.0
        r.backward(seed)
        jac[:, j, :] = xt.grad.reshape(n, d)
    return jac


def jacobian_spectrum(params: M.ModelParams, x, sigma, max_dim: int = 64) -> np.ndarray:
    """Eigenvalues of ``dr/dx`` per point, sorted by decreasing real part, shape (N, d)."""
    if params.arch.data_dim > max_dim:
        raise ValueError(f"data dimensionality {params.arch.data_dim} exceeds {max_dim}")
    jac = reconstruction_jacobian(params, x, sigma)
    eig = np.linalg.eigvals(jac)
    order = np.argsort(-eig.real, axis=1)
    return np.take_along_axis(eig, order, axis=1)


@dataclass
class GradIdentityReport:
    max_rel_error: float
    autodiff: np.ndarray
    decomposition: np.ndarray
    residual_term: np.ndarray
    jacobian_term: np.ndarray


def grad_identity_check(params: M.ModelParams, x, sigma, seed: int = 0) -> GradIdentityReport:
    """Compare the autodiff gradient of the texture energy with its two-term form.

    With ``res = x - r(x + eps)`` the gradient is ``res / sigma^2 - J_r^T res / sigma^2``,
    ``J_r`` the Jacobian of the denoiser at the corrupted input.  Relative
    error is measured per example in L2.
    """
    x = M._check_data(params, x)
    s = M.sigma_vector(sigma, len(x))
    rng = make_rng(seed)
    eps = rng.standard_normal(x.shape) * s.reshape((-1,) + (1,) * (x.ndim - 1))
    auto, _ = M.grad_texture_energy(params, x, s, eps=eps)

    n, d = len(x), params.arch.data_dim
    x_tilde = x + eps
    res = (x - M.reconstruct(params, x_tilde, s)).reshape(n, d)
    jac = reconstruction_jacobian(params, x_tilde, s)
    inv = (1.0 / (s * s))[:, None]
    first = res * inv
    second = np.einsum("nji,nj->ni", jac, res) * inv
    decomp = (first - second).reshape(x.shape)
    num = np.linalg.norm((auto - decomp).reshape(n, -1), axis=1)
    den = np.maximum(np.linalg.norm(decomp.reshape(n, -1), axis=1), np.finfo(float).tiny)
    rel = np.where(num == 0, 0.0, num / den)
    return GradIdentityReport(float(rel.max()), auto, decomp, first.reshape(x.shape), second.reshape(x.shape))


# sample-quality metrics


def auroc(pos, neg) -> float:
    """P(random positive > random negative), ties counted one half."""
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs non-empty score lists")
    ranks = rankdata(np.concatenate([pos, neg]))
    wins = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(wins / (pos.size * neg.size))


def auroc_bruteforce(pos, neg) -> float:
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return float(wins / (pos.size * neg.size))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(points, max_points: int = 2000) -> float:
    """Median pairwise Euclidean distance over (at most) the first ``max_points`` points."""
    p = np.asarray(points, dtype=np.float64).reshape(len(points), -1)[:max_points]
    d = np.sqrt(_sq_dists(p, p))
    return float(np.median(d[np.triu_indices(len(p), k=1)]))


def _kernel_sum(a: np.ndarray, b: np.ndarray, bw: float, chunk: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(a), chunk):
        total += float(np.exp(-_sq_dists(a[i : i + chunk], b) / (2.0 * bw * bw)).sum())
    return total


def mmd(a, b, bandwidth: float | None = None, *, unbiased: bool = True) -> float:
    """Squared MMD with a Gaussian kernel ``exp(-|x-y|^2 / (2 h^2))``.

    ``unbiased`` drops the diagonal of the within-set sums (U-statistic; may be
    slightly negative, and is exactly symmetric).  Otherwise the V-statistic,
    which is zero for identical sets.  ``bandwidth=None`` uses the median
    pairwise distance of the pooled sample.
    """
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("mmd needs non-empty sets")
    if bandwidth is None:
        bandwidth = median_bandwidth(np.concatenate([a, b]))
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    m, n = len(a), len(b)
    kaa, kbb, kab = _kernel_sum(a, a, bandwidth), _kernel_sum(b, b, bandwidth), _kernel_sum(a, b, bandwidth)
    if unbiased:
        if m < 2 or n < 2:
            raise ValueError("unbiased mmd needs at least two points per set")
        return (kaa - m) / (m * (m - 1)) + (kbb - n) / (n * (n - 1)) - 2.0 * kab / (m * n)
    return kaa / (m * m) + kbb / (n * n) - 2.0 * kab / (m * n)


def mode_coverage(samples, centers, radius: float) -> tuple[np.ndarray, float]:
    """Fraction of samples whose nearest center lies within ``radius``, per center, plus the unassigned rest."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    c = np.asarray(centers, dtype=np.float64).reshape(len(centers), -1)
    d = np.sqrt(_sq_dists(x, c))
    nearest = np.argmin(d, axis=1)
    hit = d[np.arange(len(x)), nearest] <= radius
    frac = np.bincount(nearest[hit], minlength=len(c)) / len(x)
    return frac, float(1.0 - hit.mean())


# OOD


@dataclass
class OodReport:
    in_scores: np.ndarray
    out_scores: np.ndarray
    auroc: float
    sigma: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow(["auroc", repr(self.auroc)])
            w.writerow(["sigma", repr(self.sigma)])
            w.writerow(["n_in", len(self.in_scores)])
            w.writerow(["n_out", len(self.out_scores)])
            w.writerow(["mean_in", repr(float(np.mean(self.in_scores)))])
            w.writerow(["mean_out", repr(float(np.mean(self.out_scores)))])


def ood_score(params: M.ModelParams, batch, sigma: float = OOD_SIGMA, *, draws: int = 8, rng=None) -> np.ndarray:
    """Negative texture energy per example, averaged over ``draws`` corruptions."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    rng = rng if rng is not None else make_rng(0)
    total = np.zeros(len(batch))
    for _ in range(draws):
        total += M.texture_energy(params, batch, sigma, rng=rng).value
    return -total / draws


def ood_report(params: M.ModelParams, in_set, out_set, sigma: float = OOD_SIGMA, *, draws: int = 8, rng=None) -> OodReport:
    rng = rng if rng is not None else make_rng(0)
    s_in = ood_score(params, in_set, sigma, draws=draws, rng=rng)
    s_out = ood_score(params, out_set, sigma, draws=draws, rng=rng)
    return OodReport(s_in, s_out, auroc(s_in, s_out), sigma)


def write_score_csv(path, field: ScoreField) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    d = field.points.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + [f"est{i}" for i in range(d)] + [f"oracle{i}" for i in range(d)])
        for row in np.concatenate([field.points, field.estimated, field.oracle], axis=1):
            w.writerow([repr(float(v)) for v in row])
