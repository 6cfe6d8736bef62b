"""Multi-scale Gaussian noise: geometric schedules and perturbations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Seeded stream used everywhere in the package.

    Philox is counter based and numpy's normal sampler is platform independent,
    so a seed pins every draw across machines.
    """
    return np.random.Generator(np.random.Philox(seed))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams, one per worker or chain."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 2:
            raise ValueError("a schedule needs at least two levels")
        if np.any(s <= 0) or np.any(np.diff(s) > 0):
            raise ValueError("noise levels must be positive and non-increasing")
        object.__setattr__(self, "sigmas", s)

    @property
    def S(self) -> int:
        return self.sigmas.size

    @property
    def ratio(self) -> float:
        return float(self.sigmas[1] / self.sigmas[0])

    def __len__(self) -> int:
        return self.S


def build_schedule(sigma_max: float, sigma_min: float, S: int) -> NoiseSchedule:
    """Geometric sequence from ``sigma_max`` down to ``sigma_min`` with ``S`` levels.

    Endpoints are set exactly, the interior is ``sigma_max * r**i``.
    """
    if S < 2:
        raise ValueError(f"S must be >= 2, got {S}")
    if sigma_min <= 0 or sigma_max <= 0:
        raise ValueError("noise levels must be positive")
    if sigma_max < sigma_min:
        raise ValueError("sigma_max must be >= sigma_min")
    ratio = (sigma_min / sigma_max) ** (1.0 / (S - 1))
    sigmas = sigma_max * ratio ** np.arange(S, dtype=np.float64)
    sigmas[0], sigmas[-1] = sigma_max, sigma_min
    return NoiseSchedule(sigmas)


def sample_sigmas(schedule: NoiseSchedule, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` levels uniformly from the schedule, one per example."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return schedule.sigmas[rng.integers(0, schedule.S, size=n)]


def gaussian_noise(shape, sigma, rng: np.random.Generator) -> np.ndarray:
    """Draw ``eps ~ N(0, sigma^2 I)``; ``sigma`` is a scalar or one value per example."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    return rng.standard_normal(shape) * per_example(sigma, len(shape))


def perturb(x: np.ndarray, sigma, rng: np.random.Generator) -> np.ndarray:
    """Return ``x + eps`` with ``eps ~ N(0, sigma^2 I)``."""
    x = np.asarray(x, dtype=np.float64)
    return x + gaussian_noise(x.shape, sigma, rng)


def per_example(sigma, ndim: int) -> np.ndarray:
    """Reshape a scalar or (N,) sigma so it broadcasts over an ``ndim`` batch."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 0:
        return sigma
    return sigma.reshape((-1,) + (1,) * (ndim - 1))
