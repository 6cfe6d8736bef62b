"""Langevin Monte Carlo in latent space, in data space, and the two-stage pipeline.

Each update is ``x <- x - eta * grad U(x, sigma_t) + sqrt(2 eta) * e``.  The
energies are stochastic (they perturb their input), so by default every step
draws a fresh corruption; ``fresh_eps=False`` freezes one standard-normal
draw per chain and rescales it by the current sigma.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import models as M
from .data import save_tensor
from .noise import NoiseSchedule, per_example

POLICIES = ("annealed", "fixed", "paired")


@dataclass(frozen=True)
class SamplerConfig:
    """Step counts, step sizes and the noise level fed to the energies.

    ``sigma_policy``:
      * ``"annealed"``: sweep the schedule's levels from ``anneal_from`` down to its smallest one;
      * ``"fixed"``: every step uses ``sigma``;
      * ``"paired"``: chain ``i`` uses the caller-supplied level ``sigmas[i]`` (training negatives).
    """

    K: int = 20
    T: int = 90
    eta1: float = 0.1
    eta2: float = 0.01
    sigma_policy: str = "annealed"
    sigma: float = 0.05
    anneal_from: float = 1.0
    fresh_eps: bool = True
    record_trajectory: bool = False

    def __post_init__(self):
        if self.K < 0 or self.T < 0:
            raise ValueError("K and T must be non-negative")
        if not (self.eta1 > 0 and self.eta2 > 0):
            raise ValueError("step sizes must be positive")
        if self.sigma_policy not in POLICIES:
            raise ValueError(f"sigma_policy must be one of {POLICIES}")
        if not (self.sigma > 0 and self.anneal_from > 0):
            raise ValueError("noise levels must be positive")


@dataclass
class Chain:
    states: list[np.ndarray] = field(default_factory=list)
    energies: list[np.ndarray] = field(default_factory=list)
    sigmas: list[np.ndarray] = field(default_factory=list)
    seed: int | None = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def sigma_sequence(cfg: SamplerConfig, steps: int, schedule: NoiseSchedule | None = None, sigmas=None) -> list:
    """Noise level used at each of ``steps`` updates (scalars, or per-chain arrays for ``paired``)."""
    if cfg.sigma_policy == "fixed":
        return [cfg.sigma] * steps
    if cfg.sigma_policy == "paired":
        if sigmas is None:
            raise ValueError("paired sigma policy needs per-chain sigmas")
        return [np.asarray(sigmas, dtype=np.float64)] * steps
    if schedule is None:
        raise ValueError("annealed sigma policy needs a noise schedule")
    levels = schedule.sigmas[schedule.sigmas <= cfg.anneal_from * (1 + 1e-12)]
    if levels.size == 0:
        levels = schedule.sigmas[-1:]
    if steps == 0:
        return []
    idx = np.rint(np.linspace(0, levels.size - 1, steps)).astype(int)
    return [float(levels[i]) for i in idx]


GradFn = Callable[[np.ndarray, object], tuple[np.ndarray, np.ndarray]]


def langevin(grad_fn: GradFn, x0, sigma_seq, eta: float, rng: np.random.Generator, *,
             noise: bool = True, record: bool = False, energy_fn=None) -> Chain:  # fmt: skip
    """Generic unadjusted Langevin loop.

    ``grad_fn(x, sigma)`` returns ``(grad, energy)``.  With ``record`` every
    state is kept; ``energy_fn(x, sigma)`` then scores the final state.
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    x = np.array(x0, dtype=np.float64)
    chain = Chain(states=[x.copy()])
    scale = np.sqrt(2.0 * eta)
    for sigma in sigma_seq:
        g, u = grad_fn(x, sigma)
        x = x - eta * g
        if noise:
            x = x + scale * rng.standard_normal(x.shape)
        if record:
            chain.states.append(x.copy())
            chain.energies.append(u)
            chain.sigmas.append(np.broadcast_to(sigma, (x.shape[0],)).copy())
    if record and energy_fn is not None and sigma_seq:
        chain.energies.append(energy_fn(x, sigma_seq[-1]))
    if not record:
        chain.states = [x]
    return chain


def _corruption(cfg: SamplerConfig, shape, rng: np.random.Generator):
    """Standard-normal draw behind each energy evaluation: fresh per call, or frozen per chain."""
    frozen = None if cfg.fresh_eps else rng.standard_normal(shape)

    def draw(sigma) -> np.ndarray:
        xi = rng.standard_normal(shape) if frozen is None else frozen
        return xi * per_example(M.sigma_vector(sigma, shape[0]), len(shape))

    return draw


def langevin_latent(params: M.ModelParams, z0, cfg: SamplerConfig, rng: np.random.Generator, *,
                    schedule: NoiseSchedule | None = None, sigmas=None, noise: bool = True) -> Chain:  # fmt: skip
    """``K`` Langevin steps on the semantic energy, starting from ``z0``."""
    z0 = M._check_latent(params, z0)
    eps = _corruption(cfg, (len(z0),) + params.arch.data_shape, rng)

    def grad_fn(z, sigma):
        g, u = M.grad_semantic_energy(params, z, sigma, eps=eps(sigma))
        return g, u.value

    def energy_fn(z, sigma):
        return M.semantic_energy(params, z, sigma, eps=eps(sigma)).value

    seq = sigma_sequence(cfg, cfg.K, schedule, sigmas)
    return langevin(grad_fn, z0, seq, cfg.eta1, rng, noise=noise,
                    record=cfg.record_trajectory, energy_fn=energy_fn)  # fmt: skip


def langevin_data(params: M.ModelParams, x0, cfg: SamplerConfig, rng: np.random.Generator, *,
                  schedule: NoiseSchedule | None = None, sigmas=None, noise: bool = True) -> Chain:  # fmt: skip
    """``T`` Langevin steps on the texture energy, starting from ``x0``."""
    x0 = M._check_data(params, x0)
    eps = _corruption(cfg, x0.shape, rng)

    def grad_fn(x, sigma):
        g, u = M.grad_texture_energy(params, x, sigma, eps=eps(sigma))
        return g, u.value

    def energy_fn(x, sigma):
        return M.texture_energy(params, x, sigma, eps=eps(sigma)).value

    seq = sigma_sequence(cfg, cfg.T, schedule, sigmas)
    return langevin(grad_fn, x0, seq, cfg.eta2, rng, noise=noise,
                    record=cfg.record_trajectory, energy_fn=energy_fn)  # fmt: skip


@dataclass
class TwoStageResult:
    semantic: np.ndarray
    samples: np.ndarray
    latent_chain: Chain
    data_chain: Chain | None
    z0: np.ndarray


def two_stage_sample(params: M.ModelParams, n: int, cfg: SamplerConfig, rng: np.random.Generator, *,
                     schedule: NoiseSchedule | None = None, sigmas=None, stage: str = "full",
                     z0: np.ndarray | None = None) -> TwoStageResult:  # fmt: skip
    """Latent chain from ``N(0, I)``, decode to the semantic image, refine in data space.

    ``stage="semantic"`` stops after decoding; ``samples`` then equals the semantic images.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if stage not in ("full", "semantic"):
        raise ValueError("stage must be 'full' or 'semantic'")
    if z0 is None:
        z0 = rng.standard_normal((n, params.arch.latent_dim))
    zc = langevin_latent(params, z0, cfg, rng, schedule=schedule, sigmas=sigmas)
    semantic = M.semantic_decode(params, zc.final)
    if stage == "semantic":
        return TwoStageResult(semantic, semantic, zc, None, z0)
    xc = langevin_data(params, semantic, cfg, rng, schedule=schedule, sigmas=sigmas)
    return TwoStageResult(semantic, xc.final, zc, xc, z0)


def dump_trajectory(out_dir, chain: Chain, prefix: str) -> None:
    """Write each state as ``{prefix}_{step:04d}.det1`` plus ``{prefix}_energy.csv`` (step, energy)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for step, state in enumerate(chain.states):
        save_tensor(out / f"{prefix}_{step:04d}.det1", state)
    with open(out / f"{prefix}_energy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "energy"])
        for step, u in enumerate(chain.energies):
            w.writerow([step, repr(float(np.mean(u)))])


def with_policy(cfg: SamplerConfig, **changes) -> SamplerConfig:
    return replace(cfg, **changes)
