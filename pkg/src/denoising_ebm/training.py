"""Maximum-likelihood training of the semantic and texture energies.

Each epoch runs ``L`` reconstruction updates (denoising loss on the DAE,
decoding loss on the semantic decoder) followed by one EBM update whose
gradients are positive-minus-negative energy gradients, with negatives drawn
by the two-stage sampler from fresh Gaussian codes.

Loss convention: squared norms are summed over data dimensions and averaged
over the batch.  EBM phase gradients are summed over the batch.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as D
from . import models as M
from .data import Dataset, flip_augment
from .noise import NoiseSchedule, build_schedule, gaussian_noise, make_rng, sample_sigmas
from .sampler import SamplerConfig, langevin_data, langevin_latent

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "phase", "loss_dae", "loss_dec", "e_pos_sem", "e_neg_sem", "e_pos_tex", "e_neg_tex"]


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    L: int = 3
    batch_size: int = 128
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    epochs: int = 1
    seed: int = 0
    grad_clip: float | None = 100.0
    warmup_steps: int = 0
    warmup_learning_rate: float | None = None
    flip_p: float = 0.5
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(sigma_policy="paired"))

    def __post_init__(self):
        if self.L < 1 or self.batch_size < 1:
            raise ValueError("L and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.warmup_learning_rate is not None and not self.warmup_learning_rate > 0:
            raise ValueError("warmup_learning_rate must be positive or None")
        if self.epochs < 0 or self.warmup_steps < 0:
            raise ValueError("epochs and warmup_steps must be >= 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")


# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, values: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:  # fmt: skip
    """Bias-corrected Adam update of the entries named in ``grads``; other parameters are untouched."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(values[k])
            state.v[k] = np.zeros_like(values[k])
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        values[k] = values[k] - lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + eps)
    return values, state


def clip_grads(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# losses


def _corrupt(params: M.ModelParams, x, sigmas, rng, eps):
    x = M._check_data(params, x)
    s = M.sigma_vector(sigmas, len(x))
    if eps is None:
        eps = gaussian_noise(x.shape, s, rng)
    return x, s, eps


def dae_loss(params: M.ModelParams, x, sigmas, rng=None, *, eps=None) -> float:
    """Batch mean of ``||r(x + eps, sigma) - x||^2``."""
    x, s, eps = _corrupt(params, x, sigmas, rng, eps)
    with D.no_grad():
        r = M.reconstruct_t(params.arch, params.tensors(), D.Tensor(x + eps), s)
        return float(D.mean(D.sum_squares(r - D.Tensor(x))).data)


def decoder_loss(params: M.ModelParams, x, sigmas, rng=None, *, eps=None) -> float:
    """Batch mean of ``||h(f(x + eps, sigma)) - x||^2``."""
    x, s, eps = _corrupt(params, x, sigmas, rng, eps)
    with D.no_grad():
        P = params.tensors()
        z, _ = M.encode_t(params.arch, P, D.Tensor(x + eps), s)
        return float(D.mean(D.sum_squares(M.semantic_decode_t(params.arch, P, z) - D.Tensor(x))).data)


def reconstruction_grads(params: M.ModelParams, x, sigmas, rng=None, *, eps=None):
    """Losses and gradients for one reconstruction update.

    The denoising loss differentiates the encoder and decoder; the decoding
    loss differentiates only the semantic decoder (the encoder output is a
    constant there).  Returns ``(loss_dae, loss_dec, grads)``.
    """
    x, s, eps = _corrupt(params, x, sigmas, rng, eps)
    arch = params.arch
    dae = params.names("denoiser")
    P = params.tensors(wrt=dae)
    xt, target = D.Tensor(x + eps), D.Tensor(x)
    z, skips = M.encode_t(arch, P, xt, s)
    l_dae = D.mean(D.sum_squares(M.decode_t(arch, P, z, skips) - target))
    l_dae.backward()
    grads = {k: P[k].grad for k in dae}

    sem = params.names("sem")
    G = params.tensors(wrt=sem)
    l_dec = D.mean(D.sum_squares(M.semantic_decode_t(arch, G, D.Tensor(z.data)) - target))
    l_dec.backward()
    grads.update({k: G[k].grad for k in sem})
    return float(l_dae.data), float(l_dec.data), grads


# EBM phases


def _energy_param_grad(params: M.ModelParams, kind: str, inputs, sigmas, eps, group: str):
    names = params.names(group)
    P = params.tensors(wrt=names)
    fn = M.semantic_energy_t if kind == "semantic" else M.texture_energy_t
    u = fn(params.arch, P, D.Tensor(inputs), sigmas, eps)
    D.sum(u).backward()
    return {k: (P[k].grad if P[k].grad is not None else np.zeros_like(P[k].data)) for k in names}, u.data


def semantic_phase_grads(params: M.ModelParams, z_pos, z_neg, sigmas, eps_pos, eps_neg):
    """``sum_i dU_s(z_i)/dgamma - sum_i dU_s(z_i^K)/dgamma`` for given codes and corruptions."""
    s = M.sigma_vector(sigmas, len(z_pos))
    gp, up = _energy_param_grad(params, "semantic", z_pos, s, eps_pos, "sem")
    gn, un = _energy_param_grad(params, "semantic", z_neg, s, eps_neg, "sem")
    return {k: gp[k] - gn[k] for k in gp}, up, un


def texture_phase_grads(params: M.ModelParams, x_pos, x_neg, sigmas, eps_pos, eps_neg):
    """``sum_i dU_c(x_i)/dphi - sum_i dU_c(x_i^T)/dphi`` for given samples and corruptions."""
    s = M.sigma_vector(sigmas, len(x_pos))
    gp, up = _energy_param_grad(params, "texture", x_pos, s, eps_pos, "denoiser")
    gn, un = _energy_param_grad(params, "texture", x_neg, s, eps_neg, "denoiser")
    return {k: gp[k] - gn[k] for k in gp}, up, un


@dataclass
class Negatives:
    z0: np.ndarray
    zK: np.ndarray
    x0: np.ndarray
    xT: np.ndarray


def draw_negatives(params: M.ModelParams, n: int, sigmas, cfg: SamplerConfig, rng, schedule=None) -> Negatives:
    z0 = rng.standard_normal((n, params.arch.latent_dim))
    zK = langevin_latent(params, z0, cfg, rng, schedule=schedule, sigmas=sigmas).final
    x0 = M.semantic_decode(params, zK)
    xT = langevin_data(params, x0, cfg, rng, schedule=schedule, sigmas=sigmas).final
    return Negatives(z0, zK, x0, xT)


def semantic_phase_update(params: M.ModelParams, x, sigmas, cfg: SamplerConfig, rng, *,
                          schedule=None, negatives: Negatives | None = None):  # fmt: skip
    """Gradient for the semantic decoder from data codes versus latent-chain codes."""
    x, s, eps = _corrupt(params, x, sigmas, rng, None)
    z_pos = M.encode(params, x + eps, s)
    if negatives is None:
        negatives = draw_negatives(params, len(x), s, cfg, rng, schedule)
    shape = x.shape
    g, up, un = semantic_phase_grads(params, z_pos, negatives.zK, s,
                                     gaussian_noise(shape, s, rng), gaussian_noise(shape, s, rng))  # fmt: skip
    return g, up, un


def texture_phase_update(params: M.ModelParams, x, sigmas, cfg: SamplerConfig, rng, *,
                         schedule=None, negatives: Negatives | None = None):  # fmt: skip
    """Gradient for the DAE from data versus two-stage samples."""
    x = M._check_data(params, x)
    s = M.sigma_vector(sigmas, len(x))
    if negatives is None:
        negatives = draw_negatives(params, len(x), s, cfg, rng, schedule)
    g, up, un = texture_phase_grads(params, x, negatives.xT, s,
                                    gaussian_noise(x.shape, s, rng), gaussian_noise(x.shape, s, rng))  # fmt: skip
    return g, up, un


# training loop


@dataclass
class TrainResult:
    params: M.ModelParams
    metrics: list[dict]
    optimizers: dict[str, AdamState]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r["epoch"], r["phase"]] + [_fmt(r.get(k)) for k in METRICS_HEADER[2:]])
    return buf.getvalue()


def _finite(name: str, epoch: int, *values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"non-finite {name} at epoch {epoch}")


def _batch(ds: Dataset, n: int, rng, flip_p: float) -> np.ndarray:
    idx = rng.choice(len(ds), size=n, replace=n > len(ds))
    x = ds.samples[idx]
    if ds.is_image and flip_p > 0:
        x = flip_augment(x, flip_p, rng)
    return x


def train(dataset: Dataset, cfg: TrainConfig, arch: M.Architecture | None = None, *,
          schedule: NoiseSchedule | None = None, params: M.ModelParams | None = None,
          on_epoch: Callable[[int, M.ModelParams, list[dict]], None] | None = None) -> TrainResult:  # fmt: skip
    """Run ``cfg.epochs`` epochs of reconstruction + EBM updates.

    ``cfg.warmup_steps`` reconstruction-only updates (logged as epoch -1,
    phase ``warmup``) come first so that the negative chains start on a
    denoiser that is no longer random; they use ``cfg.warmup_learning_rate``
    when it is set.

    The semantic and texture updates of the EBM step are applied one after
    the other, each touching only its own parameter group.  Reconstruction,
    semantic and texture updates keep separate Adam moments: the EBM
    gradients are batch sums and would otherwise swamp the second-moment
    estimates of the reconstruction losses.  Raises :class:`DivergenceError`
    as soon as a loss, energy or gradient stops being finite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    schedule = schedule or build_schedule(1.0, 0.01, 128)
    rng = make_rng(cfg.seed)
    if params is None:
        arch = arch or M.Architecture(data_shape=dataset.shape)
        params = M.ModelParams.init(arch, rng)
    else:
        params = params.copy()
    opts = {"recon": AdamState(), "semantic": AdamState(), "texture": AdamState()}
    rows: list[dict] = []
    n = cfg.batch_size

    def step(state, grads, lr=cfg.learning_rate):
        grads, norm = clip_grads(grads, cfg.grad_clip)
        _finite("gradient norm", epoch, norm)
        adam_step(state, params.values, grads, lr, cfg.beta1, cfg.beta2, cfg.eps_opt)

    def reconstruction_update(phase: str, lr: float):
        x = _batch(dataset, n, rng, cfg.flip_p)
        s = sample_sigmas(schedule, n, rng)
        l_dae, l_dec, grads = reconstruction_grads(params, x, s, rng)
        _finite("reconstruction loss", epoch, l_dae, l_dec)
        step(opts["recon"], grads, lr)
        rows.append({"epoch": epoch, "phase": phase, "loss_dae": l_dae, "loss_dec": l_dec})

    epoch = -1
    for _ in range(cfg.warmup_steps):
        reconstruction_update("warmup", cfg.warmup_learning_rate or cfg.learning_rate)
    for epoch in range(cfg.epochs):
        for _ in range(cfg.L):
            reconstruction_update("recon", cfg.learning_rate)

        x = _batch(dataset, n, rng, cfg.flip_p)
        s = sample_sigmas(schedule, n, rng)
        neg = draw_negatives(params, n, s, cfg.sampler, rng, schedule)
        g_sem, ups, uns = semantic_phase_update(params, x, s, cfg.sampler, rng, negatives=neg)
        g_tex, upt, unt = texture_phase_update(params, x, s, cfg.sampler, rng, negatives=neg)
        _finite("EBM energies", epoch, ups, uns, upt, unt)
        step(opts["semantic"], g_sem)
        step(opts["texture"], g_tex)
        rows.append({"epoch": epoch, "phase": "ebm", "e_pos_sem": ups.mean(), "e_neg_sem": uns.mean(),
                     "e_pos_tex": upt.mean(), "e_neg_tex": unt.mean()})  # fmt: skip
        if on_epoch is not None:
            on_epoch(epoch, params, rows)
    return TrainResult(params, rows, opts)
