"""Command-line entry point: ``denoising-ebm {train,sample,ood,check}``.

Exit codes: 0 success, 1 configuration error, 2 numerical divergence,
3 I/O or file-format error, 4 a ``check`` failed.

A run config is one JSON object.  Every section is optional and unknown keys
are rejected::

    {
      "seed": 0,
      "out": "runs/toy",
      "dataset": {"kind": "mixture", "n": 20000, "k": 8, "radius": 0.75, "std": 0.1},
      "model": {"kind": "mlp", "latent_dim": 2, "hidden": 64, "semantic_output": "tanh"},
      "schedule": {"sigma_max": 1.0, "sigma_min": 0.01, "S": 128},
      "train": {"L": 3, "batch_size": 128, "learning_rate": 5e-5, "epochs": 100,
                "checkpoint_every": 50, "sampler": {"sigma_policy": "fixed", "sigma": 0.1}},
      "sampler": {"K": 20, "T": 90, "eta1": 0.1, "eta2": 0.01, "sigma_policy": "annealed"},
      "ood": {"sigma": 0.05, "draws": 8}
    }

Dataset kinds: ``mixture`` (points on a circle of Gaussian modes),
``gaussian`` (one Gaussian with ``mean`` and ``cov``), ``rings``,
``tensor`` (a DET1 file of shape (N, ...)) and ``images`` (a directory of
PGM/PPM/DET1 images).  The model's ``data_shape`` is taken from the dataset.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from . import evaluation as E
from . import models as M
from . import sampler as S
from . import training as T
from .diffcore import ShapeError
from .noise import NoiseSchedule, build_schedule, make_rng

log = logging.getLogger("denoising_ebm")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


DATASET_DEFAULTS = {
    "mixture": {"n": 20000, "k": 8, "radius": 0.75, "std": 0.1, "offset": [0.0, 0.0]},
    "gaussian": {"n": 10000, "mean": [0.0, 0.0], "cov": [[1.0, 0.0], [0.0, 1.0]]},
    "rings": {"n": 20000, "radii": [0.3, 0.7], "std": 0.05},
    "tensor": {"path": None},
    "images": {"path": None, "max_size": 32},
}
SCHEDULE_DEFAULTS = {"sigma_max": 1.0, "sigma_min": 0.01, "S": 128}
OOD_DEFAULTS = {"sigma": E.OOD_SIGMA, "draws": 8}
TOP_LEVEL = ("seed", "out", "dataset", "model", "schedule", "train", "sampler", "ood")


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected an object, got {type(given).__name__}")
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise ConfigError(f"{section}: unknown key {extra[0]!r}")


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclasses.dataclass
class RunConfig:
    """A validated run description; ``resolved`` is the fully defaulted JSON form."""

    seed: int
    out: str
    dataset: dict
    model: dict
    schedule: NoiseSchedule
    train: T.TrainConfig
    sampler: S.SamplerConfig
    checkpoint_every: int
    ood: dict
    resolved: dict

    @classmethod
    def from_dict(cls, raw: dict, *, seed: int | None = None, out: str | None = None) -> "RunConfig":
        _reject_unknown("config", raw, TOP_LEVEL)
        seed = raw.get("seed", 0) if seed is None else seed
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        out = raw.get("out", "run") if out is None else out

        ds = dict(raw.get("dataset", {"kind": "mixture"}))
        _reject_unknown("dataset", ds, ("kind",) + tuple(DATASET_DEFAULTS.get(ds.get("kind"), {})))
        kind = ds.get("kind")
        if kind not in DATASET_DEFAULTS:
            raise ConfigError(f"dataset: unknown kind {kind!r}")
        ds = {"kind": kind, **DATASET_DEFAULTS[kind], **ds}
        if kind in ("tensor", "images") and not ds["path"]:
            raise ConfigError(f"dataset: kind {kind!r} needs a path")

        model = dict(raw.get("model", {}))
        _reject_unknown("model", model, _field_names(M.Architecture) - {"data_shape"})

        sched = {**SCHEDULE_DEFAULTS, **raw.get("schedule", {})}
        _reject_unknown("schedule", sched, SCHEDULE_DEFAULTS)
        try:
            schedule = build_schedule(float(sched["sigma_max"]), float(sched["sigma_min"]), int(sched["S"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"schedule: {exc}") from None

        sampler_raw = dict(raw.get("sampler", {}))
        _reject_unknown("sampler", sampler_raw, _field_names(S.SamplerConfig))
        sampler = _build("sampler", S.SamplerConfig, sampler_raw)

        train_raw = dict(raw.get("train", {}))
        allowed = (_field_names(T.TrainConfig) - {"seed"}) | {"checkpoint_every"}
        _reject_unknown("train", train_raw, allowed)
        every = train_raw.pop("checkpoint_every", 0)
        if not isinstance(every, int) or every < 0:
            raise ConfigError("train: checkpoint_every must be a non-negative integer")
        neg_raw = train_raw.pop("sampler", {"sigma_policy": "paired"})
        _reject_unknown("train.sampler", neg_raw, _field_names(S.SamplerConfig))
        negatives = _build("train.sampler", S.SamplerConfig, neg_raw)
        train = _build("train", T.TrainConfig, {**train_raw, "seed": seed, "sampler": negatives})

        ood = {**OOD_DEFAULTS, **raw.get("ood", {})}
        _reject_unknown("ood", ood, OOD_DEFAULTS)
        if not (isinstance(ood["sigma"], (int, float)) and ood["sigma"] > 0):
            raise ConfigError("ood: sigma must be positive")
        if not (isinstance(ood["draws"], int) and ood["draws"] >= 1):
            raise ConfigError("ood: draws must be a positive integer")

        resolved = {
            "seed": seed,
            "out": str(out),
            "dataset": ds,
            "model": model,
            "schedule": sched,
            "train": {**_public(train, skip=("seed", "sampler")), "checkpoint_every": every,
                      "sampler": _public(negatives)},  # fmt: skip
            "sampler": _public(sampler),
            "ood": ood,
        }
        return cls(seed, str(out), ds, model, schedule, train, sampler, every, ood, resolved)

    def architecture(self, data_shape) -> M.Architecture:
        try:
            return M.Architecture(**{**self.model, "data_shape": tuple(data_shape)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from None


def _public(obj, skip=()) -> dict:
    return {k: v for k, v in dataclasses.asdict(obj).items() if k not in skip}


def load_config(path, *, seed=None, out=None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({}, seed=seed, out=out)
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return RunConfig.from_dict(raw, seed=seed, out=out)


def make_dataset(spec: dict, rng: np.random.Generator) -> data.Dataset:
    kind = spec["kind"]
    try:
        if kind == "mixture":
            centers = data.circle_centers(int(spec["k"]), float(spec["radius"])) + np.asarray(spec["offset"], float)
            return data.gaussian_mixture(int(spec["n"]), centers, float(spec["std"]), rng)
        if kind == "gaussian":
            pts = rng.multivariate_normal(np.asarray(spec["mean"], float), np.asarray(spec["cov"], float), int(spec["n"]))
            return data.Dataset(pts, name="gaussian")
        if kind == "rings":
            return data.rings(int(spec["n"]), spec["radii"], float(spec["std"]), rng)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dataset: {exc}") from None
    if kind == "tensor":
        arr = data.load_tensor(spec["path"]).astype(np.float64)
        if arr.ndim < 2:
            raise ConfigError("dataset: tensor file must hold a batch (N, ...)")
        return data.Dataset(arr, name=Path(spec["path"]).stem)
    return data.load_image_dir(spec["path"], int(spec["max_size"]))


def load_batch(path) -> np.ndarray:
    """A DET1 batch file, or a directory of images."""
    p = Path(path)
    if p.is_dir():
        return data.load_image_dir(p).samples
    arr = data.load_tensor(p).astype(np.float64)
    return arr if arr.ndim > 1 else arr[:, None]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_samples(out: Path, name: str, batch: np.ndarray, is_image: bool) -> None:
    data.save_tensor(out / f"{name}.det1", batch)
    if is_image:
        img_dir = out / name
        img_dir.mkdir(exist_ok=True)
        ext = "pgm" if batch.shape[1] == 1 else "ppm"
        for i, im in enumerate(data.to_uint8(batch)):
            data.write_pnm(img_dir / f"{i:05d}.{ext}", im)


# commands


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.resolved)
    ds = make_dataset(cfg.dataset, make_rng(cfg.seed + 1))
    arch = cfg.architecture(ds.shape)
    log.info("training %s on %s (%d examples) for %d epochs", arch.kind, ds.name, len(ds), cfg.train.epochs)

    def on_epoch(epoch, params, rows):
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            M.save_checkpoint(out / f"checkpoint_{epoch + 1:06d}.debm", params)

    result = T.train(ds, cfg.train, arch, schedule=cfg.schedule, on_epoch=on_epoch)
    M.save_checkpoint(out / "checkpoint.debm", result.params)
    (out / "metrics.csv").write_text(T.metrics_csv(result.metrics))
    return EXIT_OK


def cmd_sample(cfg: RunConfig, checkpoint, n: int, *, stage: str = "full", trajectory: bool = False) -> int:
    if n < 1:
        raise ConfigError("n must be >= 1")
    params = M.load_checkpoint(checkpoint)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.resolved)
    scfg = S.with_policy(cfg.sampler, record_trajectory=trajectory)
    with np.errstate(over="ignore", invalid="ignore"):
        res = S.two_stage_sample(params, n, scfg, make_rng(cfg.seed), schedule=cfg.schedule,
                                 stage="semantic" if stage == "semantic-only" else "full")  # fmt: skip
    # anything beyond float32 range cannot be stored and means the chain ran away
    limit = np.finfo(np.float32).max
    for name, batch in (("semantic", res.semantic), ("samples", res.samples)):
        if not np.all(np.abs(batch) <= limit):
            raise T.DivergenceError(f"{name} left the float32 range; lower eta or raise sigma_min")
    is_image = len(params.arch.data_shape) == 3
    _write_samples(out, "semantic", res.semantic, is_image)
    if stage == "full":
        _write_samples(out, "samples", res.samples, is_image)
    if trajectory:
        S.dump_trajectory(out / "trajectory", res.latent_chain, "latent")
        if res.data_chain is not None:
            S.dump_trajectory(out / "trajectory", res.data_chain, "data")
    return EXIT_OK


def cmd_ood(cfg: RunConfig, checkpoint, in_set, out_set, sigma: float | None = None) -> int:
    sigma = cfg.ood["sigma"] if sigma is None else sigma
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    params = M.load_checkpoint(checkpoint)
    a, b = load_batch(in_set), load_batch(out_set)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.resolved)
    report = E.ood_report(params, a, b, sigma, draws=cfg.ood["draws"], rng=make_rng(cfg.seed))
    report.write_csv(out / "ood.csv")
    print(f"auroc {report.auroc:.6f}")
    return EXIT_OK


def _report(name: str, ok: bool, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


def _fd_check(params: M.ModelParams, rng, n: int = 3) -> float:
    """Worst relative error of the data-gradient of both energies against central differences."""
    arch = params.arch
    sigma = 0.3
    x = rng.standard_normal((n,) + arch.data_shape) * 0.5
    z = rng.standard_normal((n, arch.latent_dim))
    eps_x = rng.standard_normal(x.shape) * sigma
    worst = 0.0
    for energy, grad, point in (
        (M.texture_energy, M.grad_texture_energy, x),
        (M.semantic_energy, M.grad_semantic_energy, z),
    ):
        eps = eps_x if point is x else rng.standard_normal(x.shape) * sigma
        g, _ = grad(params, point, sigma, eps=eps)
        fd = np.zeros_like(point)
        h = 1e-5
        flat, fdf = point.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = energy(params, point, sigma, eps=eps).value.sum()
            flat[i] = orig - h
            dn = energy(params, point, sigma, eps=eps).value.sum()
            flat[i] = orig
            fdf[i] = (up - dn) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst


def cmd_check(cfg: RunConfig, checkpoint=None) -> int:
    rng = make_rng(cfg.seed)
    ok = True
    sched = build_schedule(1.0, 0.01, 128)
    ratios = sched.sigmas[1:] / sched.sigmas[:-1]
    ok &= _report("schedule", sched.sigmas[0] == 1.0 and sched.sigmas[-1] == 0.01 and np.ptp(ratios) < 1e-6,
                  f"endpoints {float(sched.sigmas[0])!r}, {float(sched.sigmas[-1])!r}; ratio spread {np.ptp(ratios):.2e}")  # fmt: skip
    ok &= _report("auroc", E.auroc([3, 1, 2, 2], [2, 0, 1]) == E.auroc_bruteforce([3, 1, 2, 2], [2, 0, 1]),
                  "rank statistic matches pair count")  # fmt: skip

    fresh = M.ModelParams.init(M.Architecture("mlp", (2,), 2, hidden=8), rng)
    err = _fd_check(fresh, rng)
    ok &= _report("finite differences (random mlp)", err <= 1e-3, f"max relative error {err:.2e}")
    rep = E.grad_identity_check(fresh, rng.standard_normal((5, 2)), 0.3, seed=cfg.seed)
    ok &= _report("gradient identity (random mlp)", rep.max_rel_error <= 1e-4, f"max relative error {rep.max_rel_error:.2e}")

    if checkpoint is not None:
        params = M.load_checkpoint(checkpoint)
        finite = all(np.all(np.isfinite(v)) for v in params.values.values())
        ok &= _report("checkpoint parameters finite", finite, f"{len(params.values)} tensors")
        if params.arch.data_dim <= 64:
            err = _fd_check(params, rng, n=2)
            ok &= _report("finite differences (checkpoint)", err <= 1e-3, f"max relative error {err:.2e}")
        x = rng.standard_normal((4,) + params.arch.data_shape) * 0.5
        rep = E.grad_identity_check(params, x, 0.1, seed=cfg.seed)
        ok &= _report("gradient identity (checkpoint)", rep.max_rel_error <= 1e-4,
                      f"max relative error {rep.max_rel_error:.2e}")  # fmt: skip
        if cfg.dataset["kind"] == "gaussian" and params.arch.data_shape == (len(cfg.dataset["mean"]),):
            mu, cov = np.asarray(cfg.dataset["mean"], float), np.asarray(cfg.dataset["cov"], float)
            pts = E.points_within(mu, cov, 2.0, 500, rng)
            field = E.score_field(params, mu, cov, 0.1, pts)
            cos, rel = float(field.cosine().mean()), float(np.median(field.relative_error()))
            ok &= _report("score recovery", cos >= 0.95 and rel <= 0.15, f"mean cosine {cos:.3f}, median relative error {rel:.3f}")
    return EXIT_OK if ok else EXIT_CHECK


# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="denoising-ebm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a model")

    s = sub.add_parser("sample", parents=[common], help="two-stage sampling from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("-n", type=int, default=64)
    s.add_argument("--stage", choices=("full", "semantic-only"), default="full")
    s.add_argument("--trajectory", action="store_true", help="dump every chain state")

    o = sub.add_parser("ood", parents=[common], help="AUROC of -U^c between two sets")
    o.add_argument("checkpoint")
    o.add_argument("in_set", help="in-distribution DET1 batch or image directory")
    o.add_argument("out_set", help="out-of-distribution DET1 batch or image directory")
    o.add_argument("--sigma", type=float)

    c = sub.add_parser("check", parents=[common], help="run the built-in oracle checks")
    c.add_argument("checkpoint", nargs="?")
    return p


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        with _thread_limit(args.threads):
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "sample":
                return cmd_sample(cfg, args.checkpoint, args.n, stage=args.stage, trajectory=args.trajectory)
            if args.command == "ood":
                return cmd_ood(cfg, args.checkpoint, args.in_set, args.out_set, args.sigma)
            return cmd_check(cfg, args.checkpoint)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except T.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, data.FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
