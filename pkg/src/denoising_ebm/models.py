"""Denoising autoencoder with skip connections, semantic decoder and the two energies.

Parameters live in one flat dict keyed ``enc/*`` (encoder), ``dec/*``
(skip-connected decoder) and ``sem/*`` (semantic decoder).  The denoiser is
``dec(enc(x_tilde))``; the semantic decoder maps a latent code straight back
to data space and never sees encoder activations.

Noise conditioning feeds ``log sigma`` in as an extra input coordinate
(vector data) or a constant extra channel (images).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as D
from .data import FormatError, encode_tensor, read_tensor
from .noise import gaussian_noise

KINDS = ("mlp", "conv", "linear")
CHECKPOINT_MAGIC = b"DEBM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    """Network shapes; ``latent_dim`` defaults to 2 for vector data and 32 for images."""

    kind: str = "mlp"
    data_shape: tuple[int, ...] = (2,)
    latent_dim: int | None = None
    hidden: int = 64
    channels: tuple[int, int, int] = (16, 32, 64)
    activation: str = "silu"
    semantic_output: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "data_shape", tuple(int(s) for s in self.data_shape))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.activation not in ("silu", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.semantic_output not in ("linear", "tanh"):
            raise ValueError(f"unknown semantic_output {self.semantic_output!r}")
        if self.latent_dim is None:
            object.__setattr__(self, "latent_dim", 32 if self.kind == "conv" else 2)
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.kind == "conv":
            if len(self.data_shape) != 3:
                raise ValueError("conv architecture needs (C, H, W) data")
            _, h, w = self.data_shape
            if h % 4 or w % 4:
                raise ValueError("conv architecture needs H and W divisible by 4")
        elif len(self.data_shape) != 1:
            raise ValueError(f"{self.kind} architecture needs vector data")

    @property
    def data_dim(self) -> int:
        return int(np.prod(self.data_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data_shape"] = list(self.data_shape)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Architecture":
        return cls(**dict(d))


def _param_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, in checkpoint order."""
    dz, hid = arch.latent_dim, arch.hidden
    if arch.kind == "linear":
        d = arch.data_dim
        return {
            "enc/w": (d + 1, dz), "enc/b": (dz,),
            "dec/w": (dz, d), "dec/skip": (d, d), "dec/b": (d,),
            "sem/w": (dz, d), "sem/b": (d,),
        }  # fmt: skip
    if arch.kind == "mlp":
        d = arch.data_dim
        return {
            "enc/w1": (d + 1, hid), "enc/b1": (hid,),
            "enc/w2": (hid, hid), "enc/b2": (hid,),
            "enc/w3": (hid, dz), "enc/b3": (dz,),
            "dec/w1": (dz, hid), "dec/b1": (hid,),
            "dec/w2": (2 * hid, hid), "dec/b2": (hid,),
            "dec/w3": (hid, d), "dec/b3": (d,),
            "sem/w1": (dz, hid), "sem/b1": (hid,),
            "sem/w2": (hid, hid), "sem/b2": (hid,),
            "sem/w3": (hid, d), "sem/b3": (d,),
        }  # fmt: skip
    c, h, w = arch.data_shape
    c0, c1, c2 = arch.channels
    flat = c2 * (h // 4) * (w // 4)
    shapes = {
        "enc/c1": (c0, c + 1, 3, 3), "enc/c1b": (c0,),
        "enc/c2": (c1, c0, 3, 3), "enc/c2b": (c1,),
        "enc/c3": (c2, c1, 3, 3), "enc/c3b": (c2,),
        "enc/fc": (flat, dz), "enc/fcb": (dz,),
    }  # fmt: skip
    for prefix, skip in (("dec", 2), ("sem", 1)):
        shapes.update({
            f"{prefix}/fc": (dz, flat), f"{prefix}/fcb": (flat,),
            f"{prefix}/c3": (c2, skip * c2, 3, 3), f"{prefix}/c3b": (c2,),
            f"{prefix}/up2": (c2, c1, 3, 3), f"{prefix}/up2b": (c1,),
            f"{prefix}/c2": (c1, skip * c1, 3, 3), f"{prefix}/c2b": (c1,),
            f"{prefix}/up1": (c1, c0, 3, 3), f"{prefix}/up1b": (c0,),
            f"{prefix}/c1": (c0, skip * c0, 3, 3), f"{prefix}/c1b": (c0,),
            f"{prefix}/out": (c, c0, 3, 3), f"{prefix}/outb": (c,),
        })  # fmt: skip
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if "/up" in name and len(shape) == 4:
        return shape[0] * shape[2] * shape[3] // 4
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


@dataclass
class ModelParams:
    arch: Architecture
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = _param_shapes(self.arch)
        if set(shapes) != set(self.values):
            raise ValueError(f"parameter names do not match architecture: {sorted(set(shapes) ^ set(self.values))}")
        for k, s in shapes.items():
            if self.values[k].shape != s:
                raise ValueError(f"parameter {k} has shape {self.values[k].shape}, expected {s}")
        self.values = {k: np.asarray(self.values[k], dtype=np.float64) for k in shapes}

    @classmethod
    def init(cls, arch: Architecture, rng: np.random.Generator) -> "ModelParams":
        values = {}
        for name, shape in _param_shapes(arch).items():
            if name.endswith("b") and len(shape) == 1:
                values[name] = np.zeros(shape)
            else:
                values[name] = rng.standard_normal(shape) / np.sqrt(_fan_in(name, shape))
        return cls(arch, values)

    @classmethod
    def zeros(cls, arch: Architecture) -> "ModelParams":
        return cls(arch, {k: np.zeros(s) for k, s in _param_shapes(arch).items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.values.items()})

    def names(self, group: str = "all") -> list[str]:
        """Parameter names of a group: ``denoiser`` (enc+dec), ``enc``, ``dec``, ``sem`` or ``all``."""
        prefixes = {"all": ("enc/", "dec/", "sem/"), "denoiser": ("enc/", "dec/"),
                    "enc": ("enc/",), "dec": ("dec/",), "sem": ("sem/",)}[group]  # fmt: skip
        return [k for k in self.values if k.startswith(prefixes)]

    def tensors(self, wrt=()) -> dict[str, D.Tensor]:
        wrt = set(wrt)
        return {k: D.Tensor(v, requires_grad=k in wrt) for k, v in self.values.items()}


# network pieces (Tensor level)


def _act(arch: Architecture, t: D.Tensor) -> D.Tensor:
    return D.silu(t) if arch.activation == "silu" else D.leaky_relu(t)


def _log_sigma(sigma: np.ndarray) -> np.ndarray:
    return np.log(sigma)


def encode_t(arch: Architecture, P, x_tilde: D.Tensor, sigma: np.ndarray):
    """Return the latent code and the skip activations consumed by the decoder."""
    ls = _log_sigma(sigma)
    if arch.kind == "linear":
        inp = D.concat([x_tilde, D.Tensor(ls[:, None])], axis=1)
        return D.dense(inp, P["enc/w"], P["enc/b"]), [x_tilde]
    if arch.kind == "mlp":
        inp = D.concat([x_tilde, D.Tensor(ls[:, None])], axis=1)
        h1 = _act(arch, D.dense(inp, P["enc/w1"], P["enc/b1"]))
        h2 = _act(arch, D.dense(h1, P["enc/w2"], P["enc/b2"]))
        return D.dense(h2, P["enc/w3"], P["enc/b3"]), [h1]
    inp = D.concat([x_tilde, D.broadcast_channel(ls, x_tilde.shape[2:])], axis=1)
    e1 = _act(arch, D.conv2d(inp, P["enc/c1"], P["enc/c1b"], 1))
    e2 = _act(arch, D.conv2d(e1, P["enc/c2"], P["enc/c2b"], 2))
    e3 = _act(arch, D.conv2d(e2, P["enc/c3"], P["enc/c3b"], 2))
    flat = D.reshape(e3, (e3.shape[0], -1))
    return D.dense(flat, P["enc/fc"], P["enc/fcb"]), [e1, e2, e3]


def _conv_decoder(arch: Architecture, P, prefix: str, z: D.Tensor, skips=None) -> D.Tensor:
    _, h, w = arch.data_shape
    c2 = arch.channels[2]
    a = _act(arch, D.dense(z, P[f"{prefix}/fc"], P[f"{prefix}/fcb"]))
    a = D.reshape(a, (a.shape[0], c2, h // 4, w // 4))

    def join(t, i):
        return t if skips is None else D.concat([t, skips[i]], axis=1)

    a = _act(arch, D.conv2d(join(a, 2), P[f"{prefix}/c3"], P[f"{prefix}/c3b"], 1))
    a = _act(arch, D.conv_transpose2d(a, P[f"{prefix}/up2"], P[f"{prefix}/up2b"], 2))
    a = _act(arch, D.conv2d(join(a, 1), P[f"{prefix}/c2"], P[f"{prefix}/c2b"], 1))
    a = _act(arch, D.conv_transpose2d(a, P[f"{prefix}/up1"], P[f"{prefix}/up1b"], 2))
    a = _act(arch, D.conv2d(join(a, 0), P[f"{prefix}/c1"], P[f"{prefix}/c1b"], 1))
    return D.conv2d(a, P[f"{prefix}/out"], P[f"{prefix}/outb"], 1)


def decode_t(arch: Architecture, P, z: D.Tensor, skips) -> D.Tensor:
    if arch.kind == "linear":
        return D.dense(z, P["dec/w"], P["dec/b"]) + D.dense(skips[0], P["dec/skip"])
    if arch.kind == "mlp":
        a1 = _act(arch, D.dense(z, P["dec/w1"], P["dec/b1"]))
        a2 = _act(arch, D.dense(D.concat([a1, skips[0]], axis=1), P["dec/w2"], P["dec/b2"]))
        return D.dense(a2, P["dec/w3"], P["dec/b3"])
    return _conv_decoder(arch, P, "dec", z, skips)


def semantic_decode_t(arch: Architecture, P, z: D.Tensor) -> D.Tensor:
    """``h(z)``; a ``tanh`` output keeps semantic images (and the latent energy) bounded."""
    if arch.kind == "linear":
        out = D.dense(z, P["sem/w"], P["sem/b"])
    elif arch.kind == "mlp":
        a1 = _act(arch, D.dense(z, P["sem/w1"], P["sem/b1"]))
        a2 = _act(arch, D.dense(a1, P["sem/w2"], P["sem/b2"]))
        out = D.dense(a2, P["sem/w3"], P["sem/b3"])
    else:
        out = _conv_decoder(arch, P, "sem", z)
    return D.tanh(out) if arch.semantic_output == "tanh" else out


def reconstruct_t(arch: Architecture, P, x_tilde: D.Tensor, sigma: np.ndarray) -> D.Tensor:
    z, skips = encode_t(arch, P, x_tilde, sigma)
    return decode_t(arch, P, z, skips)


def _inv_two_sigma2(sigma: np.ndarray) -> D.Tensor:
    return D.Tensor(1.0 / (2.0 * sigma * sigma))


def texture_energy_t(arch: Architecture, P, x: D.Tensor, sigma: np.ndarray, eps: np.ndarray) -> D.Tensor:
    """Per-example ``||x - r(x + eps, sigma)||^2 / (2 sigma^2)``."""
    r = reconstruct_t(arch, P, x + D.Tensor(eps), sigma)
    return D.sum_squares(x - r) * _inv_two_sigma2(sigma)


def semantic_energy_t(arch: Architecture, P, z: D.Tensor, sigma: np.ndarray, eps: np.ndarray) -> D.Tensor:
    """Per-example ``||h(z) - r(h(z) + eps, sigma)||^2 / (2 sigma^2)``."""
    hx = semantic_decode_t(arch, P, z)
    r = reconstruct_t(arch, P, hx + D.Tensor(eps), sigma)
    return D.sum_squares(hx - r) * _inv_two_sigma2(sigma)


# array level API


def _check_data(params: ModelParams, x: np.ndarray, what: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != params.arch.data_shape:
        raise D.ShapeError(what, f"expected batch of shape (N, {', '.join(map(str, params.arch.data_shape))}), got {x.shape}")
    return x


def _check_latent(params: ModelParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != params.arch.latent_dim:
        raise D.ShapeError("latent", f"expected (N, {params.arch.latent_dim}) codes, got {z.shape}")
    return z


def sigma_vector(sigma, n: int) -> np.ndarray:
    """Broadcast a scalar or per-example sigma to shape (n,), rejecting non-positive values."""
    s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,)).copy()
    if np.any(~(s > 0)):
        raise ValueError("sigma must be positive")
    return s


def encode(params: ModelParams, x_tilde, sigma) -> np.ndarray:
    x_tilde = _check_data(params, x_tilde)
    with D.no_grad():
        z, _ = encode_t(params.arch, params.tensors(), D.Tensor(x_tilde), sigma_vector(sigma, len(x_tilde)))
    return z.data


def reconstruct(params: ModelParams, x_tilde, sigma) -> np.ndarray:
    x_tilde = _check_data(params, x_tilde)
    with D.no_grad():
        return reconstruct_t(params.arch, params.tensors(), D.Tensor(x_tilde), sigma_vector(sigma, len(x_tilde))).data


def semantic_decode(params: ModelParams, z) -> np.ndarray:
    z = _check_latent(params, z)
    with D.no_grad():
        return semantic_decode_t(params.arch, params.tensors(), D.Tensor(z)).data


@dataclass
class EnergyValue:
    """Per-example energies together with the noise level and draw that produced them."""

    value: np.ndarray
    sigma: np.ndarray
    eps: np.ndarray

    def __float__(self) -> float:
        return float(self.value.sum())


def _noise(params: ModelParams, n: int, sigma: np.ndarray, eps, rng) -> np.ndarray:
    shape = (n,) + params.arch.data_shape
    if eps is not None:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != shape:
            raise D.ShapeError("noise", f"fixed eps has shape {eps.shape}, expected {shape}")
        return eps
    if rng is None:
        raise ValueError("pass either a fixed eps or an rng")
    return gaussian_noise(shape, sigma, rng)


def texture_energy(params: ModelParams, x, sigma, *, eps=None, rng=None) -> EnergyValue:
    x = _check_data(params, x)
    s = sigma_vector(sigma, len(x))
    eps = _noise(params, len(x), s, eps, rng)
    with D.no_grad():
        u = texture_energy_t(params.arch, params.tensors(), D.Tensor(x), s, eps)
    return EnergyValue(u.data, s, eps)


def semantic_energy(params: ModelParams, z, sigma, *, eps=None, rng=None) -> EnergyValue:
    z = _check_latent(params, z)
    s = sigma_vector(sigma, len(z))
    eps = _noise(params, len(z), s, eps, rng)
    with D.no_grad():
        u = semantic_energy_t(params.arch, params.tensors(), D.Tensor(z), s, eps)
    return EnergyValue(u.data, s, eps)


def grad_texture_energy(params: ModelParams, x, sigma, *, eps=None, rng=None) -> tuple[np.ndarray, EnergyValue]:
    """Gradient of each example's texture energy with respect to its own input."""
    x = _check_data(params, x)
    s = sigma_vector(sigma, len(x))
    eps = _noise(params, len(x), s, eps, rng)
    xt = D.Tensor(x, requires_grad=True)
    u = texture_energy_t(params.arch, params.tensors(), xt, s, eps)
    D.sum(u).backward()
    return xt.grad, EnergyValue(u.data, s, eps)


def grad_semantic_energy(params: ModelParams, z, sigma, *, eps=None, rng=None) -> tuple[np.ndarray, EnergyValue]:
    """Gradient of each example's semantic energy with respect to its latent code."""
    z = _check_latent(params, z)
    s = sigma_vector(sigma, len(z))
    eps = _noise(params, len(z), s, eps, rng)
    zt = D.Tensor(z, requires_grad=True)
    u = semantic_energy_t(params.arch, params.tensors(), zt, s, eps)
    D.sum(u).backward()
    return zt.grad, EnergyValue(u.data, s, eps)


# checkpoints


def save_checkpoint(path, params: ModelParams) -> None:
    """``DEBM`` | u32 version | u32 len + JSON architecture | u32 count | (u32 len + name, DET1 tensor) * count.

    Tensors follow the architecture's declared parameter order and are stored as float32.
    """
    arch = json.dumps(params.arch.to_dict(), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(arch)) + arch)
    names = list(_param_shapes(params.arch))
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(encode_tensor(params.values[name]))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, "not a DEBM checkpoint")
    if len(buf) < 12:
        raise FormatError(path, len(buf), "truncated header")
    version, alen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, 4, f"unsupported checkpoint version {version}")
    pos = 12
    try:
        arch = Architecture.from_dict(json.loads(buf[pos : pos + alen]))
    except (ValueError, TypeError) as exc:
        raise FormatError(path, pos, f"bad architecture descriptor: {exc}") from None
    pos += alen
    if len(buf) < pos + 4:
        raise FormatError(path, pos, "truncated parameter count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    values = {}
    for _ in range(count):
        if len(buf) < pos + 4:
            raise FormatError(path, pos, "truncated parameter name")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4 : pos + 4 + nlen].decode(errors="replace")
        pos += 4 + nlen
        arr, pos = read_tensor(buf, pos, path)
        values[name] = arr.astype(np.float64)
    if pos != len(buf):
        raise FormatError(path, pos, "trailing bytes after parameters")
    try:
        return ModelParams(arch, values)
    except ValueError as exc:
        raise FormatError(path, pos, str(exc)) from None
