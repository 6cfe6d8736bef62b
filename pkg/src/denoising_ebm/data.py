"""Datasets, preprocessing and file formats.

DET1 tensor layout (little endian)::

    offset 0   b"DET1"
    offset 4   u32 format version (1)
    offset 8   u32 rank
    offset 12  u32 extent, ``rank`` times
    ...        float32 payload, row-major

Images are also read and written as binary PGM (P5) / PPM (P6) with maxval 255.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DET1_MAGIC = b"DET1"
DET1_VERSION = 1


class FormatError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass
class Dataset:
    samples: np.ndarray
    name: str = "dataset"

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of a single example."""
        return self.samples.shape[1:]

    @property
    def is_image(self) -> bool:
        return self.samples.ndim == 4

    def __len__(self) -> int:
        return self.samples.shape[0]


# synthetic generators


def circle_centers(k: int, radius: float) -> np.ndarray:
    """``k`` points evenly spaced on a circle, starting on the positive x axis."""
    angles = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gaussian_mixture(n: int, centers, std: float, rng: np.random.Generator, *, return_labels: bool = False):
    """Equal-weight isotropic Gaussian mixture."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if n < 1 or std < 0 or centers.shape[0] == 0:
        raise ValueError("need n >= 1, std >= 0 and at least one center")
    labels = rng.integers(0, centers.shape[0], size=n)
    points = centers[labels] + std * rng.standard_normal((n, centers.shape[1]))
    ds = Dataset(points, name=f"mixture{centers.shape[0]}")
    return (ds, labels) if return_labels else ds


def rings(n: int, radii, std: float, rng: np.random.Generator) -> Dataset:
    """Points on concentric circles with Gaussian radial jitter; ring picked uniformly."""
    radii = np.atleast_1d(np.asarray(radii, dtype=np.float64))
    if n < 1 or std < 0 or radii.size == 0:
        raise ValueError("need n >= 1, std >= 0 and at least one radius")
    r = radii[rng.integers(0, radii.size, size=n)] + std * rng.standard_normal(n)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    return Dataset(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1), name=f"rings{radii.size}")


# preprocessing


def scale_to_range(t, lo: float = -1.0, hi: float = 1.0, src: tuple[float, float] = (0.0, 255.0)) -> np.ndarray:
    """Affine map of the declared source range onto ``[lo, hi]``."""
    a, b = src
    return lo + (np.asarray(t, dtype=np.float64) - a) * (hi - lo) / (b - a)


def unscale_from_range(t, lo: float = -1.0, hi: float = 1.0, src: tuple[float, float] = (0.0, 255.0)) -> np.ndarray:
    a, b = src
    return a + (np.asarray(t, dtype=np.float64) - lo) * (b - a) / (hi - lo)


def flip_augment(batch: np.ndarray, p: float, rng: np.random.Generator, *, return_mask: bool = False):
    """Mirror each NCHW image horizontally with probability ``p``."""
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ValueError(f"flip_augment needs NCHW image batches, got shape {batch.shape}")
    mask = rng.random(batch.shape[0]) < p
    out = batch.copy()
    out[mask] = out[mask][..., ::-1]
    return (out, mask) if return_mask else out


# DET1 tensors


def encode_tensor(t) -> bytes:
    arr = np.asarray(t, dtype="<f4").copy(order="C")
    header = DET1_MAGIC + struct.pack("<II", DET1_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(t))


def read_tensor(buf: bytes, offset: int = 0, path="<bytes>") -> tuple[np.ndarray, int]:
    """Parse one DET1 tensor from ``buf`` at ``offset``; returns (array, next offset)."""
    if len(buf) - offset < 12:
        raise FormatError(path, offset, "truncated DET1 header")
    if buf[offset : offset + 4] != DET1_MAGIC:
        raise FormatError(path, offset, f"bad magic {bytes(buf[offset:offset + 4])!r}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != DET1_VERSION:
        raise FormatError(path, offset + 4, f"unsupported DET1 version {version}")
    pos = offset + 12
    if len(buf) - pos < 4 * rank:
        raise FormatError(path, pos, "truncated extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 4 * int(np.prod(shape, dtype=np.int64))
    if len(buf) - pos < nbytes:
        raise FormatError(path, len(buf), f"payload needs {nbytes} bytes, {len(buf) - pos} available")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
    return arr, pos + nbytes


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = read_tensor(buf, 0, path)
    if end != len(buf):
        raise FormatError(path, end, f"{len(buf) - end} trailing bytes")
    return arr


# PGM / PPM


def write_pnm(path, image) -> None:
    """Write a uint8 image: (H, W) or (1, H, W) as P5, (3, H, W) as P6."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 2:
        magic, payload = b"P5", img
    elif img.ndim == 3 and img.shape[0] == 3:
        magic, payload = b"P6", np.transpose(img, (1, 2, 0))
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    h, w = payload.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(payload, dtype=np.uint8).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM with maxval <= 255; returns uint8 (C, H, W)."""
    buf = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError(path, pos, "truncated header")
        if buf[pos : pos + 1] == b"#":
            pos = buf.find(b"\n", pos)
            if pos < 0:
                raise FormatError(path, len(buf), "unterminated comment")
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    pos += 1
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(path, 0, f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(path, 2, "non-integer header field") from None
    if not 0 < maxval <= 255:
        raise FormatError(path, pos, f"maxval {maxval} not supported")
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    if len(buf) - pos < need:
        raise FormatError(path, len(buf), f"payload needs {need} bytes")
    img = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, c)
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1)))


def to_uint8(images) -> np.ndarray:
    """Map samples in [-1, 1] to 8-bit, clamping out-of-range pixels."""
    x = unscale_from_range(np.clip(images, -1.0, 1.0))
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def load_image_dir(path, max_size: int = 32) -> Dataset:
    """Load every ``.pgm``/``.ppm``/``.det1`` file in a directory as one image dataset in [-1, 1].

    DET1 files may hold a single (C, H, W) image or an (N, C, H, W) stack and
    are taken to be already in [-1, 1].
    """
    path = Path(path)
    images = []
    for f in sorted(os.listdir(path)):
        suffix = Path(f).suffix.lower()
        if suffix in (".pgm", ".ppm"):
            images.append(scale_to_range(read_pnm(path / f))[None])
        elif suffix == ".det1":
            t = load_tensor(path / f).astype(np.float64)
            images.append(t[None] if t.ndim == 3 else t)
    if not images:
        raise FileNotFoundError(f"no images found in {path}")
    shapes = {im.shape[1:] for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images in {path} disagree in shape: {sorted(shapes)}")
    samples = np.concatenate(images, axis=0)
    if max(samples.shape[2:]) > max_size:
        raise ValueError(f"images larger than {max_size}x{max_size} are not supported")
    return Dataset(np.clip(samples, -1.0, 1.0), name=path.name)
