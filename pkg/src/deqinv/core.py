"""Images, quality metrics, noise, synthetic datasets and file formats.

Images are plain ``numpy`` arrays of shape ``(channels, height, width)``.
Complex-valued images (MRI) are stored as two real channels. Most
routines also accept a leading batch axis, ``(batch, channels, H, W)``.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

TENSOR_MAGIC = b"DQT1"
_TENSOR_HEADER = struct.Struct("<4sIIIB")
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
# Refuse headers describing more than 2**32 elements.
_MAX_ELEMENTS = 1 << 32


class TensorFormatError(ValueError):
    """Raised for malformed tensor or image files."""


# ---------------------------------------------------------------------------
# tensors and randomness
# ---------------------------------------------------------------------------

def as_image(x, dtype=np.float64) -> np.ndarray:
    """Validate an image tensor and return it as a contiguous array.

    Accepts ``(C, H, W)`` or batched ``(N, C, H, W)`` input. Non-finite
    entries are rejected.
    """
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim not in (3, 4):
        raise ValueError(f"expected a (C, H, W) or (N, C, H, W) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains NaN or Inf")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator seeded with a 64-bit integer."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def sub_seed(seed: int, name: str) -> int:
    """Derive a named, independent 64-bit seed from a root seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def magnitude(x: np.ndarray) -> np.ndarray:
    """Magnitude image of a 2-channel complex pair; identity otherwise."""
    if x.shape[-3] != 2:
        return x
    return np.sqrt(x[..., 0:1, :, :] ** 2 + x[..., 1:2, :, :] ** 2)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB.

    Returns ``math.inf`` when the two images are identical.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    k = window.shape[0]
    patches = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("hwij,ij->hw", patches, window)


def ssim(x: np.ndarray, ref: np.ndarray, peak: float = 1.0,
         window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over all fully-contained windows.

    Uses an 11x11 Gaussian window (sigma 1.5), ``C1 = (0.01 peak)^2`` and
    ``C2 = (0.03 peak)^2``. Multi-channel images are averaged per channel.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if x.ndim == 2:
        x, ref = x[None], ref[None]
    if x.shape[-1] < window_size or x.shape[-2] < window_size:
        raise ValueError(f"image {x.shape[-2:]} smaller than the {window_size}x{window_size} window")
    win = _gaussian_window(window_size, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    x = x.reshape(-1, *x.shape[-2:])
    ref = ref.reshape(-1, *ref.shape[-2:])
    values = []
    for a, b in zip(x, ref):
        mu_a = _filter_valid(a, win)
        mu_b = _filter_valid(b, win)
        var_a = _filter_valid(a * a, win) - mu_a ** 2
        var_b = _filter_valid(b * b, win) - mu_b ** 2
        cov = _filter_valid(a * b, win) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Additive white Gaussian noise; ``sigma`` is a standard deviation."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def add_noise(v: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if spec.sigma == 0:
        return v.copy()
    g = make_rng(spec.seed).standard_normal(v.shape)
    return v + spec.sigma * g


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic-phantom"
    count: int = 200
    size: int = 32
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    directory: str | None = None
    channels: int = 1

    def __post_init__(self):
        if self.kind not in ("synthetic-phantom", "image-directory"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.split}")
        if self.count < 0:
            raise ValueError("count must be >= 0")


def _phantom(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    if rng.random() < 0.5:
        img = rng.uniform(0, 0.3) + rng.uniform(-0.3, 0.3) * xx + rng.uniform(-0.3, 0.3) * yy
    else:
        img = np.full((size, size), rng.uniform(0, 0.3))
    for _ in range(int(rng.integers(3, 9))):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.08, 0.35, size=2)
        value = rng.uniform(0.0, 1.0)
        if rng.random() < 0.6:
            theta = rng.uniform(0, np.pi)
            c, s = np.cos(theta), np.sin(theta)
            u = (xx - cx) * c + (yy - cy) * s
            w = -(xx - cx) * s + (yy - cy) * c
            inside = (u / rx) ** 2 + (w / ry) ** 2 <= 1.0
        else:
            inside = (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
        img = np.where(inside, value, img)
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros((size, size))
    return (img - lo) / (hi - lo)


def generate_phantoms(spec: DatasetSpec) -> list[np.ndarray]:
    """Seeded piecewise-smooth test images in [0, 1], one ``(C, H, W)`` each.

    Every image draws from its own child stream, so image ``i`` does not
    depend on ``count``. For ``channels == 2`` the phantom is the real part
    and the imaginary channel is zero.
    """
    if spec.count == 0:
        return []
    if spec.size < 16:
        raise ValueError("image size must be >= 16")
    children = np.random.SeedSequence(int(spec.seed)).spawn(spec.count)
    out = []
    for child in children:
        rng = np.random.Generator(np.random.Philox(child))
        img = _phantom(rng, spec.size)[None]
        if spec.channels == 2:
            img = np.concatenate([img, np.zeros_like(img)])
        out.append(img)
    return out


def load_dataset(spec: DatasetSpec) -> list[np.ndarray]:
    if spec.kind == "synthetic-phantom":
        return generate_phantoms(spec)
    if spec.directory is None:
        raise ValueError("image-directory dataset needs a directory")
    paths = sorted(Path(spec.directory).glob("*.pgm"))[: spec.count]
    images = []
    for p in paths:
        img = read_pgm(p)[0]
        h, w = img.shape
        if h < spec.size or w < spec.size:
            raise ValueError(f"{p} is smaller than {spec.size}x{spec.size}")
        top, left = (h - spec.size) // 2, (w - spec.size) // 2
        img = img[top:top + spec.size, left:left + spec.size][None]
        if spec.channels == 2:
            img = np.concatenate([img, np.zeros_like(img)])
        images.append(img)
    return images


def split_dataset(items: Sequence, fractions: Sequence[float]):
    """Split a sequence in order into (train, val, test)."""
    n = len(items)
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    return (list(items[:n_train]), list(items[n_train:n_train + n_val]),
            list(items[n_train + n_val:]))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_tensor(path, x: np.ndarray) -> None:
    """Write a ``(C, H, W)`` tensor in the DQT1 binary format.

    Layout: magic ``DQT1``, u32 channels, u32 height, u32 width (all
    little-endian), u8 dtype code (0 = f32, 1 = f64), then raw
    little-endian row-major data.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got shape {x.shape}")
    if x.dtype == np.float32:
        code = 0
    elif x.dtype == np.float64:
        code = 1
    else:
        raise ValueError(f"unsupported dtype {x.dtype}")
    data = np.ascontiguousarray(x, dtype=_DTYPE_CODES[code])
    with open(path, "wb") as fh:
        fh.write(_TENSOR_HEADER.pack(TENSOR_MAGIC, *x.shape, code))
        fh.write(data.tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _TENSOR_HEADER.size:
        raise TensorFormatError(f"{path}: truncated header")
    magic, c, h, w, code = _TENSOR_HEADER.unpack_from(raw)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    count = c * h * w
    if count > _MAX_ELEMENTS:
        raise TensorFormatError(f"{path}: shape {c}x{h}x{w} overflows the element limit")
    dtype = _DTYPE_CODES[code]
    expected = _TENSOR_HEADER.size + count * dtype.itemsize
    if len(raw) < expected:
        raise TensorFormatError(f"{path}: truncated data ({len(raw)} < {expected} bytes)")
    if len(raw) > expected:
        raise TensorFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=_TENSOR_HEADER.size)
    return data.reshape(c, h, w).astype(dtype.newbyteorder("="))


def write_pgm(path, x: np.ndarray) -> None:
    """Write a single-channel unit-range image as binary PGM (P5, maxval 255)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise ValueError("PGM holds single-channel images only")
        x = x[0]
    pixels = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a ``(1, H, W)`` array scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TensorFormatError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise TensorFormatError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    nbytes = w * h * np.dtype(dtype).itemsize
    if len(raw) - pos < nbytes:
        raise TensorFormatError(f"{path}: truncated PGM data")
    pixels = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return (pixels.astype(np.float64) / maxval)[None]
