"""Datasets: IDX image files and deterministic synthetic generators.

All loaders hand back a DatasetHandle with flat float64 images in [0, 1]
and int64 labels. Synthetic data is generated from an explicit RNG
stream so a (seed, generator, params) triple always produces the same
arrays.

Generators:

- ``gaussian-blobs``: unit-variance Gaussian clusters whose centers are
  spread so the closest pair sits 2*margin apart, then min-max scaled to
  [0, 1]. With margin 4 the classes are linearly separable for all
  practical purposes.
- ``two-spirals``: the classic interleaved two-arm spiral in the unit
  square, not linearly separable.
- ``synthetic-digits``: 28x28 grayscale digit images rasterized from a
  vector font, with per-sample rotation, scale, shear, shift, intensity
  jitter, and additive noise. A stand-in for handwritten-digit data when
  no IDX files are on disk.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, InputError
from .numerics import STREAM_DATA, RngStream

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

GENERATOR_NAMES = ("gaussian-blobs", "two-spirals", "synthetic-digits")

_VAL_STREAM_OFFSET = 256
_STRUCT_STREAM_OFFSET = 512


@dataclass
class DatasetHandle:
    """Flat images (N, features) in [0, 1] plus int64 labels (N,)."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 2:
            raise InputError(f"images must be 2-d, got shape {self.images.shape}")
        if self.labels.ndim != 1:
            raise InputError(f"labels must be 1-d, got shape {self.labels.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"image/label count mismatch: {self.images.shape[0]} images, "
                f"{self.labels.shape[0]} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("image values must lie in [0, 1]")
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def dataset_rng(seed: int, split: str) -> RngStream:
    """Data-generation stream for a split; train and val never overlap."""
    offset = _VAL_STREAM_OFFSET if split == "val" else 0
    return RngStream(seed, STREAM_DATA + offset)


def _read_idx_bytes(path: str | Path) -> bytes:
    p = Path(path)
    if not p.exists():
        raise DataError(f"IDX file not found: {p}")
    raw = p.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_mnist_idx(images_path: str | Path, labels_path: str | Path,
                   split: str = "train") -> DatasetHandle:
    """Parse an IDX image/label file pair (gzipped files accepted).

    Images use magic 0x00000803 with big-endian u32 count/rows/cols and
    one unsigned byte per pixel; labels use magic 0x00000801. Truncated
    or oversized payloads, bad magic, and count mismatches are all data
    errors; no partial dataset is returned.
    """
    img_raw = _read_idx_bytes(images_path)
    if len(img_raw) < 16:
        raise DataError(f"truncated IDX image header in {images_path}")
    magic = int.from_bytes(img_raw[0:4], "big")
    if magic != IDX_MAGIC_IMAGES:
        raise DataError(
            f"bad IDX image magic 0x{magic:08x} in {images_path}, "
            f"expected 0x{IDX_MAGIC_IMAGES:08x}"
        )
    count = int.from_bytes(img_raw[4:8], "big")
    rows = int.from_bytes(img_raw[8:12], "big")
    cols = int.from_bytes(img_raw[12:16], "big")
    expected = 16 + count * rows * cols
    if len(img_raw) != expected:
        raise DataError(
            f"IDX image payload size mismatch in {images_path}: "
            f"expected {expected} bytes, got {len(img_raw)}"
        )
    images = np.frombuffer(img_raw, dtype=np.uint8, offset=16).astype(np.float64)
    images = images.reshape(count, rows * cols) / 255.0

    lbl_raw = _read_idx_bytes(labels_path)
    if len(lbl_raw) < 8:
        raise DataError(f"truncated IDX label header in {labels_path}")
    magic = int.from_bytes(lbl_raw[0:4], "big")
    if magic != IDX_MAGIC_LABELS:
        raise DataError(
            f"bad IDX label magic 0x{magic:08x} in {labels_path}, "
            f"expected 0x{IDX_MAGIC_LABELS:08x}"
        )
    lbl_count = int.from_bytes(lbl_raw[4:8], "big")
    if len(lbl_raw) != 8 + lbl_count:
        raise DataError(
            f"IDX label payload size mismatch in {labels_path}: "
            f"expected {8 + lbl_count} bytes, got {len(lbl_raw)}"
        )
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    if count != lbl_count:
        raise DataError(
            f"IDX pair mismatch: {count} images but {lbl_count} labels"
        )
    return DatasetHandle(images=images, labels=labels, split=split)


def synthetic_dataset(name: str, params: dict, rng: RngStream,
                      split: str = "train") -> DatasetHandle:
    """Generate a synthetic dataset by generator name. Unknown names and
    missing/invalid parameters raise ConfigError."""
    if name == "gaussian-blobs":
        return _gaussian_blobs(params, rng, split)
    if name == "two-spirals":
        return _two_spirals(params, rng, split)
    if name == "synthetic-digits":
        return _synthetic_digits(params, rng, split)
    raise ConfigError(
        f"unknown generator {name!r}, expected one of {', '.join(GENERATOR_NAMES)}"
    )


def _require_samples(params: dict) -> int:
    n = params.get("samples")
    if not isinstance(n, int) or n < 1:
        raise ConfigError(f"generator needs a positive integer 'samples', got {n!r}")
    return n


def _gaussian_blobs(params: dict, rng: RngStream, split: str) -> DatasetHandle:
    n = _require_samples(params)
    classes = int(params.get("classes", 2))
    features = int(params.get("features", 2))
    margin = float(params.get("margin", 4.0))
    if classes < 2:
        raise ConfigError(f"gaussian-blobs needs >= 2 classes, got {classes}")
    if features < 1:
        raise ConfigError(f"gaussian-blobs needs >= 1 feature, got {features}")
    if margin <= 0:
        raise ConfigError(f"gaussian-blobs margin must be positive, got {margin}")

    # Class geometry must be identical for every split of one seed, so
    # the centers come from a dedicated structure stream; only the
    # per-sample noise uses the split's own stream.
    struct_rng = RngStream(rng.seed, STREAM_DATA + _STRUCT_STREAM_OFFSET)
    centers = struct_rng.standard_normal((classes, features))
    diffs = centers[:, None, :] - centers[None, :, :]
    dists = np.sqrt((diffs**2).sum(axis=2))
    np.fill_diagonal(dists, np.inf)
    d_min = dists.min()
    if d_min == 0:
        raise ConfigError("degenerate blob centers (duplicate draw); change the seed")
    # Closest center pair ends up 2*margin apart, so each sample sits
    # margin standard deviations from the nearest decision midplane.
    centers *= (2.0 * margin) / d_min

    labels = np.arange(n, dtype=np.int64) % classes
    x = centers[labels] + rng.standard_normal((n, features))
    # Fixed affine map into [0, 1] shared by all splits: center bounds
    # plus a 6-sigma noise allowance, residual tails clipped.
    lo = centers.min() - 6.0
    hi = centers.max() + 6.0
    x = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return DatasetHandle(images=x, labels=labels, split=split)


def _two_spirals(params: dict, rng: RngStream, split: str) -> DatasetHandle:
    n = _require_samples(params)
    noise = float(params.get("noise", 0.05))
    turns = float(params.get("turns", 1.75))
    if noise < 0:
        raise ConfigError(f"two-spirals noise must be >= 0, got {noise}")
    if turns <= 0:
        raise ConfigError(f"two-spirals turns must be positive, got {turns}")

    labels = np.arange(n, dtype=np.int64) % 2
    t = rng.uniform(0.05, 1.0, n)
    theta = 2.0 * np.pi * turns * t
    sign = np.where(labels == 0, 1.0, -1.0)
    x = np.stack([sign * t * np.cos(theta), sign * t * np.sin(theta)], axis=1)
    x = x + noise * rng.standard_normal((n, 2))
    # Fixed map into [0, 1]: arm radius is at most 1, allow 6-sigma noise.
    reach = 1.0 + 6.0 * noise
    x = np.clip((x + reach) / (2.0 * reach), 0.0, 1.0)
    return DatasetHandle(images=x, labels=labels, split=split)


_PROTO_SIZE = 56
_DIGIT_SIZE = 28
_proto_cache: np.ndarray | None = None


def _digit_prototypes() -> np.ndarray:
    """(10, 56, 56) float64 glyph images of the digits 0-9, rendered once
    from the DejaVu Sans font that ships with matplotlib."""
    global _proto_cache
    if _proto_cache is not None:
        return _proto_cache
    import matplotlib
    from PIL import Image, ImageDraw, ImageFont

    font_path = Path(matplotlib.get_data_path()) / "fonts" / "ttf" / "DejaVuSans.ttf"
    font = ImageFont.truetype(str(font_path), 44)
    protos = np.zeros((10, _PROTO_SIZE, _PROTO_SIZE))
    for d in range(10):
        img = Image.new("L", (_PROTO_SIZE, _PROTO_SIZE), 0)
        draw = ImageDraw.Draw(img)
        left, top, right, bottom = draw.textbbox((0, 0), str(d), font=font)
        x0 = (_PROTO_SIZE - (right - left)) / 2 - left
        y0 = (_PROTO_SIZE - (bottom - top)) / 2 - top
        draw.text((x0, y0), str(d), fill=255, font=font)
        protos[d] = np.asarray(img, dtype=np.float64) / 255.0
    _proto_cache = protos
    return protos


def _synthetic_digits(params: dict, rng: RngStream, split: str) -> DatasetHandle:
    n = _require_samples(params)
    max_rotation = float(params.get("max_rotation", 22.0))
    max_shift = float(params.get("max_shift", 3.0))
    max_shear = float(params.get("max_shear", 0.18))
    scale_lo = float(params.get("scale_low", 0.78))
    scale_hi = float(params.get("scale_high", 1.15))
    noise = float(params.get("noise", 0.14))
    if not 0 < scale_lo <= scale_hi:
        raise ConfigError(
            f"synthetic-digits scale range must satisfy 0 < low <= high, "
            f"got [{scale_lo}, {scale_hi}]"
        )
    if noise < 0:
        raise ConfigError(f"synthetic-digits noise must be >= 0, got {noise}")

    protos = _digit_prototypes()
    labels = rng.integers(0, 10, n).astype(np.int64)
    theta = np.deg2rad(rng.uniform(-max_rotation, max_rotation, n))
    sx = rng.uniform(scale_lo, scale_hi, n)
    sy = rng.uniform(scale_lo, scale_hi, n)
    shear = rng.uniform(-max_shear, max_shear, n)
    tx = rng.uniform(-max_shift, max_shift, n)
    ty = rng.uniform(-max_shift, max_shift, n)
    gain = rng.uniform(0.75, 1.0, n)

    # Forward map (prototype -> output) is rotation * shear * scale, so
    # sample the prototype through the inverse at each output pixel.
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    fwd = np.empty((n, 2, 2))
    fwd[:, 0, 0] = cos_t * sx - sin_t * sx * shear
    fwd[:, 0, 1] = -sin_t * sy
    fwd[:, 1, 0] = sin_t * sx + cos_t * sx * shear
    fwd[:, 1, 1] = cos_t * sy
    det = fwd[:, 0, 0] * fwd[:, 1, 1] - fwd[:, 0, 1] * fwd[:, 1, 0]
    inv = np.empty_like(fwd)
    inv[:, 0, 0] = fwd[:, 1, 1] / det
    inv[:, 0, 1] = -fwd[:, 0, 1] / det
    inv[:, 1, 0] = -fwd[:, 1, 0] / det
    inv[:, 1, 1] = fwd[:, 0, 0] / det

    grid = np.arange(_DIGIT_SIZE, dtype=np.float64)
    ox, oy = np.meshgrid(grid, grid)
    out_xy = np.stack([ox.ravel(), oy.ravel()], axis=1)
    c_out = (_DIGIT_SIZE - 1) / 2.0
    c_proto = (_PROTO_SIZE - 1) / 2.0
    upscale = _PROTO_SIZE / _DIGIT_SIZE

    images = np.empty((n, _DIGIT_SIZE * _DIGIT_SIZE))
    chunk = 4096
    for start in range(0, n, chunk):
        end = min(start + chunk, n)
        m = end - start
        d = out_xy[None, :, :] - c_out
        d = d - np.stack([tx[start:end], ty[start:end]], axis=1)[:, None, :]
        src = np.einsum("nij,npj->npi", inv[start:end], d) * upscale + c_proto
        px, py = src[:, :, 0], src[:, :, 1]
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        fx, fy = px - x0, py - y0
        valid = (x0 >= 0) & (x0 < _PROTO_SIZE - 1) & (y0 >= 0) & (y0 < _PROTO_SIZE - 1)
        x0c = np.clip(x0, 0, _PROTO_SIZE - 2)
        y0c = np.clip(y0, 0, _PROTO_SIZE - 2)
        lbl = labels[start:end, None]
        p00 = protos[lbl, y0c, x0c]
        p01 = protos[lbl, y0c, x0c + 1]
        p10 = protos[lbl, y0c + 1, x0c]
        p11 = protos[lbl, y0c + 1, x0c + 1]
        val = (
            p00 * (1 - fx) * (1 - fy)
            + p01 * fx * (1 - fy)
            + p10 * (1 - fx) * fy
            + p11 * fx * fy
        )
        val = np.where(valid, val, 0.0) * gain[start:end, None]
        if noise > 0:
            val = val + noise * rng.standard_normal((m, _DIGIT_SIZE * _DIGIT_SIZE))
        images[start:end] = np.clip(val, 0.0, 1.0)
    return DatasetHandle(images=images, labels=labels, split=split)
