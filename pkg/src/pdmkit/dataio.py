"""Datasets: per-sample normalization, synthetic generators and file formats."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .binio import Reader, checked_count, f64_bytes
from .errors import BadMagicError, ConfigError, DataError, DimensionError, FormatError

TENSOR_MAGIC = b"PDMT"
TENSOR_VERSION = 1
LABEL_TAG = b"LBLS"
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
GRF_MAX_SIDE = 64

MODES = {"unit_interval": (0.0, 1.0), "symmetric": (-1.0, 1.0)}


@dataclass(frozen=True)
class NormalizationRecord:
    """original = normalized * scale + offset."""

    sample_id: int
    mode: str
    offset: float
    scale: float

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.scale + self.offset


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W)
    labels: np.ndarray | None = None
    ledger: list[NormalizationRecord] = field(default_factory=list)
    name: str = ""
    source: str = ""

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float64)
        if imgs.ndim != 4:
            raise DataError(f"dataset images must be (n, C, H, W), got shape {imgs.shape}")
        if not np.all(np.isfinite(imgs)):
            raise DataError("dataset contains non-finite pixels")
        self.images = imgs
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (imgs.shape[0],):
                raise DataError(f"{self.labels.size} labels for {imgs.shape[0]} images")
        if self.ledger and len(self.ledger) != imgs.shape[0]:
            raise DataError(f"ledger has {len(self.ledger)} records for {imgs.shape[0]} images")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]


# -- normalization -----------------------------------------------------------


def normalize(dataset: Dataset, mode: str = "symmetric") -> tuple[Dataset, list[NormalizationRecord]]:
    """Map each image affinely onto [0, 1] or [-1, 1] and record how to undo it.

    Constant images map to the interval midpoint with scale 1.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown normalization mode {mode!r}")
    lo_t, hi_t = MODES[mode]
    mid = 0.5 * (lo_t + hi_t)
    out = np.empty_like(dataset.images)
    ledger = []
    for i, img in enumerate(dataset.images):
        lo, hi = float(img.min()), float(img.max())
        if hi > lo:
            scale = (hi - lo) / (hi_t - lo_t)
            offset = lo - lo_t * scale
        else:
            scale = 1.0
            offset = lo - mid
        out[i] = (img - offset) / scale
        ledger.append(NormalizationRecord(i, mode, offset, scale))
    return replace(dataset, images=out, ledger=ledger), ledger


def denormalize(images, ledger: Sequence[NormalizationRecord]) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if len(ledger) != images.shape[0]:
        raise DataError("ledger and images differ in length")
    return np.stack([rec.invert(img) for rec, img in zip(ledger, images)])


def rescale_generated(images, ledger: Sequence[NormalizationRecord], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Give each generated image the coefficients of a uniformly drawn training sample.

    Returns ``(rescaled, drawn_record_indices)``.
    """
    if len(ledger) == 0:
        raise DataError("cannot rescale with an empty ledger")
    images = np.asarray(images, dtype=np.float64)
    idx = rng.integers(0, len(ledger), size=images.shape[0])
    scale = np.array([ledger[k].scale for k in idx]).reshape((-1,) + (1,) * (images.ndim - 1))
    offset = np.array([ledger[k].offset for k in idx]).reshape(scale.shape)
    return images * scale + offset, idx


def rescale_to_range(images, mode: str = "symmetric", per_sample: bool = True) -> np.ndarray:
    """A-posteriori min-max stretch of generated images onto a target interval."""
    lo_t, hi_t = MODES[mode]
    images = np.asarray(images, dtype=np.float64)
    axes = tuple(range(1, images.ndim)) if per_sample else None
    lo = images.min(axis=axes, keepdims=True)
    hi = images.max(axis=axes, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return lo_t + (images - lo) / span * (hi_t - lo_t)


def save_ledger(ledger: Sequence[NormalizationRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "mode", "offset", "scale"])
        for r in ledger:
            w.writerow([r.sample_id, r.mode, repr(float(r.offset)), repr(float(r.scale))])


def load_ledger(path) -> list[NormalizationRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["sample_id", "mode", "offset", "scale"]:
        raise FormatError("ledger header must be sample_id,mode,offset,scale", 0, path)
    out = []
    for line, row in enumerate(rows[1:], start=2):
        try:
            rec = NormalizationRecord(int(row[0]), row[1], float(row[2]), float(row[3]))
        except (ValueError, IndexError) as exc:
            raise FormatError(f"bad ledger row on line {line}: {row}", None, path) from exc
        if rec.mode not in MODES or not rec.scale > 0 or not np.isfinite(rec.offset):
            raise FormatError(f"invalid ledger record on line {line}: {row}", None, path)
        out.append(rec)
    return out


# -- synthetic data ----------------------------------------------------------


def grid_distances(side: int) -> np.ndarray:
    yy, xx = np.divmod(np.arange(side * side), side)
    return np.hypot(yy[:, None] - yy[None, :], xx[:, None] - xx[None, :])


def synth_grf(n: int, side: int, sigma_sq: float = 1.0, rho: float = 4.0, seed: int = 0) -> Dataset:
    """Zero-mean Gaussian random fields with covariance sigma^2 exp(-h / rho), by Cholesky."""
    if side < 1 or side > GRF_MAX_SIDE:
        raise ConfigError(f"grf side must lie in 1..{GRF_MAX_SIDE} (Cholesky cap), got {side}")
    if not sigma_sq > 0 or not rho > 0:
        raise ConfigError("sigma_sq and rho must be positive")
    if n < 0:
        raise ConfigError("n must be non-negative")
    cov = sigma_sq * np.exp(-grid_distances(side) / rho)
    cov[np.diag_indices_from(cov)] += 1e-10 * sigma_sq
    chol = np.linalg.cholesky(cov)
    z = np.random.default_rng(seed).standard_normal((n, side * side))
    fields = z @ chol.T
    return Dataset(fields.reshape(n, 1, side, side), name="grf", source=f"grf(side={side},sigma_sq={sigma_sq},rho={rho},seed={seed})")


def synth_gaussian(n: int, shape: Sequence[int], mu0: float = 0.0, sigma0_sq: float = 1.0, seed: int = 0) -> Dataset:
    """i.i.d. N(mu0, sigma0_sq) pixels."""
    if not sigma0_sq > 0:
        raise ConfigError(f"sigma0_sq must be positive, got {sigma0_sq}")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1 or n < 0:
        raise ConfigError(f"bad shape {shape} or count {n}")
    x = mu0 + np.sqrt(sigma0_sq) * np.random.default_rng(seed).standard_normal((n,) + shape)
    return Dataset(x, name="gaussian", source=f"gaussian(mu0={mu0},sigma0_sq={sigma0_sq},seed={seed})")


# -- tensor files ------------------------------------------------------------


def save_tensor(dataset: Dataset, path) -> None:
    """Write a PDMT file (see :func:`load_tensor` for the layout)."""
    n, c, h, w = dataset.images.shape
    parts = [TENSOR_MAGIC, struct.pack("<IQIII", TENSOR_VERSION, n, c, h, w), f64_bytes(dataset.images)]
    if dataset.labels is not None:
        parts += [LABEL_TAG, struct.pack("<Q", n), np.asarray(dataset.labels, dtype="<u4").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_tensor(path) -> Dataset:
    """Read a PDMT file.

    Layout: ``PDMT``, u32 version, u64 count, u32 channels, u32 height,
    u32 width, count*c*h*w little-endian f8; optionally ``LBLS``, u64 count,
    count u32 labels.
    """
    r = Reader(Path(path).read_bytes(), path)
    r.magic(TENSOR_MAGIC)
    version = r.u32("version")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}", 4, path)
    at = r.pos
    n = r.u64("count")
    c, h, w = r.u32("channels"), r.u32("height"), r.u32("width")
    count = checked_count((n, c, h, w), "tensor", at, path)
    at = r.pos
    data = r.f64(count, "tensor payload")
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise FormatError("non-finite pixel value", at + 8 * bad, path)
    labels = None
    if not r.at_end():
        at = r.pos
        tag = r.take(4, "block tag")
        if tag != LABEL_TAG:
            raise FormatError(f"unknown block tag {tag!r}", at, path)
        at = r.pos
        m = r.u64("label count")
        if m != n:
            raise FormatError(f"label count {m} does not match image count {n}", at, path)
        labels = np.frombuffer(r.take(4 * m, "labels"), dtype="<u4").astype(np.int64)
        if not r.at_end():
            raise FormatError(f"{r.remaining()} trailing bytes", r.pos, path)
    return Dataset(data.reshape(n, c, h, w), labels, name=Path(path).stem, source=str(path))


def _idx_parse(path, expected_magic: int, n_dims: int) -> np.ndarray:
    r = Reader(Path(path).read_bytes(), path)
    raw = r.data[:4]
    if len(raw) < 4:
        raise FormatError("truncated IDX header", 0, path)
    magic = struct.unpack(">I", raw)[0]
    if magic != expected_magic:
        raise BadMagicError(f"0x{magic:08x}", f"0x{expected_magic:08x}", path)
    r.pos = 4
    at = r.pos
    dims = [r.u32(f"dimension {i}", ">") for i in range(n_dims)]
    count = checked_count(dims, "IDX", at, path)
    payload = r.take(count, "IDX payload")
    if not r.at_end():
        raise FormatError(f"{r.remaining()} trailing bytes", r.pos, path)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """MNIST-style IDX (unsigned byte) images and optional labels; pixels kept as 0..255."""
    imgs = _idx_parse(images_path, IDX_IMAGES, 3)
    labels = None
    if labels_path is not None:
        labels = _idx_parse(labels_path, IDX_LABELS, 1)
        if labels.shape[0] != imgs.shape[0]:
            raise DimensionError(f"{labels.shape[0]} labels for {imgs.shape[0]} images", 4, labels_path)
    return Dataset(imgs[:, None].astype(np.float64), labels, name=Path(images_path).stem, source=str(images_path))


# -- PGM export --------------------------------------------------------------


def to_uint8(img: np.ndarray, value_range: tuple[float, float] | None = None) -> np.ndarray:
    """Min-max stretch (or fixed range) to 0..255; a constant image becomes 127."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = (float(img.min()), float(img.max())) if value_range is None else value_range
    if hi <= lo:
        return np.full(img.shape, 127, dtype=np.uint8)
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def tile(images, rows: int, cols: int, value_range=None, separator: int = 0) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != 1:
        raise DataError("PGM export needs single-channel (n, 1, H, W) images")
    if rows < 1 or cols < 1:
        raise ConfigError(f"grid must be at least 1x1, got {rows}x{cols}")
    n, _, h, w = images.shape
    if n > rows * cols:
        raise ConfigError(f"{n} images do not fit a {rows}x{cols} grid")
    canvas = np.full((rows * h + rows - 1, cols * w + cols - 1), separator, dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, cols)
        canvas[r * (h + 1) : r * (h + 1) + h, c * (w + 1) : c * (w + 1) + w] = to_uint8(images[k, 0], value_range)
    return canvas


def export_pgm(images, path, rows: int, cols: int, value_range=None) -> tuple[int, int]:
    """Tile single-channel images into a binary P5 PGM with 1-pixel separators.

    Returns ``(width, height)``.
    """
    canvas = tile(images, rows, cols, value_range)
    h, w = canvas.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + canvas.tobytes())
    return w, h


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise BadMagicError(data[:2], b"P5", path)
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos, path)
        fields.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", pos, path)
    if len(data) - pos < w * h:
        raise FormatError("truncated PGM payload", pos, path)
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
