"""Sample-quality metrics: FID, improved precision/recall and empirical semivariograms."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .binio import Reader, checked_count, f64_bytes
from .errors import ConfigError, DataError, FormatError

FEATURE_MAGIC = b"PDMF"
FEATURE_VERSION = 1


@dataclass
class FeatureSet:
    matrix: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DataError("feature matrix contains non-finite values")
        self.matrix = m

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


def _as_features(x) -> np.ndarray:
    return x.matrix if isinstance(x, FeatureSet) else FeatureSet(x).matrix


# -- FID ---------------------------------------------------------------------


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; negative eigenvalues are clipped to 0."""
    a = 0.5 * (a + a.T)
    w, q = np.linalg.eigh(a)
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Squared Wasserstein-2 distance between two Gaussians."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise DataError("Gaussian moments differ in dimension")
    s1 = sqrtm_psd(cov1)
    cross = np.linalg.eigvalsh(0.5 * ((s1 @ cov2 @ s1) + (s1 @ cov2 @ s1).T))
    tr_cross = np.sqrt(np.clip(cross, 0.0, None)).sum()
    diff = mu1 - mu2
    val = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_cross
    return float(max(val, 0.0))


def gaussian_fit(features) -> tuple[np.ndarray, np.ndarray]:
    x = _as_features(features)
    if x.shape[0] < 2:
        raise DataError(f"need at least 2 samples to fit a covariance, got {x.shape[0]}")
    return x.mean(axis=0), np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])


def fid(real, gen) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    a, b = _as_features(real), _as_features(gen)
    if a.shape[1] != b.shape[1]:
        raise DataError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return frechet_distance(*gaussian_fit(a), *gaussian_fit(b))


# -- improved precision / recall -------------------------------------------


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # exact differences rather than the |a|^2 - 2ab + |b|^2 expansion, so ties survive
    return cdist(a, b)


def knn_radii(x: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Distance from each row to its k-th nearest other row."""
    radii = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], chunk):
        d = pairwise_distances(x[lo : lo + chunk], x)
        # the zero self-distance sorts first, so index k is the k-th neighbour
        radii[lo : lo + chunk] = np.partition(d, k, axis=1)[:, k]
    return radii


def manifold_coverage(ref: np.ndarray, radii: np.ndarray, query: np.ndarray, chunk: int = 512) -> float:
    """Fraction of ``query`` rows inside at least one ball (ref_i, radii_i)."""
    inside = np.zeros(query.shape[0], dtype=bool)
    for lo in range(0, query.shape[0], chunk):
        d = pairwise_distances(query[lo : lo + chunk], ref)
        inside[lo : lo + chunk] = np.any(d <= radii[None, :], axis=1)
    return float(inside.mean())


def improved_pr(real, gen, k: int = 3) -> tuple[float, float]:
    """k-NN manifold precision and recall. Returns ``(precision, recall)``."""
    a, b = _as_features(real), _as_features(gen)
    if a.shape[1] != b.shape[1]:
        raise DataError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    for name, x in (("real", a), ("generated", b)):
        if x.shape[0] <= k:
            raise DataError(f"{name} set has {x.shape[0]} samples; need more than k={k}")
    precision = manifold_coverage(a, knn_radii(a, k), b)
    recall = manifold_coverage(b, knn_radii(b, k), a)
    return precision, recall


# -- semivariogram -----------------------------------------------------------


@dataclass
class Variogram:
    bin_centers: np.ndarray
    gamma: np.ndarray
    pair_counts: np.ndarray
    band_low: np.ndarray
    band_high: np.ndarray
    delta: float
    # one row per field
    per_field: np.ndarray
    # average distance of the pairs in each bin
    mean_lag: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h", "gamma", "count", "band_low", "band_high", "mean_lag"])
            cols = (self.bin_centers, self.gamma, self.pair_counts, self.band_low, self.band_high, self.mean_lag)
            for h, g, n, lo, hi, m in zip(*cols):
                w.writerow([repr(float(h)), repr(float(g)), int(n), repr(float(lo)), repr(float(hi)), repr(float(m))])


def _offsets(H: int, W: int) -> np.ndarray:
    """Every lag vector (dy, dx) that pairs two distinct pixels exactly once."""
    dy, dx = np.meshgrid(np.arange(H), np.arange(-(W - 1), W), indexing="ij")
    keep = (dy > 0) | ((dy == 0) & (dx > 0))
    return np.stack([dy[keep], dx[keep]], axis=1)


def _bin_index(dist: np.ndarray, delta: float, n_bins: int) -> np.ndarray:
    """Bin k (center 2*delta*(k+1)) holds distances in (center - delta, center + delta]; -1 if none."""
    k = np.ceil((dist - delta) / (2.0 * delta) - 1e-12).astype(np.int64) - 1
    # ceil puts a distance on an upper edge into the lower bin, matching the half-open interval
    k[(k < 0) | (k >= n_bins)] = -1
    return k


def semivariogram(
    fields,
    max_lag: float | None = None,
    delta: float = 0.5,
    pair_budget: int = 1_000_000,
    seed: int = 0,
    band: tuple[float, float] = (2.5, 97.5),
) -> Variogram:
    """Isotropic empirical semivariogram per field, averaged over fields.

    ``gamma(h) = sum |z_i - z_j|^2 / (2 |N(h)|)`` over unordered pixel pairs
    whose distance lies in ``(h - delta, h + delta]``. Bins are centred on
    multiples of ``2 * delta``. Fields with more than ``pair_budget`` pairs
    use that many uniformly drawn pairs instead (same pairs for every field).
    """
    arr = np.asarray(fields, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise DataError("semivariogram needs a non-empty list of (1, H, W) fields")
    if arr.shape[1] != 1:
        raise DataError(f"semivariogram needs single-channel fields, got {arr.shape[1]} channels")
    if not delta > 0:
        raise ConfigError(f"delta must be positive, got {delta}")
    z = arr[:, 0]
    F, H, W = z.shape
    if max_lag is None:
        max_lag = 0.5 * np.hypot(H, W)
    n_bins = int(np.floor((max_lag + delta) / (2.0 * delta) + 1e-12))
    if n_bins < 1:
        raise ConfigError(f"max_lag {max_lag} smaller than the first bin")
    centers = 2.0 * delta * np.arange(1, n_bins + 1)

    sums = np.zeros((F, n_bins))
    counts = np.zeros(n_bins, dtype=np.int64)
    lag_sums = np.zeros(n_bins)
    n_pix = H * W
    if n_pix * (n_pix - 1) // 2 <= pair_budget:
        offs = _offsets(H, W)
        lags = np.hypot(offs[:, 0], offs[:, 1])
        bins = _bin_index(lags, delta, n_bins)
        for (dy, dx), lag, b in zip(offs, lags, bins):
            if b < 0:
                continue
            a = z[:, dy:, max(0, -dx) : W - max(0, dx)]
            c = z[:, : H - dy, max(0, dx) : W - max(0, -dx)]
            d = a - c
            sums[:, b] += np.einsum("fij,fij->f", d, d)
            counts[b] += d[0].size
            lag_sums[b] += lag * d[0].size
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n_pix, size=pair_budget)
        j = rng.integers(0, n_pix - 1, size=pair_budget)
        j = j + (j >= i)  # distinct pixels, uniform over ordered pairs
        dist = np.hypot(i // W - j // W, i % W - j % W)
        bins = _bin_index(dist, delta, n_bins)
        keep = bins >= 0
        i, j, bins = i[keep], j[keep], bins[keep]
        counts = np.bincount(bins, minlength=n_bins)
        lag_sums = np.bincount(bins, weights=dist[keep], minlength=n_bins)
        flat = z.reshape(F, -1)
        for f in range(F):
            d = flat[f, i] - flat[f, j]
            sums[f] = np.bincount(bins, weights=d * d, minlength=n_bins)

    ok = counts > 0
    per_field = sums[:, ok] / (2.0 * counts[ok])
    lo, hi = np.percentile(per_field, band, axis=0)
    mean_lag = lag_sums[ok] / counts[ok]
    return Variogram(centers[ok], per_field.mean(axis=0), counts[ok], lo, hi, float(delta), per_field, mean_lag)


def exponential_variogram(h, sigma_sq: float, rho: float):
    """Model semivariogram of the exponential covariance sigma^2 exp(-h / rho)."""
    return sigma_sq * (1.0 - np.exp(-np.asarray(h, dtype=np.float64) / rho))


def variogram_distance(a: Variogram, b: Variogram) -> float:
    """RMS difference of two mean curves over their shared bins."""
    common, ia, ib = np.intersect1d(a.bin_centers, b.bin_centers, return_indices=True)
    if common.size == 0:
        raise DataError("variograms share no bins")
    return float(np.sqrt(np.mean((a.gamma[ia] - b.gamma[ib]) ** 2)))


# -- features ----------------------------------------------------------------


@dataclass
class PCAProjection:
    mean: np.ndarray
    components: np.ndarray  # (d, pixels)
    explained_variance_ratio: np.ndarray

    def transform(self, flat: np.ndarray) -> np.ndarray:
        return (flat - self.mean) @ self.components.T


def flatten(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1)


def fit_pca(images, d: int) -> PCAProjection:
    x = flatten(images)
    if d < 1 or d > x.shape[1]:
        raise ConfigError(f"pca dimension {d} must lie in 1..{x.shape[1]}")
    if x.shape[0] < d:
        raise DataError(f"pca with d={d} needs at least {d} fit samples, got {x.shape[0]}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s**2
    total = var.sum()
    ratio = var[:d] / total if total > 0 else np.zeros(d)
    comps = vt[:d]
    if comps.shape[0] < d:
        # fewer samples than pixels: complete the basis with an orthonormal complement
        q, _ = np.linalg.qr(np.concatenate([comps.T, np.eye(x.shape[1])], axis=1))
        comps = q[:, :d].T
        ratio = np.concatenate([ratio, np.zeros(d - ratio.size)])
    return PCAProjection(mean, comps, ratio)


def feature_extract(images, method: str = "flatten", d: int | None = None, fit_on=None, projection: PCAProjection | None = None) -> FeatureSet:
    """Built-in feature extractor: raw pixels, or a PCA projection fitted on ``fit_on``."""
    if method == "flatten":
        return FeatureSet(flatten(images), "builtin:flatten")
    if method == "flatten_pca":
        if projection is None:
            if d is None:
                raise ConfigError("flatten_pca needs a dimension d")
            projection = fit_pca(images if fit_on is None else fit_on, d)
        return FeatureSet(projection.transform(flatten(images)), f"builtin:flatten_pca({projection.components.shape[0]})")
    raise ConfigError(f"unknown feature method {method!r}")


def save_features(features: FeatureSet, path) -> None:
    m = features.matrix
    header = FEATURE_MAGIC + struct.pack("<IQQ", FEATURE_VERSION, m.shape[0], m.shape[1])
    Path(path).write_bytes(header + f64_bytes(m))


def load_features(path) -> FeatureSet:
    """Read a PDMF file: magic, u32 version, u64 n, u64 d, n*d little-endian f8 row-major."""
    r = Reader(Path(path).read_bytes(), path)
    r.magic(FEATURE_MAGIC)
    version = r.u32("version")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature-file version {version}", 4, path)
    at = r.pos
    n, d = r.u64("n"), r.u64("d")
    count = checked_count((n, d), "feature", at, path)
    payload = r.f64(count, "feature payload")
    if not r.at_end():
        raise FormatError(f"{r.remaining()} trailing bytes after payload", r.pos, path)
    if not np.all(np.isfinite(payload)):
        bad = int(np.flatnonzero(~np.isfinite(payload))[0])
        raise FormatError("non-finite feature value", 24 + 8 * bad, path)
    return FeatureSet(payload.reshape(n, d), str(path))


def append_metrics(path, rows: Sequence[tuple[str, float]]) -> None:
    """Append ``metric,value`` rows, writing the header if the file is new."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["metric", "value"])
        for name, value in rows:
            w.writerow([name, repr(float(value))])
