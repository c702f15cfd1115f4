"""Hyperspectral cube I/O, PCA reduction, patch extraction, stratified splits,
and a synthetic scene generator."""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

MAGIC = b"HSIC"
VERSION = 1
MAX_ELEMENTS = 2**31 - 1


class HsicError(ValueError):
    """Base class for malformed HSIC files."""


class BadMagicError(HsicError):
    pass


class UnsupportedVersionError(HsicError):
    pass


class TruncatedPayloadError(HsicError):
    pass


class ExtentOverflowError(HsicError):
    pass


@dataclass
class HsiCube:
    radiance: np.ndarray             # (H, W, V) float32
    labels: np.ndarray               # (H, W) uint16, 0 = unlabeled
    class_names: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.radiance = np.asarray(self.radiance, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.radiance.ndim != 3 or min(self.radiance.shape) < 1:
            raise ValueError(f"radiance must be H x W x V with positive extents, got {self.radiance.shape}")
        if self.labels.shape != self.radiance.shape[:2]:
            raise ValueError(f"labels shape {self.labels.shape} != spatial shape {self.radiance.shape[:2]}")
        if not np.isfinite(self.radiance).all():
            raise ValueError("radiance contains non-finite values")
        if self.class_names and self.labels.max() > len(self.class_names):
            raise ValueError(f"label {self.labels.max()} exceeds class count {len(self.class_names)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.radiance.shape

    @property
    def n_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max())


def save_cube(cube: HsiCube, path) -> None:
    H, W, V = cube.shape
    trailer = json.dumps({"class_names": list(cube.class_names), "provenance": cube.provenance}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", VERSION, H, W, V))
        fh.write(cube.radiance.transpose(2, 0, 1).astype("<f4").tobytes())
        fh.write(cube.labels.astype("<u2").tobytes())
        fh.write(struct.pack("<I", len(trailer)))
        fh.write(trailer)


def load_cube(path) -> HsiCube:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 20:
        raise TruncatedPayloadError(f"{path}: truncated payload (header incomplete)")
    version, H, W, V = struct.unpack_from("<IIII", raw, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
    if min(H, W, V) < 1 or H * W * V > MAX_ELEMENTS:
        raise ExtentOverflowError(f"{path}: invalid extents {H}x{W}x{V}")
    off = 20
    n_rad, n_lab = H * W * V * 4, H * W * 2
    if len(raw) < off + n_rad + n_lab + 4:
        raise TruncatedPayloadError(f"{path}: truncated payload")
    rad = np.frombuffer(raw, "<f4", H * W * V, off).reshape(V, H, W).transpose(1, 2, 0)
    off += n_rad
    labels = np.frombuffer(raw, "<u2", H * W, off).reshape(H, W)
    off += n_lab
    (n_json,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + n_json:
        raise TruncatedPayloadError(f"{path}: truncated payload (trailer)")
    meta = json.loads(raw[off:off + n_json].decode("utf-8"))
    return HsiCube(rad.astype(np.float32), labels.astype(np.uint16),
                   list(meta.get("class_names", [])), meta.get("provenance", {}))


# ---------------------------------------------------------------------- PCA

@dataclass
class ReducedCube:
    scores: np.ndarray               # (H, W, d)
    basis: np.ndarray                # (V, d), orthonormal columns
    mean: np.ndarray                 # (V,)
    explained_variance: np.ndarray   # (d,)
    total_variance: float
    rank_deficient: bool = False

    def project(self, radiance: np.ndarray) -> np.ndarray:
        """Apply the stored projection to another H x W x V array."""
        return (np.asarray(radiance, dtype=np.float64) - self.mean) @ self.basis


def pca_reduce(cube: HsiCube | np.ndarray, d: int) -> ReducedCube:
    """Project every pixel onto the top-d covariance eigenvectors.

    Components are sorted by descending eigenvalue, and each is signed so its
    largest-magnitude entry is positive.
    """
    rad = cube.radiance if isinstance(cube, HsiCube) else np.asarray(cube)
    H, W, V = rad.shape
    if not 1 <= d <= V:
        raise ValueError(f"PCA dimension {d} must lie in [1, {V}]")
    X = rad.reshape(-1, V).astype(np.float64)
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / X.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    rows = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[rows, np.arange(V)])
    tol = max(evals[0], 1.0) * V * np.finfo(float).eps * 10
    rank = int((evals > tol).sum())
    deficient = rank < d
    if deficient:
        warnings.warn(f"data rank {rank} < requested {d}; trailing components are zero", RuntimeWarning)
    basis = evecs[:, :d].copy()
    scores = Xc @ basis
    if deficient:
        scores[:, rank:] = 0.0
        evals = evals.copy()
        evals[rank:] = 0.0
    return ReducedCube(scores.reshape(H, W, d), basis, mean, evals[:d].copy(),
                       float(np.trace(cov)), deficient)


# ------------------------------------------------------------------ patches

@dataclass
class PatchSet:
    patches: np.ndarray          # (n, B, B, d)
    center_labels: np.ndarray    # (n,) >= 1
    center_coords: np.ndarray    # (n, 2) (row, col)

    def __len__(self) -> int:
        return len(self.center_labels)

    def subset(self, idx) -> "PatchSet":
        return PatchSet(self.patches[idx], self.center_labels[idx], self.center_coords[idx])


def _check_patch_size(B: int) -> None:
    if B < 1 or B % 2 == 0:
        raise ValueError(f"patch size must be a positive odd integer, got {B}")


def patches_at(scores: np.ndarray, coords: np.ndarray, B: int) -> np.ndarray:
    """B x B x d windows centred on ``coords`` of a reflect-padded image."""
    _check_patch_size(B)
    r = B // 2
    H, W = scores.shape[:2]
    if r and (H < r + 1 or W < r + 1):
        raise ValueError(f"image {H}x{W} too small to reflect-pad by {r}")
    padded = np.pad(scores, ((r, r), (r, r), (0, 0)), mode="reflect") if r else scores
    coords = np.asarray(coords).reshape(-1, 2)
    dr, dc = np.meshgrid(np.arange(B), np.arange(B), indexing="ij")
    return padded[coords[:, 0, None, None] + dr, coords[:, 1, None, None] + dc]


def extract_patches(reduced: ReducedCube | np.ndarray, labels: np.ndarray, B: int) -> PatchSet:
    """One patch per labeled pixel, in row-major pixel order."""
    _check_patch_size(B)
    scores = reduced.scores if isinstance(reduced, ReducedCube) else np.asarray(reduced, dtype=np.float64)
    labels = np.asarray(labels)
    coords = np.argwhere(labels > 0)
    if len(coords) == 0:
        raise ValueError("no labeled pixels")
    return PatchSet(patches_at(scores, coords, B), labels[labels > 0].astype(np.int64), coords)


# ------------------------------------------------------------------- splits

@dataclass
class SplitSpec:
    fraction: float
    seed: int
    train_idx: np.ndarray        # indices into the labeled-sample list
    test_idx: np.ndarray
    train_counts: dict[int, int]
    test_counts: dict[int, int]


def train_count(total: int, fraction: float) -> int:
    """round-half-up(fraction * total), at least 1 when total >= 1."""
    if total <= 0:
        return 0
    exact = Fraction(str(fraction)) * total
    return max(1, min(total, int(exact + Fraction(1, 2))))


def _check_fraction(fraction: float) -> None:
    if not 0 < fraction <= 1:
        raise ValueError(f"train fraction must lie in (0, 1], got {fraction}")


def stratified_split(labels, fraction: float, seed: int) -> SplitSpec:
    """Per-class seeded shuffle; the first ``train_count`` samples of each class train.

    ``labels`` is the sequence of class ids of the labeled samples (e.g.
    ``PatchSet.center_labels``); zeros are ignored.
    """
    _check_fraction(fraction)
    labels = np.asarray(labels).reshape(-1)
    rng = np.random.default_rng(seed)
    train, test = [], []
    train_counts, test_counts = {}, {}
    for c in np.unique(labels[labels > 0]):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = train_count(len(idx), fraction)
        train.append(idx[:k])
        test.append(idx[k:])
        train_counts[int(c)], test_counts[int(c)] = k, len(idx) - k
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return SplitSpec(fraction, seed, cat(train), cat(test), train_counts, test_counts)


# ---------------------------------------------------------------- synthetic

def sigma_for_snr(snr_db: float, signal_rms: float = 1.0) -> float:
    return signal_rms * 10 ** (-snr_db / 20)


def _smooth_signature(V: int, rng: np.random.Generator) -> np.ndarray:
    # a few Gaussian bumps on a sloped baseline, scaled to unit RMS
    x = np.linspace(0.0, 1.0, V)
    s = rng.uniform(-1, 1) * x + rng.uniform(-0.5, 0.5)
    for _ in range(3):
        s = s + rng.uniform(-1.5, 1.5) * np.exp(-0.5 * ((x - rng.uniform(0, 1)) / rng.uniform(0.08, 0.3)) ** 2)
    return s / np.sqrt(np.mean(s ** 2))


def synth_dataset(classes: int, H: int, W: int, V: int, noise_sigma: float, seed: int) -> HsiCube:
    """Voronoi scene with one seed point per class, unit-RMS smooth signatures plus Gaussian noise."""
    if classes < 1 or min(H, W, V) < 1:
        raise ValueError("classes and extents must be positive")
    if classes > H * W:
        raise ValueError(f"{classes} classes do not fit in a {H}x{W} image")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    min_dist = 5 * noise_sigma
    for _ in range(100):
        sigs = np.stack([_smooth_signature(V, rng) for _ in range(classes)])
        d = np.linalg.norm(sigs[:, None] - sigs[None], axis=-1)
        if classes == 1 or d[np.triu_indices(classes, 1)].min() >= max(min_dist, 1e-6):
            break
    else:
        raise ValueError(f"could not draw signatures {min_dist:.3g} apart after 100 attempts")
    sites = rng.choice(H * W, classes, replace=False)
    site_rc = np.stack([sites // W, sites % W], axis=1)
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    dist = (rr[..., None] - site_rc[:, 0]) ** 2 + (cc[..., None] - site_rc[:, 1]) ** 2
    labels = np.argmin(dist, axis=-1) + 1
    radiance = sigs[labels - 1] + noise_sigma * rng.standard_normal((H, W, V))
    return HsiCube(radiance.astype(np.float32), labels.astype(np.uint16),
                   [f"class_{i + 1}" for i in range(classes)],
                   {"generator": "synth_dataset", "seed": seed, "noise_sigma": noise_sigma})
