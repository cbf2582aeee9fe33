"""Segmentation and generation metrics: DSC, HD95, volume curves, vFID, cycle-DSC, paired t-test."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, special

from .phantom import FOREGROUND, LA, LV, RA, RV, LabelGrid, ShapeSequence

VOLUME_CHAMBERS = (LV, RV, LA, RA)
SHRINKAGE = 1e-6


class MetricError(ValueError):
    pass


class UndefinedMetricError(MetricError):
    """HD95 with an empty mask on either side."""


def _check_dims(a: LabelGrid, b: LabelGrid) -> None:
    if a.dims != b.dims:
        raise MetricError(f"grid dims differ: {a.dims} vs {b.dims}")


def dsc(a: LabelGrid, b: LabelGrid, cls: int) -> float:
    _check_dims(a, b)
    ma, mb = a.labels == cls, b.labels == cls
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (grid exterior counts as outside)."""
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1),
                                   border_value=0)
    return mask & ~inner


def surface_distances(a: np.ndarray, b: np.ndarray, voxel_size: float = 1.0) -> np.ndarray:
    """Pooled directed nearest distances surface(a)->surface(b) and surface(b)->surface(a)."""
    if not a.any() or not b.any():
        raise UndefinedMetricError("HD95 undefined for an empty mask")
    sa, sb = surface(a), surface(b)
    # EDT of the complement gives, per voxel, the exact distance to the nearest surface voxel
    to_b = ndimage.distance_transform_edt(~sb)
    to_a = ndimage.distance_transform_edt(~sa)
    return np.concatenate([to_b[sa], to_a[sb]]) * voxel_size


def nearest_rank(values: np.ndarray, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = max(int(np.ceil(q * len(v))) - 1, 0)
    return float(v[k])


def hd95(a: LabelGrid, b: LabelGrid, cls: int) -> float:
    _check_dims(a, b)
    d = surface_distances(a.labels == cls, b.labels == cls, a.voxel_size)
    return nearest_rank(d, 0.95)


def volume_curve(seq: ShapeSequence, voxel_size: float | None = None) -> np.ndarray:
    """Flattened (frame, chamber) volumes for LV, RV, LA, RA; length 4*M."""
    out = np.zeros((seq.M, len(VOLUME_CHAMBERS)))
    for i, frame in enumerate(seq.frames):
        vs = frame.voxel_size if voxel_size is None else voxel_size
        counts = np.bincount(frame.labels.ravel(), minlength=7)
        out[i] = counts[list(VOLUME_CHAMBERS)] * vs ** 3
    return out.ravel()


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, samples) -> "GaussianSummary":
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise MetricError("need at least 2 samples of equal length")
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        scale = np.trace(cov) / len(cov)
        cov = cov + SHRINKAGE * (scale if scale > 0 else 1.0) * np.eye(len(cov))
        return cls(x.mean(axis=0), cov)


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """tr((S1^(1/2) S2 S1^(1/2))^(1/2)).

    Evaluated as the sum of singular values of S2^(1/2) S1^(1/2), whose
    squares are the eigenvalues of the symmetric form; skipping the squaring
    keeps small eigenvalues accurate, so identical inputs cancel to rounding.
    """
    return float(np.linalg.svd(psd_sqrt(s2) @ psd_sqrt(s1), compute_uv=False).sum())


def frechet_distance(mu1, s1, mu2, s2) -> float:
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    s1, s2 = np.atleast_2d(s1).astype(np.float64), np.atleast_2d(s2).astype(np.float64)
    diff = mu1 - mu2
    d = float(diff @ diff) + float(np.trace(s1) + np.trace(s2)) - 2.0 * trace_sqrt_product(s1, s2)
    return max(d, 0.0) if d >= -1e-9 else d


def vfid(gen, ref) -> float:
    """Frechet distance between Gaussian fits of two sets of volume curves."""
    gen, ref = np.asarray(gen, np.float64), np.asarray(ref, np.float64)
    if gen.ndim != 2 or ref.ndim != 2 or gen.shape[1] != ref.shape[1]:
        raise MetricError(f"curve length mismatch: {gen.shape} vs {ref.shape}")
    g, r = GaussianSummary.fit(gen), GaussianSummary.fit(ref)
    return frechet_distance(g.mean, g.cov, r.mean, r.cov)


def cycle_dsc(seq: ShapeSequence) -> float:
    if seq.M < 2:
        raise MetricError("cycle-DSC needs at least 2 frames")
    first, last = seq.frames[0], seq.frames[-1]
    return float(np.mean([dsc(first, last, c) for c in FOREGROUND]))


def mean_foreground_dsc(a: LabelGrid, b: LabelGrid) -> float:
    return float(np.mean([dsc(a, b, c) for c in FOREGROUND]))


def paired_ttest(x, y) -> tuple[float, float]:
    """Two-sided paired t-test on x - y."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise MetricError("paired t-test needs two equal-length lists with n >= 2")
    d = x - y
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise MetricError("paired t-test undefined: differences have zero variance")
    n = len(d)
    t = d.mean() / (sd / np.sqrt(n))
    p = 2.0 * special.stdtr(n - 1, -abs(t))
    return float(t), float(min(p, 1.0))
