"""Joint intensity histograms and the pixel-wise information-theoretic objectives.

All quantities are in nats. Only pixel pairs inside the overlap of the fixed
image and the resampled moving image are counted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import Image
from .transform import TransformParams, resample_moving

__all__ = [
    "NoOverlapError",
    "JointHistogram",
    "CategoricalJointModel",
    "bin_index",
    "histogram_from_intensities",
    "joint_histogram",
    "joint_entropy",
    "mutual_information",
    "fit_categorical",
    "categorical_loglik",
    "profile_loglik",
    "THETA_FLOOR",
]

DEFAULT_BINS = 75
THETA_FLOOR = 1e-8


class NoOverlapError(ValueError):
    """The fixed image and the transformed moving image share no samples."""

    def __init__(self, message="no overlap", beta=None):
        super().__init__(message)
        self.beta = beta


@dataclass(frozen=True, eq=False)
class JointHistogram:
    """Counts ``N_j`` over joint bins, stored as a ``(bins, bins)`` array.

    Row index is the fixed-image bin, column index the moving-image bin, so
    the flat index matches :func:`bin_index`.
    """

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 2:
            raise ValueError("counts must be a square array with at least 2 bins per axis")
        if (c < 0).any():
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def bins(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "JointHistogram") -> "JointHistogram":
        return JointHistogram(self.counts + other.counts)

    def to_csv(self, path) -> None:
        flat = self.counts.ravel()
        lines = ["j,count"] + [f"{j},{n}" for j, n in enumerate(flat)]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True, eq=False)
class CategoricalJointModel:
    theta: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=np.float64)
        if (t < 0).any() or abs(t.sum() - 1.0) > 1e-12:
            raise ValueError("theta must be a probability vector")
        object.__setattr__(self, "theta", t)


def _bin_of(values, bins: int) -> np.ndarray:
    return np.clip(np.floor(np.asarray(values) * bins).astype(np.int64), 0, bins - 1)


def bin_index(u, v, bins: int = DEFAULT_BINS):
    """Flat joint bin of intensity pair ``(u, v)``; both must lie in [0, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any((u < 0) | (u > 1) | (v < 0) | (v > 1)) or np.any(np.isnan(u) | np.isnan(v)):
        raise ValueError("intensities must lie in [0, 1]")
    j = _bin_of(u, bins) * bins + _bin_of(v, bins)
    return int(j) if j.ndim == 0 else j


def histogram_from_intensities(u, v, bins: int = DEFAULT_BINS) -> JointHistogram:
    j = bin_index(np.ravel(u), np.ravel(v), bins)
    counts = np.bincount(j, minlength=bins * bins).reshape(bins, bins)
    return JointHistogram(counts)


def joint_histogram(fixed: Image, moving: Image, beta: TransformParams, bins: int = DEFAULT_BINS) -> JointHistogram:
    warped, mask = resample_moving(moving, beta, grid=fixed)
    if not mask.any():
        raise NoOverlapError(beta=beta)
    return histogram_from_intensities(fixed.data[mask], warped.data[mask], bins)


def _entropy(counts: np.ndarray) -> float:
    n = counts.sum()
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def joint_entropy(h: JointHistogram) -> float:
    if h.total <= 0:
        raise NoOverlapError("empty histogram")
    return _entropy(h.counts)


def mutual_information(h: JointHistogram) -> float:
    """Plug-in MI, ``H(U) + H(V) - H(U, V)``."""
    if h.total <= 0:
        raise NoOverlapError("empty histogram")
    c = h.counts
    mi = _entropy(c.sum(axis=1)) + _entropy(c.sum(axis=0)) - _entropy(c)
    # rounding can leave tiny negatives on product histograms
    return max(mi, 0.0)


def fit_categorical(h: JointHistogram) -> CategoricalJointModel:
    """Maximum-likelihood categorical parameters ``theta_j = N_j / N``."""
    n = h.total
    if n <= 0:
        raise NoOverlapError("empty histogram")
    return CategoricalJointModel(h.counts.ravel() / n)


def _floored(theta: np.ndarray) -> np.ndarray:
    t = np.maximum(theta, THETA_FLOOR)
    return t / t.sum()


def counts_loglik(counts: np.ndarray, theta: np.ndarray) -> float:
    """``sum_j N_j ln theta_j`` over bins with nonzero count."""
    c = np.ravel(counts)
    nz = c > 0
    return float((c[nz] * np.log(theta[nz])).sum())


def categorical_loglik(fixed: Image, moving: Image, beta: TransformParams, model: CategoricalJointModel) -> float:
    """Total log-likelihood of the overlap under a fixed joint model.

    Zero-probability bins are floored at ``THETA_FLOOR`` (then renormalized)
    so unseen intensity pairs cost a large but finite penalty.
    """
    bins = int(round(np.sqrt(model.theta.size)))
    h = joint_histogram(fixed, moving, beta, bins)
    return counts_loglik(h.counts, _floored(model.theta))


def profile_loglik(fixed: Image, moving: Image, beta: TransformParams, bins: int = DEFAULT_BINS) -> float:
    """Per-sample log-likelihood maximized over the categorical parameters.

    Evaluates ``(1/N) sum_j N_j ln theta_j`` at the fitted ``theta``; this is
    the negative joint entropy of the overlap histogram.
    """
    h = joint_histogram(fixed, moving, beta, bins)
    model = fit_categorical(h)
    return counts_loglik(h.counts, model.theta) / h.total
