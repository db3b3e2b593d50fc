"""Registration accuracy (FRE) and response-function analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import Image, downsample
from .transform import TransformParams, map_point, rotation_matrix

__all__ = [
    "fre",
    "fre_per_landmark",
    "FREReport",
    "SweepResult",
    "perturb_along",
    "response_sweep",
    "PeakStats",
    "peak_analysis",
]

MODE_PROMINENCE = 0.25
MODE_SMOOTHING = 3


def fre_per_landmark(beta_hat: TransformParams, beta_true: TransformParams, landmarks) -> np.ndarray:
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.size == 0:
        raise ValueError("no landmarks")
    return np.linalg.norm(map_point(beta_hat, landmarks) - map_point(beta_true, landmarks), axis=-1)


def fre(beta_hat: TransformParams, beta_true: TransformParams, landmarks) -> float:
    """Mean distance between landmarks mapped by the estimated and the true transform."""
    return float(fre_per_landmark(beta_hat, beta_true, landmarks).mean())


@dataclass
class FREReport:
    method: str
    per_case: list = field(default_factory=list)

    @property
    def median(self) -> float:
        return float(np.median(self.per_case))

    def summary(self) -> dict:
        q1, med, q3 = np.percentile(self.per_case, [25, 50, 75])
        return {"method": self.method, "n": len(self.per_case), "median": float(med), "q1": float(q1), "q3": float(q3)}


@dataclass
class SweepResult:
    axis: str
    offsets: np.ndarray
    scores: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.offsets.shape != self.scores.shape:
            raise ValueError("offsets and scores differ in length")
        if np.any(np.diff(self.offsets) <= 0):
            raise ValueError("offsets must be strictly increasing")

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["offset", "score"])
            for o, s in zip(self.offsets, self.scores):
                w.writerow([repr(float(o)), repr(float(s))])


def perturb_along(beta: TransformParams, axis: str, offset: float) -> TransformParams:
    if axis == "tx":
        return beta.with_translation(beta.tx + offset, beta.ty)
    if axis == "ty":
        return beta.with_translation(beta.tx, beta.ty + offset)
    if axis == "theta":
        if beta.kind == "rigid":
            return TransformParams.rigid(beta.tx, beta.ty, beta.theta + offset, beta.center)
        return TransformParams.affine(rotation_matrix(offset) @ beta.linear, beta.tx, beta.ty, beta.center)
    raise ValueError(f"unknown sweep axis {axis!r}")


def response_sweep(
    objective,
    fixed: Image,
    moving: Image,
    beta: TransformParams,
    axis: str = "tx",
    lo: float = -20.0,
    hi: float = 20.0,
    step: float = 1.0,
    factor: int = 1,
    metadata: dict | None = None,
) -> SweepResult:
    """Objective values at ``beta`` shifted along ``axis`` by ``lo, lo + step, ... <= hi``."""
    if not lo <= 0 <= hi:
        raise ValueError("sweep range must bracket 0")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    offsets = lo + np.arange(n) * step
    fl = downsample(fixed, max(int(factor), 1))
    ml = downsample(moving, max(int(factor), 1))
    scores = [objective(fl, ml, perturb_along(beta, axis, o)) for o in offsets]
    return SweepResult(axis, offsets, scores, dict(metadata or {}))


@dataclass
class PeakStats:
    argmax: float
    fwhm: float
    modes: int


def _half_crossing(x, y, i, level, direction):
    j = i
    while 0 <= j + direction < len(y):
        k = j + direction
        if y[k] < level:
            t = (y[j] - level) / (y[j] - y[k])
            return x[j] + t * (x[k] - x[j])
        j = k
    return x[j]


def peak_analysis(sweep: SweepResult, prominence: float = MODE_PROMINENCE, smoothing: int = MODE_SMOOTHING) -> PeakStats:
    """Peak location, full width at half maximum and number of modes.

    Half maximum is measured above the curve minimum. Modes are local maxima
    of the moving-average-smoothed curve rising above
    ``min + prominence * (max - min)``. A flat curve has 0 modes and NaN
    width.
    """
    x, y = sweep.offsets, sweep.scores
    if len(y) < 5:
        raise ValueError("peak analysis needs at least 5 samples")
    i = int(np.argmax(y))
    lo, hi = float(y.min()), float(y.max())
    if hi <= lo:
        return PeakStats(float(x[i]), float("nan"), 0)
    half = lo + 0.5 * (hi - lo)
    width = _half_crossing(x, y, i, half, +1) - _half_crossing(x, y, i, half, -1)

    r = smoothing // 2
    padded = np.pad(y, r, mode="edge")
    s = np.convolve(padded, np.ones(smoothing) / smoothing, mode="valid")
    slo, shi = s.min(), s.max()
    thresh = slo + prominence * (shi - slo)
    modes = 0
    for k in range(len(s)):
        left = s[k - 1] if k > 0 else -np.inf
        right = s[k + 1] if k + 1 < len(s) else -np.inf
        # strict on the left, non-strict on the right: a plateau counts once
        if s[k] > left and s[k] >= right and s[k] > thresh:
            modes += 1
    return PeakStats(float(x[i]), float(width), modes)
