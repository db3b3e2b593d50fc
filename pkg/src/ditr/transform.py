"""Rigid and affine 2D transforms in physical coordinates.

A transform maps fixed-frame points to moving-frame points about an anchor
``c`` (normally the image centre)::

    T(p) = A (p - c) + c + t

Resampling is pull-back: the output pixel at fixed-frame location ``x`` reads
the moving image at ``T(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import Image, sample_bilinear

__all__ = [
    "TransformParams",
    "PerturbationRanges",
    "DitherConfig",
    "rotation_matrix",
    "map_point",
    "resample_moving",
    "compose",
    "invert",
    "random_perturbation",
    "dither_offset",
    "dither_offsets",
    "param_scales",
]

RIGID = "rigid"
AFFINE = "affine"


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class TransformParams:
    """Transform parameters ``beta``.

    ``rigid`` uses ``(tx, ty, theta)``; ``affine`` uses ``matrix`` (row-major
    2x2) plus ``(tx, ty)``. Translations are in physical units.
    """

    kind: str = RIGID
    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0
    matrix: tuple = (1.0, 0.0, 0.0, 1.0)
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in (RIGID, AFFINE):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        object.__setattr__(self, "tx", float(self.tx))
        object.__setattr__(self, "ty", float(self.ty))
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "matrix", tuple(float(m) for m in np.ravel(self.matrix)))
        if self.kind == AFFINE and np.linalg.det(self.linear) <= 0:
            raise ValueError("affine matrix must have positive determinant")

    @classmethod
    def identity(cls, kind: str = RIGID, center=(0.0, 0.0)) -> "TransformParams":
        return cls(kind=kind, center=center)

    @classmethod
    def rigid(cls, tx=0.0, ty=0.0, theta=0.0, center=(0.0, 0.0)) -> "TransformParams":
        return cls(RIGID, tx, ty, theta, center=center)

    @classmethod
    def affine(cls, matrix, tx=0.0, ty=0.0, center=(0.0, 0.0)) -> "TransformParams":
        return cls(AFFINE, tx, ty, matrix=tuple(np.ravel(matrix)), center=center)

    @property
    def linear(self) -> np.ndarray:
        if self.kind == RIGID:
            return rotation_matrix(self.theta)
        return np.array(self.matrix).reshape(2, 2)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def as_affine(self) -> "TransformParams":
        if self.kind == AFFINE:
            return self
        return TransformParams.affine(self.linear, self.tx, self.ty, self.center)

    def to_vector(self) -> np.ndarray:
        """Optimizer parameter vector: rigid ``(tx, ty, theta)``, affine ``(tx, ty, a11, a12, a21, a22)``."""
        if self.kind == RIGID:
            return np.array([self.tx, self.ty, self.theta])
        return np.array([self.tx, self.ty, *self.matrix])

    @classmethod
    def from_vector(cls, kind: str, vec, center=(0.0, 0.0)) -> "TransformParams":
        vec = np.asarray(vec, dtype=np.float64)
        if kind == RIGID:
            return cls.rigid(vec[0], vec[1], vec[2], center=center)
        return cls.affine(vec[2:6], vec[0], vec[1], center=center)

    def with_translation(self, tx: float, ty: float) -> "TransformParams":
        return TransformParams(self.kind, tx, ty, self.theta, self.matrix, self.center)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "tx": self.tx, "ty": self.ty, "center": list(self.center)}
        if self.kind == RIGID:
            d["theta"] = self.theta
        else:
            d["matrix"] = [list(self.matrix[:2]), list(self.matrix[2:])]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformParams":
        center = tuple(d.get("center", (0.0, 0.0)))
        if d["kind"] == RIGID:
            return cls.rigid(d["tx"], d["ty"], d.get("theta", 0.0), center=center)
        return cls.affine(np.array(d["matrix"], dtype=float), d["tx"], d["ty"], center=center)


def param_scales(kind: str, spacing: float = 1.0) -> np.ndarray:
    """Per-coordinate step units: one pixel of translation, 0.01 for angles and matrix entries."""
    if kind == RIGID:
        return np.array([spacing, spacing, 0.01])
    return np.array([spacing, spacing, 0.01, 0.01, 0.01, 0.01])


def map_point(beta: TransformParams, p) -> np.ndarray:
    """Map fixed-frame physical point(s) ``p`` (shape ``(..., 2)``) to the moving frame."""
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(beta.center)
    return (p - c) @ beta.linear.T + c + beta.translation


def resample_moving(moving: Image, beta: TransformParams, grid: Image | None = None):
    """Pull the moving image back onto ``grid`` (default: the moving image's own grid).

    Returns ``(image, mask)``; out-of-field pixels are 0 in the image and
    False in the mask.
    """
    grid = moving if grid is None else grid
    jj, ii = np.mgrid[0 : grid.height, 0 : grid.width]
    px, py = grid.pixel_to_physical(ii, jj)
    q = map_point(beta, np.stack([px, py], axis=-1))
    mx, my = moving.physical_to_pixel(q[..., 0], q[..., 1])
    vals = sample_bilinear(moving, mx, my)
    mask = ~np.isnan(vals)
    return Image(np.where(mask, vals, 0.0), grid.spacing), mask


def compose(a: TransformParams, b: TransformParams) -> TransformParams:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    ca, cb = np.asarray(a.center), np.asarray(b.center)
    la, lb = a.linear, b.linear
    t = la @ (cb + b.translation - ca) + ca + a.translation - cb
    if a.kind == RIGID and b.kind == RIGID:
        theta = math.atan2(math.sin(a.theta + b.theta), math.cos(a.theta + b.theta))
        return TransformParams.rigid(t[0], t[1], theta, center=b.center)
    return TransformParams.affine(la @ lb, t[0], t[1], center=b.center)


def invert(a: TransformParams) -> TransformParams:
    lin = a.linear
    if abs(np.linalg.det(lin)) < 1e-12:
        raise np.linalg.LinAlgError("cannot invert a singular transform")
    inv = np.linalg.inv(lin)
    t = -inv @ a.translation
    if a.kind == RIGID:
        return TransformParams.rigid(t[0], t[1], -a.theta, center=a.center)
    return TransformParams.affine(inv, t[0], t[1], center=a.center)


@dataclass(frozen=True)
class PerturbationRanges:
    """Magnitude ranges for random misregistration.

    Translation and rotation are magnitudes; each component gets an
    independent random sign. Scale and shear are drawn directly from their
    intervals. Leaving both ``scale`` and ``shear`` unset gives rigid
    perturbations.
    """

    translation: tuple = (1.0, 25.0)
    rotation: tuple = (0.01, 0.15)
    scale: tuple | None = None
    shear: tuple | None = None

    def __post_init__(self):
        for name in ("translation", "rotation", "scale", "shear"):
            r = getattr(self, name)
            if r is not None and r[0] > r[1]:
                raise ValueError(f"{name} range must satisfy lo <= hi, got {r}")
        if self.scale is not None and not self.scale[0] <= 1 <= self.scale[1]:
            raise ValueError("scale range must bracket 1")

    @property
    def kind(self) -> str:
        return AFFINE if (self.scale is not None or self.shear is not None) else RIGID

    @classmethod
    def affine_defaults(cls) -> "PerturbationRanges":
        return cls(scale=(0.95, 1.05), shear=(-0.01, 0.01))


def _signed_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    mag = rng.uniform(lo, hi)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return sign * mag


def random_perturbation(ranges: PerturbationRanges, rng: np.random.Generator, center=(0.0, 0.0)) -> TransformParams:
    tx = _signed_uniform(rng, *ranges.translation)
    ty = _signed_uniform(rng, *ranges.translation)
    theta = _signed_uniform(rng, *ranges.rotation)
    if ranges.kind == RIGID:
        return TransformParams.rigid(tx, ty, theta, center=center)
    sx = sy = 1.0
    sh = 0.0
    if ranges.scale is not None:
        sx = rng.uniform(*ranges.scale)
        sy = rng.uniform(*ranges.scale)
    if ranges.shear is not None:
        sh = rng.uniform(*ranges.shear)
    lin = rotation_matrix(theta) @ np.diag([sx, sy]) @ np.array([[1.0, sh], [0.0, 1.0]])
    return TransformParams.affine(lin, tx, ty, center=center)


@dataclass(frozen=True)
class DitherConfig:
    """Isotropic Gaussian displacement of moving-patch locations (``sigma`` in physical units)."""

    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("dither sigma must be non-negative")

    @classmethod
    def from_variance(cls, variance: float) -> "DitherConfig":
        return cls(math.sqrt(variance))


def dither_offset(cfg: DitherConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.sigma == 0:
        return np.zeros(2)
    return rng.normal(0.0, cfg.sigma, size=2)


def dither_offsets(cfg: DitherConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` independent displacements, shape ``(n, 2)``."""
    if cfg.sigma == 0:
        return np.zeros((n, 2))
    return rng.normal(0.0, cfg.sigma, size=(n, 2))
