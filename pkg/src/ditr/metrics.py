"""Registration objectives bound to their context (bins, model, grid).

Every objective is a callable ``objective(fixed, moving, beta) -> float``
that registration *maximizes*.
"""

from __future__ import annotations

import numpy as np

from .histogram import (
    DEFAULT_BINS,
    CategoricalJointModel,
    NoOverlapError,
    categorical_loglik,
    joint_entropy,
    joint_histogram,
    mutual_information,
)
from .image import Image
from .network import ClassifierParams, forward
from .sampling import fixed_patches, valid_center_range, warped_patches
from .transform import TransformParams

__all__ = [
    "score_grid",
    "dense_stride",
    "dmr_score",
    "MutualInformation",
    "NegJointEntropy",
    "CategoricalLikelihood",
    "DeepMetric",
    "make_objective",
]


def score_grid(fixed: Image, patch_size: int, stride: int | None = None) -> np.ndarray:
    """Integer patch centres whose fixed patches lie fully inside ``fixed``.

    The default stride is ``patch_size // 2``.
    """
    stride = max(patch_size // 2, 1) if stride is None else int(stride)
    x0, x1, y0, y1 = valid_center_range(fixed, patch_size)
    ys, xs = np.mgrid[y0 : y1 + 1 : stride, x0 : x1 + 1 : stride]
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def dense_stride(fixed: Image, patch_size: int, min_patches: int) -> int:
    """Largest stride up to ``patch_size // 2`` whose grid has at least ``min_patches`` centres (or stride 1)."""
    for stride in range(max(patch_size // 2, 1), 1, -1):
        if len(score_grid(fixed, patch_size, stride)) >= min_patches:
            return stride
    return 1


def dmr_score(theta: ClassifierParams, fixed: Image, moving: Image, beta: TransformParams, grid=None, u=None):
    """Sum of pre-sigmoid responses over corresponding patches.

    Patches whose centre maps outside the moving image are skipped; the
    out-of-field part of the others is read from the mirrored moving image,
    so leaving the field is not rewarded as an absence of evidence. Returns
    ``(score, count)`` where ``count`` is the number of contributing patches.
    ``u`` may pass precomputed fixed patches for ``grid``.
    """
    p = theta.arch.patch_size
    grid = score_grid(fixed, p) if grid is None else np.asarray(grid)
    if u is None:
        u = fixed_patches(fixed, grid, p)
    v, valid = warped_patches(moving, fixed, grid, beta, p, boundary="reflect")
    count = int(valid.sum())
    if count == 0:
        raise NoOverlapError(beta=beta)
    f = forward(theta, u[valid], v[valid], dtype=np.float64)
    return float(f.sum()), count


class MutualInformation:
    name = "mi"

    def __init__(self, bins: int = DEFAULT_BINS):
        self.bins = bins

    def __call__(self, fixed, moving, beta):
        return mutual_information(joint_histogram(fixed, moving, beta, self.bins))


class NegJointEntropy:
    name = "jointentropy"

    def __init__(self, bins: int = DEFAULT_BINS):
        self.bins = bins

    def __call__(self, fixed, moving, beta):
        return -joint_entropy(joint_histogram(fixed, moving, beta, self.bins))


class CategoricalLikelihood:
    """Fixed-parameter categorical log-likelihood (model estimated beforehand)."""

    name = "catml"

    def __init__(self, model: CategoricalJointModel):
        self.model = model

    def __call__(self, fixed, moving, beta):
        return categorical_loglik(fixed, moving, beta, self.model)


class DeepMetric:
    """Classifier-based objective; caches the fixed patches of the last fixed image seen.

    With ``min_patches`` set (and no explicit ``stride``), small images get a
    denser grid so that at least that many patches are scored.
    """

    name = "ditr"

    def __init__(self, theta: ClassifierParams, stride: int | None = None, min_patches: int | None = None):
        self.theta = theta
        self.stride = stride
        self.min_patches = min_patches
        self._cache = (None, None, None)

    def _fixed(self, fixed: Image):
        if self._cache[0] is not fixed:
            p = self.theta.arch.patch_size
            stride = self.stride
            if stride is None and self.min_patches:
                stride = dense_stride(fixed, p, self.min_patches)
            grid = score_grid(fixed, p, stride)
            self._cache = (fixed, grid, fixed_patches(fixed, grid, p))
        return self._cache[1], self._cache[2]

    def __call__(self, fixed, moving, beta):
        grid, u = self._fixed(fixed)
        return dmr_score(self.theta, fixed, moving, beta, grid=grid, u=u)[0]


def make_objective(name: str, bins: int = DEFAULT_BINS, model=None, theta=None, stride=None, min_patches=None):
    if name == "mi":
        return MutualInformation(bins)
    if name == "jointentropy":
        return NegJointEntropy(bins)
    if name == "catml":
        if model is None:
            raise ValueError("catml needs a fitted categorical model")
        return CategoricalLikelihood(model)
    if name == "ditr":
        if theta is None:
            raise ValueError("ditr needs a trained classifier")
        return DeepMetric(theta, stride, min_patches)
    raise ValueError(f"unknown metric {name!r}")
