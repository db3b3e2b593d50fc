"""Labeled patch-pair datasets for training the discriminator.

Positive pairs (``z = 1``) take the fixed patch at ``x`` and the moving patch
on the grid ``T(x + k) + d`` for patch offsets ``k``, current alignment ``T``
and dither ``d``. Negative pairs (``z = 0``) draw the two centres
independently and uniformly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import Image, sample_bilinear
from .transform import DitherConfig, TransformParams, dither_offsets, map_point

__all__ = [
    "SamplingConfig",
    "PatchDataset",
    "PatchSupportError",
    "patch_offsets",
    "extract_patch",
    "fixed_patches",
    "warped_patches",
    "dihedral",
    "make_dataset",
    "save_dataset",
    "load_dataset",
]

DATASET_MAGIC = b"DITRPAT\x00"


class PatchSupportError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    patch_size: int = 17
    n_total: int = 50_000
    pos_fraction: float = 0.5
    dither: DitherConfig = field(default_factory=DitherConfig)
    augment: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.patch_size % 2 != 1 or self.patch_size < 1:
            raise ValueError("patch size must be odd")
        if not 0 < self.pos_fraction < 1:
            raise ValueError("pos_fraction must lie in (0, 1)")
        if self.n_total < 2:
            raise ValueError("n_total must be at least 2")
        if self.augment not in ("none", "rot90_flips"):
            raise ValueError(f"unknown augmentation {self.augment!r}")

    @property
    def n_pos(self) -> int:
        return int(round(self.n_total * self.pos_fraction))


@dataclass
class PatchDataset:
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray

    def __len__(self):
        return len(self.z)

    @property
    def patch_size(self) -> int:
        return self.u.shape[1]


def patch_offsets(p: int) -> np.ndarray:
    """Offsets of a centred ``p x p`` patch as ``(p*p, 2)`` ``(dx, dy)`` pairs, row-major."""
    h = (p - 1) // 2
    dy, dx = np.mgrid[-h : h + 1, -h : h + 1]
    return np.stack([dx.ravel(), dy.ravel()], axis=1).astype(np.float64)


def extract_patch(img: Image, center, p: int) -> np.ndarray:
    """Axis-aligned ``p x p`` patch sampled bilinearly around a pixel-coordinate centre."""
    off = patch_offsets(p)
    vals = sample_bilinear(img, center[0] + off[:, 0], center[1] + off[:, 1])
    if np.isnan(vals).any():
        raise PatchSupportError(f"patch at {tuple(center)} leaves the image")
    return vals.reshape(p, p)


def valid_center_range(img: Image, p: int) -> tuple[int, int, int, int]:
    """Inclusive integer centre bounds ``(xmin, xmax, ymin, ymax)`` for in-bounds patches."""
    h = (p - 1) // 2
    xmax, ymax = img.width - 1 - h, img.height - 1 - h
    if xmax < h or ymax < h:
        raise PatchSupportError(f"{img.width}x{img.height} image is too small for {p}x{p} patches")
    return h, xmax, h, ymax


def fixed_patches(img: Image, centers: np.ndarray, p: int) -> np.ndarray:
    """Exact sub-array copies at integer pixel centres, shape ``(M, p, p)``."""
    h = (p - 1) // 2
    centers = np.asarray(centers, dtype=np.intp)
    dy, dx = np.mgrid[-h : h + 1, -h : h + 1]
    rows = centers[:, 1, None, None] + dy
    cols = centers[:, 0, None, None] + dx
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= img.height or cols.max() >= img.width:
        raise PatchSupportError("fixed patch leaves the image")
    return img.data[rows, cols]


def warped_patches(moving: Image, grid: Image, centers: np.ndarray, beta: TransformParams, p: int, displacements=None, boundary: str = "nan"):
    """Moving-image patches on the transformed grid of fixed-frame patches.

    ``centers`` are pixel coordinates on ``grid`` (the fixed image). Sample
    ``k`` of patch ``m`` is read at ``T(x_m + k) + d_m`` in physical units.
    Returns ``(patches, valid)``. With ``boundary="nan"`` invalid patches
    touch out-of-field samples (their values are NaN). With
    ``boundary="reflect"`` out-of-field samples read the mirrored image and
    only patches whose centre leaves the field are invalid.
    """
    centers = np.asarray(centers, dtype=np.float64)
    cx, cy = grid.pixel_to_physical(centers[:, 0], centers[:, 1])
    mapped = map_point(beta, np.stack([cx, cy], axis=1))
    if displacements is not None:
        mapped = mapped + displacements
    step = patch_offsets(p) * grid.spacing @ beta.linear.T
    pts = mapped[:, None, :] + step[None, :, :]
    mx, my = moving.physical_to_pixel(pts[..., 0], pts[..., 1])
    vals = sample_bilinear(moving, mx, my, boundary)
    if boundary == "nan":
        valid = ~np.isnan(vals).any(axis=1)
    else:
        cx, cy = moving.physical_to_pixel(mapped[:, 0], mapped[:, 1])
        valid = (cx >= 0) & (cx <= moving.width - 1) & (cy >= 0) & (cy <= moving.height - 1)
    return vals.reshape(-1, p, p), valid


def dihedral(patches: np.ndarray, k: int) -> np.ndarray:
    """Apply dihedral symmetry ``k`` in 0..7 (rotation by ``k % 4`` quarter turns, flipped if ``k >= 4``)."""
    out = np.rot90(patches, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return out


def _positives(pairs, n, cfg, rng):
    p = cfg.patch_size
    u_out, v_out = [], []
    need = n
    for _ in range(1000):
        if need <= 0:
            break
        m = need + need // 4 + 8
        which = rng.integers(0, len(pairs), size=m)
        fx = rng.random(m)
        fy = rng.random(m)
        disp = dither_offsets(cfg.dither, rng, m)
        keep_u = np.empty((m, p, p))
        keep_v = np.empty((m, p, p))
        ok = np.zeros(m, dtype=bool)
        for k, (fixed, moving, beta) in enumerate(pairs):
            sel = np.flatnonzero(which == k)
            if sel.size == 0:
                continue
            x0, x1, y0, y1 = valid_center_range(fixed, p)
            cx = x0 + np.floor(fx[sel] * (x1 - x0 + 1))
            cy = y0 + np.floor(fy[sel] * (y1 - y0 + 1))
            centers = np.stack([cx, cy], axis=1)
            keep_u[sel] = fixed_patches(fixed, centers, p)
            keep_v[sel], ok[sel] = warped_patches(moving, fixed, centers, beta, p, disp[sel])
        idx = np.flatnonzero(ok)[:need]
        u_out.append(keep_u[idx])
        v_out.append(keep_v[idx])
        need -= idx.size
    if need > 0:
        raise PatchSupportError("could not place positive patches inside the moving images")
    return np.concatenate(u_out), np.concatenate(v_out)


def _negatives(pairs, n, cfg, rng):
    p = cfg.patch_size
    which = rng.integers(0, len(pairs), size=n)
    fu = rng.random((n, 2))
    fv = rng.random((n, 2))
    u = np.empty((n, p, p))
    v = np.empty((n, p, p))
    for k, (fixed, moving, _) in enumerate(pairs):
        sel = np.flatnonzero(which == k)
        if sel.size == 0:
            continue
        x0, x1, y0, y1 = valid_center_range(fixed, p)
        cu = np.stack([x0 + np.floor(fu[sel, 0] * (x1 - x0 + 1)), y0 + np.floor(fu[sel, 1] * (y1 - y0 + 1))], axis=1)
        u[sel] = fixed_patches(fixed, cu, p)
        # moving centres are continuous so negatives carry the same interpolation blur as positives
        mx0, mx1, my0, my1 = valid_center_range(moving, p)
        cvx = mx0 + fv[sel, 0] * (mx1 - mx0)
        cvy = my0 + fv[sel, 1] * (my1 - my0)
        off = patch_offsets(p)
        vals = sample_bilinear(moving, cvx[:, None] + off[:, 0], cvy[:, None] + off[:, 1])
        v[sel] = vals.reshape(-1, p, p)
    return u, v


def make_dataset(pairs, cfg: SamplingConfig, rng: np.random.Generator | None = None) -> PatchDataset:
    """Build a labeled dataset from ``(fixed, moving, beta_current)`` triples.

    Exactly ``round(n_total * pos_fraction)`` positives come first, followed
    by the negatives; training shuffles.
    """
    if not pairs:
        raise ValueError("no image pairs given")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n_pos = cfg.n_pos
    n_neg = cfg.n_total - n_pos
    up, vp = _positives(pairs, n_pos, cfg, rng)
    un, vn = _negatives(pairs, n_neg, cfg, rng)
    u = np.concatenate([up, un])
    v = np.concatenate([vp, vn])
    z = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    if cfg.augment == "rot90_flips":
        ks = rng.integers(0, 8, size=len(z))
        for k in range(1, 8):
            sel = ks == k
            u[sel] = dihedral(u[sel], k)
            v[sel] = dihedral(v[sel], k)
    return PatchDataset(u.astype(np.float32), v.astype(np.float32), z.astype(np.float32))


def save_dataset(ds: PatchDataset, path) -> None:
    """Record file: magic, ``(n, p)`` header, then per record one label byte and ``2 p^2`` float32 values."""
    n, p = len(ds), ds.patch_size
    rec = np.zeros(n, dtype=[("z", "u1"), ("uv", "<f4", (2 * p * p,))])
    rec["z"] = ds.z.astype(np.uint8)
    rec["uv"] = np.concatenate([ds.u.reshape(n, -1), ds.v.reshape(n, -1)], axis=1)
    Path(path).write_bytes(DATASET_MAGIC + struct.pack("<II", n, p) + rec.tobytes())


def load_dataset(path) -> PatchDataset:
    raw = Path(path).read_bytes()
    if raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a patch dataset")
    n, p = struct.unpack_from("<II", raw, len(DATASET_MAGIC))
    dt = np.dtype([("z", "u1"), ("uv", "<f4", (2 * p * p,))])
    rec = np.frombuffer(raw, dtype=dt, count=n, offset=len(DATASET_MAGIC) + 8)
    uv = rec["uv"].astype(np.float32)
    return PatchDataset(uv[:, : p * p].reshape(n, p, p), uv[:, p * p :].reshape(n, p, p), rec["z"].astype(np.float32))
