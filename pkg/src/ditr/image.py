"""Scalar 2D images and the low-level operations registration needs.

Pixel ``(i, j)`` (column ``i``, row ``j``) sits at the physical position
``((i + 0.5) * spacing, (j + 0.5) * spacing)``, so block-averaged images keep
the same physical extent and centre as the image they were computed from.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "Image",
    "DegenerateImageError",
    "sample_bilinear",
    "normalize_intensity",
    "gaussian_kernel",
    "gaussian_smooth",
    "downsample",
    "sobel",
    "canny_edges",
    "write_pgm",
    "read_pgm",
]

PGM_MAX = 65535


class DegenerateImageError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable 2D scalar image.

    Parameters
    ----------
    data : array, shape (height, width)
        Row-major intensities; ``data[j, i]`` is column ``i`` of row ``j``.
    spacing : float
        Isotropic physical size of one pixel.
    """

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"image data must be a non-empty 2D array, got shape {arr.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def center(self) -> tuple[float, float]:
        """Physical centre of the field of view."""
        return (0.5 * self.width * self.spacing, 0.5 * self.height * self.spacing)

    def with_data(self, data) -> "Image":
        return Image(data, self.spacing)

    def pixel_to_physical(self, px, py):
        return ((np.asarray(px) + 0.5) * self.spacing, (np.asarray(py) + 0.5) * self.spacing)

    def physical_to_pixel(self, x, y):
        return (np.asarray(x) / self.spacing - 0.5, np.asarray(y) / self.spacing - 0.5)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


def _reflect(c, n):
    # mirror about the outer pixel edges (-0.5 and n - 0.5), period 2n
    c = np.mod(c + 0.5, 2 * n)
    c = np.where(c >= n, 2 * n - c, c) - 0.5
    return np.clip(c, 0, n - 1)


def sample_bilinear(img: Image, x, y, boundary: str = "nan"):
    """Bilinear interpolation at pixel coordinates ``(x, y)``.

    Works on scalars or arrays of any (matching) shape. With
    ``boundary="nan"`` points outside ``[0, width-1] x [0, height-1]`` yield
    NaN, which callers treat as out-of-field; with ``boundary="reflect"``
    they read the image mirrored about its outer edges.
    """
    if boundary not in ("nan", "reflect"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    shape = np.broadcast_shapes(x.shape, y.shape)
    x = np.broadcast_to(x, shape).ravel()
    y = np.broadcast_to(y, shape).ravel()
    h, w = img.shape
    flat = img.data.ravel()
    if boundary == "reflect":
        x = _reflect(x, w)
        y = _reflect(y, h)
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    # x0 is clamped so x0 + 1 stays on the grid; the fraction then reaches 1 at the last node
    x0 = np.clip(np.floor(x), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(y), 0, max(h - 2, 0)).astype(np.intp)
    fx = x - x0
    fy = y - y0
    dx = 1 if w > 1 else 0
    dy = w if h > 1 else 0
    idx = y0 * w + x0
    v00 = flat.take(idx)
    v01 = flat.take(idx + dx)
    v10 = flat.take(idx + dy)
    v11 = flat.take(idx + dy + dx)
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    out = top + fy * (bottom - top)
    out[~inside] = np.nan
    out = out.reshape(shape)
    return out[()] if out.ndim == 0 else out


def normalize_intensity(img: Image) -> Image:
    lo = float(img.data.min())
    hi = float(img.data.max())
    if not hi > lo:
        raise DegenerateImageError("degenerate intensity range")
    out = (img.data - lo) / (hi - lo)
    # guard against rounding pushing values a hair outside [0, 1]
    return img.with_data(np.clip(out, 0.0, 1.0))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps at offsets ``-r..r`` with ``r = ceil(3 sigma)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="edge")
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    for k, weight in enumerate(kernel):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(k, k + n)
        out += weight * padded[tuple(sl)]
    return out


def gaussian_smooth(img: Image, sigma: float) -> Image:
    """Separable Gaussian blur with replicate padding; ``sigma`` in pixels."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return img
    k = gaussian_kernel(sigma)
    out = _convolve_axis(img.data, k, axis=1)
    out = _convolve_axis(out, k, axis=0)
    return img.with_data(out)


def downsample(img: Image, factor: int, min_size: int = 1) -> Image:
    """Average-pool non-overlapping ``factor x factor`` blocks.

    Ragged edges are truncated. Raises if the result is smaller than
    ``min_size`` along either axis (pass the patch size here).
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        if min(img.shape) < min_size:
            raise DegenerateImageError("image too small after downsampling")
        return img
    h, w = img.shape
    ho, wo = h // factor, w // factor
    if ho < max(min_size, 1) or wo < max(min_size, 1):
        raise DegenerateImageError("image too small after downsampling")
    blocks = img.data[: ho * factor, : wo * factor].reshape(ho, factor, wo, factor)
    return Image(blocks.mean(axis=(1, 3)), img.spacing * factor)


def sobel(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel derivatives (gx along columns, gy along rows), replicate padding."""
    p = np.pad(arr, 1, mode="edge")
    h, w = arr.shape

    def s(dy, dx):
        return p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    gx = (s(-1, 1) + 2 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2 * s(0, -1) + s(1, -1))
    gy = (s(1, -1) + 2 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2 * s(-1, 0) + s(-1, 1))
    return gx, gy


def canny_edges(img: Image, smooth_sigma: float = 1.0, low: float = 0.1, high: float = 0.3) -> Image:
    """Binary Canny edge map.

    Thresholds are fractions of the maximum gradient magnitude. Weak pixels
    survive hysteresis only when 8-connected (through other weak pixels) to
    a strong one.
    """
    if not 0 <= low < high <= 1:
        raise ValueError("thresholds must satisfy 0 <= low < high <= 1")
    smoothed = gaussian_smooth(img, smooth_sigma).data
    gx, gy = sobel(smoothed)
    mag = np.hypot(gx, gy)
    maxmag = float(mag.max())
    if maxmag <= 0:
        return img.with_data(np.zeros(img.shape))

    # quantize direction into 4 sectors: 0, 45, 90, 135 degrees
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    steps = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}  # (drow, dcol)
    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    keep = np.zeros(mag.shape, dtype=bool)
    for sec, (dr, dc) in steps.items():
        fwd = padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        bwd = padded[1 - dr : 1 - dr + h, 1 - dc : 1 - dc + w]
        # strict on one side, non-strict on the other: a plateau of two equal
        # maxima keeps exactly one pixel
        keep |= (sector == sec) & (mag > bwd) & (mag >= fwd)

    thin = np.where(keep, mag, 0.0)
    strong = thin >= high * maxmag
    weak = (thin >= low * maxmag) & (thin > 0)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return img.with_data(np.zeros(img.shape))
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    edges = seeded[labels]
    return img.with_data(edges.astype(np.float64))


def write_pgm(img: Image, path, seed=None, description: str = "") -> None:
    """Write a 16-bit binary PGM plus a JSON sidecar (``<path>.json``).

    Intensities must lie in [0, 1]; they are stored as ``round(v * 65535)``.
    """
    data = img.data
    if data.min() < 0 or data.max() > 1:
        raise ValueError("PGM export requires intensities in [0, 1]")
    path = Path(path)
    q = np.rint(data * PGM_MAX).astype(">u2")
    header = f"P5\n{img.width} {img.height}\n{PGM_MAX}\n".encode("ascii")
    path.write_bytes(header + q.tobytes())
    sidecar = {"spacing": img.spacing, "seed": seed, "description": description}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def read_pgm(path) -> tuple[Image, dict]:
    """Read an image written by :func:`write_pgm`; returns ``(image, sidecar)``."""
    path = Path(path)
    raw = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5" or maxval != PGM_MAX:
        raise ValueError(f"unsupported PGM ({magic}, maxval {maxval})")
    q = np.frombuffer(raw, dtype=">u2", count=w * h, offset=pos).reshape(h, w)
    sidecar_path = Path(str(path) + ".json")
    meta = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    spacing = meta.get("spacing", 1.0)
    return Image(q.astype(np.float64) / PGM_MAX, spacing), meta
