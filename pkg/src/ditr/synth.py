"""Seeded synthetic multimodal registration cases with exact ground truth.

The base "anatomy" is a sum of anisotropic Gaussian blobs over a smooth
background, rendered on a canvas with a margin around the fixed field of view
so that the perturbed moving image has content everywhere.

Modality B is a tent remap ``g(x) = 1 - |2x - 1|`` of the base. It is
non-monotone, so correlation-style metrics see little while the joint
intensity structure (and patch structure) is preserved.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .image import Image, canny_edges, normalize_intensity, read_pgm, sample_bilinear, write_pgm
from .transform import PerturbationRanges, TransformParams, compose, invert, map_point, random_perturbation

__all__ = [
    "SynthConfig",
    "RegistrationCase",
    "tent",
    "generate_base",
    "make_modalities",
    "make_case",
    "make_cases",
    "save_case",
    "load_case",
    "load_cases",
]


def tent(x):
    return 1.0 - np.abs(2.0 * np.asarray(x) - 1.0)


@dataclass(frozen=True)
class SynthConfig:
    size: int = 128
    n_blobs: int = 14
    noise_sigma: float = 0.05
    modality_mode: str = "remap"
    perturbation: PerturbationRanges = field(default_factory=PerturbationRanges)
    n_landmarks: int = 100
    seed: int = 0
    margin: int = 48
    shift: tuple = (0.0, 0.0)
    canny_sigma: float = 1.0
    canny_low: float = 0.1
    canny_high: float = 0.3
    blob_scale: tuple = (3.0, 16.0)

    def __post_init__(self):
        object.__setattr__(self, "blob_scale", tuple(float(v) for v in self.blob_scale))
        if not 0 < self.blob_scale[0] <= self.blob_scale[1]:
            raise ValueError("blob scale range must be positive and ordered")
        if self.modality_mode not in ("remap", "edge"):
            raise ValueError(f"unknown modality mode {self.modality_mode!r}")
        if self.n_landmarks < 1:
            raise ValueError("need at least one landmark")
        if self.size < 17:
            raise ValueError("image too small for patch support")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["perturbation"] = asdict(self.perturbation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        pert = d.pop("perturbation", None)
        pr = PerturbationRanges(**{k: (tuple(v) if v is not None else None) for k, v in pert.items()}) if pert else PerturbationRanges()
        d["shift"] = tuple(d.get("shift", (0.0, 0.0)))
        d["blob_scale"] = tuple(d.get("blob_scale", (3.0, 16.0)))
        return cls(perturbation=pr, **d)


@dataclass
class RegistrationCase:
    fixed: Image
    moving: Image
    beta_true: TransformParams
    landmarks: np.ndarray
    config: dict = field(default_factory=dict)


def generate_base(cfg: SynthConfig, rng: np.random.Generator, size: int | None = None) -> Image:
    """Blob image normalized to [0, 1], ``size x size`` (default ``cfg.size``).

    ``cfg.n_blobs`` is the expected count over a ``cfg.size`` square; larger
    canvases get proportionally more blobs.
    """
    size = cfg.size if size is None else size
    # blob count is specified per fixed field of view; keep the density on larger canvases
    n_blobs = int(round(cfg.n_blobs * (size / cfg.size) ** 2))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    # low-frequency background: a few long-wavelength cosines
    for _ in range(3):
        kx, ky = rng.uniform(-1.5, 1.5, size=2) * 2 * np.pi / size
        img += 0.25 * rng.uniform(0.5, 1.0) * np.cos(kx * xx + ky * yy + rng.uniform(0, 2 * np.pi))
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, size, size=2)
        sx, sy = np.exp(rng.uniform(np.log(cfg.blob_scale[0]), np.log(cfg.blob_scale[1]), size=2))
        ang = rng.uniform(0, np.pi)
        amp = rng.uniform(0.4, 1.0) * (1 if rng.random() < 0.7 else -1)
        c, s = np.cos(ang), np.sin(ang)
        dx, dy = xx - cx, yy - cy
        a = c * dx + s * dy
        b = -s * dx + c * dy
        img += amp * np.exp(-0.5 * ((a / sx) ** 2 + (b / sy) ** 2))
    return normalize_intensity(Image(img))


def _noisy(b: np.ndarray, noise_sigma: float, rng) -> Image:
    if noise_sigma > 0:
        return normalize_intensity(Image(b + rng.normal(0.0, noise_sigma, size=b.shape)))
    return Image(b)


def make_modalities(base: Image, mode: str, rng: np.random.Generator, noise_sigma: float = 0.05, canny=(1.0, 0.1, 0.3)):
    """Aligned pair ``(A, B)``.

    ``remap``: A is the base. ``edge``: A is the Canny map of the base. In
    both modes B is the tent remap of the base plus Gaussian noise, then
    renormalized (noise-free B is already in [0, 1] and is left as is).
    """
    if mode == "remap":
        a = base
    elif mode == "edge":
        a = canny_edges(base, *canny)
    else:
        raise ValueError(f"unknown modality mode {mode!r}")
    return a, _noisy(tent(base.data), noise_sigma, rng)


def _landmarks(cfg: SynthConfig, rng) -> np.ndarray:
    lo, hi = 0.1 * cfg.size, 0.9 * cfg.size
    return rng.uniform(lo, hi, size=(cfg.n_landmarks, 2))


def make_case(cfg: SynthConfig, rng: np.random.Generator | None = None) -> RegistrationCase:
    """Draw a base, both modalities, a perturbation and landmarks.

    The fixed image is modality A over the central ``size x size`` window
    of the canvas; the moving image is modality B pulled through
    ``invert(beta_true)`` so that ``beta_true`` re-aligns it.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n, m = cfg.size, cfg.margin
    center = (n / 2.0, n / 2.0)
    for _ in range(20):
        canvas = generate_base(cfg, rng, n + 2 * m)
        if cfg.modality_mode == "edge":
            a_canvas = canny_edges(canvas, cfg.canny_sigma, cfg.canny_low, cfg.canny_high).data
        else:
            a_canvas = canvas.data
        b_canvas = Image(tent(canvas.data))
        beta = random_perturbation(cfg.perturbation, rng, center=center)
        if any(cfg.shift):
            beta = compose(TransformParams.rigid(cfg.shift[0], cfg.shift[1], 0.0, center=center), beta)
        landmarks = _landmarks(cfg, rng)
        mapped = map_point(beta, landmarks)
        inside = ((mapped >= 0) & (mapped <= n)).all(axis=1)
        if inside.mean() < 0.9:
            continue
        fixed = Image(a_canvas[m : m + n, m : m + n])
        jj, ii = np.mgrid[0:n, 0:n]
        pts = np.stack([ii + 0.5, jj + 0.5], axis=-1)
        src = map_point(invert(beta), pts)
        vals = sample_bilinear(b_canvas, src[..., 0] - 0.5 + m, src[..., 1] - 0.5 + m)
        if np.isnan(vals).any():
            continue
        moving = _noisy(vals, cfg.noise_sigma, rng)
        return RegistrationCase(fixed, moving, beta, landmarks, cfg.to_dict())
    raise RuntimeError("could not draw a case satisfying the landmark invariant in 20 attempts")


def make_cases(cfg: SynthConfig, n: int) -> list[RegistrationCase]:
    """``n`` cases from one seeded stream (case ``i`` depends only on ``cfg.seed`` and ``i``)."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(n)
    return [make_case(cfg, np.random.default_rng(s)) for s in seeds]


def save_case(case: RegistrationCase, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    seed = case.config.get("seed")
    write_pgm(case.fixed, d / "fixed.pgm", seed=seed, description="fixed (modality A)")
    write_pgm(case.moving, d / "moving.pgm", seed=seed, description="moving (modality B, perturbed)")
    (d / "beta_true.json").write_text(json.dumps(case.beta_true.to_dict(), indent=2))
    with open(d / "landmarks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in case.landmarks:
            w.writerow([repr(float(x)), repr(float(y))])
    (d / "config.json").write_text(json.dumps(case.config, indent=2))


def load_case(directory) -> RegistrationCase:
    d = Path(directory)
    fixed, _ = read_pgm(d / "fixed.pgm")
    moving, _ = read_pgm(d / "moving.pgm")
    beta = TransformParams.from_dict(json.loads((d / "beta_true.json").read_text()))
    with open(d / "landmarks.csv") as fh:
        rows = list(csv.DictReader(fh))
    landmarks = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    cfg_path = d / "config.json"
    config = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
    return RegistrationCase(fixed, moving, beta, landmarks, config)


def load_cases(root) -> list[RegistrationCase]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "fixed.pgm").exists())
    if not dirs:
        raise FileNotFoundError(f"no cases under {root}")
    return [load_case(p) for p in dirs]
