"""Iterated maximum likelihood: alternate classifier training and re-registration.

Each stage (a) samples patch pairs from the training collection under the
current alignment estimates, at the stage's resolution and dither, (b) trains
a discriminator on them and (c) re-registers every pair by maximizing the
summed classifier logits, starting from the previous estimates.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluate import fre
from .image import Image, downsample, gaussian_smooth
from .metrics import DeepMetric
from .network import HE_GAIN, Architecture, ClassifierParams, init_classifier, save_classifier
from .optimize import PowellConfig, register
from .sampling import SamplingConfig, make_dataset
from .synth import RegistrationCase
from .train import TrainConfig, train
from .transform import DitherConfig, TransformParams

__all__ = [
    "IMLStageConfig",
    "IMLSettings",
    "IMLState",
    "IMLStageError",
    "initial_state",
    "iml_stage",
    "run_iml",
    "parse_schedule",
    "cascade_schedule",
    "register_with_models",
    "write_checkpoint",
]

log = logging.getLogger(__name__)


class IMLStageError(RuntimeError):
    def __init__(self, message, stage=None, pair=None):
        super().__init__(message)
        self.stage = stage
        self.pair = pair


@dataclass(frozen=True)
class IMLStageConfig:
    """One IML iteration: downsample factor ``l`` (0 = full resolution) and dither variance ``sigma2``.

    ``sigma2`` is in squared physical units. ``sampling`` and ``training``
    hold per-stage overrides of the shared configs.
    """

    l: int = 0
    sigma2: float = 0.0
    sampling: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.l < 0:
            raise ValueError("downsample factor must be >= 0")
        if self.sigma2 < 0:
            raise ValueError("dither variance must be >= 0")

    @property
    def factor(self) -> int:
        return max(int(self.l), 1)


@dataclass(frozen=True)
class IMLSettings:
    kind: str = "rigid"
    arch: Architecture = field(default_factory=Architecture)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    powell: PowellConfig = field(default_factory=PowellConfig)
    grid_stride: int | None = None
    min_patches: int | None = 64
    warm_start: bool = False
    smooth_sigma: float = 0.0
    init_gain: float = HE_GAIN


@dataclass
class IMLState:
    theta: ClassifierParams | None
    betas: list
    stage: int = 0
    history: list = field(default_factory=list)
    models: list = field(default_factory=list)


def parse_schedule(spec) -> list[IMLStageConfig]:
    """Accept ``[(l, sigma2), ...]`` or ``[{"l": .., "sigma2": ..}, ...]`` (the JSON schedule format)."""
    out = []
    for item in spec:
        if isinstance(item, IMLStageConfig):
            out.append(item)
        elif isinstance(item, dict):
            out.append(IMLStageConfig(int(item["l"]), float(item["sigma2"]), item.get("sampling", {}), item.get("training", {})))
        else:
            l, s2 = item
            out.append(IMLStageConfig(int(l), float(s2)))
    if not out:
        raise ValueError("empty IML schedule")
    return out


def initial_state(cases: Sequence[RegistrationCase], kind: str = "rigid") -> IMLState:
    return IMLState(None, [TransformParams.identity(kind, c.fixed.center) for c in cases])


def _prepare(img: Image, factor: int, smooth_sigma: float) -> Image:
    if smooth_sigma > 0:
        img = gaussian_smooth(img, smooth_sigma)
    return downsample(img, factor)


def _fre_stats(cases, betas) -> dict:
    truths = [c.beta_true for c in cases]
    if any(t is None for t in truths):
        return {}
    vals = [fre(b, c.beta_true, c.landmarks) for b, c in zip(betas, cases)]
    return {"mean_fre": float(np.mean(vals)), "median_fre": float(np.median(vals)), "fre": vals}


def iml_stage(
    state: IMLState,
    stage: IMLStageConfig,
    cases: Sequence[RegistrationCase],
    rng: np.random.Generator,
    settings: IMLSettings | None = None,
) -> IMLState:
    """Run one train-then-register iteration and return the updated state."""
    settings = settings or IMLSettings()
    if not cases:
        raise ValueError("no training pairs")
    if len(state.betas) != len(cases):
        raise ValueError("one alignment estimate per training pair is required")
    idx = state.stage + 1
    factor = stage.factor
    fixed_l = [_prepare(c.fixed, factor, settings.smooth_sigma) for c in cases]
    moving_l = [_prepare(c.moving, factor, settings.smooth_sigma) for c in cases]

    seeds = rng.integers(0, 2**31 - 1, size=3)
    scfg = replace(settings.sampling, dither=DitherConfig(math.sqrt(stage.sigma2)), seed=int(seeds[0]), **stage.sampling)
    tcfg = replace(settings.training, seed=int(seeds[1]), **stage.training)
    try:
        data = make_dataset(list(zip(fixed_l, moving_l, state.betas)), scfg)
    except ValueError as exc:
        raise IMLStageError(f"stage {idx}: sampling failed: {exc}", stage=idx) from exc

    if settings.warm_start and state.theta is not None:
        theta0 = state.theta
    else:
        theta0 = init_classifier(settings.arch, int(seeds[2]), settings.init_gain)
    theta, losses = train(theta0, data, tcfg)

    objective = DeepMetric(theta, settings.grid_stride, settings.min_patches)
    before = _fre_stats(cases, state.betas)
    betas = []
    for i, (f, m, b) in enumerate(zip(fixed_l, moving_l, state.betas)):
        try:
            betas.append(register(objective, f, m, b, cfg=settings.powell).beta)
        except ValueError as exc:
            raise IMLStageError(f"stage {idx}, pair {i}: registration failed: {exc}", stage=idx, pair=i) from exc
    after = _fre_stats(cases, betas)
    entry = {
        "stage": idx,
        "l": stage.l,
        "sigma2": stage.sigma2,
        "loss": list(losses),
        "checksum": theta.checksum(),
    }
    if after:
        entry.update({"fre_before": before["median_fre"], "mean_fre": after["mean_fre"], "median_fre": after["median_fre"], "fre": after["fre"]})
        log.info("IML stage %d (l=%d, sigma2=%g): median FRE %.3f -> %.3f", idx, stage.l, stage.sigma2, before["median_fre"], after["median_fre"])
    return IMLState(theta, betas, idx, state.history + [entry], state.models + [(factor, theta)])


def run_iml(
    schedule,
    cases: Sequence[RegistrationCase],
    rng: np.random.Generator | int = 0,
    settings: IMLSettings | None = None,
    checkpoint_dir=None,
) -> IMLState:
    """Fold :func:`iml_stage` over ``schedule`` starting from identity alignments."""
    settings = settings or IMLSettings()
    schedule = parse_schedule(schedule)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    state = initial_state(cases, settings.kind)
    for stage in schedule:
        state = iml_stage(state, stage, cases, rng, settings)
        if checkpoint_dir is not None:
            write_checkpoint(state, checkpoint_dir)
    return state


def cascade_schedule(models, stride=None, min_patches=64) -> list:
    """Registration schedule using each stage's classifier at its own resolution, coarse to fine.

    Stages sharing a resolution are all kept, in training order.
    """
    ordered = sorted(models, key=lambda m: -m[0])  # stable: ties keep training order
    return [(factor, DeepMetric(theta, stride, min_patches)) for factor, theta in ordered]


def register_with_models(models, fixed: Image, moving: Image, beta0: TransformParams, cfg: PowellConfig | None = None, stride=None, min_patches=64):
    """Register an unseen pair with the classifiers of a finished IML run, coarse to fine."""
    return register(None, fixed, moving, beta0, schedule=cascade_schedule(models, stride, min_patches), cfg=cfg)


def write_checkpoint(state: IMLState, directory) -> None:
    """Classifier file, per-pair alignment JSON and history CSV for the latest stage."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n = state.stage
    save_classifier(state.theta, d / f"stage{n}_classifier.bin")
    (d / f"stage{n}_betas.json").write_text(json.dumps([b.to_dict() for b in state.betas], indent=2))
    with open(d / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "l", "sigma2", "final_loss", "median_fre", "mean_fre", "checksum"])
        for h in state.history:
            w.writerow([h["stage"], h["l"], h["sigma2"], repr(h["loss"][-1]), repr(h.get("median_fre", "")), repr(h.get("mean_fre", "")), h["checksum"]])
