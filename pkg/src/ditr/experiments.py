"""Desk-scale experiment drivers shared by the CLI and the acceptance suite.

* :func:`experiment1` - IML on roughly registered synthetic pairs, then
  held-out registration with the final classifier against MI baselines
  (rigid or affine perturbations, remap or edge modality).
* :func:`experiment2` - response functions of classifiers trained on pairs
  with a systematic translation error, with and without augmentation,
  dithering and smoothing.

Every output file is a pure function of the configuration and seed.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .evaluate import FREReport, SweepResult, fre, peak_analysis, response_sweep
from .image import gaussian_smooth
from .iml import IMLSettings, parse_schedule, run_iml
from .metrics import DeepMetric, MutualInformation
from .network import HE_GAIN, Architecture, init_classifier, save_classifier
from .optimize import PowellConfig, register
from .sampling import SamplingConfig, make_dataset
from .synth import SynthConfig, make_cases
from .train import TrainConfig, train
from .transform import DitherConfig, PerturbationRanges, TransformParams

__all__ = [
    "ExperimentConfig",
    "RIGID_SCHEDULE",
    "EDGE_SCHEDULE",
    "EDGE_TRAINING",
    "EXP2_ARCH",
    "EXP2_SYNTH",
    "EXP2_TRAINING",
    "split_cases",
    "iml_settings",
    "experiment1",
    "experiment2",
    "EXP2_VARIANTS",
    "write_manifest",
    "write_fre_csv",
]

log = logging.getLogger(__name__)

RIGID_SCHEDULE = ((4, 100.0), (2, 15.0), (0, 0.0))
EDGE_SCHEDULE = ((2, 20.0), (2, 10.0), (0, 0.0))
# edge-to-intensity pairs need more patches and epochs before the desk net learns them
EDGE_TRAINING = {"n_patches": 50_000, "epochs": 40}

# dither and smoothing widths of the Experiment-2 variants, in pixels
EXP2_DITHER_SIGMA = 5.0
EXP2_SMOOTH_SIGMA = 2.0
EXP2_SHIFT = (10.0, 0.0)
EXP2_VARIANTS = ("plain", "augmented", "augmented_dithered", "smoothed")
# finer structure than the default blobs, so that responses at offsets ten
# pixels apart stay separable
EXP2_SYNTH = {"blob_scale": (1.5, 6.0), "n_blobs": 60}
# a third convolution widens the receptive field to 15 px, enough to relate
# patches displaced by the systematic shift
EXP2_ARCH = Architecture(convs=((8, 3, 2), (16, 3, 2), (32, 3, 1)))
EXP2_TRAINING = {"n_patches": 50_000, "epochs": 40, "arch": EXP2_ARCH}


@dataclass(frozen=True)
class ExperimentConfig:
    """Knobs shared by the experiment drivers.

    ``n_patches`` and ``epochs`` size every classifier training; the
    optimizer settings are the ones the desk-scale network trains with.
    """

    seed: int = 0
    n_train: int = 20
    n_test: int = 10
    n_patches: int = 20_000
    epochs: int = 15
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    init_gain: float = HE_GAIN
    arch: Architecture = field(default_factory=Architecture)
    min_patches: int = 64
    sweep_range: float = 20.0
    sweep_step: float = 1.0

    @classmethod
    def for_mode(cls, mode: str = "remap", **overrides) -> "ExperimentConfig":
        """Defaults for a modality mode or ``"experiment2"``.

        Edge mode and the Experiment-2 study train on more patches for
        longer; Experiment 2 also uses :data:`EXP2_ARCH`.
        """
        base = {"edge": EDGE_TRAINING, "experiment2": EXP2_TRAINING}.get(mode, {}).copy()
        base.update(overrides)
        return cls(**base)

    def training(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            optimizer=self.optimizer,
            seed=seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d


def split_cases(synth: SynthConfig, n_train: int, n_test: int):
    """Training and held-out cases from one seeded stream (held-out cases come after the training ones)."""
    cases = make_cases(synth, n_train + n_test)
    return cases[:n_train], cases[n_train:]


def iml_settings(cfg: ExperimentConfig, kind: str = "rigid") -> IMLSettings:
    return IMLSettings(
        kind=kind,
        arch=cfg.arch,
        sampling=SamplingConfig(patch_size=cfg.arch.patch_size, n_total=cfg.n_patches),
        training=cfg.training(),
        min_patches=cfg.min_patches,
        init_gain=cfg.init_gain,
    )


def _versions() -> dict:
    import scipy

    return {"ditr": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def write_manifest(out, command: str, seed: int, config: dict) -> Path:
    """Record command, seed, configuration and package versions (no timestamps, so reruns are byte-identical)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps({"command": command, "seed": seed, "config": config, "versions": _versions()}, indent=2, sort_keys=True))
    return path


def write_fre_csv(path, reports: dict) -> None:
    """Long-format FRE table: ``case, method, fre``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "method", "fre"])
        for method, rep in reports.items():
            for i, v in enumerate(rep.per_case):
                w.writerow([i, method, repr(float(v))])


def experiment1(
    kind: str = "rigid",
    mode: str = "remap",
    schedule=RIGID_SCHEDULE,
    cfg: ExperimentConfig | None = None,
    out=None,
    baselines=("mi",),
    train_baselines=(),
) -> dict:
    """Run IML on ``cfg.n_train`` cases and register ``cfg.n_test`` held-out cases from identity.

    Held-out registration uses the final classifier alone at full
    resolution. ``baselines`` may contain ``"mi"`` (single level) and
    ``"msmi"`` (multiscale MI over factors 4, 2, 1).

    ``train_baselines`` registers the IML training collection with the
    same baselines, for comparison with the alignments IML itself found.

    Returns a dict with the IML state, an :class:`FREReport` per method
    (``initial``, ``ditr`` and the baselines) on the held-out cases, the
    same on the training collection (``initial``, ``iml`` and
    ``train_baselines``) and the training-set median FRE per stage.
    """
    cfg = cfg or ExperimentConfig()
    ranges = PerturbationRanges.affine_defaults() if kind == "affine" else PerturbationRanges()
    synth = SynthConfig(seed=cfg.seed, modality_mode=mode, perturbation=ranges)
    train_cases, test_cases = split_cases(synth, cfg.n_train, cfg.n_test)
    settings = iml_settings(cfg, kind)
    ckpt = None if out is None else Path(out) / "iml"
    state = run_iml(parse_schedule(schedule), train_cases, np.random.default_rng(cfg.seed), settings, checkpoint_dir=ckpt)

    metric = DeepMetric(state.theta, None, cfg.min_patches)
    reports = _register_cases(test_cases, kind, {"ditr": metric}, baselines)
    train_reports = _register_cases(train_cases, kind, {}, train_baselines)
    train_reports["iml"] = FREReport("iml", [fre(b, c.beta_true, c.landmarks) for b, c in zip(state.betas, train_cases)])

    stage_medians = [h["median_fre"] for h in state.history]
    for name, rep in reports.items():
        log.info("held-out %s: median FRE %.3f", name, rep.median)
    for name, rep in train_reports.items():
        log.info("training %s: median FRE %.3f", name, rep.median)
    if out is not None:
        out = Path(out)
        write_fre_csv(out / "fre.csv", reports)
        write_fre_csv(out / "fre_training.csv", train_reports)
        save_classifier(state.theta, out / "final_classifier.bin")
        config = {"kind": kind, "mode": mode, "schedule": [list(s) for s in schedule], "experiment": cfg.to_dict(), "synth": synth.to_dict()}
        write_manifest(out, "experiment1", cfg.seed, config)
    return {"state": state, "reports": reports, "train_reports": train_reports, "stage_medians": stage_medians}


def _register_cases(cases, kind, metrics: dict, baselines) -> dict:
    """FRE of each metric (single level, from identity) and of the MI baselines over ``cases``."""
    powell = PowellConfig()
    methods = dict(metrics)
    if "mi" in baselines:
        methods["mi"] = MutualInformation()
    reports = {name: FREReport(name) for name in ("initial", *methods, *(["msmi"] if "msmi" in baselines else []))}
    for case in cases:
        beta0 = TransformParams.identity(kind, case.fixed.center)
        reports["initial"].per_case.append(fre(beta0, case.beta_true, case.landmarks))
        for name, m in methods.items():
            beta = register(m, case.fixed, case.moving, beta0, cfg=powell).beta
            reports[name].per_case.append(fre(beta, case.beta_true, case.landmarks))
        if "msmi" in baselines:
            sched = [(4, None), (2, None), (1, None)]
            beta = register(MutualInformation(), case.fixed, case.moving, beta0, schedule=sched, cfg=powell).beta
            reports["msmi"].per_case.append(fre(beta, case.beta_true, case.landmarks))
    return reports


def _exp2_variant(name: str):
    """(augment, dither sigma, smoothing sigma) for an Experiment-2 variant."""
    table = {
        "plain": ("none", 0.0, 0.0),
        "augmented": ("rot90_flips", 0.0, 0.0),
        "augmented_dithered": ("rot90_flips", EXP2_DITHER_SIGMA, 0.0),
        "smoothed": ("none", 0.0, EXP2_SMOOTH_SIGMA),
    }
    if name not in table:
        raise ValueError(f"unknown variant {name!r}")
    return table[name]


def experiment2(cfg: ExperimentConfig | None = None, out=None, variants=EXP2_VARIANTS, synth_overrides: dict | None = None) -> dict:
    """Train one full-resolution classifier per variant on systematically shifted pairs and sweep tx.

    Training alignments are the identity while the true alignment carries
    a fixed ``(10, 0)`` px translation, so every positive pair is off by the
    same amount. Sweeps run along ``tx`` around the true alignment of the
    held-out cases and are summed over them.

    Returns ``{variant: (SweepResult, PeakStats, classifier)}``.
    """
    cfg = cfg or ExperimentConfig.for_mode("experiment2")
    none = PerturbationRanges(translation=(0.0, 0.0), rotation=(0.0, 0.0))
    overrides = EXP2_SYNTH if synth_overrides is None else synth_overrides
    synth = SynthConfig(seed=cfg.seed, perturbation=none, shift=EXP2_SHIFT, **overrides)
    train_cases, test_cases = split_cases(synth, cfg.n_train, cfg.n_test)
    results = {}
    for k, name in enumerate(variants):
        augment, dither, smooth = _exp2_variant(name)

        def prep(img, smooth=smooth):
            return gaussian_smooth(img, smooth) if smooth > 0 else img

        pairs = [(prep(c.fixed), prep(c.moving), TransformParams.identity("rigid", c.fixed.center)) for c in train_cases]
        scfg = SamplingConfig(
            patch_size=cfg.arch.patch_size,
            n_total=cfg.n_patches,
            dither=DitherConfig(dither),
            augment=augment,
            seed=cfg.seed * 1000 + k,
        )
        data = make_dataset(pairs, scfg)
        theta, _ = train(init_classifier(cfg.arch, cfg.seed, cfg.init_gain), data, cfg.training(cfg.seed))
        metric = DeepMetric(theta, None, cfg.min_patches)
        total = None
        for case in test_cases:
            sweep = response_sweep(metric, prep(case.fixed), prep(case.moving), case.beta_true, "tx", -cfg.sweep_range, cfg.sweep_range, cfg.sweep_step)
            total = sweep.scores if total is None else total + sweep.scores
        meta = {"variant": name, "augment": augment, "dither_sigma": dither, "smooth_sigma": smooth, "n_cases": len(test_cases)}
        result = SweepResult("tx", sweep.offsets, total, meta)
        stats = peak_analysis(result)
        log.info("%s: argmax %.1f, FWHM %.2f, modes %d", name, stats.argmax, stats.fwhm, stats.modes)
        results[name] = (result, stats, theta)
        if out is not None:
            Path(out).mkdir(parents=True, exist_ok=True)
            result.to_csv(Path(out) / f"sweep_{name}.csv")
    if out is not None:
        write_manifest(out, "experiment2", cfg.seed, {"variants": list(variants), "shift": list(EXP2_SHIFT), "experiment": cfg.to_dict(), "synth": synth.to_dict()})
    return results
