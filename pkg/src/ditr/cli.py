"""Command-line drivers.

    ditr gen          write synthetic cases
    ditr train        patch dataset (or cases) -> classifier file
    ditr register     one case + metric -> estimated transform JSON and FRE
    ditr iml          iterated maximum likelihood over a case set -> checkpoints
    ditr sweep        response function of a metric around the true alignment -> CSV
    ditr compare      several metrics over a case set -> per-method FRE CSVs
    ditr experiment1  IML then held-out registration -> FRE CSVs
    ditr experiment2  shifted-data bias study -> four labelled sweep CSVs

Every command takes ``--seed`` for all of its randomness and writes a
``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .evaluate import FREReport, fre, fre_per_landmark, peak_analysis, response_sweep
from .experiments import EDGE_SCHEDULE, EXP2_VARIANTS, RIGID_SCHEDULE, ExperimentConfig, experiment1, experiment2, iml_settings, write_fre_csv, write_manifest
from .histogram import DEFAULT_BINS, fit_categorical, joint_histogram
from .iml import parse_schedule, run_iml
from .metrics import make_objective
from .network import HE_GAIN, Architecture, init_classifier, load_classifier, save_classifier
from .optimize import PowellConfig, register, write_trace_csv
from .sampling import SamplingConfig, load_dataset, make_dataset, save_dataset
from .synth import SynthConfig, load_case, load_cases, make_cases, save_case
from .train import TrainConfig, train
from .transform import DitherConfig, PerturbationRanges, TransformParams

log = logging.getLogger("ditr")

METRICS = ("mi", "jointentropy", "catml", "ditr")


class CLIError(Exception):
    pass


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _synth_config(args) -> SynthConfig:
    ranges = PerturbationRanges.affine_defaults() if args.kind == "affine" else PerturbationRanges()
    if args.no_perturbation:
        ranges = PerturbationRanges(translation=(0.0, 0.0), rotation=(0.0, 0.0))
    return SynthConfig(
        size=args.size,
        n_blobs=args.blobs,
        noise_sigma=args.noise,
        modality_mode=args.mode,
        perturbation=ranges,
        seed=args.seed,
        shift=tuple(args.shift),
        canny_sigma=args.canny_sigma,
        canny_low=args.canny_low,
        canny_high=args.canny_high,
    )


def _training_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        seed=args.seed,
        optimizer=args.optimizer,
    )


def _load_model(path):
    if path is None:
        raise CLIError("--model is required for the ditr metric")
    if not Path(path).exists():
        raise CLIError(f"model file not found: {path}")
    return load_classifier(path)


def _cases(path):
    if path is None:
        raise CLIError("--cases is required")
    if not Path(path).is_dir():
        raise CLIError(f"case directory not found: {path}")
    return load_cases(path)


def _identity(case, kind):
    return TransformParams.identity(kind, case.fixed.center)


def _objective(name, args, cases=None, kind="rigid"):
    if name == "ditr":
        return make_objective("ditr", theta=_load_model(args.model), min_patches=args.min_patches)
    if name == "catml":
        if not cases:
            raise CLIError("catml needs cases to fit its joint intensity model")
        # fitted on the pooled joint histogram at the starting alignment, like the first IML stage
        hist = None
        for c in cases:
            h = joint_histogram(c.fixed, c.moving, _identity(c, kind), args.bins)
            hist = h if hist is None else hist + h
        return make_objective("catml", model=fit_categorical(hist))
    return make_objective(name, bins=args.bins)


def cmd_gen(args):
    cfg = _synth_config(args)
    out = _out_dir(args.out)
    for i, case in enumerate(make_cases(cfg, args.n)):
        save_case(case, out / f"case_{i:03d}")
    write_manifest(out, "gen", args.seed, cfg.to_dict())
    print(f"wrote {args.n} cases to {out}")


def cmd_train(args):
    arch = Architecture(patch_size=args.patch_size)
    if args.dataset:
        if not Path(args.dataset).exists():
            raise CLIError(f"dataset not found: {args.dataset}")
        data = load_dataset(args.dataset)
        arch = Architecture(patch_size=data.patch_size)
        source = {"dataset": str(args.dataset)}
    else:
        cases = _cases(args.cases)
        pairs = [(c.fixed, c.moving, c.beta_true if args.aligned else _identity(c, args.kind)) for c in cases]
        scfg = SamplingConfig(
            patch_size=args.patch_size,
            n_total=args.n_patches,
            dither=DitherConfig.from_variance(args.sigma2),
            augment=args.augment,
            seed=args.seed,
        )
        data = make_dataset(pairs, scfg)
        if args.save_dataset:
            save_dataset(data, args.save_dataset)
        source = {"cases": str(args.cases), "aligned": args.aligned, "sigma2": args.sigma2, "augment": args.augment, "n_patches": args.n_patches}
    tcfg = _training_config(args)
    theta, losses = train(init_classifier(arch, args.seed, HE_GAIN), data, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_classifier(theta, out)
    write_manifest(out.parent, "train", args.seed, {"source": source, "training": asdict(tcfg), "losses": losses})
    print(f"final loss {losses[-1]:.5f}; classifier written to {out}")


def cmd_register(args):
    if not Path(args.case).is_dir():
        raise CLIError(f"case directory not found: {args.case}")
    case = load_case(args.case)
    objective = _objective(args.metric, args, [case], args.kind)
    beta0 = _identity(case, args.kind)
    schedule = [(f, None) for f in args.levels] if args.levels else None
    res = register(objective, case.fixed, case.moving, beta0, schedule=schedule, cfg=PowellConfig())
    err = fre(res.beta, case.beta_true, case.landmarks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"beta": res.beta.to_dict(), "value": res.value, "fre": err}, indent=2))
    if args.trace:
        write_trace_csv(res.traces[-1], args.trace)
    write_manifest(out.parent, "register", args.seed, {"case": str(args.case), "metric": args.metric, "bins": args.bins, "levels": args.levels})
    print(f"FRE {err:.4f}")


def cmd_iml(args):
    cases = _cases(args.cases)
    if args.schedule is None:
        raise CLIError("--schedule is required")
    try:
        text = Path(args.schedule).read_text() if Path(args.schedule).exists() else args.schedule
        schedule = parse_schedule(json.loads(text))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CLIError(f"bad schedule: {exc}") from exc
    cfg = ExperimentConfig(seed=args.seed, n_patches=args.n_patches, epochs=args.epochs, learning_rate=args.lr, weight_decay=args.weight_decay, optimizer=args.optimizer)
    settings = iml_settings(cfg, args.kind)
    out = _out_dir(args.out)
    state = run_iml(schedule, cases, np.random.default_rng(args.seed), settings, checkpoint_dir=out)
    save_classifier(state.theta, out / "final_classifier.bin")
    write_manifest(out, "iml", args.seed, {"schedule": [[s.l, s.sigma2] for s in schedule], "experiment": cfg.to_dict(), "kind": args.kind})
    for h in state.history:
        med = h.get("median_fre")
        print(f"stage {h['stage']} (l={h['l']}, sigma2={h['sigma2']}): final loss {h['loss'][-1]:.4f}" + (f", median FRE {med:.3f}" if med is not None else ""))


def cmd_sweep(args):
    if not Path(args.case).is_dir():
        raise CLIError(f"case directory not found: {args.case}")
    case = load_case(args.case)
    objective = _objective(args.metric, args, [case], args.kind)
    res = response_sweep(objective, case.fixed, case.moving, case.beta_true, args.axis, args.lo, args.hi, args.step, args.factor, {"metric": args.metric})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.to_csv(out)
    write_manifest(out.parent, "sweep", args.seed, {"case": str(args.case), "metric": args.metric, "axis": args.axis, "lo": args.lo, "hi": args.hi, "step": args.step, "factor": args.factor})
    st = peak_analysis(res)
    print(f"argmax {st.argmax:g}, FWHM {st.fwhm:.3f}, modes {st.modes}")


def cmd_compare(args):
    cases = _cases(args.cases)
    methods = args.metric or ["mi", "msmi", "catml", "ditr"]
    out = _out_dir(args.out)
    reports = {}
    for method in methods:
        name = "mi" if method == "msmi" else method
        objective = _objective(name, args, cases, args.kind)
        schedule = [(4, None), (2, None), (1, None)] if method == "msmi" else None
        rep = FREReport(method)
        per_landmark = []
        for case in cases:
            beta = register(objective, case.fixed, case.moving, _identity(case, args.kind), schedule=schedule, cfg=PowellConfig()).beta
            rep.per_case.append(fre(beta, case.beta_true, case.landmarks))
            per_landmark.append(fre_per_landmark(beta, case.beta_true, case.landmarks))
        write_fre_csv(out / f"fre_{method}.csv", {method: rep})
        with open(out / f"fre_{method}_landmarks.csv", "w") as fh:
            fh.write("case,landmark,error\n")
            for i, errs in enumerate(per_landmark):
                for j, e in enumerate(errs):
                    fh.write(f"{i},{j},{float(e)!r}\n")
        reports[method] = rep
        s = rep.summary()
        print(f"{method}: median {s['median']:.3f} (q1 {s['q1']:.3f}, q3 {s['q3']:.3f}) over {s['n']} cases")
    write_manifest(out, "compare", args.seed, {"cases": str(args.cases), "methods": methods, "bins": args.bins, "kind": args.kind})


def cmd_experiment1(args):
    overrides = {k: v for k, v in (("n_patches", args.n_patches), ("epochs", args.epochs)) if v is not None}
    cfg = ExperimentConfig.for_mode(args.mode, seed=args.seed, n_train=args.n_train, n_test=args.n_test, **overrides)
    schedule = EDGE_SCHEDULE if args.mode == "edge" else RIGID_SCHEDULE
    if args.schedule is not None:
        try:
            schedule = [(s.l, s.sigma2) for s in parse_schedule(json.loads(args.schedule))]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CLIError(f"bad schedule: {exc}") from exc
    res = experiment1(args.kind, args.mode, schedule, cfg, args.out, baselines=tuple(args.baseline or ("mi",)), train_baselines=tuple(args.train_baseline or ()))
    print("training median FRE per stage: " + ", ".join(f"{m:.3f}" for m in res["stage_medians"]))
    for label, reports in (("held-out", res["reports"]), ("training", res["train_reports"])):
        for name, rep in reports.items():
            print(f"{label} {name}: median FRE {rep.median:.3f}")


def cmd_experiment2(args):
    overrides = {k: v for k, v in (("n_patches", args.n_patches), ("epochs", args.epochs)) if v is not None}
    cfg = ExperimentConfig.for_mode("experiment2", seed=args.seed, n_train=args.n_train, n_test=args.n_test, **overrides)
    results = experiment2(cfg, args.out)
    for name in EXP2_VARIANTS:
        st = results[name][1]
        print(f"{name}: argmax {st.argmax:g}, FWHM {st.fwhm:.3f}, modes {st.modes}")


def _common(p, kind=True, metric=False):
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    if kind:
        p.add_argument("--kind", choices=("rigid", "affine"), default="rigid")
    if metric:
        p.add_argument("--metric", choices=METRICS, default="mi")
        p.add_argument("--bins", type=int, default=DEFAULT_BINS)
        p.add_argument("--model", help="classifier file for --metric ditr")
        p.add_argument("--min-patches", type=int, default=64, help="densify the score grid on small images")


def _training_flags(p):
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--n-patches", type=int, default=20_000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditr", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic registration cases")
    _common(p)
    p.add_argument("--n", "--num-cases", dest="n", type=int, default=20)
    p.add_argument("--mode", choices=("remap", "edge"), default="remap")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--blobs", type=int, default=14)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--shift", type=float, nargs=2, default=(0.0, 0.0), metavar=("DX", "DY"))
    p.add_argument("--no-perturbation", action="store_true", help="aligned cases (only --shift applies)")
    p.add_argument("--canny-sigma", type=float, default=1.0)
    p.add_argument("--canny-low", type=float, default=0.1)
    p.add_argument("--canny-high", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a classifier on a patch dataset or on cases")
    _common(p)
    _training_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", help="patch record file")
    src.add_argument("--cases", help="case directory to sample patches from")
    p.add_argument("--aligned", action="store_true", help="sample at the true alignment instead of identity")
    p.add_argument("--sigma2", type=float, default=0.0, help="dither variance (squared pixels)")
    p.add_argument("--augment", choices=("none", "rot90_flips"), default="none")
    p.add_argument("--patch-size", type=int, default=17)
    p.add_argument("--save-dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one case from identity")
    _common(p, metric=True)
    p.add_argument("--case", required=True)
    p.add_argument("--levels", type=int, nargs="*", help="downsampling factors, coarse to fine (default: full resolution)")
    p.add_argument("--trace", help="CSV for the last level's optimizer trace")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("iml", help="iterated maximum likelihood over a case set")
    _common(p)
    _training_flags(p)
    p.add_argument("--cases", required=True)
    p.add_argument("--schedule", help='JSON list like [{"l": 4, "sigma2": 100}, ...] or a file containing it')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_iml)

    p = sub.add_parser("sweep", help="metric response along one parameter around the true alignment")
    _common(p, metric=True)
    p.add_argument("--case", required=True)
    p.add_argument("--axis", choices=("tx", "ty", "theta"), default="tx")
    p.add_argument("--lo", type=float, default=-20.0)
    p.add_argument("--hi", type=float, default=20.0)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--factor", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="FRE of several methods over a case set")
    _common(p)
    p.add_argument("--cases", required=True)
    p.add_argument("--metric", action="append", choices=("mi", "msmi", "jointentropy", "catml", "ditr"), help="repeatable; default mi, msmi, catml, ditr")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--model")
    p.add_argument("--min-patches", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("experiment1", help="IML on synthetic pairs, then held-out registration against MI")
    _common(p)
    p.add_argument("--mode", choices=("remap", "edge"), default="remap")
    p.add_argument("--schedule", help="JSON schedule (default: rigid or edge schedule for the mode)")
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-test", type=int, default=10)
    p.add_argument("--n-patches", type=int, help="default 20000 (50000 in edge mode)")
    p.add_argument("--epochs", type=int, help="default 15 (40 in edge mode)")
    p.add_argument("--baseline", action="append", choices=("mi", "msmi"), help="repeatable; default mi")
    p.add_argument("--train-baseline", action="append", choices=("mi", "msmi"), help="also register the training cases")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment1)

    p = sub.add_parser("experiment2", help="shifted-data bias study: four labelled sweeps")
    _common(p, kind=False)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-test", type=int, default=10)
    p.add_argument("--n-patches", type=int, help="default 50000")
    p.add_argument("--epochs", type=int, help="default 40")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment2)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CLIError as exc:
        print(f"ditr {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"ditr {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
