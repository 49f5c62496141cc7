"""Command-line entry point: train, eval, synth, report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .data import DatasetSpec, load_dataset, write_dataset
from .errors import DataError, ScdError
from .metrics import (
    ConfusionMatrix,
    TransitionMatrix,
    collapse_to_binary,
    emit_report,
    fscd,
    miou_binary,
    overall_accuracy,
    read_matrix_csv,
    sek,
)
from .synth import SynthConfig, class_spec, default_transition_table, generate
from .training import evaluate, restore_model, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scdkit",
        description="Bi-temporal semantic change detection: training, evaluation and dataset tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimize a model on a dataset")
    t.add_argument("--config", metavar="PATH", help="flat key = value config file")
    t.add_argument("--data", metavar="DIR", help="dataset root (overrides data_root)")
    t.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
    t.add_argument("--split", default="", help="dataset split subdirectory")
    t.add_argument("--seed", type=int, metavar="N")
    t.add_argument("--iterations", type=int, metavar="N")
    t.add_argument("--batch-size", type=int, metavar="N")
    t.add_argument("--eval-interval", type=int, metavar="N")
    t.add_argument("--classes", type=int, metavar="N", help="semantic class count (id 0 = no change)")
    t.add_argument("--grad-clip", type=float, metavar="F", help="gradient norm clip, 0 disables")
    t.add_argument("--no-fft-branch", action="store_true", help="drop frequency features from fusion")
    t.add_argument("--no-diff-branch", action="store_true", help="drop the difference features from fusion")
    t.add_argument("--no-cga", action="store_true", help="disable change-guided attention")
    t.add_argument("--no-sek-loss", action="store_true", help="drop the separated-kappa loss term")
    t.add_argument("--no-augment", action="store_true", help="train on raw samples")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True, metavar="PATH")
    e.add_argument("--data", required=True, metavar="DIR")
    e.add_argument("--out", required=True, metavar="DIR")
    e.add_argument("--split", default="", help="dataset split subdirectory")

    s = sub.add_parser("synth", help="generate a synthetic bi-temporal dataset")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--samples", type=int, default=8, metavar="N")
    s.add_argument("--height", type=int, default=64, metavar="N")
    s.add_argument("--width", type=int, default=64, metavar="N")
    s.add_argument("--classes", type=int, default=4, metavar="N")
    s.add_argument("--seed", type=int, default=0, metavar="N")
    s.add_argument("--noise", type=float, default=0.02, metavar="SIGMA")
    s.add_argument("--illumination", type=float, default=0.08, metavar="F")
    s.add_argument("--texture", type=float, default=0.06, metavar="AMP",
                   help="per-class grating amplitude, 0 for flat surfaces")
    s.add_argument("--color-spread", type=float, default=1.0, metavar="F",
                   help="class color contrast about the mean, 0 for texture-only classes")
    s.add_argument("--stay-prob", type=float, default=0.35, metavar="P",
                   help="probability a repainted shape keeps its class")

    r = sub.add_parser("report", help="recompute metrics and heatmaps from saved confusion CSVs")
    r.add_argument("--eval-dir", required=True, metavar="DIR")
    r.add_argument("--out", required=True, metavar="DIR")
    return parser


def assemble_run(args: argparse.Namespace) -> tuple[RunConfig, DatasetSpec]:
    """Resolve config file, flag overrides and the dataset spec for a run.

    The class count is adopted from the dataset when neither a config
    file nor --classes pins it; otherwise a mismatch is an error.
    """
    run = load_config(args.config) if args.config else RunConfig()
    if args.data:
        run.data_root = args.data
    if args.out:
        run.out_dir = args.out
    if args.seed is not None:
        run.seed = args.seed
        run.model.seed = args.seed
    if args.iterations is not None:
        run.optim.iterations = args.iterations
    if args.batch_size is not None:
        run.optim.batch_size = args.batch_size
    if args.eval_interval is not None:
        run.eval_interval = args.eval_interval
    if args.classes is not None:
        run.model.num_classes = args.classes
    if args.grad_clip is not None:
        run.optim.grad_clip = args.grad_clip
    if args.no_fft_branch:
        run.model.fft_branch = False
    if args.no_diff_branch:
        run.model.diff_branch = False
    if args.no_cga:
        run.model.cga = False
    if args.no_sek_loss:
        run.loss.sek_loss = False
    if args.no_augment:
        run.augment = False

    spec = DatasetSpec.from_file(run.data_root, args.split)
    if args.config is None and args.classes is None:
        run.model.num_classes = spec.num_classes
    elif run.model.num_classes != spec.num_classes:
        raise DataError(
            f"config expects {run.model.num_classes} classes but the dataset has "
            f"{spec.num_classes}; pass --classes {spec.num_classes} or fix num_classes"
        )
    run.validate()
    return run, spec


def _run_train(args: argparse.Namespace) -> int:
    run, spec = assemble_run(args)
    dataset = load_dataset(spec)
    result = train(run, dataset=dataset)
    print(
        f"trained {result.iterations_run} iterations, final total loss "
        f"{result.final_breakdown['total']:.4f}, checkpoint {result.checkpoint_path}"
    )
    return 0


def _run_eval(args: argparse.Namespace) -> int:
    model, _run, iteration = restore_model(args.checkpoint)
    spec = DatasetSpec.from_file(args.data, args.split)
    dataset = load_dataset(spec)
    metrics = evaluate(model, dataset, spec.num_classes, out_dir=args.out, class_names=spec.class_names)
    line = " ".join(f"{k}={metrics[k]:.4f}" for k in ("oa", "miou", "sek", "fscd"))
    print(f"iteration {iteration}: {line}")
    return 0


def _run_synth(args: argparse.Namespace) -> int:
    config = SynthConfig(
        n_samples=args.samples,
        height=args.height,
        width=args.width,
        num_classes=args.classes,
        transition_table=default_transition_table(args.classes, args.stay_prob),
        noise_sigma=args.noise,
        illumination_range=args.illumination,
        texture_amplitude=args.texture,
        color_spread=args.color_spread,
        seed=args.seed,
    )
    samples, realized = generate(config)
    spec = class_spec(config, args.out)
    write_dataset(samples, spec)
    print(
        f"wrote {len(samples)} samples ({args.classes} classes, "
        f"{int(realized.counts.sum())} changed pixels) to {spec.base_dir}"
    )
    return 0


def _run_report(args: argparse.Namespace) -> int:
    src = Path(args.eval_dir)
    confusions: dict[str, ConfusionMatrix] = {}
    class_names: list[str] | None = None
    for name in ("t1", "t2", "total"):
        path = src / f"{name}_confusion.csv"
        if path.is_file():
            values, rows, _cols = read_matrix_csv(path)
            confusions[name] = ConfusionMatrix(values)
            class_names = rows
    if not confusions:
        raise DataError(f"no confusion CSVs found in {src}")
    if "total" in confusions:
        total = confusions["total"]
    else:
        total = None
        for cm in confusions.values():
            total = cm if total is None else total.merge(cm)

    p, r, f = fscd(total)
    metrics = {
        "oa_percent": overall_accuracy(total) * 100.0,
        "miou_percent": miou_binary(collapse_to_binary(total)) * 100.0,
        "fscd_percent": f * 100.0,
        "p_scd_percent": p * 100.0,
        "r_scd_percent": r * 100.0,
    }
    if "t1" in confusions and "t2" in confusions:
        metrics["sek_percent"] = 50.0 * (sek(confusions["t1"]) + sek(confusions["t2"]))

    transitions: dict[str, TransitionMatrix] = {}
    for name in ("gt", "pred"):
        path = src / f"{name}_transitions.csv"
        if path.is_file():
            values, rows, _cols = read_matrix_csv(path)
            transitions[name] = TransitionMatrix(values, rows)
    written = emit_report(metrics, confusions, transitions, args.out, class_names=class_names)
    print(f"wrote {len(written)} report files to {args.out}")
    return 0


_HANDLERS = {
    "train": _run_train,
    "eval": _run_eval,
    "synth": _run_synth,
    "report": _run_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ScdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
