"""Command-line entry point.

Usage:
    python main.py synth-dataset --n-train 500 --n-val 100 --target fog --seed 0
    python main.py train --config run.json [--mode full] [--seed 1] [--set train.gamma=0.01]
    python main.py eval --checkpoint runs/full-s0/checkpoint.pt --manifest data/val-large.json
    python main.py diagnose --checkpoint ... --manifest ... --out h.csv,d.csv [--render vis]
    python main.py ablate --config run.json --modes all --seeds 3

Exit codes: 0 success, 1 bad input, 2 internal failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import (
    ABLATION_ROWS,
    PRESETS,
    ExperimentConfig,
    RunConfig,
    apply_overrides,
    load_config,
    output_root,
    resolve_preset,
    write_snapshot,
)
from .detcore import load_model, predict, train
from .errors import InputError
from .evalkit import (
    domain_distances,
    embedding_ordering_rate,
    evaluate_model,
    intensity_sweep,
    pooled_embeddings,
    rank_dataset,
    render_detections,
    write_distances_csv,
    write_hardness_csv,
    write_map_csv,
    write_projection_csv,
)
from .toyscenes import VAL_LEVEL_SPLITS, TripletDataset, load_manifest, synthesize_splits
from .weathergen import Intensity, Weather

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
ABLATION_CSV = "ablation.csv"


class ArgumentParser(argparse.ArgumentParser):
    """argparse, but bad flags exit 1 instead of 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def banner(title: str) -> None:
    print(f"\n{'=' * 60}")
    print(title)
    print("=" * 60)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth_dataset(args: argparse.Namespace) -> int:
    data = apply_overrides(load_config(args.config), args.set or []).data
    if args.out_dir:
        out_dir = Path(args.out_dir)
    else:
        out_dir = Path(data.root) if args.config else output_root(None)
    n_train = data.n_train if args.n_train is None else args.n_train
    n_val = data.n_val if args.n_val is None else args.n_val
    if n_train < 0 or n_val < 0:
        raise InputError("--n-train and --n-val must be >= 0")
    target = Weather(args.target or data.target_weather)
    levels = {Weather.FOG: Intensity(args.fog_level), Weather.RAIN: Intensity(args.rain_level)}
    manifests = synthesize_splits(
        out_dir,
        n_train=n_train,
        n_val=n_val,
        target_weather=target,
        seed=args.seed,
        scene_spec=data.scene_spec(),
        train_level=levels[target],
        auxiliary_level=levels[target.other],
    )
    banner("DATASET")
    print(f"  Root:            {out_dir}")
    print(f"  Target weather:  {target.value} ({levels[target].value})")
    print(f"  Auxiliary:       {target.other.value} ({levels[target.other].value})")
    for split, manifest in manifests.items():
        print(f"  {split + ':':<16} {len(manifest.records)} triplets")
    print()
    return 0


def experiment_from_args(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config)
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "mode", None):
        overrides.append(f"train.preset={resolve_preset(args.mode)}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return apply_overrides(config, overrides)


def run_training(experiment: ExperimentConfig, run_dir: Path, *, resume: bool = False):
    run = RunConfig(experiment, experiment.train.seed, run_dir, command="train")
    write_snapshot(run)
    manifest_path = Path(experiment.data.root) / f"{experiment.data.train_split}.json"
    dataset = TripletDataset(manifest_path)
    logger.info(
        "training preset %s seed %d on %d triplets -> %s",
        experiment.train.preset, experiment.train.seed, len(dataset), run_dir,
    )
    return train(dataset, experiment, run_dir, resume=resume)


def run_name(experiment: ExperimentConfig) -> str:
    return f"{resolve_preset(experiment.train.preset)}-s{experiment.train.seed}"


def cmd_train(args: argparse.Namespace) -> int:
    experiment = experiment_from_args(args)
    run_dir = output_root(args.out_dir) / run_name(experiment)
    result = run_training(experiment, run_dir, resume=args.resume)
    banner("TRAINING")
    print(f"  Preset:      {experiment.train.preset}")
    print(f"  Iterations:  {result.iterations}")
    print(f"  Checkpoint:  {result.checkpoint}")
    print(f"  Metrics:     {result.metrics}")
    print()
    return 0


def level_manifests(manifest: Path, levels: Sequence[str] | None) -> dict[str, Path]:
    if not levels:
        return {manifest.stem: manifest}
    out = {}
    for level in levels:
        if level not in {i.value for i in Intensity}:
            raise InputError(f"unknown level {level!r}; choose from small, medium, large")
        out[level] = manifest.parent / f"{VAL_LEVEL_SPLITS[Intensity(level)]}.json"
    return out


def print_map_table(results) -> None:
    banner("EVALUATION (mAP@0.5, all-point)")
    for name, result in results.items():
        print(f"  {name + ':':<14} {result.map * 100:6.2f}")
        for cls, ap in result.per_class.items():
            value = "   n/a" if ap is None else f"{ap * 100:6.2f}"
            print(f"      {cls:<10} {value}")
    print()


def cmd_eval(args: argparse.Namespace) -> int:
    model, _ = load_model(args.checkpoint)
    levels = [s.strip() for s in args.levels.split(",") if s.strip()] if args.levels else None
    manifests = {name: load_manifest(path) for name, path in
                 level_manifests(Path(args.manifest), levels).items()}
    class_names = next(iter(manifests.values())).class_names
    results = intensity_sweep(model, manifests, class_names, include_clear=not args.no_clear)
    print_map_table(results)
    if args.out:
        write_map_csv(Path(args.out), results)
        print(f"  Table written to {args.out}\n")
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    model, _ = load_model(args.checkpoint)
    dataset = TripletDataset(args.manifest)
    triplets = list(dataset)
    paths = [Path(p.strip()) for p in args.out.split(",") if p.strip()]
    if len(paths) < 2:
        raise InputError("--out needs two comma-separated paths: hardness.csv,distances.csv")
    hardness_path, distances_path = paths[:2]
    projection_path = paths[2] if len(paths) > 2 else distances_path.with_name("projection.csv")

    records = rank_dataset(model, triplets)
    write_hardness_csv(hardness_path, records)
    write_distances_csv(distances_path, domain_distances(model, triplets))
    pooled = pooled_embeddings(model, triplets)
    rate = embedding_ordering_rate(pooled)
    if len(triplets) >= 1:
        write_projection_csv(projection_path, pooled, [t.sample_id for t in triplets])
    if args.render:
        render_dir = Path(args.render)
        render_dir.mkdir(parents=True, exist_ok=True)
        for t in triplets:
            found = predict(model, t.target.image)
            render_detections(t.target.image, found.boxes.numpy(), found.labels.numpy(),
                              dataset.manifest.class_names, scores=found.scores.numpy(),
                              path=render_dir / f"{t.sample_id}.png")

    banner("DIAGNOSTICS")
    print(f"  Samples:         {len(records)}")
    if records:
        print(f"  Hardest:         {records[0].sample_id} (ah {records[0].ah:.4g})")
        print(f"  Easiest:         {records[-1].sample_id} (ah {records[-1].ah:.4g})")
    print(f"  Ordering rate:   {rate:.3f}")
    print(f"  Hardness CSV:    {hardness_path}")
    print(f"  Distances CSV:   {distances_path}")
    print()
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    base = experiment_from_args(args)
    if args.modes == "all":
        modes = list(ABLATION_ROWS)
    else:
        modes = [resolve_preset(m.strip()) for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise InputError("--modes names no presets")
    unknown = [m for m in modes if m not in PRESETS]
    if unknown:
        raise InputError(f"unknown ablation mode(s): {', '.join(unknown)}")
    if args.seeds < 1:
        raise InputError("--seeds must be >= 1")

    root = output_root(args.out_dir)
    val_path = Path(base.data.root) / f"{base.data.val_split}.json"
    val = load_manifest(val_path)
    class_names = base.data.class_names
    rows = []
    for mode in modes:
        for seed in range(args.seeds):
            experiment = replace(base, train=replace(base.train, preset=mode, seed=seed))
            result = run_training(experiment, root / run_name(experiment))
            model, _ = load_model(result.checkpoint)
            scores = evaluate_model(model, TripletDataset(val), class_names)
            rows.append({"mode": mode, "seed": seed, **scores.as_row()})
            logger.info("ablation %s seed %d: mAP %.4f", mode, seed, scores.map)

    summary = root / ABLATION_CSV
    with summary.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    banner("ABLATION SUMMARY (mean mAP@0.5 over seeds)")
    for mode in modes:
        values = [r["mAP"] for r in rows if r["mode"] == mode]
        print(f"  {mode + ':':<14} {np.mean(values) * 100:6.2f}  (n={len(values)})")
    print(f"\n  Summary written to {summary}\n")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="stormadapt",
        description="Domain-adaptive object detection for adverse weather, at toy scale.",
    )
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    levels = [i.value for i in Intensity]
    p = sub.add_parser("synth-dataset", help="Generate train and per-level validation splits.")
    p.add_argument("--config", help="JSON experiment config; its data section sets the scenes.")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--n-train", type=int, help="Training triplets (default: data.n_train).")
    p.add_argument("--n-val", type=int, help="Validation triplets (default: data.n_val).")
    p.add_argument("--target", choices=[w.value for w in Weather])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--out-dir",
        help="Dataset directory (default: data.root with --config, else $STORMADAPT_OUT or ./runs).",
    )
    p.add_argument("--fog-level", choices=levels, default=Intensity.LARGE.value)
    p.add_argument("--rain-level", choices=levels, default=Intensity.LARGE.value)
    p.set_defaults(func=cmd_synth_dataset)

    def add_config_flags(p: ArgumentParser, required: bool) -> None:
        p.add_argument("--config", required=required, help="JSON experiment config.")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="Override a config value; may repeat.")
        p.add_argument("--out-dir", help="Output root (default: $STORMADAPT_OUT or ./runs).")

    p = sub.add_parser("train", help="Train one configuration.")
    add_config_flags(p, required=True)
    p.add_argument("--mode", help=f"Preset: {', '.join(PRESETS)}.")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="Continue from the run's checkpoint.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mAP of a checkpoint on one or more splits.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--levels", help="Comma-separated levels; splits are found next to --manifest.")
    p.add_argument("--out", help="CSV file for the mAP table.")
    p.add_argument("--no-clear", action="store_true", help="Skip the clear-image row.")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="Hardness ranking and domain distances.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="hardness.csv,distances.csv")
    p.add_argument("--render", metavar="DIR",
                   help="Also draw the detections on every target image into DIR.")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate", help="Train and evaluate several presets over several seeds.")
    add_config_flags(p, required=False)
    p.add_argument("--modes", default="all", help="'all' or a comma-separated preset list.")
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())
