"""Command-line experiment runner.

Subcommands:

* ``generate`` - materialize the configured dataset to disk
* ``train``    - run one training mode, writing metrics and checkpoints
* ``sweep``    - grid of runs over a labeled-budget or semantic-weight axis
* ``eval``     - score a checkpoint on a dataset split, optionally exporting
                 colorized prediction maps

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(for example a diverged run). The default run root is ``./runs`` and can be
moved with the ``SEGADAPT_RUN_ROOT`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import (
    ConfigError,
    ExperimentConfig,
    build_bundle,
    config_to_dict,
    dataset_fingerprint,
    dump_config,
    load_config,
    with_budget,
)
from .data import dataset_meta, load_dataset, save_dataset
from .networks import CheckpointError, predict
from .training import (
    MODES,
    SEMANTIC_MODES,
    TrainingDiverged,
    evaluate,
    load_models,
    train,
)

RUN_ROOT_ENV = "SEGADAPT_RUN_ROOT"

# Fixed label colormap for exported predictions (class 0 black, then
# high-contrast colors, cycled if there are ever more than ten classes).
_LABEL_COLORS = (
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
)


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; remap to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _load(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return ExperimentConfig()


def _apply_train_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    training = config.training
    if args.mode is not None:
        training = replace(training, mode=args.mode)
    if args.seed is not None:
        training = replace(training, seed=args.seed)
    if args.lambda_sadv is not None:
        training = replace(training, lambda_semantic_adv=args.lambda_sadv)
    config = replace(config, training=training)
    if args.budget is not None:
        config = with_budget(config, args.budget)
    return config


def _dataset_dir(config: ExperimentConfig) -> Path:
    if config.dataset.path:
        return Path(config.dataset.path)
    return _run_root() / "datasets" / f"ds_{dataset_fingerprint(config.dataset)}"


def _ensure_dataset(config: ExperimentConfig):
    """Return (bundle, directory), generating the dataset if it is absent."""
    ds_dir = _dataset_dir(config)
    fingerprint = dataset_fingerprint(config.dataset)
    if not (ds_dir / "manifest.jsonl").exists():
        bundle = build_bundle(config.dataset)
        save_dataset(bundle, ds_dir, meta={"fingerprint": fingerprint}, force=True)
        return load_dataset(ds_dir), ds_dir
    meta = dataset_meta(ds_dir)
    stored = meta.get("fingerprint")
    if stored is not None and stored != fingerprint:
        raise ConfigError(
            f"dataset at {ds_dir} was generated from a different recipe "
            f"(fingerprint {stored} != {fingerprint}); regenerate or point dataset.path elsewhere"
        )
    return load_dataset(ds_dir), ds_dir


def cmd_generate(args) -> int:
    config = _load(args)
    if args.seed is not None:
        dataset = replace(
            config.dataset,
            source=replace(config.dataset.source, seed=args.seed),
            target=replace(config.dataset.target, seed=args.seed + 1),
            plan=replace(config.dataset.plan, seed=args.seed),
        )
        config = replace(config, dataset=dataset)
    out = Path(args.out) if args.out else _dataset_dir(config)
    bundle = build_bundle(config.dataset)
    save_dataset(bundle, out, meta={"fingerprint": dataset_fingerprint(config.dataset)}, force=args.force)
    counts = {name: len(samples) for name, samples in bundle.splits().items()}
    print(f"dataset written to {out}")
    for name, count in counts.items():
        print(f"  {name}: {count}")
    return 0


def cmd_train(args) -> int:
    config = _apply_train_overrides(_load(args), args)
    bundle, ds_dir = _ensure_dataset(config)
    mode = config.training.mode
    budget = config.dataset.plan.n_target_labeled
    run_dir = Path(
        args.out
        or config.output.run_dir
        or _run_root() / f"train_{mode}_b{budget}_s{config.training.seed}"
    )
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = replace(
        config,
        dataset=replace(config.dataset, path=str(ds_dir)),
        output=replace(config.output, run_dir=str(run_dir)),
    )
    dump_config(resolved, run_dir / "config.yaml")
    result = train(
        config.training,
        bundle,
        model_config=config.model,
        run_dir=run_dir,
        resume_from=args.resume,
    )
    print(f"run dir: {run_dir}")
    if result.final_miou is not None:
        print(f"final mIoU: {result.final_miou:.4f}")
        print(f"best mIoU:  {result.best_miou:.4f} @ iteration {result.best_iteration}")
    return 0


def _parse_list(raw: str, parse, what: str):
    try:
        return [parse(tok) for tok in raw.split(",") if tok != ""]
    except ValueError as exc:
        raise ConfigError(f"cannot parse {what} list {raw!r}: {exc}") from exc


def _cell_config(base: ExperimentConfig, axis: str, value, mode: str, seed: int) -> ExperimentConfig:
    config = replace(base, training=replace(base.training, mode=mode, seed=seed))
    if axis == "budget":
        return with_budget(config, int(value))
    return replace(config, training=replace(config.training, lambda_semantic_adv=float(value)))


def _cell_valid(config: ExperimentConfig) -> bool:
    budget = config.dataset.plan.n_target_labeled
    mode = config.training.mode
    if mode in SEMANTIC_MODES or mode == "target_only":
        return budget > 0
    return True


def cmd_sweep(args) -> int:
    base = _load(args)
    axis = args.axis
    parse = int if axis == "budget" else float
    values = _parse_list(args.values, parse, axis)
    if not values:
        raise ConfigError("sweep needs at least one axis value")
    modes = _parse_list(args.modes, str, "mode")
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    seeds = _parse_list(args.seeds, int, "seed")
    out = Path(args.out) if args.out else _run_root() / f"sweep_{axis.replace('-', '_')}"
    if (out / "summary.csv").exists() and not args.force:
        raise ConfigError(f"{out} already holds a sweep summary (use --force to redo)")
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    means = {}  # (value, mode) -> mean final mIoU
    for value in values:
        for mode in modes:
            cell_scores = []
            for seed in seeds:
                config = _cell_config(base, axis, value, mode, seed)
                if not _cell_valid(config):
                    continue
                bundle, ds_dir = _ensure_dataset(config)
                run_dir = out / "runs" / f"{mode}_{axis.replace('-', '_')}{value}_s{seed}"
                run_dir.mkdir(parents=True, exist_ok=True)
                resolved = replace(
                    config,
                    dataset=replace(config.dataset, path=str(ds_dir)),
                    output=replace(config.output, run_dir=str(run_dir)),
                )
                dump_config(resolved, run_dir / "config.yaml")
                result = train(config.training, bundle, model_config=config.model, run_dir=run_dir)
                rows.append(
                    {
                        "axis": axis,
                        "value": value,
                        "mode": mode,
                        "seed": seed,
                        "final_miou": result.final_miou,
                        "best_miou": result.best_miou,
                        "run_dir": str(run_dir),
                    }
                )
                cell_scores.append(result.final_miou)
                print(f"[{axis}={value} mode={mode} seed={seed}] final mIoU {result.final_miou:.4f}")
            if cell_scores:
                means[(value, mode)] = float(np.mean(cell_scores))

    with open(out / "runs.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["axis", "value", "mode", "seed", "final_miou", "best_miou", "run_dir"]
        )
        writer.writeheader()
        writer.writerows(rows)

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis] + modes)
        for value in values:
            row = [value]
            for mode in modes:
                mean = means.get((value, mode))
                row.append(f"{mean:.6f}" if mean is not None else "")
            writer.writerow(row)

    print(f"sweep summary written to {out / 'summary.csv'}")
    if axis == "budget":
        margin = 0.02
        lines = []
        for mode in modes:
            series = [(v, means[(v, mode)]) for v in values if (v, mode) in means]
            if len(series) < 2:
                continue
            drops = [
                (a[0], b[0], b[1] - a[1]) for a, b in zip(series, series[1:]) if b[1] < a[1] - margin
            ]
            verdict = "non-decreasing" if not drops else f"drops beyond margin: {drops}"
            lines.append(f"{mode}: {verdict} (margin {margin})")
        report = "\n".join(lines)
        (out / "monotonicity.txt").write_text(report + "\n" if report else "")
        if report:
            print(report)
    return 0


def cmd_eval(args) -> int:
    models, meta = load_models(args.checkpoint)
    bundle = load_dataset(args.data)
    if bundle.num_classes != meta.get("num_classes"):
        raise CheckpointError(
            f"checkpoint was trained for {meta.get('num_classes')} classes but the "
            f"dataset has {bundle.num_classes}"
        )
    splits = bundle.splits()
    if args.split not in splits:
        raise ConfigError(f"unknown split {args.split!r}; choose from {sorted(splits)}")
    if args.split == "target_unlabeled":
        raise ConfigError("the unlabeled split has sealed labels and cannot be scored")
    samples = splits[args.split]
    if not samples:
        raise ConfigError(f"split {args.split!r} is empty")

    report = evaluate(models.generator, models.head, samples, bundle.num_classes)
    payload = {
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "num_images": len(samples),
        "miou": report.mean,
        "per_class_iou": {str(k): v for k, v in report.per_class.items()},
    }
    print(f"split {args.split}: {len(samples)} images")
    for k, iou in sorted(report.per_class.items()):
        print(f"  class {k}: IoU {iou:.4f}")
    print(f"mIoU: {report.mean:.4f}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if args.save_predictions:
            pred_dir = out / "predictions"
            pred_dir.mkdir(exist_ok=True)
            colors = np.array(
                [_LABEL_COLORS[k % len(_LABEL_COLORS)] for k in range(bundle.num_classes)],
                dtype=np.uint8,
            )
            for sample in samples:
                pred = predict(models.generator, models.head, sample.image)
                Image.fromarray(colors[pred], mode="RGB").save(pred_dir / f"{sample.id:07d}.png")
        print(f"report written to {out / 'report.json'}")
    elif args.save_predictions:
        raise ConfigError("--save-predictions needs --out DIR")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="segadapt", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_gen = sub.add_parser("generate", help="materialize the configured dataset")
    p_gen.add_argument("--config", help="experiment config file (defaults apply if omitted)")
    p_gen.add_argument("--seed", type=int, help="override the dataset seeds")
    p_gen.add_argument("--out", help="output directory (default: content-addressed under the run root)")
    p_gen.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="run one training configuration")
    p_train.add_argument("--config", help="experiment config file")
    p_train.add_argument("--mode", choices=MODES, help="override the training mode")
    p_train.add_argument("--seed", type=int, help="override the training seed")
    p_train.add_argument("--budget", type=int, help="override the labeled-target budget")
    p_train.add_argument("--lambda-sadv", type=float, dest="lambda_sadv", help="override the semantic adversarial weight")
    p_train.add_argument("--out", help="run directory")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="grid of runs over one axis")
    p_sweep.add_argument("--config", help="experiment config file")
    p_sweep.add_argument("--axis", choices=("budget", "lambda-sadv"), default="budget")
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument("--modes", default="source_only,global,semantic_conv", help="comma-separated modes")
    p_sweep.add_argument("--seeds", default="0", help="comma-separated seeds averaged per cell")
    p_sweep.add_argument("--out", help="sweep output directory")
    p_sweep.add_argument("--force", action="store_true", help="overwrite an existing sweep summary")
    p_sweep.set_defaults(func=cmd_sweep)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="dataset directory")
    p_eval.add_argument("--split", default="target_val")
    p_eval.add_argument("--out", help="directory for report.json and predictions")
    p_eval.add_argument("--save-predictions", action="store_true", dest="save_predictions")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ValueError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
