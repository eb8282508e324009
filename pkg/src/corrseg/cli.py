"""Command-line interface.

Subcommands: `synth-data` (phantom dataset generation), `train` (one arm),
`ablate` (the 4-arm x 4-missing grid with table output), `viz` (segmentation
panels and feature-map mosaics). Exit codes: 0 success, 1 usage error,
2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .ablate import ARMS, mean_avg_dsc, run_grid
from .checkpoint import CheckpointError
from .config import (
    ConfigError,
    ExperimentConfig,
    MISSING_TOKENS,
    MODES,
    format_config,
    load_config_file,
)
from .phantom import PhantomSpec, read_dataset, split_dataset, write_dataset
from .training import Trainer, TrainingDivergence, predict_case, train
from .volumes import DataError, Modality, read_case

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage errors to 1
        raise UsageError(message)


def _parse_shape(value: str) -> tuple[int, int, int]:
    parts = value.replace(",", " ").split()
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or any(not p.isdigit() for p in parts):
        raise UsageError(f"--shape needs 1 or 3 positive integers, got {value!r}")
    return tuple(int(p) for p in parts)


def build_parser() -> _Parser:
    parser = _Parser(prog="corrseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    synth = sub.add_parser("synth-data", help="generate a correlated phantom dataset")
    synth.add_argument("--cases", type=int, default=10, help="number of cases")
    synth.add_argument("--shape", default="32", help="volume shape, one int or 'D H W'")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--noise-std", type=float, default=0.02)
    synth.add_argument("--out", required=True, help="output dataset directory")

    tr = sub.add_parser("train", help="train one experiment arm")
    tr.add_argument("--data", help="dataset directory (from synth-data)")
    tr.add_argument("--mode", required=True, choices=MODES)
    tr.add_argument("--missing", choices=MISSING_TOKENS, help="missing modality (or 'random')")
    tr.add_argument("--config", help="config file of section.key = value lines")
    tr.add_argument("--seed", type=int, help="override train.seed")
    tr.add_argument("--train-frac", type=float, default=0.8)
    tr.add_argument("--out", default="model.ckpt", help="checkpoint output path")
    tr.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    tr.add_argument("--quiet", action="store_true")

    ab = sub.add_parser("ablate", help="run the 4-arm x 4-missing ablation grid")
    ab.add_argument("--data", required=True)
    ab.add_argument("--config", help="config file of section.key = value lines")
    ab.add_argument("--seeds", type=int, nargs="+", help="grid seeds (default: train.seed)")
    ab.add_argument("--train-frac", type=float, default=0.8)
    ab.add_argument("--workers", type=int, default=1, help="parallel training processes")
    ab.add_argument("--out", required=True, help="output directory for reports and checkpoints")
    ab.add_argument("--quiet", action="store_true")

    vz = sub.add_parser("viz", help="render segmentation panels and feature maps")
    vz.add_argument("--data", required=True)
    vz.add_argument("--case", required=True, help="case id within the dataset")
    vz.add_argument(
        "--checkpoint", action="append", required=True, help="checkpoint path (repeatable, one per arm)"
    )
    vz.add_argument("--missing", required=True, choices=MISSING_TOKENS[:4])
    vz.add_argument("--slices", type=int, nargs="+", help="axial slice indices (default: middle)")
    vz.add_argument("--out", required=True, help="output image directory")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    config = ExperimentConfig(mode=args.mode) if hasattr(args, "mode") else ExperimentConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        config = load_config_file(path, base=config)
    updates = {}
    if getattr(args, "missing", None):
        updates["missing"] = args.missing
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if updates:
        from dataclasses import replace

        config = replace(config, train=replace(config.train, **updates))
    return config


def _load_dataset(args):
    root = Path(args.data)
    if not root.exists():
        raise DataError(f"dataset directory not found: {root}")
    return read_dataset(root)


def _apply_dataset_shape(config: ExperimentConfig, cases) -> ExperimentConfig:
    from dataclasses import replace

    shape = cases[0].shape
    if config.shape != shape and config.shape != ExperimentConfig().shape:
        raise DataError(
            f"configured shape {config.shape} does not match dataset shape {shape}"
        )
    return replace(config, shape=shape)


def cmd_synth(args) -> int:
    if args.cases < 1:
        raise UsageError("--cases must be a positive integer")
    if args.seed < 0:
        raise UsageError("--seed must be nonnegative")
    shape = _parse_shape(args.shape)
    radius_max = max(2.0, min(shape) * 9 / 32)
    radius_min = max(1.5, radius_max * 5 / 9)
    spec = PhantomSpec(
        shape=shape,
        n_cases=args.cases,
        seed=args.seed,
        noise_std=args.noise_std,
        tumor_radius_range=(radius_min, radius_max),
    )
    case_ids = write_dataset(spec, args.out)
    print(f"wrote {len(case_ids)} cases to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve_config(args)
    if args.dry_run:
        print(f"mode = {config.mode}")
        print(format_config(config), end="")
        return EXIT_OK
    if not args.data:
        raise UsageError("--data is required (unless --dry-run)")
    cases = _load_dataset(args)
    config = _apply_dataset_shape(config, cases)
    train_cases, val_cases, test_cases = split_dataset(
        cases, args.train_frac, seed=config.train.seed
    )
    log = None if args.quiet else print
    trainer = train(config, train_cases, val_cases, log=log)
    trainer.save(args.out)
    print(
        f"trained {config.mode} for {trainer.epoch} epochs "
        f"(best val {trainer.best_val:.4f} at epoch {trainer.best_epoch}); "
        f"saved {args.out}"
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _resolve_config(args)
    cases = _load_dataset(args)
    config = _apply_dataset_shape(config, cases)
    seeds = args.seeds if args.seeds else [config.train.seed]
    log = None if args.quiet else print
    rows_by_seed = run_grid(
        Path(args.data),
        Path(args.out),
        config,
        seeds,
        train_frac=args.train_frac,
        workers=args.workers,
        log=log,
    )
    wins = 0
    for seed, rows in rows_by_seed.items():
        direct = mean_avg_dsc(rows, "direct")
        full = mean_avg_dsc(rows, "direct_cc_cg")
        wins += full >= direct
        print(f"seed {seed}: direct={direct:.4f} direct_cc_cg={full:.4f}")
    print(f"direct_cc_cg >= direct in {wins}/{len(seeds)} seeds")
    print(f"reports in {args.out}")
    return EXIT_OK


def cmd_viz(args) -> int:
    from .viz import feature_mosaics, segmentation_panels

    case_dir = Path(args.data) / args.case
    if not case_dir.exists():
        raise DataError(f"case directory not found: {case_dir}")
    case = read_case(case_dir)
    missing = Modality.from_token(args.missing)
    slices = args.slices if args.slices else [case.shape[0] // 2]

    predictions = {}
    arm_counts: dict[str, int] = {}
    mosaics = []
    for path in args.checkpoint:
        ckpt = Path(path)
        if not ckpt.exists():
            raise DataError(f"checkpoint not found: {ckpt}")
        trainer = Trainer.load(ckpt)
        if trainer.config.shape != case.shape:
            raise DataError(
                f"checkpoint shape {trainer.config.shape} does not match case {case.shape}"
            )
        arm = trainer.config.mode
        arm_counts[arm] = arm_counts.get(arm, 0) + 1
        if arm_counts[arm] > 1:
            arm = f"{arm}{arm_counts[arm]}"
        model = trainer.best_model()
        predictions[arm] = predict_case(model, trainer.config.mode, case, missing)
        mosaics += feature_mosaics(model, trainer.config.mode, case, missing, args.out, arm)
    panels = segmentation_panels(case, predictions, slices, args.out)
    print(f"wrote {len(panels)} slice panels and {len(mosaics)} feature mosaics to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "synth-data": cmd_synth,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
