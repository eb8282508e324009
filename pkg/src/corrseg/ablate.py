"""Ablation grid: train the substitution, direct, correlation, and full
generator arms across the four missing-modality scenarios, reuse checkpoints
on disk, and emit the per-region comparison table.

The direct arms retrain per missing modality (4 runs each); the substitution
arm trains once on the full modality set and the generator arm trains once
with a random missing modality per batch, so one grid costs 10 trainings and
fills 16 table cells. Grid cells always execute with a single torch thread so
results do not depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .metrics import REGIONS, write_report
from .phantom import read_dataset, split_dataset
from .training import Trainer, TrainingDivergence, evaluate, train
from .volumes import MODALITIES, Modality

ARMS = ("replace", "direct", "direct_cc", "direct_cc_cg")
ARM_LABELS = {
    "replace": "Replace",
    "direct": "Direct",
    "direct_cc": "Direct+CC",
    "direct_cc_cg": "Direct+CC+CG",
}
# Rendered column order mirrors the usual benchmark layout.
MISSING_ORDER = (Modality.FLAIR, Modality.T1, Modality.T1C, Modality.T2)


def grid_cells(base: ExperimentConfig, seed: int) -> list[ExperimentConfig]:
    """The 10 training cells of one grid seed."""
    cells = []
    for arm in ARMS:
        if arm in ("direct", "direct_cc"):
            for m in MODALITIES:
                cells.append(_cell_config(base, arm, m.token, seed))
        else:
            cells.append(_cell_config(base, arm, "random", seed))
    return cells


def _cell_config(base: ExperimentConfig, mode: str, missing: str, seed: int) -> ExperimentConfig:
    train_cfg = replace(base.train, missing=missing, seed=seed)
    return replace(base, mode=mode, train=train_cfg)


def cell_checkpoint_name(config: ExperimentConfig) -> str:
    return f"{config.mode}_{config.train.missing}_s{config.train.seed}.ckpt"


def _split(data_root: Path, train_frac: float, seed: int):
    cases = read_dataset(data_root)
    return split_dataset(cases, train_frac, seed=seed)


def _run_cell(data_root: str, train_frac: float, config: ExperimentConfig, ckpt_path: str) -> str:
    torch.set_num_threads(1)
    train_cases, val_cases, _ = _split(Path(data_root), train_frac, config.train.seed)
    trainer = train(config, train_cases, val_cases)
    trainer.save(ckpt_path)
    return ckpt_path


def ensure_checkpoints(
    data_root: Path,
    ckpt_dir: Path,
    cells: list[ExperimentConfig],
    train_frac: float = 0.8,
    workers: int = 1,
    log=None,
) -> dict[str, Path]:
    """Train any grid cell without a stored checkpoint; reuse the rest."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    paths = {cell_checkpoint_name(c): ckpt_dir / cell_checkpoint_name(c) for c in cells}
    todo = [c for c in cells if not paths[cell_checkpoint_name(c)].exists()]
    if log and todo:
        log(f"training {len(todo)} grid cells ({len(cells) - len(todo)} reused)")
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(
                    _run_cell,
                    str(data_root),
                    train_frac,
                    cell,
                    str(paths[cell_checkpoint_name(cell)]),
                ): cell
                for cell in todo
            }
            for future, cell in futures.items():
                try:
                    future.result()
                except TrainingDivergence as exc:
                    raise TrainingDivergence(
                        f"arm {cell.mode} (missing={cell.train.missing}, "
                        f"seed={cell.train.seed}): {exc}"
                    ) from exc
                if log:
                    log(f"finished {cell_checkpoint_name(cell)}")
    else:
        old_threads = torch.get_num_threads()
        try:
            for cell in todo:
                try:
                    _run_cell(
                        str(data_root), train_frac, cell, str(paths[cell_checkpoint_name(cell)])
                    )
                except TrainingDivergence as exc:
                    raise TrainingDivergence(
                        f"arm {cell.mode} (missing={cell.train.missing}, "
                        f"seed={cell.train.seed}): {exc}"
                    ) from exc
                if log:
                    log(f"finished {cell_checkpoint_name(cell)}")
        finally:
            torch.set_num_threads(old_threads)
    return paths


def evaluate_grid(
    data_root: Path,
    ckpt_dir: Path,
    base: ExperimentConfig,
    seed: int,
    train_frac: float = 0.8,
) -> list[dict]:
    """Rows (arm, missing, region, dsc, hd) for one seed's 16 grid cells."""
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        _, _, test_cases = _split(Path(data_root), train_frac, seed)
        rows = []
        for arm in ARMS:
            for missing in MISSING_ORDER:
                token = missing.token if arm in ("direct", "direct_cc") else "random"
                config = _cell_config(base, arm, token, seed)
                trainer = Trainer.load(Path(ckpt_dir) / cell_checkpoint_name(config))
                result = evaluate(trainer, test_cases, missing)
                for region in (*REGIONS, "AVG"):
                    rows.append(
                        {
                            "arm": arm,
                            "missing_modality": missing.token,
                            "region": region,
                            "dsc": result[region]["dsc"],
                            "hd": result[region]["hd"],
                        }
                    )
        return rows
    finally:
        torch.set_num_threads(old_threads)


def render_table(rows: list[dict]) -> str:
    """Monospace table: arms x {DSC, HD} against missing x {WT, TC, ET, AVG}.
    DSC is rendered as a percentage, HD in voxels."""
    by_key = {(r["arm"], r["missing_modality"], r["region"]): r for r in rows}
    regions = (*REGIONS, "AVG")
    header1 = f"{'':22s}"
    header2 = f"{'Method':22s}"
    for missing in MISSING_ORDER:
        header1 += f"| {('Missing ' + missing.token.upper()):^27s} "
        header2 += "| " + " ".join(f"{r:>6s}" for r in regions) + " "
    lines = [header1, header2, "-" * len(header2)]
    for arm in ARMS:
        for metric in ("dsc", "hd"):
            label = ARM_LABELS[arm] if metric == "dsc" else ""
            line = f"{label:16s} {metric.upper():>4s} "
            for missing in MISSING_ORDER:
                cells = []
                for region in regions:
                    row = by_key[(arm, missing.token, region)]
                    value = row[metric] * 100 if metric == "dsc" else row[metric]
                    cells.append(f"{value:6.1f}")
                line += "| " + " ".join(cells) + " "
            lines.append(line)
        lines.append("-" * len(header2))
    return "\n".join(lines) + "\n"


def mean_avg_dsc(rows: list[dict], arm: str) -> float:
    """Mean of the AVG-region DSC across the four missing scenarios."""
    values = [
        r["dsc"] for r in rows if r["arm"] == arm and r["region"] == "AVG"
    ]
    if len(values) != 4:
        raise ValueError(f"expected 4 AVG rows for arm {arm}, got {len(values)}")
    return float(np.mean(values))


def run_grid(
    data_root: Path,
    out_dir: Path,
    base: ExperimentConfig,
    seeds: list[int],
    train_frac: float = 0.8,
    workers: int = 1,
    log=None,
) -> dict[int, list[dict]]:
    """Full multi-seed grid; writes one report and one rendered table per seed
    and returns the rows keyed by seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    rows_by_seed = {}
    for seed in seeds:
        cells = grid_cells(base, seed)
        ensure_checkpoints(data_root, ckpt_dir, cells, train_frac, workers, log=log)
        rows = evaluate_grid(data_root, ckpt_dir, base, seed, train_frac)
        write_report(out_dir / f"ablation_seed{seed}.tsv", rows)
        (out_dir / f"ablation_seed{seed}.txt").write_text(render_table(rows), encoding="utf-8")
        rows_by_seed[seed] = rows
        if log:
            direct = mean_avg_dsc(rows, "direct")
            full = mean_avg_dsc(rows, "direct_cc_cg")
            log(
                f"seed {seed}: mean AVG-DSC direct={direct:.4f} "
                f"direct_cc_cg={full:.4f}"
            )
    return rows_by_seed
