"""Segmentation evaluation metrics: Dice overlap, Hausdorff distance on
boundary voxels, and the per-region report used by the experiment harness."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .volumes import LabelVolume, REGIONS


def dsc(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Dice similarity 2|A∩B| / (|A| + |B|); two empty masks count as 1.0."""
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(true_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    size_a = int(a.sum())
    size_b = int(b.sum())
    if size_a + size_b == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (size_a + size_b)


_CONN6 = generate_binary_structure(3, 1)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask voxels with a 6-neighbor outside the mask.

    Voxels beyond the array edge count as outside, so voxels of the mask that
    touch the volume border are boundary voxels.
    """
    mask = np.asarray(mask, dtype=bool)
    interior = binary_erosion(mask, structure=_CONN6, border_value=0)
    return np.argwhere(mask & ~interior)


def hausdorff(
    pred_mask: np.ndarray, true_mask: np.ndarray, percentile: float = 100.0
) -> float:
    """Symmetric Hausdorff distance between boundary voxels, in voxel units.

    `percentile` < 100 gives the robust variant (e.g. 95); the default is the
    full maximum. Conventions: both masks empty -> 0.0; exactly one empty ->
    the volume diagonal as a sentinel.
    """
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(true_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    empty_a = not a.any()
    empty_b = not b.any()
    if empty_a and empty_b:
        return 0.0
    if empty_a or empty_b:
        return float(np.linalg.norm(a.shape))
    pts_a = boundary_voxels(a).astype(np.float64)
    pts_b = boundary_voxels(b).astype(np.float64)
    d_ab, _ = cKDTree(pts_b).query(pts_a)
    d_ba, _ = cKDTree(pts_a).query(pts_b)
    if percentile >= 100.0:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


def region_metrics(
    pred_classes: LabelVolume, true_classes: LabelVolume, percentile: float = 100.0
) -> dict[str, dict[str, float]]:
    """Per-region DSC and Hausdorff for WT/TC/ET plus their AVG row."""
    if pred_classes.shape != true_classes.shape:
        raise ValueError("prediction and truth shapes differ")
    out: dict[str, dict[str, float]] = {}
    for region in REGIONS:
        p = pred_classes.region_mask(region)
        t = true_classes.region_mask(region)
        out[region] = {"dsc": dsc(p, t), "hd": hausdorff(p, t, percentile=percentile)}
    out["AVG"] = {
        metric: float(np.mean([out[r][metric] for r in REGIONS]))
        for metric in ("dsc", "hd")
    }
    return out


# -- report serialization --------------------------------------------------

REPORT_COLUMNS = ("arm", "missing_modality", "region", "dsc", "hd")


def format_report(rows: list[dict]) -> str:
    """Tab-separated report with a header line; one row per region result."""
    lines = ["\t".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append(
            "\t".join(
                [
                    str(row["arm"]),
                    str(row["missing_modality"]),
                    str(row["region"]),
                    f"{row['dsc']:.6f}",
                    f"{row['hd']:.6f}",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def write_report(path: Path | str, rows: list[dict]) -> None:
    Path(path).write_text(format_report(rows), encoding="utf-8")


def read_report(path: Path | str) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split("\t")
    if tuple(header) != REPORT_COLUMNS:
        raise ValueError(f"unexpected report columns: {header}")
    rows = []
    for line in lines[1:]:
        arm, missing, region, d, h = line.split("\t")
        rows.append(
            {
                "arm": arm,
                "missing_modality": missing,
                "region": region,
                "dsc": float(d),
                "hd": float(h),
            }
        )
    return rows
