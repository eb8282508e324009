"""Synthetic correlated multi-modal phantom volumes.

Each case carries four modality volumes whose intensities are affine mixes of
the same underlying tissue maps, so every modality is exactly recoverable from
the other three in the noise-free limit. Tumors are nested ellipsoids
(enhancing core inside tumor core inside whole tumor), which keeps the
evaluation regions non-degenerate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .volumes import Case, DataError, LabelVolume, MODALITIES, Volume, write_case

# Tissue axis order matches label class ids: background, necrotic, edema, enhancing.
_DEFAULT_MIXING = np.array(
    [
        [0.20, 0.70, 0.90, 0.50],  # T2: edema bright
        [0.40, 0.15, 0.30, 1.00],  # T1c: enhancing rim bright
        [0.25, 0.45, 1.00, 0.60],  # FLAIR: edema brightest
        [0.50, 0.20, 0.35, 0.45],  # T1: tumor dark
    ]
)

# Fractions of the parent region's semi-axes for the nested ellipsoids.
_TC_FRAC = (0.60, 0.80)
_ET_FRAC = (0.50, 0.70)


@dataclass(frozen=True)
class PhantomSpec:
    """Declarative description of a phantom dataset."""

    shape: tuple[int, int, int] = (32, 32, 32)
    n_cases: int = 10
    seed: int = 0
    tumor_radius_range: tuple[float, float] = (5.0, 9.0)
    modality_mixing: np.ndarray = field(default_factory=lambda: _DEFAULT_MIXING.copy())
    modality_offset: np.ndarray = field(default_factory=lambda: np.zeros(4))
    noise_std: float = 0.02

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise DataError(f"shape must be three positive integers, got {self.shape}")
        object.__setattr__(self, "shape", shape)
        if self.n_cases < 1:
            raise DataError("n_cases must be positive")
        rmin, rmax = self.tumor_radius_range
        if rmin > rmax:
            raise DataError(f"degenerate tumor_radius_range: {self.tumor_radius_range}")
        if rmin < 1.0:
            raise DataError("tumor radii must be at least 1 voxel")
        if 2 * rmax > min(shape) - 2:
            raise DataError(
                f"tumor radius {rmax} does not fit inside shape {shape}"
            )
        mixing = np.asarray(self.modality_mixing, dtype=np.float64)
        if mixing.shape != (4, 4):
            raise DataError(f"modality_mixing must be 4x4, got {mixing.shape}")
        if np.linalg.cond(mixing) >= 1e6:
            raise DataError("modality_mixing is not invertible (condition number >= 1e6)")
        offset = np.asarray(self.modality_offset, dtype=np.float64)
        if offset.shape != (4,):
            raise DataError(f"modality_offset must be a 4-vector, got {offset.shape}")
        if self.noise_std < 0:
            raise DataError("noise_std must be nonnegative")
        object.__setattr__(self, "modality_mixing", mixing)
        object.__setattr__(self, "modality_offset", offset)


def _case_rng(spec: PhantomSpec, index: int) -> np.random.Generator:
    # Keyed by (seed, index): case generation is order-independent.
    return np.random.default_rng((spec.seed & 0xFFFFFFFFFFFFFFFF, index))


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    dist2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return dist2 <= 1.0


def generate_case(spec: PhantomSpec, index: int) -> Case:
    """Generate one deterministic phantom case, keyed by (spec.seed, index)."""
    if not 0 <= index < spec.n_cases:
        raise ValueError(f"index {index} outside [0, {spec.n_cases})")
    rng = _case_rng(spec, index)
    shape = spec.shape

    radii_wt = rng.uniform(*spec.tumor_radius_range, size=3)
    radii_tc = radii_wt * rng.uniform(*_TC_FRAC)
    radii_et = radii_tc * rng.uniform(*_ET_FRAC)
    center = np.array(
        [rng.uniform(r, s - 1 - r) for r, s in zip(radii_wt, shape)]
    )

    wt = _ellipsoid_mask(shape, center, radii_wt)
    tc = _ellipsoid_mask(shape, center, radii_tc)
    et = _ellipsoid_mask(shape, center, radii_et)

    labels = np.zeros(shape, dtype=np.uint8)
    labels[wt] = 2  # edema
    labels[tc] = 1  # necrotic / non-enhancing core
    labels[et] = 3  # enhancing

    tissue = np.stack([(labels == k).astype(np.float64) for k in range(4)])
    modalities = {}
    for m in MODALITIES:
        row = spec.modality_mixing[m.condition_index]
        intensity = np.tensordot(row, tissue, axes=1) + spec.modality_offset[
            m.condition_index
        ]
        if spec.noise_std > 0:
            intensity = intensity + rng.normal(0.0, spec.noise_std, size=shape)
        modalities[m] = Volume(intensity.astype(np.float32))

    return Case(case_id=f"case{index:04d}", modalities=modalities, labels=LabelVolume(labels))


def generate_dataset(spec: PhantomSpec) -> list[Case]:
    return [generate_case(spec, i) for i in range(spec.n_cases)]


def split_dataset(
    cases: Sequence[Case], train_frac: float, seed: int, val_frac: float = 0.1
) -> tuple[list[Case], list[Case], list[Case]]:
    """Deterministic, disjoint, exhaustive train/val/test split.

    The test share is `1 - train_frac` of the whole set; the validation set is
    carved from the training share as `max(1, floor(val_frac * share))` cases,
    so the schedule callbacks always have at least one validation case.
    """
    if not 0 < train_frac < 1:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    n = len(cases)
    if n < 3:
        raise ValueError(f"need at least 3 cases to split, got {n}")
    order = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF).permutation(n)
    share = int(np.floor(n * train_frac))
    share = min(max(share, 2), n - 1)
    n_val = max(1, int(np.floor(share * val_frac)))
    train_idx = order[: share - n_val]
    val_idx = order[share - n_val : share]
    test_idx = order[share:]
    pick = lambda idx: [cases[i] for i in idx]
    return pick(train_idx), pick(val_idx), pick(test_idx)


def write_dataset(spec: PhantomSpec, root: Path | str) -> list[str]:
    """Generate the whole dataset under `root` plus a manifest of case ids."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    case_ids = []
    for i in range(spec.n_cases):
        case = generate_case(spec, i)
        write_case(case, root)
        case_ids.append(case.case_id)
    (root / "manifest.txt").write_text("".join(f"{c}\n" for c in case_ids), encoding="utf-8")
    return case_ids


def read_dataset(root: Path | str) -> list[Case]:
    """Read every case listed in `root/manifest.txt`."""
    from .volumes import read_case

    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"{manifest}: dataset manifest not found")
    case_ids = [line.strip() for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not case_ids:
        raise DataError(f"{manifest}: dataset manifest is empty")
    return [read_case(root / cid) for cid in case_ids]
