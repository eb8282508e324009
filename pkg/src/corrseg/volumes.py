"""Multi-modal volume data model, preprocessing, and the raw+header file format."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent volume data, on disk or in memory."""


class Modality(Enum):
    """One MR contrast. The enum value is the condition index used everywhere
    a modality has to be encoded as an integer (embedding rows, CLI tokens)."""

    T2 = 0
    T1C = 1
    FLAIR = 2
    T1 = 3

    @property
    def condition_index(self) -> int:
        return self.value

    @property
    def token(self) -> str:
        """Lowercase file/CLI token, e.g. 't1c'."""
        return self.name.lower()

    @classmethod
    def from_token(cls, token: str) -> "Modality":
        for m in cls:
            if m.token == token.lower():
                return m
        raise DataError(f"unknown modality token: {token!r}")

    @classmethod
    def from_condition_index(cls, index: int) -> "Modality":
        return cls(index)


#: All modalities in condition-index order (T2, T1C, FLAIR, T1).
MODALITIES: tuple[Modality, ...] = tuple(sorted(Modality, key=lambda m: m.value))

#: Foreground class ids: 1 = necrotic/non-enhancing core, 2 = edema, 3 = enhancing.
NUM_CLASSES = 4

#: Evaluation regions as unions of class ids (nested: ET within TC within WT).
REGION_CLASSES = {"WT": (1, 2, 3), "TC": (1, 3), "ET": (3,)}
REGIONS = ("WT", "TC", "ET")


def _as_volume_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 3:
        raise DataError(f"expected a 3D array, got ndim={arr.ndim}")
    if min(arr.shape) < 1:
        raise DataError(f"all shape components must be >= 1, got {arr.shape}")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """A single-modality 3D scalar field, float32, immutable, finite."""

    data: np.ndarray

    def __init__(self, data):
        arr = _as_volume_array(data, np.float32)
        if not np.all(np.isfinite(arr)):
            raise DataError("volume contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        return isinstance(other, Volume) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """A 3D map of class ids in {0: background, 1: necrotic, 2: edema, 3: enhancing}."""

    data: np.ndarray

    def __init__(self, data):
        arr = np.asarray(data)
        if not np.all(np.isin(arr, (0, 1, 2, 3))):
            bad = np.unique(arr[~np.isin(arr, (0, 1, 2, 3))])
            raise DataError(f"label volume contains invalid class ids: {bad}")
        object.__setattr__(self, "data", _as_volume_array(arr, np.uint8))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelVolume) and np.array_equal(self.data, other.data)

    def region_mask(self, region: str) -> np.ndarray:
        """Boolean mask for one of the nested regions 'WT', 'TC', 'ET'."""
        return np.isin(self.data, REGION_CLASSES[region])


@dataclass(frozen=True)
class Case:
    """A bundle of 1-4 modality volumes plus the label volume, all one shape."""

    case_id: str
    modalities: dict[Modality, Volume]
    labels: LabelVolume

    def __post_init__(self):
        if not 1 <= len(self.modalities) <= 4:
            raise DataError(f"case needs 1-4 modalities, got {len(self.modalities)}")
        shape = self.labels.shape
        for m, v in self.modalities.items():
            if v.shape != shape:
                raise DataError(
                    f"{m.token} shape {v.shape} does not match labels {shape}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


def normalize_intensity(v: Volume) -> Volume:
    """Shift/scale to zero mean and unit variance over all voxels.

    A constant volume (zero variance) maps to all zeros.
    """
    data = v.data.astype(np.float64)
    mean = data.mean()
    std = data.std()
    if std < 1e-12:
        return Volume(np.zeros(v.shape, dtype=np.float32))
    return Volume(((data - mean) / std).astype(np.float32))


def _resample_coords(src: int, dst: int) -> np.ndarray:
    # Endpoint-aligned sampling: identity when src == dst.
    if dst == 1:
        return np.array([(src - 1) / 2.0])
    return np.arange(dst) * ((src - 1) / (dst - 1))


def _trilinear_resample(data: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    values = data.astype(np.float64)
    lows, highs, fracs = [], [], []
    for axis in range(3):
        c = _resample_coords(data.shape[axis], target[axis])
        i0 = np.floor(c).astype(np.intp)
        i0 = np.clip(i0, 0, data.shape[axis] - 1)
        i1 = np.minimum(i0 + 1, data.shape[axis] - 1)
        lows.append(i0)
        highs.append(i1)
        fracs.append(c - i0)
    out = np.zeros(target, dtype=np.float64)
    for bd in (0, 1):
        for bh in (0, 1):
            for bw in (0, 1):
                idx_d = (highs if bd else lows)[0]
                idx_h = (highs if bh else lows)[1]
                idx_w = (highs if bw else lows)[2]
                w_d = fracs[0] if bd else 1.0 - fracs[0]
                w_h = fracs[1] if bh else 1.0 - fracs[1]
                w_w = fracs[2] if bw else 1.0 - fracs[2]
                weight = (
                    w_d[:, None, None] * w_h[None, :, None] * w_w[None, None, :]
                )
                out += weight * values[np.ix_(idx_d, idx_h, idx_w)]
    return out


def crop_resize(v: Volume, target: tuple[int, int, int]) -> Volume:
    """Center-crop to the largest sub-box with the target aspect ratio, then
    resample trilinearly to the target shape. Identity when target == shape."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise DataError(f"target shape must be three positive integers, got {target}")
    src = v.shape
    k = min(s / t for s, t in zip(src, target))
    crop = tuple(max(1, int(np.floor(k * t))) for t in target)
    start = tuple((s - c) // 2 for s, c in zip(src, crop))
    sub = v.data[
        start[0] : start[0] + crop[0],
        start[1] : start[1] + crop[1],
        start[2] : start[2] + crop[2],
    ]
    if sub.shape == target:
        return Volume(sub)
    return Volume(_trilinear_resample(sub, target).astype(np.float32))


def bias_correct(v: Volume, corrector: Callable[[Volume], Volume] | None = None) -> Volume:
    """Bias-field correction hook. The default is the identity transform;
    real-data pipelines can pass an external corrector callable."""
    if corrector is None:
        return v
    return corrector(v)


# ---------------------------------------------------------------------------
# On-disk format: per volume a text header `<stem>.hdr` with `key: value`
# lines (shape, dtype, modality) and a raw `<stem>.raw` of little-endian
# float32 in row-major (D, H, W) order. Labels are float-encoded class ids.
# ---------------------------------------------------------------------------

_LABEL_TOKEN = "labels"


def _write_pair(directory: Path, stem: str, token: str, data: np.ndarray) -> None:
    shape_txt = " ".join(str(s) for s in data.shape)
    header = f"shape: {shape_txt}\ndtype: f32le\nmodality: {token}\n"
    (directory / f"{stem}.hdr").write_text(header, encoding="utf-8")
    (directory / f"{stem}.raw").write_bytes(
        np.ascontiguousarray(data, dtype="<f4").tobytes()
    )


def _read_pair(header_path: Path) -> tuple[str, np.ndarray]:
    fields = {}
    for line in header_path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    for required in ("shape", "dtype", "modality"):
        if required not in fields:
            raise DataError(f"{header_path}: missing header key {required!r}")
    if fields["dtype"] != "f32le":
        raise DataError(f"{header_path}: unsupported dtype {fields['dtype']!r}")
    try:
        shape = tuple(int(s) for s in fields["shape"].split())
    except ValueError:
        raise DataError(f"{header_path}: malformed shape {fields['shape']!r}")
    if len(shape) != 3 or min(shape) < 1:
        raise DataError(f"{header_path}: shape must be three positive ints, got {shape}")
    raw_path = header_path.with_suffix(".raw")
    if not raw_path.exists():
        raise DataError(f"{raw_path}: missing raw payload")
    payload = raw_path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise DataError(
            f"{raw_path}: payload has {len(payload)} bytes, header shape needs {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{raw_path}: payload contains non-finite values")
    return fields["modality"], data


def write_case(case: Case, root: Path | str) -> Path:
    """Write a case under `root/<case_id>/` and return the case directory."""
    case_dir = Path(root) / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    for modality, volume in case.modalities.items():
        _write_pair(case_dir, modality.token, modality.token, volume.data)
    _write_pair(case_dir, _LABEL_TOKEN, _LABEL_TOKEN, case.labels.data.astype(np.float32))
    return case_dir


def read_case(
    case_dir: Path | str,
    reader: Callable[[Path], tuple[str, np.ndarray]] | None = None,
) -> Case:
    """Read a case directory written by `write_case`.

    `reader` is the adapter point for other storage formats: it receives each
    header path and must return `(modality_token, float_array)`. The default
    reads the native header+raw pair.
    """
    case_dir = Path(case_dir)
    reader = reader or _read_pair
    headers = sorted(case_dir.glob("*.hdr"))
    if not headers:
        raise DataError(f"{case_dir}: no volume headers found")
    modalities: dict[Modality, Volume] = {}
    labels: LabelVolume | None = None
    for header_path in headers:
        token, data = reader(header_path)
        if token == _LABEL_TOKEN:
            ids = np.rint(data)
            if not np.array_equal(ids, data):
                raise DataError(f"{header_path}: label payload is not integer-valued")
            labels = LabelVolume(ids.astype(np.uint8))
        else:
            modalities[Modality.from_token(token)] = Volume(data)
    if labels is None:
        raise DataError(f"{case_dir}: no label volume found")
    return Case(case_id=case_dir.name, modalities=modalities, labels=labels)
