"""Qualitative outputs: colored segmentation slice panels (ground truth next
to per-arm predictions) and bottleneck feature-map mosaics per modality."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .segnet import GeneratorSegmentationModel
from .training import batch_tensors
from .volumes import Case, LabelVolume, Modality

# Class color convention: necrotic/non-enhancing in blue, edema in yellow,
# enhancing tumor in red; background shows the underlay.
CLASS_COLORS = {
    1: (0, 0, 255),
    2: (255, 255, 0),
    3: (255, 0, 0),
}


def _to_grayscale(slice_2d: np.ndarray) -> np.ndarray:
    lo = float(slice_2d.min())
    hi = float(slice_2d.max())
    if hi - lo < 1e-12:
        return np.zeros(slice_2d.shape, dtype=np.uint8)
    return ((slice_2d - lo) / (hi - lo) * 255).astype(np.uint8)


def class_slice_to_rgb(class_slice: np.ndarray, underlay: np.ndarray | None = None) -> np.ndarray:
    """RGB render of one axial class-id slice; tumor classes paint opaque
    colors over the (optional) grayscale underlay."""
    h, w = class_slice.shape
    if underlay is None:
        rgb = np.zeros((h, w, 3), dtype=np.uint8)
    else:
        gray = _to_grayscale(underlay)
        rgb = np.stack([gray] * 3, axis=-1)
    for class_id, color in CLASS_COLORS.items():
        rgb[class_slice == class_id] = color
    return rgb


def save_png(array: np.ndarray, path: Path | str) -> None:
    Image.fromarray(array).save(Path(path))


def segmentation_panels(
    case: Case,
    predictions: dict[str, LabelVolume],
    slices: list[int],
    out_dir: Path | str,
    underlay: Modality | None = None,
) -> list[Path]:
    """Write one PNG per slice for the ground truth and for each arm's
    prediction; identical class maps produce pixel-identical panels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if underlay is None:
        underlay = sorted(case.modalities, key=lambda m: m.condition_index)[0]
    base = case.modalities[underlay].data
    written = []
    for z in slices:
        if not 0 <= z < case.shape[0]:
            raise ValueError(f"slice {z} outside volume depth {case.shape[0]}")
        panels = {"truth": case.labels, **predictions}
        for name, labels in panels.items():
            rgb = class_slice_to_rgb(labels.data[z], base[z])
            path = out_dir / f"slice{z:03d}_{name}.png"
            save_png(rgb, path)
            written.append(path)
    return written


def bottleneck_features(model, mode: str, case: Case, missing: Modality) -> dict[Modality, np.ndarray]:
    """Per-modality bottleneck feature maps [C, d, h, w] for one case."""
    vols, _ = batch_tensors([case])
    with torch.no_grad():
        if isinstance(model, GeneratorSegmentationModel):
            available = {m: v for m, v in vols.items() if m is not missing}
            generated = model.generate(available, missing)
            _, features, _ = model.forward_parts(available, generated, missing)
        elif mode == "replace":
            from .training import REPLACEMENT_PARTNER

            inputs = dict(vols)
            inputs[missing] = vols[REPLACEMENT_PARTNER[missing]]
            towers = model.encode(inputs)
            features = {m: t[-1] for m, t in towers.items()}
        else:
            available = {m: v for m, v in vols.items() if m is not missing}
            towers = model.encode(available)
            features = {m: t[-1] for m, t in towers.items()}
    return {m: f[0].numpy() for m, f in features.items()}


def feature_mosaic(feature: np.ndarray, z: int | None = None) -> np.ndarray:
    """Tile the channels of one [C, d, h, w] feature block into a grayscale
    mosaic at one axial slice."""
    c, d, h, w = feature.shape
    if z is None:
        z = d // 2
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    mosaic = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for i in range(c):
        r, q = divmod(i, cols)
        mosaic[r * h : (r + 1) * h, q * w : (q + 1) * w] = _to_grayscale(feature[i, z])
    return mosaic


def feature_mosaics(
    model, mode: str, case: Case, missing: Modality, out_dir: Path | str, arm: str
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for m, feature in bottleneck_features(model, mode, case, missing).items():
        path = out_dir / f"features_{arm}_{m.token}.png"
        save_png(feature_mosaic(feature), path)
        written.append(path)
    return written
