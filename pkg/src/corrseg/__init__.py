"""Missing-modality brain tumor segmentation with a conditional generator and
cross-modality correlation constraints, trained on synthetic phantom volumes."""

from .volumes import (
    Case,
    DataError,
    LabelVolume,
    MODALITIES,
    Modality,
    Volume,
    bias_correct,
    crop_resize,
    normalize_intensity,
    read_case,
    write_case,
)
from .phantom import PhantomSpec, generate_case, generate_dataset, split_dataset

__all__ = [
    "Case",
    "DataError",
    "LabelVolume",
    "MODALITIES",
    "Modality",
    "PhantomSpec",
    "Volume",
    "bias_correct",
    "crop_resize",
    "generate_case",
    "generate_dataset",
    "normalize_intensity",
    "read_case",
    "split_dataset",
    "write_case",
]
