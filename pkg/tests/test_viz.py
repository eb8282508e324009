import numpy as np
import torch

from corrseg.blocks import BlockConfig
from corrseg.phantom import PhantomSpec, generate_case
from corrseg.segnet import SegmentationModel
from corrseg.viz import (
    CLASS_COLORS,
    bottleneck_features,
    class_slice_to_rgb,
    feature_mosaic,
    segmentation_panels,
)
from corrseg.volumes import MODALITIES, Modality


def _case():
    spec = PhantomSpec(shape=(8, 8, 8), n_cases=1, seed=5, tumor_radius_range=(2.0, 3.0))
    return generate_case(spec, 0)


def test_color_convention():
    assert CLASS_COLORS[1] == (0, 0, 255)  # necrotic / non-enhancing: blue
    assert CLASS_COLORS[2] == (255, 255, 0)  # edema: yellow
    assert CLASS_COLORS[3] == (255, 0, 0)  # enhancing: red


def test_class_slice_colors_applied():
    classes = np.array([[0, 1], [2, 3]], dtype=np.uint8)
    rgb = class_slice_to_rgb(classes)
    assert tuple(rgb[0, 1]) == (0, 0, 255)
    assert tuple(rgb[1, 0]) == (255, 255, 0)
    assert tuple(rgb[1, 1]) == (255, 0, 0)
    assert tuple(rgb[0, 0]) == (0, 0, 0)


def test_perfect_prediction_panel_identical_to_truth(tmp_path):
    case = _case()
    written = segmentation_panels(case, {"model": case.labels}, [4], tmp_path)
    truth = (tmp_path / "slice004_truth.png").read_bytes()
    pred = (tmp_path / "slice004_model.png").read_bytes()
    assert truth == pred
    assert len(written) == 2


def test_panel_file_count(tmp_path):
    case = _case()
    preds = {"a": case.labels, "b": case.labels, "c": case.labels}
    written = segmentation_panels(case, preds, [2, 4, 6], tmp_path)
    assert len(written) == 3 * (3 + 1)


def test_feature_mosaic_tiles_channels():
    feature = np.random.default_rng(0).normal(size=(5, 4, 4, 4))
    mosaic = feature_mosaic(feature)
    assert mosaic.shape == (8, 12)  # 2 rows x 3 cols of 4x4 tiles
    assert mosaic.dtype == np.uint8


def test_bottleneck_features_per_modality():
    torch.manual_seed(0)
    case = _case()
    model = SegmentationModel(
        BlockConfig(base_filters=2, depth=2, dilation_rates=(1, 2)), (8, 8, 8), num_branches=3
    )
    feats = bottleneck_features(model, "direct", case, Modality.T2)
    assert set(feats) == {m for m in MODALITIES if m is not Modality.T2}
    for f in feats.values():
        assert f.shape == (4, 4, 4, 4)
