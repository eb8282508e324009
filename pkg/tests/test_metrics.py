import numpy as np
import pytest

from corrseg.metrics import (
    boundary_voxels,
    dsc,
    format_report,
    hausdorff,
    read_report,
    region_metrics,
    write_report,
)
from corrseg.volumes import LabelVolume


# -- independent oracles ------------------------------------------------------


def _dsc_oracle(a, b):
    """Set-counting Dice, coded without array intersections."""
    set_a = {tuple(p) for p in np.argwhere(a)}
    set_b = {tuple(p) for p in np.argwhere(b)}
    if not set_a and not set_b:
        return 1.0
    return 2.0 * len(set_a & set_b) / (len(set_a) + len(set_b))


def _boundary_oracle(mask):
    pts = []
    shape = mask.shape
    for i in range(shape[0]):
        for j in range(shape[1]):
            for k in range(shape[2]):
                if not mask[i, j, k]:
                    continue
                for di, dj, dk in (
                    (1, 0, 0), (-1, 0, 0), (0, 1, 0),
                    (0, -1, 0), (0, 0, 1), (0, 0, -1),
                ):
                    ni, nj, nk = i + di, j + dj, k + dk
                    outside = not (
                        0 <= ni < shape[0] and 0 <= nj < shape[1] and 0 <= nk < shape[2]
                    )
                    if outside or not mask[ni, nj, nk]:
                        pts.append((i, j, k))
                        break
    return pts


def _hausdorff_oracle(a, b):
    """All-pairs O(n^2) Hausdorff over independently extracted boundaries."""
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return float(np.linalg.norm(a.shape))
    pa = _boundary_oracle(a)
    pb = _boundary_oracle(b)
    dist = lambda p, q: sum((x - y) ** 2 for x, y in zip(p, q)) ** 0.5
    d_ab = max(min(dist(p, q) for q in pb) for p in pa)
    d_ba = max(min(dist(p, q) for q in pa) for p in pb)
    return max(d_ab, d_ba)


def _random_mask(rng, shape=(8, 8, 8), p=0.15):
    return rng.random(shape) < p


# -- dsc -----------------------------------------------------------------------


def test_dsc_identical_nonempty():
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[1:3, 1:3, 1] = True
    assert dsc(mask, mask) == 1.0


def test_dsc_half_overlap():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros((4, 4, 4), dtype=bool)
    a[0, 0, :4] = True
    b[0, 0, 2:4] = True
    b[0, 1, :2] = True
    assert a.sum() == 4 and b.sum() == 4 and (a & b).sum() == 2
    assert dsc(a, b) == 0.5


def test_dsc_both_empty():
    empty = np.zeros((3, 3, 3), dtype=bool)
    assert dsc(empty, empty) == 1.0


def test_dsc_matches_set_oracle():
    rng = np.random.default_rng(17)
    for _ in range(50):
        a = _random_mask(rng)
        b = _random_mask(rng)
        assert dsc(a, b) == _dsc_oracle(a, b)


def test_dsc_symmetry():
    rng = np.random.default_rng(23)
    for _ in range(20):
        a = _random_mask(rng)
        b = _random_mask(rng)
        assert dsc(a, b) == dsc(b, a)


def test_dsc_shape_mismatch():
    with pytest.raises(ValueError):
        dsc(np.zeros((2, 2, 2), dtype=bool), np.zeros((2, 2, 3), dtype=bool))


# -- hausdorff -------------------------------------------------------------------


def test_hausdorff_identical():
    rng = np.random.default_rng(3)
    mask = _random_mask(rng)
    mask[4, 4, 4] = True
    assert hausdorff(mask, mask) == 0.0


def test_hausdorff_three_four_five():
    a = np.zeros((8, 8, 8), dtype=bool)
    b = np.zeros((8, 8, 8), dtype=bool)
    a[0, 0, 0] = True
    b[0, 3, 4] = True
    assert hausdorff(a, b) == 5.0


def test_hausdorff_empty_conventions():
    empty = np.zeros((3, 4, 5), dtype=bool)
    one = empty.copy()
    one[1, 1, 1] = True
    assert hausdorff(empty, empty) == 0.0
    assert hausdorff(one, empty) == pytest.approx(np.linalg.norm((3, 4, 5)))
    assert hausdorff(empty, one) == pytest.approx(np.linalg.norm((3, 4, 5)))


def test_boundary_includes_volume_edge():
    mask = np.ones((3, 3, 3), dtype=bool)
    pts = {tuple(p) for p in boundary_voxels(mask)}
    assert (0, 0, 0) in pts
    assert (1, 1, 1) not in pts


def test_hausdorff_matches_brute_force():
    rng = np.random.default_rng(31)
    for _ in range(25):
        a = _random_mask(rng, shape=(6, 6, 6), p=0.2)
        b = _random_mask(rng, shape=(6, 6, 6), p=0.2)
        assert hausdorff(a, b) == pytest.approx(_hausdorff_oracle(a, b), abs=1e-12)


def test_hausdorff_symmetry_and_triangle():
    rng = np.random.default_rng(41)
    for _ in range(10):
        a = _random_mask(rng, shape=(6, 6, 6), p=0.25)
        b = _random_mask(rng, shape=(6, 6, 6), p=0.25)
        c = _random_mask(rng, shape=(6, 6, 6), p=0.25)
        if not (a.any() and b.any() and c.any()):
            continue
        assert hausdorff(a, b) == hausdorff(b, a)
        assert hausdorff(a, c) <= hausdorff(a, b) + hausdorff(b, c) + 1e-9


def test_hausdorff_percentile_mode():
    rng = np.random.default_rng(5)
    a = _random_mask(rng, p=0.3)
    b = _random_mask(rng, p=0.3)
    assert hausdorff(a, b, percentile=95.0) <= hausdorff(a, b)


# -- region metrics -----------------------------------------------------------


def test_region_metrics_perfect():
    rng = np.random.default_rng(7)
    labels = LabelVolume(rng.integers(0, 4, size=(8, 8, 8)))
    result = region_metrics(labels, labels)
    for region in ("WT", "TC", "ET", "AVG"):
        assert result[region]["dsc"] == 1.0
        assert result[region]["hd"] == 0.0


def test_region_metrics_et_relabeled_as_edema():
    rng = np.random.default_rng(9)
    data = rng.integers(0, 4, size=(8, 8, 8))
    truth = LabelVolume(data)
    relabeled = data.copy()
    relabeled[relabeled == 3] = 2
    pred = LabelVolume(relabeled)
    result = region_metrics(pred, truth)
    assert result["ET"]["dsc"] == 0.0
    assert result["WT"]["dsc"] == 1.0


def test_region_metrics_matches_independent_masking():
    rng = np.random.default_rng(13)
    pred = LabelVolume(rng.integers(0, 4, size=(8, 8, 8)))
    truth = LabelVolume(rng.integers(0, 4, size=(8, 8, 8)))
    result = region_metrics(pred, truth)
    unions = {"WT": (1, 2, 3), "TC": (1, 3), "ET": (3,)}
    for region, classes in unions.items():
        p = np.isin(pred.data, classes)
        t = np.isin(truth.data, classes)
        assert result[region]["dsc"] == pytest.approx(_dsc_oracle(p, t))
        assert result[region]["hd"] == pytest.approx(_hausdorff_oracle(p, t))
    for metric in ("dsc", "hd"):
        avg = np.mean([result[r][metric] for r in ("WT", "TC", "ET")])
        assert result["AVG"][metric] == pytest.approx(avg, abs=1e-6)


def test_report_roundtrip(tmp_path):
    rows = [
        {"arm": "direct", "missing_modality": "t2", "region": "WT", "dsc": 0.9, "hd": 2.0},
        {"arm": "direct", "missing_modality": "t2", "region": "AVG", "dsc": 0.8, "hd": 3.5},
    ]
    path = tmp_path / "report.tsv"
    write_report(path, rows)
    loaded = read_report(path)
    assert loaded[0]["arm"] == "direct"
    assert loaded[1]["dsc"] == pytest.approx(0.8)
    assert format_report(rows).splitlines()[0] == "arm\tmissing_modality\tregion\tdsc\thd"
