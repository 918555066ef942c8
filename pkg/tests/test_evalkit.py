import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import flood_fill_label, pairwise_auc, pro_auc_bruteforce
from rbae.evalkit import (
    DegenerateMetricWarning,
    UndefinedMetricError,
    integrate_capped,
    label_regions,
    pixel_roc_auc,
    pro_auc,
    records_to_json,
    report,
    roc_auc,
)

# ------------------------------------------------------------ ROC


def test_roc_hand_cases():
    assert roc_auc([1, 1, 0, 0], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0, 0, 1, 1], [1, 1, 0, 0]) == 0.0
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-12)


def test_roc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [0, 0])


def test_roc_matches_pairwise_oracle_on_random_instances():
    rng = np.random.default_rng(99)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.random(n) > 0.5
        labels[0], labels[1] = True, False
        # coarse grid forces plenty of ties
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, st.integers(4, 60), elements=st.integers(-40, 40)), st.data())
def test_roc_invariant_under_increasing_maps(steps, data):
    # a grid keeps distinct scores distinct after exp and affine maps in floating point
    scores = steps / 8.0
    labels = np.array(data.draw(st.lists(st.booleans(), min_size=len(steps), max_size=len(steps))))
    labels[0], labels[1] = True, False
    base = roc_auc(scores, labels)
    assert roc_auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
    assert roc_auc(3.0 * scores + 7.0, labels) == pytest.approx(base, abs=1e-12)


# ------------------------------------------------------------ pixel ROC


def test_pixel_map_equal_to_mask_is_perfect():
    masks = [np.zeros((8, 8)), np.zeros((8, 8))]
    masks[0][2:4, 2:5] = 1
    assert pixel_roc_auc([m.copy() for m in masks], masks) == 1.0


def test_pixel_constant_map_is_flagged_degenerate():
    mask = np.zeros((4, 4))
    mask[0, 0] = 1
    with pytest.warns(DegenerateMetricWarning):
        assert pixel_roc_auc([np.full((4, 4), 0.3)], [mask]) == 0.5


def test_pixel_two_image_toy_matches_oracle():
    maps = [
        np.array([[0.1, 0.2, 0.9], [0.3, 0.8, 0.2], [0.1, 0.1, 0.4]]),
        np.array([[0.5, 0.1, 0.1], [0.2, 0.7, 0.6], [0.3, 0.2, 0.2]]),
    ]
    masks = [
        np.array([[0, 0, 1], [0, 1, 0], [0, 0, 0]]),
        np.array([[0, 0, 0], [0, 1, 1], [0, 0, 0]]),
    ]
    expected = pairwise_auc(np.concatenate([m.ravel() for m in maps]), np.concatenate([m.ravel() for m in masks]))
    assert pixel_roc_auc(maps, masks) == pytest.approx(expected, abs=1e-12)


def test_pooled_and_per_image_differ():
    # each image is perfectly ranked on its own, but the score scales clash when pooled
    maps = [np.array([[0.9, 0.8]]), np.array([[0.2, 0.1]])]
    masks = [np.array([[1, 0]]), np.array([[1, 0]])]
    assert pixel_roc_auc(maps, masks, pooling="per-image") == 1.0
    assert pixel_roc_auc(maps, masks) == pytest.approx(pairwise_auc([0.9, 0.8, 0.2, 0.1], [1, 0, 1, 0]))
    assert pixel_roc_auc(maps, masks) < 1.0


def test_pixel_shape_errors():
    with pytest.raises(ValueError, match="shape"):
        pixel_roc_auc([np.zeros((2, 2))], [np.zeros((2, 3))])
    with pytest.raises(ValueError):
        pixel_roc_auc([np.zeros((2, 2))], [])
    with pytest.raises(ValueError, match="pooling"):
        pixel_roc_auc([np.eye(2)], [np.eye(2)], pooling="median")


# ------------------------------------------------------------ regions and PRO


@pytest.mark.parametrize("connectivity", [4, 8])
def test_labeling_matches_flood_fill(connectivity):
    rng = np.random.default_rng(connectivity)
    for _ in range(50):
        mask = rng.random((16, 16)) > rng.uniform(0.3, 0.8)
        ours, n = label_regions(mask, connectivity)
        ref, n_ref = flood_fill_label(mask, connectivity)
        assert n == n_ref
        # same partition up to label renaming
        pairs = set(zip(ours[mask].tolist(), ref[mask].tolist()))
        assert len(pairs) == n
        assert np.array_equal(ours == 0, ref == 0)


def test_pro_perfect_and_empty_predictions():
    mask = np.zeros((8, 8))
    mask[1:3, 1:3] = 1
    mask[5:7, 4:8] = 1
    assert pro_auc([mask.copy()], [mask]) == pytest.approx(1.0)
    assert pro_auc([np.zeros((8, 8))], [mask]) == 0.0


def test_pro_two_region_toy_matches_bruteforce():
    rng = np.random.default_rng(5)
    mask = np.zeros((8, 8))
    mask[1:3, 1:4] = 1
    mask[5:8, 5:7] = 1
    am = np.round(rng.random((8, 8)) * 0.6 + 0.4 * mask, 2)
    for cap in (0.05, 0.3, 1.0):
        assert pro_auc([am], [mask], fpr_cap=cap) == pytest.approx(pro_auc_bruteforce([am], [mask], cap), abs=1e-12)


def test_pro_random_instances_match_bruteforce_and_stay_bounded():
    rng = np.random.default_rng(11)
    for _ in range(25):
        maps, masks = [], []
        for _ in range(int(rng.integers(1, 4))):
            m = rng.random((10, 10)) > 0.8
            maps.append(np.round(rng.random((10, 10)) + 0.5 * m, 1))
            masks.append(m.astype(float))
        if not any(m.any() for m in masks):
            continue
        value = pro_auc(maps, masks)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(pro_auc_bruteforce(maps, masks), abs=1e-12)


def test_pro_without_regions_is_undefined():
    with pytest.raises(UndefinedMetricError, match="region"):
        pro_auc([np.random.default_rng(0).random((4, 4))], [np.zeros((4, 4))])


def test_capped_integration_interpolates_and_holds():
    fpr = np.array([0.0, 0.2, 0.6])
    pro = np.array([0.0, 1.0, 1.0])
    # area on [0, 0.3]: 0.1 (triangle) + 0.1 (rectangle)
    assert integrate_capped(fpr, pro, 0.3) == pytest.approx(0.2 / 0.3)
    assert integrate_capped(np.array([0.0, 0.1]), np.array([0.0, 0.5]), 0.3) == pytest.approx((0.025 + 0.1) / 0.3)
    with pytest.raises(ValueError):
        integrate_capped(fpr, pro, 0.0)


# ------------------------------------------------------------ report


def test_report_average_of_five_categories():
    values = [95.41, 99.37, 100.00, 99.44, 99.82]
    cats = ["carpet", "grid", "leather", "tile", "wood"]
    text, records = report({c: {"image_auroc": v / 100} for c, v in zip(cats, values)})
    assert records[-1]["category"] == "Average"
    assert round(100 * records[-1]["image_auroc"], 2) == 98.81
    assert "98.81" in text.splitlines()[-1]
    assert "Image ROCAUC" in text.splitlines()[0]


def test_report_single_category_and_json():
    text, records = report([{"category": "grid", "image_auroc": 0.9, "pixel_auroc": 0.8, "pro_auc": 0.7}])
    assert records[0]["pixel_auroc"] == records[1]["pixel_auroc"] == 0.8
    assert json.loads(records_to_json(records))[1]["pro_auc"] == 0.7
    assert "90.00" in text and "80.00" in text


def test_report_handles_missing_cells():
    _, records = report({"a": {"image_auroc": 0.5}, "b": {"image_auroc": 1.0, "pro_auc": 0.4}})
    assert records[-1]["pro_auc"] == 0.4


def test_report_requires_input():
    with pytest.raises(ValueError):
        report({})


def test_no_warning_for_ordinary_maps():
    rng = np.random.default_rng(0)
    mask = rng.random((8, 8)) > 0.7
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pixel_roc_auc([rng.random((8, 8))], [mask])
