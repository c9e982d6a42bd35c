import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msbdet import tensor_core as tc
from msbdet.detection_head import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    AnchorLayout,
    BoundingBox,
    Detection,
    DetectionHead,
    assign_targets,
    cell_anchors,
    decode_box,
    detection_loss,
    encode_box,
    generate_anchors,
    init_head_params,
    iou,
    iou_matrix,
    nms,
    nms_detections,
    sample_anchors,
)
from msbdet.errors import ConfigError
from msbdet.gradcheck import check_detection_loss, check_head
from oracles import assign_labels, box_iou, greedy_nms
from scenes import micro_scene, random_boxes


# -- types ---------------------------------------------------------------------


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        BoundingBox(1, 0, 1, 5)


@pytest.mark.parametrize("score", [-0.1, 1.5, float("nan")])
def test_detection_score_validated(score):
    with pytest.raises(ValueError):
        Detection(BoundingBox(0, 0, 1, 1), score)


def test_per_level_layout_needs_one_scale_per_level():
    with pytest.raises(ConfigError):
        AnchorLayout().anchors_per_cell(4)
    assert AnchorLayout().anchors_per_cell(5) == 3
    assert AnchorLayout(assignment="all").anchors_per_cell(4) == 15


# -- anchors ---------------------------------------------------------------------


def test_scale_8_square_anchor_at_first_cell():
    (a,) = generate_anchors(AnchorLayout(scales=(8,), ratios=(1.0,)), [(2, 2)], [4])
    np.testing.assert_array_equal(a[0], [-2, -2, 6, 6])


def test_ratio_one_to_two_preserves_area():
    (box,) = cell_anchors([16], [0.5])
    w, h = box[2] - box[0], box[3] - box[1]
    assert w == pytest.approx(16 / math.sqrt(2)) and w == pytest.approx(11.31, abs=5e-3)
    assert h == pytest.approx(16 * math.sqrt(2)) and h == pytest.approx(22.63, abs=5e-3)
    assert w * h == pytest.approx(256)


def test_four_by_four_level_three_ratios_one_scale():
    (a,) = generate_anchors(AnchorLayout(scales=(16,)), [(4, 4)], [8])
    assert a.shape == (48, 4)


def test_anchor_count_sums_over_levels():
    shapes, strides = [(8, 8), (4, 4), (2, 2)], [4, 8, 16]
    per_level = generate_anchors(AnchorLayout(scales=(8, 16, 32)), shapes, strides)
    assert sum(len(a) for a in per_level) == (64 + 16 + 4) * 3
    every = generate_anchors(AnchorLayout(scales=(8, 16, 32), assignment="all"), shapes, strides)
    assert sum(len(a) for a in every) == (64 + 16 + 4) * 9


def test_anchor_centres_follow_cell_grid():
    (a,) = generate_anchors(AnchorLayout(scales=(8,)), [(3, 5)], [16])
    centres = ((a[:, :2] + a[:, 2:]) / 2).reshape(3, 5, 3, 2)
    for y in range(3):
        for x in range(5):
            np.testing.assert_allclose(centres[y, x], [[(x + 0.5) * 16, (y + 0.5) * 16]] * 3)


# -- IoU and box coding -------------------------------------------------------


def test_iou_examples():
    assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0
    assert iou([0, 0, 10, 10], [5, 5, 15, 15]) == pytest.approx(1 / 7, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_iou_matrix_properties(seed):
    rng = np.random.default_rng(seed)
    a, b = random_boxes(rng, 6), random_boxes(rng, 5)
    m = iou_matrix(a, b)
    np.testing.assert_array_equal(m, iou_matrix(b, a).T)
    assert np.all((m >= 0) & (m <= 1))
    np.testing.assert_allclose(np.diag(iou_matrix(a, a)), 1.0)
    ref = np.array([[box_iou(p, q) for q in b] for p in a])
    np.testing.assert_array_equal(m, ref)


def test_encode_examples():
    np.testing.assert_array_equal(encode_box([0, 0, 10, 10], [0, 0, 10, 10]), [0, 0, 0, 0])
    np.testing.assert_allclose(encode_box([0, 0, 10, 10], [0, 0, 20, 20]), [0.5, 0.5, math.log(2), math.log(2)])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_encode_decode_round_trip(seed):
    rng = np.random.default_rng(seed)
    anchors = random_boxes(rng, 20, max_side=64) + rng.uniform(0, 1, size=(20, 4)) * [0, 0, 1, 1]
    targets = random_boxes(rng, 20, max_side=64)
    np.testing.assert_allclose(decode_box(anchors, encode_box(anchors, targets)), targets, rtol=0, atol=1e-9)


def test_decode_clamps_to_image_and_caps_growth():
    out = decode_box([0, 0, 10, 10], [-3.0, 0.0, 50.0, 0.0], image_size=(64, 48))
    assert out[0] == 0 and out[2] <= 48
    unclamped = decode_box([0, 0, 10, 10], [0.0, 0.0, 50.0, 0.0])
    assert np.isfinite(unclamped).all() and unclamped[2] - unclamped[0] == pytest.approx(10 * 1000 / 16)


# -- assignment ----------------------------------------------------------------


def test_no_ground_truth_all_negative():
    asg = assign_targets(random_boxes(np.random.default_rng(0), 10), np.zeros((0, 4)))
    assert np.all(asg.labels == NEGATIVE)


def test_exact_match_is_positive():
    anchors = np.array([[0, 0, 10, 10], [20, 20, 30, 30], [5, 5, 15, 15]], dtype=float)
    asg = assign_targets(anchors, anchors[1:2])
    assert asg.labels[1] == POSITIVE and asg.max_iou[1] == 1.0 and asg.matched[1] == 0


def test_best_anchor_forced_positive_below_threshold():
    anchors = np.array([[0, 0, 10, 10], [40, 40, 50, 50]], dtype=float)
    asg = assign_targets(anchors, [[5, 5, 15, 15]])
    assert asg.labels.tolist() == [POSITIVE, NEGATIVE]


def test_ignore_band():
    anchors = np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]])
    gt = [[0, 0, 10, 20]]  # IoU 0.5 with both anchors: forced positive anyway
    assert assign_targets(anchors, gt).labels.tolist() == [POSITIVE, POSITIVE]
    anchors = np.array([[0, 0, 10, 10], [0, 0, 10, 20.0]])
    assert assign_targets(anchors, gt).labels.tolist() == [IGNORE, POSITIVE]


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_assignment_matches_exhaustive_oracle(seed):
    anchors, gts, _, _ = micro_scene(np.random.default_rng(seed))
    assert assign_targets(anchors, gts).labels.tolist() == assign_labels(anchors.tolist(), gts.tolist())


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), dx=st.integers(-50, 50), dy=st.integers(-50, 50))
def test_assignment_translation_equivariant(seed, dx, dy):
    anchors, gts, _, _ = micro_scene(np.random.default_rng(seed))
    shift = np.array([dx, dy, dx, dy], dtype=float)
    a, b = assign_targets(anchors, gts), assign_targets(anchors + shift, gts + shift)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_allclose(a.max_iou, b.max_iou, rtol=0, atol=1e-12)


def test_sampling_caps_positives_at_half():
    labels = np.array([POSITIVE] * 300 + [NEGATIVE] * 1000 + [IGNORE] * 50)
    mask = sample_anchors(labels, np.random.default_rng(0), 256, 0.5)
    assert mask.sum() == 256 and (mask & (labels == POSITIVE)).sum() == 128
    assert not (mask & (labels == IGNORE)).any()


def test_sampling_fills_with_negatives():
    labels = np.array([POSITIVE] * 10 + [NEGATIVE] * 1000)
    mask = sample_anchors(labels, np.random.default_rng(0), 256, 0.5)
    assert (mask & (labels == POSITIVE)).sum() == 10 and mask.sum() == 256


# -- loss ------------------------------------------------------------------------


def test_perfect_predictions_give_zero_loss():
    labels = np.array([POSITIVE, NEGATIVE, NEGATIVE, POSITIVE])
    target = np.random.default_rng(0).normal(size=(4, 4))
    logits = np.where(labels == POSITIVE, 800.0, -800.0)
    res = detection_loss(logits, target, labels, target, np.ones(4, bool))
    assert res.total == 0.0


def test_zero_logits_balanced_sample_gives_ln2():
    labels = np.array([POSITIVE, NEGATIVE] * 4)
    res = detection_loss(np.zeros(8), np.zeros((8, 4)), labels, np.zeros((8, 4)), np.ones(8, bool))
    assert res.classification == pytest.approx(math.log(2), abs=1e-15)


def test_loss_terms_sum_to_total():
    rng = np.random.default_rng(1)
    labels = rng.choice([POSITIVE, NEGATIVE], size=30)
    res = detection_loss(rng.normal(size=30), rng.normal(size=(30, 4)), labels, rng.normal(size=(30, 4)),
                         rng.random(30) < 0.7)
    assert res.terms.sum() == pytest.approx(res.total, abs=1e-14)


def test_loss_rejects_sampled_ignores_and_empty_samples():
    labels = np.array([IGNORE, NEGATIVE])
    with pytest.raises(ValueError):
        detection_loss(np.zeros(2), np.zeros((2, 4)), labels, np.zeros((2, 4)), np.array([True, True]))
    with pytest.raises(ValueError):
        detection_loss(np.zeros(2), np.zeros((2, 4)), labels, np.zeros((2, 4)), np.zeros(2, bool))


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradient_central_differences(seed):
    fn, params = check_detection_loss(np.random.default_rng(seed))
    assert tc.finite_difference_check(fn, params) < 1e-5


@pytest.mark.parametrize("seed", range(2))
def test_head_gradient_central_differences(seed):
    fn, params = check_head(np.random.default_rng(seed))
    assert tc.finite_difference_check(fn, params) < 1e-5


def test_head_output_layout_matches_anchor_order():
    params = init_head_params(2, 3, 3, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(1, 2, 4, 5))
    logits, deltas = DetectionHead().forward(x, params)
    assert logits.shape == (1, 60) and deltas.shape == (1, 60, 4)
    raw = tc.conv2d(np.maximum(tc.conv2d(x, params["head.conv.weight"], tc.ConvSpec.same(3),
                                         params["head.conv.bias"]), 0),
                    params["head.cls.weight"], bias=params["head.cls.bias"])
    # anchor index = (y * W + x) * A + a
    assert logits[0, (2 * 5 + 3) * 3 + 1] == pytest.approx(raw[0, 1, 2, 3], abs=1e-14)


# -- NMS ---------------------------------------------------------------------------


def test_single_detection_kept():
    assert nms([[0, 0, 5, 5]], [0.3]).tolist() == [0]


def test_identical_boxes_keep_highest():
    assert nms([[0, 0, 5, 5], [0, 0, 5, 5]], [0.8, 0.9], 0.5).tolist() == [1]


def test_nms_ten_random_boxes_against_oracle():
    rng = np.random.default_rng(5)
    boxes, scores = random_boxes(rng, 10), rng.random(10)
    assert nms(boxes, scores, 0.5).tolist() == greedy_nms(boxes.tolist(), scores.tolist(), 0.5)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), thr=st.sampled_from([0.0, 0.3, 0.5, 0.7]))
def test_nms_matches_oracle_on_micro_scenes(seed, thr):
    _, _, boxes, scores = micro_scene(np.random.default_rng(seed))
    keep = nms(boxes, scores, thr).tolist()
    assert keep == greedy_nms(boxes.tolist(), scores.tolist(), thr)
    assert set(keep) <= set(range(len(boxes)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1e3))
def test_nms_invariant_to_positive_score_scaling(seed, scale):
    rng = np.random.default_rng(seed)
    boxes, scores = random_boxes(rng, 12), rng.random(12)
    np.testing.assert_array_equal(nms(boxes, scores, 0.5), nms(boxes, scores * scale, 0.5))


def test_nms_score_threshold_and_cap():
    boxes = [[0, 0, 5, 5], [10, 10, 15, 15], [20, 20, 25, 25]]
    assert nms(boxes, [0.9, 0.1, 0.5], score_threshold=0.2).tolist() == [0, 2]
    assert nms(boxes, [0.9, 0.1, 0.5], max_out=1).tolist() == [0]


def test_nms_detections_keeps_objects():
    dets = [Detection(BoundingBox(0, 0, 5, 5), 0.5, "a"), Detection(BoundingBox(0, 0, 5, 5), 0.7, "a")]
    assert nms_detections(dets, 0.5) == [dets[1]]
