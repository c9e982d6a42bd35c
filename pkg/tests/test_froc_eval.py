import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msbdet.detection_head import BoundingBox, Detection
from msbdet.froc_eval import (
    Annotation,
    SizeBuckets,
    bucket_counts,
    evaluate,
    froc,
    match_detections,
    read_detections,
    read_ground_truth,
    sensitivity_at,
    size_bucketed_sensitivity,
    threshold_at,
    write_detections,
    write_ground_truth,
)
from froc_fixtures import (
    FOUR_LESION_BUCKETS,
    TWO_IMAGE_POINTS,
    TWO_IMAGE_SENSITIVITY,
    four_lesion_scene,
    two_image_scene,
)
from oracles import greedy_match
from scenes import random_boxes


def random_eval_scene(rng, n_images=3):
    dets, anns = [], []
    for i in range(n_images):
        image_id = f"im{i}"
        for b in random_boxes(rng, int(rng.integers(0, 4))):
            anns.append(Annotation(image_id, BoundingBox(*b), float(rng.uniform(1, 200))))
        for b in random_boxes(rng, int(rng.integers(0, 6))):
            dets.append(Detection(BoundingBox(*b), int(rng.integers(1, 9)) / 8.0, image_id))
    if not anns:
        anns.append(Annotation("im0", BoundingBox(0, 0, 4, 4), 3.0))
    return dets, anns, [f"im{i}" for i in range(n_images)]


# -- matching ---------------------------------------------------------------------


def test_exact_detection_is_tp():
    ann = Annotation("a", BoundingBox(0, 0, 10, 10), 5.0)
    m = match_detections([Detection(ann.box, 0.5, "a")], [ann])
    assert m.is_tp.tolist() == [True] and m.hit.tolist() == [True]


def test_single_match_rule():
    ann = Annotation("a", BoundingBox(0, 0, 10, 10), 5.0)
    m = match_detections([Detection(ann.box, 0.8, "a"), Detection(ann.box, 0.9, "a")], [ann])
    assert m.is_tp.tolist() == [False, True] and m.hit_score[0] == 0.9


def test_iou_threshold_is_inclusive():
    ann = Annotation("a", BoundingBox(0, 0, 10, 10), 5.0)
    half = Detection(BoundingBox(0, 0, 10, 5), 0.5, "a")  # IoU exactly 0.5
    assert match_detections([half], [ann]).is_tp.tolist() == [True]
    assert match_detections([half], [ann], iou_threshold=0.51).is_tp.tolist() == [False]


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_matching_agrees_with_greedy_oracle(seed):
    dets, anns, ids = random_eval_scene(np.random.default_rng(seed))
    for image_id in ids:
        d = [x for x in dets if x.image_id == image_id]
        a = [x for x in anns if x.image_id == image_id]
        m = match_detections(d, a)
        order = sorted(range(len(d)), key=lambda k: (-d[k].score, k))
        tp, hit = greedy_match([(d[k].box.as_array().tolist(), d[k].score) for k in order],
                               [x.box.as_array().tolist() for x in a])
        assert [bool(m.is_tp[k]) for k in order] == tp
        assert m.hit.tolist() == hit
        assert m.is_tp.sum() == m.hit.sum()


# -- curve and fixed-rate sensitivity ----------------------------------------------


def test_two_image_fixture_curve():
    curve = froc(*two_image_scene())
    assert curve.points == TWO_IMAGE_POINTS
    assert curve.thresholds.tolist() == [0.9, 0.8, 0.7, 0.6]
    assert sensitivity_at(curve) == TWO_IMAGE_SENSITIVITY


def test_perfect_detector_single_point():
    anns = [Annotation(f"i{k}", BoundingBox(0, 0, 5, 5), 4.0) for k in range(3)]
    curve = froc([Detection(a.box, 0.9, a.image_id) for a in anns], anns)
    assert curve.points == [(0.0, 1.0)]
    assert sensitivity_at(curve) == [1.0] * 5


def test_no_detections_gives_zero():
    anns = [Annotation("i", BoundingBox(0, 0, 5, 5), 4.0)]
    assert sensitivity_at(froc([], anns)) == [0.0] * 5


def test_no_annotations_is_an_error():
    with pytest.raises(ValueError):
        froc([Detection(BoundingBox(0, 0, 1, 1), 0.5, "i")], [])


def test_image_ids_count_empty_images():
    dets, anns = two_image_scene()
    curve = froc(dets, anns, image_ids=["img1", "img2", "img3", "img4"])
    assert curve.points[-1] == (0.5, 1.0)


def test_interpolation_mode():
    curve = froc(*two_image_scene())
    assert sensitivity_at(curve, [0.25, 1.0], mode="interp") == [0.5, 1.0]
    with pytest.raises(ValueError):
        sensitivity_at(curve, mode="cubic")


def test_threshold_at():
    curve = froc(*two_image_scene())
    assert threshold_at(curve, 0.0) == 0.9
    assert threshold_at(curve, 1.0) == 0.6


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_curve_and_rates_are_monotone(seed):
    dets, anns, ids = random_eval_scene(np.random.default_rng(seed))
    curve = froc(dets, anns, image_ids=ids)
    assert np.all(np.diff(curve.fp_per_image) >= 0)
    assert np.all(np.diff(curve.sensitivity) >= 0)
    assert np.all(np.diff(curve.thresholds) < 0)
    s = sensitivity_at(curve, [0.0, 0.5, 1, 2, 4, 8, 100])
    assert all(a <= b for a, b in zip(s, s[1:]))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    dets, anns, ids = random_eval_scene(rng)
    ref = evaluate(dets, anns, image_ids=ids)
    perm = [dets[k] for k in rng.permutation(len(dets))]
    renamed = {i: f"z{9 - k}" for k, i in enumerate(ids)}  # reverse the image order

    def rename(x):
        return type(x)(**{**x.__dict__, "image_id": renamed[x.image_id]})

    # within-image input order only matters between equal scores on the same image, and then only
    # through which detection claims a lesion, never through the TP/FP totals of a threshold
    got = evaluate(perm, anns, image_ids=ids)
    assert got.curve.points == ref.curve.points and got.buckets == ref.buckets
    got = evaluate([rename(d) for d in dets], [rename(a) for a in anns], image_ids=list(renamed.values()))
    assert got.curve.points == ref.curve.points and got.buckets == ref.buckets


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_zero_score_detection_changes_nothing_above_zero(seed):
    dets, anns, ids = random_eval_scene(np.random.default_rng(seed))
    extra = dets + [Detection(anns[0].box, 0.0, anns[0].image_id)]
    a, b = froc(dets, anns, image_ids=ids), froc(extra, anns, image_ids=ids)
    # every operating point above the zero threshold is untouched
    assert b.points[: int((b.thresholds > 0).sum())] == a.points
    anns_only = froc([], anns, image_ids=ids)
    with_zero = froc([Detection(anns[0].box, 0.0, anns[0].image_id)], anns, image_ids=ids)
    assert sensitivity_at(with_zero, [0.5]) == [1 / len(anns)] and sensitivity_at(anns_only) == [0.0] * 5


# -- size buckets ---------------------------------------------------------------------


def test_bucket_edges_lower_inclusive():
    b = SizeBuckets()
    assert [b.index(d) for d in (0.21, 9.99, 10, 29.9, 30, 60, 99.9, 100, 342.5)] == [0, 0, 1, 1, 2, 3, 3, 4, 4]
    assert b.labels == ["<10", "10-30", "30-60", "60-100", ">100"]
    with pytest.raises(ValueError):
        SizeBuckets((10, 5))


def test_four_lesion_fixture():
    assert size_bucketed_sensitivity(*four_lesion_scene()) == FOUR_LESION_BUCKETS


def test_single_bucket_perfect_detector():
    anns = [Annotation(f"i{k}", BoundingBox(0, 0, 5, 5), 40.0) for k in range(3)]
    out = size_bucketed_sensitivity([Detection(a.box, 0.5, a.image_id) for a in anns], anns)
    assert out == {"<10": None, "10-30": None, "30-60": 1.0, "60-100": None, ">100": None}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rate=st.sampled_from([0.5, 1.0, 4.0]))
def test_bucket_counts_sum_to_global(seed, rate):
    dets, anns, ids = random_eval_scene(np.random.default_rng(seed))
    counts = bucket_counts(dets, anns, fp_rate=rate, image_ids=ids)
    curve = froc(dets, anns, image_ids=ids)
    ok = np.flatnonzero(curve.fp_per_image <= rate)
    matched = round(curve.sensitivity[ok[-1]] * curve.num_lesions) if len(ok) else 0
    assert sum(m for m, _ in counts.values()) == matched
    assert sum(t for _, t in counts.values()) == len(anns)


# -- files and report -----------------------------------------------------------------


def test_ground_truth_round_trip(tmp_path):
    _, anns = four_lesion_scene()
    write_ground_truth(tmp_path / "gt.jsonl", anns)
    assert read_ground_truth(tmp_path / "gt.jsonl") == anns
    first = json.loads((tmp_path / "gt.jsonl").read_text().splitlines()[0])
    assert set(first) == {"image_id", "box", "diameter_mm"}


def test_detection_csv_round_trip_is_exact(tmp_path):
    dets = [Detection(BoundingBox(0.1, 1 / 3, 7.25, 9.0), 2 / 3, "x,y")]
    write_detections(tmp_path / "d.csv", dets)
    assert read_detections(tmp_path / "d.csv") == dets


def test_bad_records_name_the_line(tmp_path):
    (tmp_path / "gt.jsonl").write_text('{"image_id": "a", "box": [0, 0, 1, 1], "diameter_mm": 1}\n{"box": 1}\n')
    with pytest.raises(ValueError, match=":2:"):
        read_ground_truth(tmp_path / "gt.jsonl")
    (tmp_path / "d.csv").write_text("a,0,0,1\n")
    with pytest.raises(ValueError, match=":1:"):
        read_detections(tmp_path / "d.csv")


def test_report_text_and_json():
    report = evaluate(*two_image_scene())
    text = report.to_text("fpn+msb")
    assert "fpn+msb" in text and "0.500   1.000   1.000   1.000   1.000" in text
    js = report.to_json()
    assert js["sensitivity"] == TWO_IMAGE_SENSITIVITY and js["fp_rates"] == [0.5, 1, 2, 4, 8]
    json.dumps(js)
