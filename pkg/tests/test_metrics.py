import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from bsvcert.metrics import (
    CONFIDENCE_FLOOR,
    DEFAULT_THRESHOLDS,
    BoundingBox,
    Detection,
    EvalConfig,
    GroundTruthAnnotation,
    Keypoint,
    MetricsSchemaError,
    UndefinedMetricError,
    average_precision,
    average_precision_detail,
    coverage_indicator,
    evaluate_files,
    gate_detections,
    interpolated_ap,
    iou,
    oks,
    r_squared,
    read_annotations,
    read_predictions,
    write_annotations,
    write_predictions,
)
from bsvcert.odd import OddDimension, OddPoint, OddSpace, TruncatedNormal

from metrics_oracle import oracle_ap


def box(*v):
    return BoundingBox(*map(float, v))


def corners(b, dx=0.0, dy=0.0, vis=(1, 1, 1, 1)):
    pts = [(b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_max, b.y_max), (b.x_min, b.y_max)]
    return tuple(Keypoint(x + dx, y + dy, v) for (x, y), v in zip(pts, vis))


def test_iou_examples():
    a = box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, box(5, 5, 6, 6)) == 0.0
    assert iou(a, box(2, 0, 4, 2)) == 0.0  # touching edges
    assert iou(a, box(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)


def test_degenerate_box():
    with pytest.raises(ValueError):
        box(0, 0, 0, 1)


coord = st.floats(-100, 100, allow_nan=False)
extent = st.floats(0.5, 50, allow_nan=False)
boxes = st.builds(lambda x, y, w, h: BoundingBox(x, y, x + w, y + h), coord, coord, extent, extent)


@given(boxes, boxes, st.floats(0.01, 100))
def test_iou_symmetric_scale_invariant(a, b, s):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a.scaled(s), b.scaled(s)) == pytest.approx(v, abs=1e-12)


def test_oks_examples():
    g = GroundTruthAnnotation(box(0, 0, 10, 10), corners(box(0, 0, 10, 10)))
    assert oks(Detection(g.box, g.keypoints, 0.9), g) == 1.0
    # one visible keypoint at squared distance 2 * area * k^2
    k = 0.05
    d = math.sqrt(2 * 100 * k * k)
    g1 = GroundTruthAnnotation(box(0, 0, 10, 10), (Keypoint(5, 5, 1),))
    assert oks(Detection(g1.box, (Keypoint(5 + d, 5),), 0.9), g1, k) == pytest.approx(math.exp(-1), abs=1e-15)


def test_oks_four_corners_hand_sum():
    g = GroundTruthAnnotation(box(0, 0, 20, 10), corners(box(0, 0, 20, 10)))
    shifts = [(0.0, 0.0), (1.0, 0.0), (0.0, 2.0), (1.5, 1.5)]
    det_kps = tuple(Keypoint(kp.x + sx, kp.y + sy) for kp, (sx, sy) in zip(g.keypoints, shifts))
    area, k = 200.0, 0.05
    hand = (
        math.exp(0.0)
        + math.exp(-1.0 / (2 * area * k * k))
        + math.exp(-4.0 / (2 * area * k * k))
        + math.exp(-4.5 / (2 * area * k * k))
    ) / 4
    assert oks(Detection(g.box, det_kps, 0.8), g) == pytest.approx(hand, abs=1e-15)


def test_oks_ignores_invisible_and_requires_visible():
    b = box(0, 0, 10, 10)
    g = GroundTruthAnnotation(b, corners(b, vis=(1, 0, 0, 1)))
    det = Detection(b, corners(b)[:1] + corners(b, dx=50.0)[1:3] + corners(b)[3:], 0.9)
    assert oks(det, g) == 1.0
    hidden = GroundTruthAnnotation(b, corners(b, vis=(0, 0, 0, 0)))
    with pytest.raises(UndefinedMetricError):
        oks(Detection(b, corners(b), 0.9), hidden)


@given(st.lists(st.floats(0, 20), min_size=4, max_size=4), st.integers(0, 3), st.floats(0, 1))
def test_oks_bounded_and_monotone(dists, i, shrink):
    b = box(0, 0, 10, 10)
    g = GroundTruthAnnotation(b, corners(b))
    det = Detection(b, tuple(Keypoint(kp.x + d, kp.y) for kp, d in zip(g.keypoints, dists)), 0.9)
    closer = list(dists)
    closer[i] *= shrink
    det2 = Detection(b, tuple(Keypoint(kp.x + d, kp.y) for kp, d in zip(g.keypoints, closer)), 0.9)
    v = oks(det, g)
    assert 0.0 <= v <= 1.0
    assert oks(det2, g) >= v


def test_annotation_area_checked():
    b = box(0, 0, 4, 5)
    assert GroundTruthAnnotation(b).area == 20.0
    with pytest.raises(ValueError):
        GroundTruthAnnotation(b, area=21.0)


def test_confidence_gate():
    b = box(0, 0, 1, 1)
    confs = [0.95, 0.69999, 0.7, 0.2, 0.85, 0.71]
    kept = gate_detections([Detection(b, (), c) for c in confs])
    assert [d.confidence for d in kept] == [0.95, 0.85, 0.71, 0.7]
    assert gate_detections([Detection(b, (), 0.9)] * 5, max_detections=3) == [Detection(b, (), 0.9)] * 3


def test_ap_perfect():
    gts = [[GroundTruthAnnotation(box(i, i, i + 5, i + 5), corners(box(i, i, i + 5, i + 5)))] for i in range(4)]
    dets = [[Detection(g.box, g.keypoints, 0.9) for g in image] for image in gts]
    assert average_precision(dets, gts, "iou") == 1.0
    assert average_precision(dets, gts, "oks", max_detections=20) == 1.0


def test_ap_no_detections():
    gts = [GroundTruthAnnotation(box(0, 0, 1, 1))]
    assert average_precision([], gts) == 0.0
    assert average_precision([Detection(box(0, 0, 1, 1), (), 0.5)], gts) == 0.0  # gated away


def test_ap_undefined_without_ground_truth():
    with pytest.raises(UndefinedMetricError):
        average_precision([], [])
    with pytest.raises(UndefinedMetricError):
        average_precision([[Detection(box(0, 0, 1, 1), (), 0.9)]], [[]])


def test_ap_toy_three_detections_two_truths():
    g = [GroundTruthAnnotation(box(0, 0, 10, 10)), GroundTruthAnnotation(box(20, 0, 30, 10))]
    d = [
        Detection(box(0, 0, 10, 8), (), 0.9),  # IoU 0.8 with the first truth
        Detection(box(40, 0, 50, 10), (), 0.8),  # false positive
        Detection(box(20, 0, 30, 10), (), 0.75),  # exact second truth
    ]
    expected = oracle_ap([([(x.box.to_list(), (), x.confidence) for x in d], [(x.box.to_list(), ()) for x in g])], "iou", DEFAULT_THRESHOLDS)
    result = average_precision_detail(d, g)
    assert result.ap == pytest.approx(expected, abs=1e-12)
    # up to 0.8: ranks TP, FP, TP give recall 1 at precision 2/3
    assert result.per_threshold[0.5] == pytest.approx((51 * 1.0 + 50 * 2 / 3) / 101, abs=1e-12)
    # above 0.8 only the third detection matches: recall 0.5 at precision 1/3
    assert result.per_threshold[0.9] == pytest.approx(51 * (1 / 3) / 101, abs=1e-12)


def _to_plain(images):
    return [
        (
            [(d.box.to_list(), [k.to_list() for k in d.keypoints], d.confidence) for d in dets],
            [(g.box.to_list(), [k.to_list() for k in g.keypoints]) for g in gts],
        )
        for dets, gts in images
    ]


def random_fixture(rng, max_det=5, max_gt=3, n_images=None):
    """Small images on an integer lattice so that similarity ties are common."""
    n_images = n_images or int(rng.integers(1, 4))
    images = []
    for _ in range(n_images):
        gts = []
        for _ in range(int(rng.integers(0, max_gt + 1))):
            x, y = rng.integers(0, 6, 2)
            b = box(x, y, x + rng.integers(2, 5), y + rng.integers(2, 5))
            vis = tuple(int(v) for v in rng.integers(0, 2, 4))
            if not any(vis):
                vis = (1, 0, 0, 0)
            gts.append(GroundTruthAnnotation(b, corners(b, vis=vis)))
        dets = []
        for _ in range(int(rng.integers(0, max_det + 1))):
            if gts and rng.random() < 0.7:
                g = gts[int(rng.integers(len(gts)))]
                # jitter each edge by at most one unit; truth boxes are at least 2 wide
                j = rng.integers(-1, 2, 4)
                j[2] = max(j[2], 0) if j[0] == 1 else j[2]
                j[3] = max(j[3], 0) if j[1] == 1 else j[3]
                b = box(g.box.x_min + j[0], g.box.y_min + j[1], g.box.x_max + j[2], g.box.y_max + j[3])
            else:
                x, y = rng.integers(0, 8, 2)
                b = box(x, y, x + rng.integers(1, 5), y + rng.integers(1, 5))
            dx, dy = rng.choice([0.0, 0.1, 0.3, 0.6], 2)
            dets.append(Detection(b, corners(b, dx, dy), float(rng.choice([0.5, 0.7, 0.75, 0.8, 0.9, 1.0]))))
        images.append((dets, gts))
    return images


@pytest.mark.parametrize("similarity", ["iou", "oks"])
def test_ap_matches_brute_force_oracle(similarity):
    rng = np.random.default_rng(42 if similarity == "iou" else 43)
    checked = 0
    while checked < 300:
        images = random_fixture(rng)
        if sum(len(g) for _, g in images) == 0:
            continue
        dets = [d for d, _ in images]
        gts = [g for _, g in images]
        got = average_precision(dets, gts, similarity)
        want = oracle_ap(_to_plain(images), similarity, DEFAULT_THRESHOLDS)
        assert got == pytest.approx(want, abs=1e-12)
        checked += 1


def test_interpolated_ap_direct():
    assert interpolated_ap([True, True], 2) == 1.0
    assert interpolated_ap([], 3) == 0.0
    assert interpolated_ap([False, True], 1) == pytest.approx(0.5)
    with pytest.raises(UndefinedMetricError):
        interpolated_ap([True], 0)


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(5)
    for _ in range(100):
        images = random_fixture(rng)
        if sum(len(g) for _, g in images) == 0:
            continue
        for sim in ("iou", "oks"):
            per = average_precision_detail([d for d, _ in images], [g for _, g in images], sim).per_threshold
            values = [per[t] for t in sorted(per)]
            assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))


def test_ap_invariant_to_input_order():
    rng = np.random.default_rng(6)
    for _ in range(100):
        images = random_fixture(rng)
        if sum(len(g) for _, g in images) == 0:
            continue
        gts = [g for _, g in images]
        # distinct confidences, so the ranking does not depend on input position
        dets = [
            [Detection(d.box, d.keypoints, 0.7 + 0.3 * rng.random()) for d in image] for image, _ in images
        ]
        shuffled = [[d[i] for i in rng.permutation(len(d))] for d in dets]
        for sim in ("iou", "oks"):
            assert average_precision(shuffled, gts, sim) == average_precision(dets, gts, sim)


def test_ap_equal_confidence_ties_follow_input_order():
    g = [GroundTruthAnnotation(box(0, 0, 10, 10))]
    good, poor = Detection(box(0, 0, 10, 10), (), 0.8), Detection(box(0, 0, 10, 6), (), 0.8)
    # the first of two tied detections claims the single truth
    assert average_precision([good, poor], g) == 1.0
    assert average_precision([poor, good], g) < 1.0


def test_r_squared():
    assert r_squared([1, 2, 3], [1, 2, 3]) == 1.0
    assert r_squared([2, 2, 2], [1, 2, 3]) == 0.0
    assert r_squared([1, 2, 4], [1, 2, 3]) == pytest.approx(0.5)
    with pytest.raises(UndefinedMetricError):
        r_squared([1, 2], [3, 3])


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=2, max_size=30))
def test_r_squared_at_most_one(pairs):
    p, y = zip(*pairs)
    assume(np.var(y) > 1e-6)
    assert r_squared(p, y) <= 1.0 + 1e-12


def test_coverage_examples(space):
    assert coverage_indicator([], space) == 0.0
    assert coverage_indicator([space.point(glideslope_deg=3.0, distance_nm=1.0)], space, 20, radius=math.sqrt(2)) == 1.0


def test_coverage_lattice_matches_exhaustive_scan():
    unit = OddSpace(
        (OddDimension("u", TruncatedNormal(0.5, 1.0, 0.0, 1.0)), OddDimension("v", TruncatedNormal(0.5, 1.0, 0.0, 1.0)))
    )
    res = 50
    # offset keeps cell centers off the exact radius, where rounding would decide
    lattice = [OddPoint({"u": (i + 0.5) / 10 + 0.0037, "v": (j + 0.5) / 10 - 0.0021}) for i in range(10) for j in range(10)]
    radius = 1 / res
    covered = 0
    for a in range(res):
        for b in range(res):
            cx, cy = (a + 0.5) / res, (b + 0.5) / res
            if any((cx - p["u"]) ** 2 + (cy - p["v"]) ** 2 <= radius**2 for p in lattice):
                covered += 1
    assert coverage_indicator(lattice, unit, res, radius) == covered / res**2


def test_jsonl_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    images = random_fixture(rng, n_images=3)
    preds = {f"img{i}": d for i, (d, _) in enumerate(images)}
    anns = {f"img{i}": g for i, (_, g) in enumerate(images)}
    write_predictions(tmp_path / "p.jsonl", preds)
    write_annotations(tmp_path / "a.jsonl", anns)
    assert read_predictions(tmp_path / "p.jsonl") == preds
    assert read_annotations(tmp_path / "a.jsonl") == anns


def test_jsonl_schema_errors(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"image_id": "a", "detections": [{"box": [0, 0, 1]}]}\n')
    with pytest.raises(MetricsSchemaError):
        read_predictions(bad)
    bad.write_text('{"image_id": "a"}\n{"image_id": "a"}\n')
    with pytest.raises(MetricsSchemaError):
        read_annotations(bad)


def test_evaluate_files_report(tmp_path):
    b = box(0, 0, 10, 10)
    g = GroundTruthAnnotation(b, corners(b))
    write_annotations(tmp_path / "a.jsonl", {"x": [g], "y": []})
    write_predictions(tmp_path / "p.jsonl", {"x": [Detection(b, g.keypoints, 0.9)]})
    anns = read_annotations(tmp_path / "a.jsonl")
    report = evaluate_files(read_predictions(tmp_path / "p.jsonl"), anns, EvalConfig())
    assert report.ap_bb == 1.0 and report.ap_kp == 1.0
    assert report.num_images == 2
    d = json.loads(json.dumps(report.to_dict()))
    assert d["config"]["confidence_floor"] == CONFIDENCE_FLOOR
    assert report.to_csv().splitlines()[0] == "metric,threshold,ap"
    write_predictions(tmp_path / "q.jsonl", {"z": []})
    with pytest.raises(MetricsSchemaError):
        evaluate_files(read_predictions(tmp_path / "q.jsonl"), anns, EvalConfig())
