import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ganseq import bench
from ganseq.bench import DetectionRecord as Det
from ganseq.bench import GroundTruthRecord as GT
from ganseq.errors import ParseError
from ganseq.semmap import BoundingBox as B

from .oracles import max_matching, pixel_iou, separated_instance

boxes = st.builds(B, st.integers(0, 30), st.integers(0, 30), st.integers(1, 15), st.integers(1, 15))


def test_iou_examples():
    assert bench.iou(B(0, 0, 10, 10), B(0, 0, 10, 10)) == 1.0
    assert bench.iou(B(0, 0, 10, 10), B(10, 0, 10, 10)) == 0.0
    assert bench.iou(B(0, 0, 10, 10), B(5, 0, 10, 10)) == pytest.approx(50 / 150)


@given(boxes, boxes)
def test_iou_matches_pixel_count(a, b):
    v = bench.iou(a, b)
    assert v == pytest.approx(pixel_iou(a.as_tuple(), b.as_tuple()))
    assert v == bench.iou(b, a)
    assert 0.0 <= v <= 1.0


def test_compute_metrics_examples():
    assert bench.compute_metrics(8, 2, 2) == (80.0, 80.0, 80.0)
    assert bench.compute_metrics(0, 0, 0) == (0.0, 0.0, 0.0)
    assert bench.compute_metrics(0, 5, 0) == (0.0, 0.0, 0.0)
    assert bench.compute_metrics(1, 2, 0) == (33.3, 100.0, 50.0)


def test_compute_metrics_rejects_negative():
    with pytest.raises(ValueError):
        bench.compute_metrics(-1, 0, 0)


def _dets(boxes_, confs=None, image="a", cls=1):
    confs = confs or [1.0] * len(boxes_)
    return [Det(image, cls, B(*b), c) for b, c in zip(boxes_, confs)]


def _gts(boxes_, image="a", cls=1, tag="near"):
    return [GT(image, cls, B(*b), tag) for b in boxes_]


def test_match_perfect_and_empty():
    g = _gts([(0, 0, 10, 10), (20, 20, 5, 5)])
    assert bench.match_detections(_dets([(0, 0, 10, 10), (20, 20, 5, 5)]), g)[:3] == (2, 0, 0)
    assert bench.match_detections([], g)[:3] == (0, 0, 2)
    assert bench.match_detections(_dets([(0, 0, 10, 10)]), [])[:3] == (0, 1, 0)


def test_match_duplicate_detection_is_fp():
    g = _gts([(0, 0, 10, 10)])
    d = _dets([(0, 0, 10, 10), (1, 0, 10, 10)], [0.5, 0.9])
    tp, fp, fn, matches = bench.match_detections(d, g)
    assert (tp, fp, fn) == (1, 1, 0)
    assert matches == [(1, 0)]  # higher confidence wins


def test_match_respects_class_and_image():
    g = _gts([(0, 0, 10, 10)])
    assert bench.match_detections(_dets([(0, 0, 10, 10)], cls=2), g)[:3] == (0, 1, 1)
    assert bench.match_detections(_dets([(0, 0, 10, 10)], image="b"), g)[:3] == (0, 1, 1)


def test_match_threshold_is_inclusive():
    # IoU exactly 0.5: 10x10 vs 10x20 containing it
    g = _gts([(0, 0, 10, 20)])
    assert bench.iou(B(0, 0, 10, 10), B(0, 0, 10, 20)) == 0.5
    assert bench.match_detections(_dets([(0, 0, 10, 10)]), g)[0] == 1


def test_greedy_can_be_suboptimal_on_touching_ground_truth():
    # one detection overlaps two ground truths, documented limitation of greedy order
    gts = [(0, 0, 10, 10), (2, 0, 10, 10)]
    dets = [(2, 0, 10, 10), (4, 0, 10, 10)]
    tp = bench.match_detections(_dets(dets, [0.9, 0.8]), _gts(gts))[0]
    assert tp == 1
    assert max_matching(dets, gts, 0.5) == 2


def test_greedy_never_exceeds_optimum():
    rng = np.random.default_rng(7)
    for _ in range(150):
        n_d, n_g = rng.integers(0, 5, size=2)
        dets = [tuple(int(v) for v in (*rng.integers(0, 12, 2), *rng.integers(1, 10, 2))) for _ in range(n_d)]
        gts = [tuple(int(v) for v in (*rng.integers(0, 12, 2), *rng.integers(1, 10, 2))) for _ in range(n_g)]
        tp = bench.match_detections(_dets(dets, list(rng.random(n_d))), _gts(gts))[0]
        assert tp <= max_matching(dets, gts, 0.5)


def test_greedy_optimal_on_separated_ground_truth():
    rng = np.random.default_rng(8)
    for _ in range(50):
        dets, gts, confs = separated_instance(rng)
        tp = bench.match_detections(_dets(dets, confs), _gts(gts))[0]
        assert tp == max_matching(dets, gts, 0.5)


def test_threshold_monotone():
    rng = np.random.default_rng(9)
    for _ in range(50):
        dets, gts, confs = separated_instance(rng)
        d, g = _dets(dets, confs), _gts(gts)
        tps = [bench.match_detections(d, g, t)[0] for t in (0.3, 0.5, 0.7, 0.9)]
        assert tps == sorted(tps, reverse=True)


def _write(path, text):
    path.write_text(text)
    return path


def test_evaluate_near_far_split(tmp_path):
    gt = _write(
        tmp_path / "gt.csv",
        "image_id,class_id,x,y,w,h,range\n"
        "a,24,0,0,10,10,near\n"
        "a,24,50,50,10,10,near\n"
        "b,24,0,0,4,4,far\n",
    )
    det = _write(
        tmp_path / "det.csv",
        "image_id,class_id,x,y,w,h,confidence\n"
        "a,24,0,0,10,10,0.9\n"
        "b,24,0,0,4,4,0.8\n"
        "b,24,30,30,4,4,0.7\n"
        "zzz,24,0,0,4,4,0.5\n",
    )
    rep = bench.evaluate(det, gt)
    near, far, total = rep.ranges["near"], rep.ranges["far"], rep.ranges["all"]
    assert (near.tp, near.fp, near.fn) == (1, 0, 1)
    assert (near.precision, near.recall, near.f_score) == (100.0, 50.0, 66.7)
    assert (far.tp, far.fp, far.fn) == (1, 1, 0)
    assert rep.unknown_image_fp == 1
    assert (total.tp, total.fp, total.fn) == (2, 2, 1)


def test_evaluate_mixed_range_tags_rejected():
    with pytest.raises(ParseError):
        bench.evaluate_records([], [GT("a", 1, B(0, 0, 1, 1), "near"), GT("a", 1, B(5, 5, 1, 1), "far")])


@pytest.mark.parametrize(
    "row, fragment",
    [
        ("a,24,0,0,10,10,mid", "range"),
        ("a,24,0,0,0,10,near", "line 2"),
        ("a,24,0,0,10,near", "expected 7"),
        ("a,x,0,0,10,10,near", "line 2"),
    ],
)
def test_ground_truth_parse_errors(tmp_path, row, fragment):
    gt = _write(tmp_path / "gt.csv", "image_id,class_id,x,y,w,h,range\n" + row + "\n")
    with pytest.raises(ParseError, match=fragment):
        bench.read_ground_truth(gt)


def test_detection_confidence_range(tmp_path):
    det = _write(tmp_path / "d.csv", "a,1,0,0,1,1,1.5\n")
    with pytest.raises(ParseError, match="line 1"):
        bench.read_detections(det)


def test_annotation_file_accepts_default_range(tmp_path):
    ann = _write(tmp_path / "ann.csv", "image_id,class_id,x,y,w,h\nsample_0000,7,1,2,3,4\n")
    recs = bench.read_ground_truth(ann, default_range="far")
    assert recs == [GT("sample_0000", 7, B(1, 2, 3, 4), "far")]


def test_csv_roundtrip(tmp_path):
    gts = _gts([(0, 0, 3, 3), (5, 5, 2, 2)], tag="far")
    dets = _dets([(1, 1, 2, 2)], [0.25])
    bench.write_ground_truth(tmp_path / "g.csv", gts)
    bench.write_detections(tmp_path / "d.csv", dets)
    assert bench.read_ground_truth(tmp_path / "g.csv") == gts
    assert bench.read_detections(tmp_path / "d.csv") == dets


def test_report_outputs(tmp_path):
    rep = bench.evaluate_records(_dets([(0, 0, 10, 10)]), _gts([(0, 0, 10, 10)]))
    txt, js = bench.write_report(rep, tmp_path / "out")
    data = json.loads(js.read_text())
    assert data["ranges"]["near"]["f_score"] == 100.0
    table = txt.read_text()
    assert "near range" in table and "far range" in table
    assert "F-Score" in table and "Precision" in table and "Recall" in table
