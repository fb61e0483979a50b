import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psrp.data import DatasetManifest, GroundTruthBox, ImageRecord, load_coco
from psrp.errors import FormatError
from psrp.evaluation import DetRecord, average_precision, evaluate, iou, load_results, match

from oracles import brute_force_ap

FIXTURE = Path(__file__).parent / "data" / "eval_fixture.json"


def load_fixture(tmp_path):
    data = json.loads(FIXTURE.read_text())
    (tmp_path / "gt.json").write_text(json.dumps(data["coco"]))
    (tmp_path / "dets.json").write_text(json.dumps(data["results"]))
    manifest = load_coco(tmp_path / "gt.json")
    return manifest, load_results(tmp_path / "dets.json", manifest), data["expected"]


def test_iou_examples():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1
    assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0
    assert iou((0, 0, 10, 10), (5, 5, 15, 15)) == pytest.approx(25 / 175)


def test_match_examples():
    gt = np.array([[0, 0, 10, 10]])
    r = match(np.array([[0, 0, 10, 10]]), np.array([0.9]), gt, 0.5)
    assert r.det_matches.tolist() == [[0]]
    r = match(np.array([[0, 0, 10, 10], [0, 0, 10, 10]]), np.array([0.3, 0.9]), gt, 0.5)
    # detections come back in score order: the 0.9 one wins
    assert r.scores.tolist() == [0.9, 0.3]
    assert r.det_matches.tolist() == [[0, -1]]
    # IoU 0.45 misses at 0.5
    r = match(np.array([[0, 0, 10, 4.5]]), np.array([0.9]), gt, 0.5)
    assert r.det_matches.tolist() == [[-1]]
    assert not r.gt_matched.any()


def test_match_prefers_real_over_ignored_gt():
    gts = np.array([[0, 0, 10, 10], [0, 0, 10, 11]])
    r = match(np.array([[0, 0, 10, 11]]), np.array([0.9]), gts, 0.5, gt_ignore=np.array([False, True]))
    assert r.det_matches.tolist() == [[0]] and not r.det_ignored.any()


def test_crowd_absorbs_detections():
    gts = np.array([[0, 0, 100, 100]])
    dets = np.array([[0, 0, 10, 10], [20, 20, 30, 30]])
    r = match(dets, np.array([0.9, 0.8]), gts, 0.5, gt_crowd=np.array([True]))
    assert r.det_ignored.all() and r.gt_ignored.all()


def test_average_precision_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([False], 1) == 0.0
    assert average_precision([False, True], 1) == pytest.approx(0.5)
    assert math.isnan(average_precision([], 0))


def test_fixture_matches_bruteforce(tmp_path):
    manifest, dets, expected = load_fixture(tmp_path)
    table = evaluate(dets, manifest)
    for key, want in expected["overall"].items():
        got = table.overall[key]
        assert (got is None) == (want is None)
        if want is not None:
            assert abs(got - want) <= 1e-6, key
    for c, row in expected["per_class"].items():
        for key, want in row.items():
            got = table.per_class[int(c)][key]
            assert (got is None) == (want is None), (c, key)
            if want is not None:
                assert abs(got - want) <= 1e-6, (c, key)
    o = table.overall
    assert o["AP50"] >= o["AP75"] >= o["AP"]


def test_metrics_table_save(tmp_path):
    manifest, dets, _ = load_fixture(tmp_path)
    table = evaluate(dets, manifest)
    table.save(tmp_path / "m.json")
    saved = json.loads((tmp_path / "m.json").read_text())
    assert saved["per_class"]["2"]["name"] == "square"
    assert saved["per_class"]["2"]["AP_S"] is None


def simple_manifest(boxes, classes=(1,)):
    images = [ImageRecord(i, 256, 256) for i in sorted({b[0] for b in boxes} | {1})]
    anns = [GroundTruthBox(img, c, tuple(map(float, box))) for img, c, box in boxes]
    return DatasetManifest(images, anns, {c: f"c{c}" for c in classes})


def test_perfect_and_empty():
    gts = [(1, 1, (0, 0, 20, 20)), (1, 1, (50, 50, 100, 100)), (2, 1, (0, 0, 150, 150))]
    m = simple_manifest(gts)
    perfect = evaluate([DetRecord(i, c, b, 0.9) for i, c, b in gts], m)
    assert all(v == 1.0 for v in perfect.overall.values())
    empty = evaluate([], m)
    assert all(v == 0.0 for v in empty.overall.values())


def test_unknown_ids_raise():
    m = simple_manifest([(1, 1, (0, 0, 20, 20))])
    with pytest.raises(FormatError, match="image"):
        evaluate([DetRecord(9, 1, (0, 0, 1, 1), 0.5)], m)
    with pytest.raises(FormatError, match="category"):
        evaluate([DetRecord(1, 4, (0, 0, 1, 1), 0.5)], m)


def test_load_results_errors(tmp_path):
    m = simple_manifest([(1, 1, (0, 0, 20, 20))])
    p = tmp_path / "r.json"
    p.write_text(json.dumps([{"image_id": 1, "bbox": [0, 0, 1, 1], "score": 0.1}]))
    with pytest.raises(FormatError, match="category_id"):
        load_results(p, m)
    p.write_text("{}")
    with pytest.raises(FormatError):
        load_results(p, m)


@st.composite
def scenes(draw):
    """Disjoint GTs in a 4x4 cell layout plus noisy detections around them."""
    n_img = draw(st.integers(1, 3))
    gts, dets = [], []
    scores = iter(draw(st.lists(st.floats(0.01, 0.99), min_size=64, max_size=64, unique=True)))
    for img in range(1, n_img + 1):
        cells = draw(st.lists(st.integers(0, 15), min_size=1, max_size=4, unique=True))
        for cell in cells:
            cx, cy = (cell % 4) * 64, (cell // 4) * 64
            side = draw(st.sampled_from([10, 20, 40, 60]))
            box = (cx, cy, cx + side, cy + side)
            gts.append((img, 1, box))
            for _ in range(draw(st.integers(0, 2))):
                j = draw(st.integers(-6, 6))
                dets.append(DetRecord(img, 1, (cx + j, cy, cx + side + j, cy + side), next(scores)))
        for _ in range(draw(st.integers(0, 2))):
            x = draw(st.integers(0, 200))
            dets.append(DetRecord(img, 1, (x, 250.0 - 8, x + 8.0, 250.0), next(scores)))
    return gts, dets


@settings(max_examples=40, deadline=None)
@given(scenes())
def test_evaluator_agrees_with_bruteforce(scene):
    gts, dets = scene
    m = simple_manifest(gts)
    table = evaluate(dets, m)
    og = [(g[0], g[2]) for g in gts]
    od = [(d.image_id, d.box, d.score) for d in dets]
    assert table.overall["AP50"] == pytest.approx(brute_force_ap(od, og, 0.5), abs=1e-9)
    assert table.overall["AP75"] == pytest.approx(brute_force_ap(od, og, 0.75), abs=1e-9)
    expect_s = brute_force_ap(od, og, 0.5, (0, 1024))
    if expect_s is not None:
        aps = [brute_force_ap(od, og, t, (0, 1024)) for t in np.linspace(0.5, 0.95, 10)]
        assert table.overall["AP_S"] == pytest.approx(np.mean(aps), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(scenes())
def test_evaluator_invariants(scene):
    gts, dets = scene
    m = simple_manifest(gts)
    base = evaluate(dets, m).overall
    assert base["AP50"] >= base["AP75"] >= 0
    assert base["AP50"] >= base["AP"] - 1e-12
    # strictly monotone score rescaling
    rescaled = evaluate([DetRecord(d.image_id, d.class_id, d.box, d.score**3 / 2) for d in dets], m).overall
    assert rescaled == base
    # duplicate of a detection, scored lower than everything else
    if dets:
        dup = DetRecord(dets[0].image_id, 1, dets[0].box, 0.001)
        worse = evaluate(dets + [dup], m).overall
        for k, v in base.items():
            if v is not None:
                assert worse[k] <= v + 1e-12
