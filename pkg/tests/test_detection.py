from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portmon import detection as det
from portmon.cli import data_path
from portmon.detection import BBox, Checkpoint, Continue, Detection, EarlyStopState, Stop

from oracles import brute_force_ap, raster_iou


# -- IoU -------------------------------------------------------------------------------


def test_iou_examples():
    a = BBox(0, 0, 10, 10)
    assert det.iou(a, a) == 1.0
    assert det.iou(a, BBox(20, 20, 30, 30)) == 0.0
    assert det.iou(a, BBox(5, 5, 15, 15)) == pytest.approx(25 / 175, abs=1e-12)
    assert det.iou(a, BBox(10, 0, 20, 10)) == 0.0  # touching edges


int_box = st.tuples(st.integers(0, 62), st.integers(0, 62), st.integers(1, 30), st.integers(1, 30)).map(
    lambda v: BBox(v[0], v[1], min(v[0] + v[2], 64), min(v[1] + v[3], 64))
)


@settings(max_examples=300, deadline=None)
@given(int_box, int_box)
def test_iou_matches_raster(a, b):
    assert abs(det.iou(a, b) - raster_iou(a, b)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(int_box, int_box, st.floats(-100, 100), st.floats(-100, 100))
def test_iou_symmetric_and_translation_invariant(a, b, dx, dy):
    assert det.iou(a, b) == det.iou(b, a)
    assert det.iou(a, a) == 1.0
    sa = BBox(a.x_min + dx, a.y_min + dy, a.x_max + dx, a.y_max + dy)
    sb = BBox(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy)
    assert det.iou(sa, sb) == pytest.approx(det.iou(a, b), abs=1e-9)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        BBox(5, 5, 5, 10)


# -- AP ------------------------------------------------------------------------------------


def test_ap_hand_case():
    g1, g2 = BBox(0, 0, 10, 10), BBox(50, 50, 60, 60)
    dets = [
        Detection(g1, 0.9, scene_id="s"),
        Detection(BBox(100, 100, 110, 110), 0.8, scene_id="s"),
        Detection(g2, 0.7, scene_id="s"),
    ]
    assert abs(det.average_precision(dets, {"s": [g1, g2]}) - (0.5 + 0.5 * 2 / 3)) < 1e-9


def test_ap_perfect_and_all_miss():
    gts = {"a": [BBox(0, 0, 10, 10)], "b": [BBox(5, 5, 20, 20), BBox(30, 30, 40, 40)]}
    perfect = [Detection(g, 1.0, scene_id=s) for s, gs in gts.items() for g in gs]
    assert det.average_precision(perfect, gts) == 1.0
    wrong = [Detection(BBox(200, 200, 210, 210), 0.9, scene_id="a")]
    assert det.average_precision(wrong, gts) == 0.0
    assert det.average_precision([], gts) == 0.0


def test_ap_needs_ground_truth():
    with pytest.raises(ValueError):
        det.average_precision([], {"a": []})


def test_duplicate_detection_is_false_positive():
    g = BBox(0, 0, 10, 10)
    flags = det.match_detections([Detection(g, 0.9, scene_id="s"), Detection(g, 0.8, scene_id="s")], {"s": [g]})
    assert flags == [True, False]


small_box = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(2, 10), st.integers(2, 10)).map(
    lambda v: BBox(v[0], v[1], v[0] + v[2], v[1] + v[3])
)


@st.composite
def ap_instance(draw):
    scenes = ["a", "b"]
    gts = {s: [] for s in scenes}
    for _ in range(draw(st.integers(1, 4))):
        gts[draw(st.sampled_from(scenes))].append(draw(small_box))
    dets = []
    for _ in range(draw(st.integers(0, 6))):
        s = draw(st.sampled_from(scenes))
        if gts[s] and draw(st.booleans()):
            g = draw(st.sampled_from(gts[s]))
            shift = draw(st.integers(-2, 2))
            box = BBox(g.x_min + shift, g.y_min, g.x_max + shift, g.y_max)
        else:
            box = draw(small_box)
        score = draw(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]))
        dets.append(Detection(box, score, scene_id=s))
    return dets, gts


@settings(max_examples=500, deadline=None)
@given(ap_instance())
def test_ap_matches_brute_force(inst):
    dets, gts = inst
    assert abs(det.average_precision(dets, gts) - brute_force_ap(dets, gts)) < 1e-9


def test_threshold_sweep_shape():
    scenes = det.make_test_scenes(6, 1)
    dets = [d for s in scenes for d in det.detect(s, det.DetectorNoise())]
    rows = det.threshold_sweep(dets, det.ground_truth_index(scenes))
    ths = [r[0] for r in rows]
    recalls = [r[2] for r in rows]
    assert ths == sorted(ths) and recalls == sorted(recalls, reverse=True)
    assert all(0 <= p <= 1 and 0 <= r <= 1 for _, p, r in rows)


# -- oracle detector ----------------------------------------------------------------------------


def test_perfect_detector_returns_ground_truth():
    scene = det.make_test_scenes(1, 3)[0]
    found = det.detect(scene, det.DetectorNoise.perfect())
    assert [d.bbox for d in found] == [b.bbox for b in scene.boxes]
    assert all(d.score == 1.0 for d in found)


def test_full_miss_rate():
    scene = det.make_test_scenes(1, 3)[0]
    assert det.detect(scene, replace(det.DetectorNoise.perfect(), miss_rate=1.0)) == []


def test_detector_deterministic():
    scenes = det.make_test_scenes(4, 5)
    noise = det.DetectorNoise()
    assert [det.detect(s, noise) for s in scenes] == [det.detect(s, noise) for s in scenes]


def test_calibration_on_bundled_set():
    scenes = det.load_dataset(data_path("ships24"))
    noise = det.DetectorNoise.load(data_path("detector_noise.json"))
    assert len(scenes) == 24
    ap, _ = det.evaluate(scenes, noise)
    assert abs(ap - 0.92) <= 0.05


def test_calibration_holds_across_seeds():
    scenes = det.load_dataset(data_path("ships24"))
    aps = [det.evaluate(scenes, replace(det.DetectorNoise(), seed=s))[0] for s in range(40)]
    assert abs(np.mean(aps) - 0.92) < 0.03


def test_dataset_round_trip(tmp_path):
    scenes = det.make_test_scenes(3, 9)
    det.save_dataset(scenes, tmp_path)
    assert det.load_dataset(tmp_path) == scenes


def test_empty_dataset_rejected(tmp_path):
    (tmp_path / "index.json").write_text('{"scenes": []}')
    with pytest.raises(ValueError):
        det.load_dataset(tmp_path)


# -- berthing gate ----------------------------------------------------------------------------


def frac_box(frac, cx=512, cy=700):
    side = np.sqrt(frac) * 1024
    return BBox(cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2)


def test_gate_examples():
    gate = det.BerthingGate(area_min_frac=0.05, area_max_frac=0.8)
    ok, chosen = det.classify_berthing([Detection(frac_box(0.2), 0.8)], gate)
    assert ok and chosen is not None
    ok, chosen = det.classify_berthing([Detection(frac_box(0.2, cy=100), 0.8)], gate)
    assert not ok and chosen is None
    a, b = Detection(frac_box(0.2), 0.9), Detection(frac_box(0.3), 0.7)
    assert det.classify_berthing([b, a], gate)[1] is a


def test_gate_tie_breaks():
    small, big = Detection(frac_box(0.1), 0.8), Detection(frac_box(0.2), 0.8)
    assert det.classify_berthing([small, big])[1] is big
    left, right = Detection(frac_box(0.1, cx=400), 0.8), Detection(frac_box(0.1, cx=600), 0.8)
    assert det.classify_berthing([right, left])[1] is left


def test_gate_rejects_bad_bounds():
    with pytest.raises(ValueError):
        det.BerthingGate(area_min_frac=0.5, area_max_frac=0.5)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0.01, 0.6), st.integers(150, 870), st.integers(150, 870), st.floats(0.01, 1.0)), max_size=6),
    st.floats(0.01, 0.99),
)
def test_gate_choice_invariant_to_score_scaling(specs, k):
    dets = [Detection(frac_box(f, cx, cy), s) for f, cx, cy, s in specs if (f**0.5 * 512) < min(cx, cy, 1024 - cx, 1024 - cy)]
    scaled = [replace(d, score=d.score * k) for d in dets]
    a, ca = det.classify_berthing(dets)
    b, cb = det.classify_berthing(scaled)
    assert a == b
    assert (ca is None) == (cb is None)
    if ca is not None:
        assert ca.bbox == cb.bbox


# -- early stopping ------------------------------------------------------------------------------


def replay(trace, **kw):
    state = EarlyStopState(**kw)
    out = []
    for epoch, ap in enumerate(trace, start=1):
        r = det.early_stop_step(state, epoch, ap)
        out.append(r)
        if isinstance(r, Stop):
            break
    return out


def test_stops_at_94_keeping_44():
    trace = [0.5 + 0.01 * e for e in range(1, 45)] + [0.9] * 200
    out = replay(trace)
    assert out[43] == Checkpoint(44)
    assert len(out) == 94 and out[-1] == Stop(44)
    assert all(r == Continue() for r in out[44:93])


def test_max_epoch_cap():
    out = replay([e / 1000 for e in range(1, 600)])
    assert len(out) == 500 and out[-1] == Stop(500)


def test_first_epoch_checkpoints():
    assert replay([0.0])[0] == Checkpoint(1)


def test_equal_ap_does_not_reset_patience():
    out = replay([0.5] * 60)
    assert out[0] == Checkpoint(1) and out[-1] == Stop(1) and len(out) == 51


def test_out_of_order_epoch_rejected():
    state = EarlyStopState()
    det.early_stop_step(state, 1, 0.3)
    with pytest.raises(ValueError):
        det.early_stop_step(state, 3, 0.4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=120), st.integers(1, 20), st.integers(1, 100))
def test_stop_rule_property(trace, patience, max_epochs):
    out = replay(trace, patience=patience, max_epochs=max_epochs)
    # first epoch where patience runs out
    best, since, expected = -np.inf, 0, None
    for e, ap in enumerate(trace, start=1):
        if ap > best:
            best, since = ap, 0
        else:
            since += 1
        if since >= patience or e >= max_epochs:
            expected = e
            break
    if expected is None:
        assert not isinstance(out[-1], Stop)
        return
    assert len(out) == expected and isinstance(out[-1], Stop)
    seen = trace[:expected]
    assert out[-1].best_epoch == int(np.argmax(seen)) + 1
