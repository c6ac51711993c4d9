import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from hiretrieval.lpr_eval import (
    box_overlap,
    cer,
    evaluate_pipeline,
    missing_detector,
    oracle_detector,
    template_recognizer,
    truth_recognizer,
    write_report,
)
from hiretrieval.plates.synth import (
    BoundingBox,
    ManifestRow,
    PlateConfig,
    PlateSpec,
    center_crop,
    generate_scenes,
    make_scene,
    random_spec,
    read_manifest,
    render,
)


def test_cer_examples():
    assert cer("ABC123", "ABC123").cer == 0
    r = cer("ABC123", "A8C123")
    assert (r.substitutions, r.deletions, r.insertions) == (1, 0, 0)
    assert r.cer == pytest.approx(1 / 6)
    r = cer("AB", "ABXY")
    assert (r.substitutions, r.deletions, r.insertions) == (0, 0, 2)
    assert r.cer == 1.0
    assert cer("AB", "ABXYZW").cer == 2.0


def test_cer_empty_reference():
    with pytest.raises(ValueError):
        cer("", "A")


def test_cer_exhaustive_small_alphabet():
    # every pair over {A,B} up to length 4 on each side
    words = [""] + ["".join(p) for n in range(1, 5) for p in itertools.product("AB", repeat=n)]
    for a in words[1:]:
        for b in words:
            r = cer(a, b)
            assert r.edits == oracles.edit_distance(a, b)
            assert r.substitutions + r.deletions <= max(len(a), len(b))
            assert len(a) - r.deletions + r.insertions == len(b)


@given(st.text("ABC12", min_size=1, max_size=8), st.text("ABC12", max_size=8))
def test_cer_matches_recursive_oracle(a, b):
    assert cer(a, b).edits == oracles.edit_distance(a, b)


@given(st.text("AB1", min_size=1, max_size=8), st.text("AB1", min_size=1, max_size=8))
def test_cer_symmetry(a, b):
    assert cer(a, b).cer * len(a) == pytest.approx(cer(b, a).cer * len(b))


def test_box_overlap_examples():
    a = BoundingBox(0, 0, 2, 2)
    assert box_overlap(a, a).ds == 1 and box_overlap(a, a).iou == 1
    d = box_overlap(a, BoundingBox(5, 5, 2, 2))
    assert d.ds == 0 and d.iou == 0
    o = box_overlap(a, BoundingBox(1, 0, 2, 2))
    assert o.iou == pytest.approx(1 / 3) and o.ds == pytest.approx(0.5)


boxes = st.builds(
    BoundingBox,
    st.integers(0, 30),
    st.integers(0, 30),
    st.integers(1, 30),
    st.integers(1, 30),
)


@given(boxes, boxes)
def test_ds_iou_identity_and_oracle(a, b):
    o = box_overlap(a, b)
    ds, iou = oracles.box_overlap(a.as_list(), b.as_list())
    assert o.ds == pytest.approx(ds, abs=1e-12) and o.iou == pytest.approx(iou, abs=1e-12)
    assert o.ds == pytest.approx(2 * o.iou / (1 + o.iou), abs=1e-12)


def _row(box=BoundingBox(50, 40, 120, 40), text="AB123"):
    return ManifestRow(file="x", text=text, spec=None, box=box)


def test_oracle_detector_exact_at_zero_jitter():
    det = oracle_detector(0.0)
    img = np.zeros((200, 300, 3), np.uint8)
    row = _row()
    assert det(img, row, np.random.default_rng(0)) == row.box


def test_oracle_detector_jitter_rates():
    img = np.zeros((200, 300, 3), np.uint8)
    row = _row()
    rng = np.random.default_rng(0)
    small = oracle_detector(0.05)
    big = oracle_detector(1.0)
    ok_small = np.mean([box_overlap(small(img, row, rng), row.box).ds >= 0.5 for _ in range(1000)])
    ok_big = np.mean([box_overlap(big(img, row, rng), row.box).ds >= 0.5 for _ in range(1000)])
    assert ok_small > 0.99
    assert ok_big < 0.8
    with pytest.raises(ValueError):
        oracle_detector(-0.1)


def test_jittered_box_stays_inside_image():
    img = np.zeros((60, 80, 3), np.uint8)
    row = _row(BoundingBox(0, 0, 80, 60))
    rng = np.random.default_rng(1)
    det = oracle_detector(1.0)
    for _ in range(200):
        b = det(img, row, rng)
        assert b.fits(80, 60)


def test_template_recognizer_round_trip():
    img = render(PlateSpec(text="XY789", width=200, height=60))[0]
    assert template_recognizer(center_crop(img)) == "XY789"


def test_template_recognizer_light_on_dark():
    spec = PlateSpec(text="QRS456", width=240, height=70, bg_color=(20, 40, 120), text_color=(250, 220, 40))
    assert template_recognizer(center_crop(render(spec)[0])) == "QRS456"


def test_template_recognizer_heavy_blur_does_not_crash():
    img = render(PlateSpec(text="XY789", width=200, height=60, blur_sigma=5.0))[0]
    out = template_recognizer(center_crop(img))
    assert isinstance(out, str)
    assert cer("XY789", out).cer >= 0


def test_template_recognizer_blank_image():
    img = np.full((30, 100, 3), 200, np.uint8)
    assert template_recognizer(img) == ""
    assert cer("AB123", "").cer == 1.0


def _scenes(n, seed=0):
    rng_specs = np.random.default_rng(seed)
    rows, images = [], []
    for i in range(n):
        spec = random_spec(rng_specs, PlateConfig.clean())
        sc = make_scene(spec, np.random.default_rng([seed, i]))
        rows.append(ManifestRow(file=f"scene_{i}", text=sc.text, spec=spec, box=sc.box))
        images.append(sc.image)
    return rows, images


def test_pipeline_oracle_identity():
    rows, images = _scenes(20)
    rep, items = evaluate_pipeline(rows, oracle_detector(0.0), truth_recognizer(), images=images)
    assert rep.lpd_accuracy == rep.lpr_accuracy == rep.lpr_accuracy_given_lpd == 1.0
    assert rep.avg_cer == rep.avg_cer_given_lpd == 0.0
    assert len(items) == 20


def test_pipeline_missing_detector():
    rows, images = _scenes(10)
    rep, _ = evaluate_pipeline(rows, missing_detector(), template_recognizer, images=images)
    assert rep.lpd_accuracy == 0.0
    assert rep.lpr_accuracy_given_lpd is None and rep.avg_cer_given_lpd is None
    assert rep.avg_cer > 0 and rep.lpr_accuracy == 0.0


def test_pipeline_clean_template():
    rows, images = _scenes(40, seed=3)
    rep, _ = evaluate_pipeline(rows, oracle_detector(0.0), template_recognizer, images=images)
    assert rep.lpr_accuracy == 1.0 and rep.avg_cer == 0.0


def test_pipeline_conditional_subset():
    rows, images = _scenes(60, seed=4)
    rep, items = evaluate_pipeline(rows, oracle_detector(1.0), template_recognizer, images=images, seed=2)
    gated = [it for it in items if it.lpd_ok]
    assert 0 < len(gated) < len(items)
    assert rep.lpd_accuracy == len(gated) / len(items)
    assert rep.avg_cer_given_lpd == pytest.approx(np.mean([it.cer for it in gated]))
    for v in (rep.lpd_accuracy, rep.lpr_accuracy, rep.lpr_accuracy_given_lpd):
        assert 0 <= v <= 1


def test_pipeline_row_without_box():
    rows, images = _scenes(1)
    rows[0].box = None
    with pytest.raises(ValueError):
        evaluate_pipeline(rows, oracle_detector(0.0), truth_recognizer(), images=images)


def test_pipeline_from_disk_and_report(tmp_path):
    m = generate_scenes(tmp_path / "scenes", 5, seed=1, config=PlateConfig.clean())
    rep, items = evaluate_pipeline(read_manifest(m), oracle_detector(0.0), template_recognizer)
    assert rep.lpr_accuracy == 1.0
    write_report(tmp_path / "out", rep, items)
    saved = json.loads((tmp_path / "out" / "lpr_report.json").read_text())
    assert saved["n"] == 5
    assert len((tmp_path / "out" / "lpr_items.csv").read_text().splitlines()) == 6
