import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_config, tiny_frames
from mvaf import eval_harness as E
from mvaf import geometry as G
from mvaf import model as M
from mvaf.detection import Detections
from mvaf.kitti_io import Label, read_pgm


def car(x, y=0.0, yaw=0.0):
    return np.array([x, y, -1.0, 4.0, 1.7, 1.5, yaw])


FAR = car(60.0, 30.0)  # overlaps nothing used below


def label(height, occ=0, trunc=0.0):
    return Label("Car", trunc, occ, 0.0, (100.0, 100.0, 150.0, 100.0 + height), (1.5, 1.7, 4.0), (0.0, 1.5, 10.0), 0.0)


def ap(dets, gts, **kw):
    return E.ap_40(dets, gts, **kw).ap


# -- hand-derived values --------------------------------------------------------------------------
def test_perfect_detections():
    gts = [E.FrameGT([car(10), car(20, 5)]), E.FrameGT([car(15, -3)])]
    dets = [E.FrameDets(g.boxes, np.ones(len(g.boxes))) for g in gts]
    assert ap(dets, gts) == 1.0


def test_no_detections():
    gts = [E.FrameGT([car(10)])]
    assert ap([E.FrameDets(np.zeros((0, 7)), [])], gts) == 0.0


def test_no_ground_truth_is_zero():
    assert ap([E.FrameDets([car(10)], [0.9])], [E.FrameGT(np.zeros((0, 7)))]) == 0.0


def test_tp_then_fp():
    # PR points (1, 1), (1, 1/2): interpolated precision is 1 at every recall
    assert ap([E.FrameDets([car(10), FAR], [0.9, 0.8])], [E.FrameGT([car(10)])]) == pytest.approx(1.0, abs=1e-9)


def test_fp_then_tp():
    # PR points (0, 0), (1, 1/2)
    assert ap([E.FrameDets([FAR, car(10)], [0.9, 0.8])], [E.FrameGT([car(10)])]) == pytest.approx(0.5, abs=1e-9)


def test_tp_fp_tp_over_two():
    # recall 1/2 at precision 1 covers 20 positions, the other 20 see 2/3
    dets = [E.FrameDets([car(10), FAR, car(20)], [0.9, 0.8, 0.7])]
    assert ap(dets, [E.FrameGT([car(10), car(20)])]) == pytest.approx((20 + 20 * 2 / 3) / 40, abs=1e-9)


def test_duplicate_is_false_positive():
    dets = [E.FrameDets([car(10), car(10.05)], [0.9, 0.8])]
    r = E.ap_40(dets, [E.FrameGT([car(10)])])
    assert r.ap == pytest.approx(1.0) and r.n_gt == 1


def test_tied_scores_form_one_point():
    dets = [E.FrameDets([FAR, car(10)], [0.5, 0.5])]
    assert ap(dets, [E.FrameGT([car(10)])]) == pytest.approx(0.5)


def test_dont_care_gt_match_is_ignored():
    gts = [E.FrameGT([car(10), car(20)], care=[True, False])]
    dets = [E.FrameDets([car(20), car(10)], [0.9, 0.8])]
    assert ap(dets, gts) == pytest.approx(1.0)


def test_dont_care_region_swallows_false_positive():
    gts = [E.FrameGT([car(10)], dontcare=[[0, 0, 50, 50]])]
    img = np.array([[10, 10, 40, 40], [200, 10, 260, 60]], dtype=float)
    dets = [E.FrameDets([FAR, car(10)], [0.9, 0.8], image_boxes=img)]
    assert ap(dets, gts) == pytest.approx(1.0)
    dets[0].image_boxes = img[::-1].copy()  # FP now outside the region
    assert ap(dets, gts) == pytest.approx(0.5)


def test_bev_iou_ignores_height():
    lifted = car(10)
    lifted[2] += 3.0
    dets = [E.FrameDets([lifted], [1.0])]
    gts = [E.FrameGT([car(10)])]
    assert ap(dets, gts, iou_fn=G.rotated_iou_bev) == 1.0
    assert ap(dets, gts) == 0.0


def test_precision_envelope_non_increasing():
    rng = np.random.default_rng(0)
    gt = np.stack([car(5 * i, rng.uniform(-5, 5)) for i in range(1, 9)])
    boxes = np.concatenate([gt[:6] + rng.normal(0, 0.1, (6, 7)) * [1, 1, 0, 0, 0, 0, 0.1], [FAR] * 4])
    r = E.ap_40([E.FrameDets(boxes, rng.uniform(0, 1, 10))], [E.FrameGT(gt)], iou_thr=0.5)
    assert np.all(np.diff(r.precision) <= 0) and 0 <= r.ap <= 1


# -- properties -------------------------------------------------------------------------------------
GT_SCENE = [E.FrameGT([car(10), car(20, 4), car(30, -4)]), E.FrameGT([car(12, 2), car(25)])]
CANDIDATES = [car(10), car(10.3), car(20, 4.2), car(30, -4), car(31, -4), FAR, car(12, 2), car(25.5), car(40)]


def scene(picks, scores):
    dets = [[], []]
    for (k, f), s in zip(picks, scores):
        dets[f].append((CANDIDATES[k], s))
    return [E.FrameDets(np.array([b for b, _ in d]).reshape(-1, 7), [s for _, s in d]) for d in dets]


detection_lists = st.lists(st.tuples(st.integers(0, len(CANDIDATES) - 1), st.integers(0, 1)), min_size=1, max_size=10)
score_lists = st.lists(st.floats(0.01, 1.0), min_size=10, max_size=10)


@settings(max_examples=60, deadline=None)
@given(picks=detection_lists, scores=score_lists, seed=st.integers(0, 2**16))
def test_order_invariance(picks, scores, seed):
    dets = scene(picks, scores)
    perm = np.random.default_rng(seed)
    shuffled = []
    for d in dets:
        p = perm.permutation(len(d.scores))
        shuffled.append(E.FrameDets(d.boxes[p], d.scores[p]))
    assert ap(shuffled, GT_SCENE, iou_thr=0.5) == ap(dets, GT_SCENE, iou_thr=0.5)


@settings(max_examples=60, deadline=None)
@given(picks=detection_lists, scores=score_lists, frame=st.integers(0, 1))
def test_low_scoring_miss_never_helps(picks, scores, frame):
    dets = scene(picks, scores)
    before = ap(dets, GT_SCENE, iou_thr=0.5)
    low = min(scores) / 2
    d = dets[frame]
    dets[frame] = E.FrameDets(np.vstack([d.boxes, FAR]), np.append(d.scores, low))
    assert ap(dets, GT_SCENE, iou_thr=0.5) <= before


@settings(max_examples=30, deadline=None)
@given(score=st.floats(0.01, 1.0), hit=st.booleans(), extra=st.integers(0, 3))
def test_singleton_closed_form(score, hit, extra):
    # one gt, one detection, then `extra` lower-scored misses
    boxes = [car(10) if hit else FAR] + [FAR] * extra
    scores = [score] + [score / (k + 2) for k in range(extra)]
    expected = 1.0 if hit else 0.0
    assert ap([E.FrameDets(boxes, scores)], [E.FrameGT([car(10)])]) == expected


# -- difficulty ------------------------------------------------------------------------------------------
@pytest.mark.parametrize("lab,expected", [
    (label(50), "easy"),
    (label(30, occ=1, trunc=0.2), "moderate"),
    (label(30, occ=2, trunc=0.45), "hard"),
    (label(10), None),
    (label(60, occ=3), None),
    (label(60, trunc=0.6), None),
])
def test_difficulty_of(lab, expected):
    assert E.difficulty_of(lab) == expected


def test_strata_are_cumulative():
    easy = label(50)
    assert all(E.qualifies(easy, d) for d in E.DIFFICULTIES)
    assert not E.qualifies(label(30, occ=1), "easy")
    assert E.qualifies(label(10), None) and not E.qualifies(label(10), "hard")


# -- ablation report ------------------------------------------------------------------------------------------
def test_csv_layout_and_failed_row():
    ok = E.AblationRow("APF", "ok", 1.5, 0.9, E.EvalResult(dict.fromkeys(E.DIFFICULTIES, 0.5),
                                                          dict.fromkeys(E.DIFFICULTIES, 0.6), {},
                                                          ap_loose={"3d": 0.9, "bev": 0.95}))
    bad = E.AblationRow("SC", "failed", error="NumericError: loss")
    rows = list(csv.DictReader(io.StringIO(E.AblationReport([ok, bad]).to_csv())))
    assert [r["variant"] for r in rows] == ["APF", "SC"]
    assert rows[0]["ap3d_moderate"] == "0.500000" and rows[0]["ap3d_all_loose"] == "0.900000"
    assert rows[1]["status"] == "failed" and rows[1]["ap3d_easy"] == "nan" and "NumericError" in rows[1]["error"]


def test_variant_configs():
    cfg = tiny_config()
    assert E.variant_config(cfg, "ES").model.fusion == "es"
    none = E.variant_config(cfg, "APW-none").model
    assert not (none.apw_cls or none.apw_ctr or none.apw_weight)
    assert E.variant_config(cfg, "APW-full") == E.variant_config(cfg, "APF")
    with pytest.raises(ValueError, match="unknown"):
        E.variant_config(cfg, "LATE")


def test_ablation_marks_failures_and_continues(tmp_path):
    cfg = tiny_config()
    frames = tiny_frames(cfg)
    report = E.run_ablation(cfg, ["SC", "BOGUS", "APW-none"], frames, out_dir=tmp_path)
    assert [r.status for r in report.rows] == ["ok", "failed", "ok"]
    assert len((tmp_path / "ablation.csv").read_text().splitlines()) == 4
    assert report.to_csv() == E.run_ablation(cfg, ["SC", "BOGUS", "APW-none"], frames).to_csv()


def test_evaluate_model_reports_all_strata():
    cfg = tiny_config()
    frames = tiny_frames(cfg)
    res = E.evaluate_model(M.build_model(cfg), frames, cfg)
    assert set(res.ap_3d) == set(E.DIFFICULTIES) and set(res.ap_loose) == {"3d", "bev"}
    assert all(0.0 <= v <= 1.0 for v in [*res.ap_3d.values(), *res.ap_bev.values()])
    assert "moderate" in res.summary()


def test_ground_truth_detections_score_perfectly():
    cfg = tiny_config()
    frames = tiny_frames(cfg)
    dets = [Detections(M.frame_boxes(f), np.ones(len(M.frame_boxes(f)))) for f in frames]
    res = E.evaluate_detections(frames, dets, cfg.model.image_size)
    assert res.ap_loose == {"3d": 1.0, "bev": 1.0}


# -- visualization ---------------------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def dumped(tmp_path_factory):
    cfg = tiny_config()
    frame = tiny_frames(cfg, n=1)[0]
    model = M.build_model(cfg)
    out = tmp_path_factory.mktemp("viz")
    return cfg, frame, model, E.dump_visualizations(model, frame, cfg, out)


def test_dump_files_and_dims(dumped):
    cfg, frame, model, paths = dumped
    names = {p.name.removeprefix(f"{frame.frame_id}_").removesuffix(".pgm") for p in paths}
    assert {"cv_before_fusion", "bev_after_fusion", "rv_after_fusion", "foreground_weight"} <= names
    for p in paths:
        assert read_pgm(p).shape == model.bev_spec.dims


def test_pixel_equals_point_feature_norm(dumped):
    cfg, frame, model, _ = dumped
    maps = E.visualization_maps(model, frame, cfg)
    out = model.eval()(M.make_batch([frame], cfg))
    norms = np.linalg.norm(out.point_views.bev.data, axis=1)
    cells = out.bev_cells[:, 1:]
    i = int(np.argmax(norms))
    r, c = cells[i]
    same = np.all(cells == cells[i], axis=1)
    assert maps["bev_before_fusion"][r, c] == pytest.approx(norms[same].max(), rel=1e-12)


def test_zero_model_gives_uniform_images(tmp_path):
    cfg = tiny_config()
    frame = tiny_frames(cfg, n=1)[0]
    model = M.build_model(cfg)
    for _, p in model.named_parameters():
        p.data[...] = 0.0
    cells = model.eval()(M.make_batch([frame], cfg)).bev_cells[:, 1:]
    occupied = np.zeros(model.bev_spec.dims, dtype=bool)
    occupied[cells[:, 0], cells[:, 1]] = True
    for p in E.dump_visualizations(model, frame, cfg, tmp_path):
        img = read_pgm(p)
        if p.name.endswith("foreground_weight.pgm"):
            # every gate is sigmoid(0); empty cells carry no points
            assert np.all(img[occupied] == 255) and np.all(img[~occupied] == 0)
        else:
            assert img.min() == img.max() == 0, p.name


def test_to_gray_scaling():
    np.testing.assert_array_equal(E.to_gray(np.array([[0.0, 1.0], [2.0, 4.0]])), [[0, 64], [128, 255]])
    assert E.to_gray(np.zeros((2, 3))).max() == 0
