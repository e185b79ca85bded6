"""IoU metrics, benchmark case construction, and the three-mode evaluation."""

import json

import numpy as np
import pytest

from splatseg.evaluate import (EVAL_MODES, EvalReport, QueryEval,
                               cases_from_vocabulary, format_report_table,
                               iou_2d_rendered, iou_3d, object_mask_stack,
                               report_to_json, run_benchmark)
from splatseg.rasterizer import RasterConfig, compute_weights
from splatseg.synthetic import SceneSpec, generate_synthetic_scene

from conftest import make_camera, make_random_scene
from oracles import set_iou


def eval_scene(seed=0, **kw):
    spec = SceneSpec(num_objects=2, gaussians_per_object=20, num_views=2,
                     image_size=32, d_instance=4, d_language=8,
                     background_gaussians=0, seed=seed, **kw)
    return generate_synthetic_scene(spec)


def idealize(scene):
    """Plant perfectly separable instance and language fields."""
    ids = scene.gt_object_ids.astype(int)
    feats = np.zeros((len(scene), scene.d_instance), dtype=np.float32)
    feats[np.arange(len(scene)), ids % scene.d_instance] = 1.0
    scene.instance_features = feats
    lang = np.stack([scene.vocabulary[i] for i in ids])
    scene.language_features = lang.astype(np.float32)
    return scene


# -- metrics -------------------------------------------------------------------

def test_iou_3d_matches_set_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pred = rng.choice(50, size=rng.integers(1, 30), replace=False)
        gt = rng.choice(50, size=rng.integers(1, 30), replace=False)
        assert iou_3d(pred, gt) == pytest.approx(set_iou(pred, gt), abs=1e-15)


def test_iou_3d_edge_cases():
    assert iou_3d([], [1, 2]) == 0.0
    assert iou_3d([1, 1, 2], [2, 1]) == 1.0     # duplicates collapse
    with pytest.raises(ValueError, match="empty ground-truth"):
        iou_3d([1], [])


def test_iou_2d_rendered_self_mask_is_perfect():
    scene = make_random_scene(1, n=20)
    camera = make_camera(1)
    pred = np.arange(0, 10)
    weights = compute_weights(scene.select(pred), camera, RasterConfig())
    gt = weights.alpha_map() >= 0.5
    assert iou_2d_rendered(scene, pred, camera, gt) == 1.0


def test_iou_2d_rendered_edge_cases():
    scene = make_random_scene(2, n=10)
    camera = make_camera(2)
    empty = np.zeros((camera.height, camera.width), dtype=bool)
    assert iou_2d_rendered(scene, [], camera, empty) == 1.0
    full = np.ones_like(empty)
    assert iou_2d_rendered(scene, [], camera, full) == 0.0
    with pytest.raises(ValueError, match="shape"):
        iou_2d_rendered(scene, [0], camera, np.zeros((4, 4), dtype=bool))


# -- ground-truth projection ---------------------------------------------------

def test_object_mask_stack_matches_generated_masks():
    scene = eval_scene()
    stacks = object_mask_stack(scene)
    assert len(stacks) == len(scene.views)
    for idmap, view in zip(stacks, scene.views):
        # without split segments the generator's masks are exactly object ids
        assert np.array_equal(idmap, view.instance_mask.astype(np.int64))


def test_object_mask_stack_uses_whole_objects_under_split_masks():
    scene = eval_scene(seed=3, split_objects=True)
    ids = set(scene.gt_object_ids.astype(int))
    for idmap in object_mask_stack(scene):
        assert set(np.unique(idmap)) <= ids | {0}


def test_object_mask_stack_requires_object_ids():
    with pytest.raises(ValueError, match="gt_object_ids"):
        object_mask_stack(make_random_scene(4))


# -- benchmark cases -----------------------------------------------------------

def test_cases_cover_vocabulary_in_order():
    scene = eval_scene()
    cases = cases_from_vocabulary(scene, np.random.default_rng(0))
    assert [c.label for c in cases] == ["object-1", "object-2"]
    for oid, case in zip((1, 2), cases):
        vec = scene.vocabulary[oid].astype(np.float64)
        assert np.allclose(case.embedding, vec / np.linalg.norm(vec))
        # one contrast per other object plus one random direction
        assert case.canonical.shape == (2, 8)
        assert np.allclose(np.linalg.norm(case.canonical, axis=1), 1.0)
        want = np.nonzero(scene.gt_object_ids == oid)[0]
        assert np.array_equal(case.gt_gaussians, want)
        assert len(case.gt_masks) == 2
        assert all(m.dtype == bool for m in case.gt_masks)


def test_stuff_canonical_never_wins_on_object_features():
    scene = eval_scene(seed=5)
    cases = cases_from_vocabulary(scene, np.random.default_rng(1),
                                  stuff_canonical=True)
    vocab = {o: v / np.linalg.norm(v)
             for o, v in ((o, scene.vocabulary[o].astype(np.float64))
                          for o in sorted(scene.vocabulary))}
    stuff = -np.mean(list(vocab.values()), axis=0)
    stuff /= np.linalg.norm(stuff)
    for case in cases:
        assert case.canonical.shape == (3, 8)   # other + stuff + random
        assert any(np.allclose(row, stuff) for row in case.canonical)
        for v in vocab.values():
            sims = case.canonical @ v
            assert float(stuff @ v) < sims.max()   # some object contrast beats it


def test_cases_require_vocabulary():
    scene = eval_scene(seed=6)
    scene.vocabulary = None
    with pytest.raises(ValueError, match="vocabulary"):
        cases_from_vocabulary(scene)


# -- benchmark run -------------------------------------------------------------

def test_ideal_scene_scores_perfectly_in_all_modes():
    scene = idealize(eval_scene(seed=7))
    cases = cases_from_vocabulary(scene, np.random.default_rng(2))
    reports = run_benchmark(scene, cases, tau=0.5, seed=0)
    assert set(reports) == set(EVAL_MODES)
    for mode in EVAL_MODES:
        assert reports[mode].miou == 1.0, mode
        assert reports[mode].macc == 1.0, mode
        assert reports[mode].miou_2d is not None
        assert reports[mode].miou_2d > 0.5


def test_run_benchmark_is_deterministic():
    scene = idealize(eval_scene(seed=8))
    cases = cases_from_vocabulary(scene, np.random.default_rng(3))
    a = report_to_json(run_benchmark(scene, cases, seed=4))
    b = report_to_json(run_benchmark(scene, cases, seed=4))
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_run_benchmark_validation():
    scene = idealize(eval_scene(seed=9))
    cases = cases_from_vocabulary(scene, np.random.default_rng(4))
    with pytest.raises(ValueError, match="empty benchmark"):
        run_benchmark(scene, [])
    with pytest.raises(ValueError, match="unknown mode"):
        run_benchmark(scene, cases, modes=("collab",))
    scene.vocabulary = None
    with pytest.raises(ValueError, match="num_clusters"):
        run_benchmark(scene, cases, modes=("instance_only",))
    # explicit cluster count substitutes for the missing vocabulary
    reports = run_benchmark(scene, cases, modes=("instance_only",),
                            num_clusters=2, include_2d=False)
    assert reports["instance_only"].miou == 1.0


def test_include_2d_flag_drops_2d_metrics():
    scene = idealize(eval_scene(seed=10))
    cases = cases_from_vocabulary(scene, np.random.default_rng(5))
    reports = run_benchmark(scene, cases, modes=("language_only",),
                            include_2d=False)
    rep = reports["language_only"]
    assert rep.miou_2d is None and rep.macc_2d is None
    assert all(r.iou_2d is None for r in rep.per_query)


# -- reporting -----------------------------------------------------------------

def rows(*ious):
    return [QueryEval(label=f"q{i}", iou_3d=v, runtime_s=0.1 * i)
            for i, v in enumerate(ious)]


def test_report_aggregation():
    rep = EvalReport.from_results(rows(1.0, 0.5, 0.1), acc_threshold=0.25)
    assert rep.miou == pytest.approx((1.0 + 0.5 + 0.1) / 3)
    assert rep.macc == pytest.approx(2 / 3)
    assert rep.miou_2d is None
    with pytest.raises(ValueError, match="empty"):
        EvalReport.from_results([])


def test_report_aggregates_2d_when_present():
    results = rows(1.0, 0.4)
    results[0].iou_2d = 0.8
    results[1].iou_2d = 0.2
    rep = EvalReport.from_results(results)
    assert rep.miou_2d == pytest.approx(0.5)
    assert rep.macc_2d == pytest.approx(0.5)


def test_report_outputs_carry_no_timings():
    reports = {"language_only": EvalReport.from_results(rows(0.9, 0.7))}
    table = format_report_table(reports)
    assert "mIoU" in table and "language_only" in table
    assert "runtime" not in table and "s/query" not in table

    payload = report_to_json(reports)
    text = json.dumps(payload)
    assert "runtime" not in text and "elapsed" not in text
    assert payload["language_only"]["miou"] == pytest.approx(0.8)
    assert [q["label"] for q in payload["language_only"]["per_query"]] == ["q0", "q1"]
