"""Relevance scoring, region growing, and the full refinement loop."""

import numpy as np
import pytest
from scipy.special import expit

from splatseg.inference import (AUTO_T_BOUNDS, Query, compute_relevance,
                                expand_region, normalized_instance_features,
                                otsu_threshold, query_by_embedding, refine,
                                region_score, resolve_similarity_threshold)

from conftest import make_random_scene
from oracles import brute_refine, reference_relevance


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_query(rng, d_language=8, n_canonical=3, **kw):
    canon = rng.standard_normal((n_canonical, d_language))
    canon /= np.linalg.norm(canon, axis=1, keepdims=True)
    return Query(embedding=unit(rng.standard_normal(d_language)),
                 canonical=canon, **kw)


# -- relevance -----------------------------------------------------------------

def test_relevance_is_half_when_prompt_equals_canonical():
    scene = make_random_scene(0, with_language=True)
    q = unit(np.arange(1.0, 9.0))
    rel = compute_relevance(scene, Query(embedding=q, canonical=q[None]))
    assert np.all(rel == 0.5)       # logit is exactly zero everywhere


def test_relevance_for_orthogonal_canonical():
    scene = make_random_scene(1, with_language=True)
    q = np.zeros(8)
    q[0] = 1.0
    c = np.zeros(8)
    c[1] = 1.0
    scene.language_features = np.tile(q, (len(scene), 1)).astype(np.float32)
    rel = compute_relevance(scene, Query(embedding=q, canonical=c[None]))
    want = np.e / (1.0 + np.e)      # logistic(1)
    assert np.max(np.abs(rel - want)) <= 1e-9


def test_relevance_matches_reference():
    rng = np.random.default_rng(2)
    for seed in range(4):
        scene = make_random_scene(seed, with_language=True)
        query = random_query(rng)
        got = compute_relevance(scene, query)
        want = reference_relevance(scene.language_features, query.embedding,
                                   query.canonical)
        assert np.max(np.abs(got - want)) <= 1e-12


def test_relevance_requires_language_field():
    scene = make_random_scene(3)
    with pytest.raises(ValueError, match="language"):
        compute_relevance(scene, random_query(np.random.default_rng(0)))


# -- region growing ------------------------------------------------------------

def test_normalized_features_zero_rows_stay_zero():
    scene = make_random_scene(4)
    scene.instance_features[5] = 0.0
    normed = normalized_instance_features(scene)
    assert np.allclose(np.linalg.norm(normed, axis=1)[np.arange(len(scene)) != 5],
                       1.0)
    assert np.all(normed[5] == 0.0)


def test_expand_region_keeps_center_even_with_zero_feature():
    scene = make_random_scene(5)
    scene.instance_features[7] = 0.0
    members = expand_region(scene, 7, 0.5)
    assert members.tolist() == [7]


def test_expand_region_separates_planted_clusters():
    scene = make_random_scene(6, n=30, d_instance=4)
    feats = np.zeros((30, 4), dtype=np.float32)
    feats[:15, 0] = 1.0
    feats[15:, 1] = 1.0
    scene.instance_features = feats
    a = expand_region(scene, 3, 0.9)
    assert a.tolist() == list(range(15))
    b = expand_region(scene, 20, 0.9)
    assert b.tolist() == list(range(15, 30))


def test_region_score_is_opacity_weighted_mean():
    scene = make_random_scene(7)
    rng = np.random.default_rng(7)
    rel = rng.uniform(size=len(scene))
    members = [3, 10, 11]
    opac = scene.opacities[members].astype(np.float64)
    want = float(opac @ rel[members] / opac.sum())
    assert region_score(scene, members, rel) == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError, match="empty"):
        region_score(scene, [], rel)
    scene.opacities[members] = 0.0
    with pytest.raises(ValueError, match="opacity"):
        region_score(scene, members, rel)


def test_otsu_splits_bimodal_sample():
    rng = np.random.default_rng(8)
    values = np.concatenate([rng.normal(0.1, 0.02, 300),
                             rng.normal(0.9, 0.02, 300)])
    labels = np.arange(600) >= 300
    split = otsu_threshold(values)
    # first-maximum rule puts the split at the low edge of the gap; what
    # matters is that it classifies the two modes correctly
    assert np.mean((values > split) == labels) >= 0.99
    assert otsu_threshold(np.full(10, 0.4)) == 0.4
    with pytest.raises(ValueError, match="empty"):
        otsu_threshold(np.empty(0))


def test_threshold_resolution_modes():
    scene = make_random_scene(9, n=20)
    normed = normalized_instance_features(scene)
    seeds = np.arange(20, dtype=np.int64)
    fixed = random_query(np.random.default_rng(9), similarity_threshold=0.77)
    assert resolve_similarity_threshold(fixed, seeds, normed) == 0.77

    auto = random_query(np.random.default_rng(9), threshold_mode="auto",
                        similarity_threshold=0.77)
    # no seeds: fall back to the fixed value
    assert resolve_similarity_threshold(auto, np.empty(0, np.int64), normed) == 0.77
    # all features identical: similarity is constantly 1, clamp at the ceiling
    ones = np.ones_like(normed) / np.sqrt(normed.shape[1])
    assert resolve_similarity_threshold(auto, seeds, ones) == AUTO_T_BOUNDS[1]
    # two orthogonal blocks: Otsu lands near 0.5, clamp at the floor
    blocks = np.zeros_like(normed)
    blocks[:10, 0] = 1.0
    blocks[10:, 1] = 1.0
    assert resolve_similarity_threshold(auto, seeds, blocks) == AUTO_T_BOUNDS[0]


def test_auto_threshold_subsamples_deterministically():
    scene = make_random_scene(10, n=600, d_instance=4)
    normed = normalized_instance_features(scene)
    seeds = np.arange(600, dtype=np.int64)
    auto = random_query(np.random.default_rng(10), threshold_mode="auto")
    got = resolve_similarity_threshold(auto, seeds, normed)
    picks = np.unique(np.linspace(0, 599, 256).astype(int))
    sims = normed[seeds[picks]] @ normed.T
    want = float(np.clip(otsu_threshold(sims.ravel()), *AUTO_T_BOUNDS))
    assert got == want


# -- refinement ----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_refine_matches_brute_force(seed):
    scene = make_random_scene(seed, n=35, with_language=True)
    rng = np.random.default_rng(100 + seed)
    query = random_query(rng, tau=0.45, similarity_threshold=0.6)
    result = refine(scene, query)
    want = brute_refine(scene, query.embedding, query.canonical,
                        tau=query.tau, threshold=result.threshold)

    assert np.max(np.abs(result.relevance - want["relevance"])) <= 1e-12
    assert result.seeds.tolist() == want["seeds"]
    assert result.skipped_seeds.tolist() == want["skipped"]
    assert result.final.tolist() == want["final"]
    assert len(result.regions) == len(want["trace"])
    for got_r, want_r in zip(result.regions, want["trace"]):
        assert got_r.center == want_r["center"]
        assert got_r.members.tolist() == want_r["members"]
        assert got_r.accepted == want_r["accepted"]
        if np.isnan(want_r["score"]):
            assert np.isnan(got_r.score)
        else:
            assert got_r.score == pytest.approx(want_r["score"], abs=1e-12)


def test_refine_auto_mode_matches_brute_force_at_resolved_threshold():
    scene = make_random_scene(11, n=40, with_language=True)
    query = random_query(np.random.default_rng(11), tau=0.45,
                         threshold_mode="auto")
    result = refine(scene, query)
    assert AUTO_T_BOUNDS[0] <= result.threshold <= AUTO_T_BOUNDS[1]
    want = brute_refine(scene, query.embedding, query.canonical,
                        tau=query.tau, threshold=result.threshold)
    assert result.final.tolist() == want["final"]


def test_refine_trace_invariants():
    scene = make_random_scene(12, n=50, with_language=True)
    query = random_query(np.random.default_rng(12), tau=0.45,
                         similarity_threshold=0.55)
    result = refine(scene, query)
    assert result.seeds.size > 0 and not result.empty

    # every seed is either expanded once or skipped once
    centers = [r.center for r in result.regions]
    assert sorted(centers + result.skipped_seeds.tolist()) == result.seeds.tolist()
    # processing order: descending relevance, ties by ascending index
    keys = [(-result.relevance[c], c) for c in centers]
    assert keys == sorted(keys)
    # the final mask is exactly the union of accepted regions
    union = set()
    for r in result.accepted_regions:
        assert r.score > query.tau
        union.update(r.members.tolist())
    assert result.final.tolist() == sorted(union)
    # rejected regions leave no mark beyond what accepted regions cover
    for r in result.regions:
        if not r.accepted:
            assert not (set(r.members) - union) & set(result.final.tolist())


def test_refine_with_no_seeds_is_empty():
    scene = make_random_scene(13, with_language=True)
    query = random_query(np.random.default_rng(13), tau=0.999,
                         similarity_threshold=0.8)
    result = refine(scene, query)
    assert result.empty
    assert result.seeds.size == 0 and result.final.size == 0
    assert result.regions == [] and result.skipped_seeds.size == 0
    assert result.threshold == 0.8


def test_refine_scores_against_whole_region_not_just_seeds():
    # one highly relevant seed pulls in low-relevance neighbors; the region
    # score must average over all members, which can sink the acceptance
    scene = make_random_scene(14, n=10, d_instance=3, d_language=4)
    feats = np.tile(np.array([1.0, 0.0, 0.0], dtype=np.float32), (10, 1))
    scene.instance_features = feats
    q = unit([1.0, 0.0, 0.0, 0.0])
    c = unit([0.0, 1.0, 0.0, 0.0])
    lang = np.tile(c, (10, 1))
    lang[0] = q                      # only gaussian 0 speaks the prompt
    scene.language_features = lang.astype(np.float32)
    scene.opacities[:] = 1.0
    result = refine(scene, Query(embedding=q, canonical=c[None], tau=0.5,
                                 similarity_threshold=0.9))
    assert result.seeds.tolist() == [0]
    [region] = result.regions
    assert region.members.tolist() == list(range(10))
    low, high = expit(-1.0), expit(1.0)
    want = (high + 9 * low) / 10.0
    assert region.score == pytest.approx(want, abs=1e-12)
    assert not region.accepted and result.final.size == 0


def test_query_validation():
    rng = np.random.default_rng(15)
    good = unit(rng.standard_normal(8))
    with pytest.raises(ValueError, match="unit-norm"):
        Query(embedding=good * 2.0, canonical=good[None])
    with pytest.raises(ValueError, match="unit-norm"):
        Query(embedding=good, canonical=good[None] * 0.5)
    with pytest.raises(ValueError, match="tau"):
        Query(embedding=good, canonical=good[None], tau=1.0)
    with pytest.raises(ValueError, match="threshold_mode"):
        Query(embedding=good, canonical=good[None], threshold_mode="otsu")
    with pytest.raises(ValueError, match="dimension"):
        Query(embedding=good, canonical=unit(rng.standard_normal(5))[None])
    with pytest.raises(ValueError, match="similarity_threshold"):
        Query(embedding=good, canonical=good[None], similarity_threshold=1.0)


def test_query_by_embedding_normalizes_and_rejects_zeros():
    scene = make_random_scene(16, with_language=True)
    rng = np.random.default_rng(16)
    raw = rng.standard_normal(8) * 3.0
    canon = rng.standard_normal((2, 8)) * 2.0
    result = query_by_embedding(scene, raw, canonical=canon, tau=0.45)
    unit_canon = canon / np.linalg.norm(canon, axis=1, keepdims=True)
    direct = refine(scene, Query(embedding=unit(raw), canonical=unit_canon,
                                 tau=0.45))
    assert result.final.tolist() == direct.final.tolist()
    with pytest.raises(ValueError, match="zero-norm"):
        query_by_embedding(scene, np.zeros(8), canonical=canon)
    with pytest.raises(ValueError, match="zero-norm"):
        query_by_embedding(scene, raw, canonical=np.zeros((1, 8)))
