"""Segmentation quality: 3D Gaussian-set IoU, rendered 2D mask IoU, benchmarks.

The benchmark runs each query in one or more modes:
  * instance_only   -- k-means clustering of the instance features (k = number of
                       objects, seeded, 10 restarts); the predicted set is the
                       cluster with the highest mean relevance.
  * language_only   -- relevance threshold only (no refinement).
  * collaborative   -- full relevance-seeded region growing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .inference import Query, compute_relevance, refine
from .rasterizer import RasterConfig, compute_weights
from .scene import GaussianScene

EVAL_MODES = ("instance_only", "language_only", "collaborative")
DEFAULT_ACC_THRESHOLD = 0.25


def iou_3d(pred: Sequence[int], gt: Sequence[int]) -> float:
    """Set IoU over Gaussian indices.  Empty prediction scores 0; empty ground
    truth is a caller error."""
    gt_arr = np.unique(np.asarray(gt, dtype=np.int64))
    if gt_arr.size == 0:
        raise ValueError("gt: empty ground-truth set")
    pred_arr = np.unique(np.asarray(pred, dtype=np.int64))
    if pred_arr.size == 0:
        return 0.0
    inter = np.intersect1d(pred_arr, gt_arr, assume_unique=True).size
    union = np.union1d(pred_arr, gt_arr).size
    return float(inter / union)


def iou_2d_rendered(scene: GaussianScene, pred: Sequence[int], camera,
                    gt_mask: np.ndarray, *, alpha_threshold: float = 0.5,
                    raster_config: RasterConfig = RasterConfig()) -> float:
    """Render only the predicted Gaussians, binarize alpha, IoU against a 2D mask.

    Both masks empty counts as a perfect 1.0 (nothing to segment, nothing squeezed).
    """
    gt = np.asarray(gt_mask).astype(bool)
    if gt.shape != (camera.height, camera.width):
        raise ValueError(
            f"gt_mask: expected shape {(camera.height, camera.width)}, got {gt.shape}"
        )
    pred_arr = np.unique(np.asarray(pred, dtype=np.int64))
    if pred_arr.size == 0:
        pred_mask = np.zeros_like(gt)
    else:
        weights = compute_weights(scene.select(pred_arr), camera, raster_config)
        pred_mask = weights.alpha_map() >= alpha_threshold
    inter = np.count_nonzero(pred_mask & gt)
    union = np.count_nonzero(pred_mask | gt)
    if union == 0:
        return 1.0
    return float(inter / union)


@dataclass
class QueryCase:
    """One benchmark query with its ground truth."""

    label: str
    embedding: np.ndarray                 # (d_L,) unit
    canonical: np.ndarray                 # (K,d_L) unit rows
    gt_gaussians: np.ndarray              # indices
    gt_masks: Optional[List[np.ndarray]] = None   # per scene view, bool/int


@dataclass
class QueryEval:
    label: str
    iou_3d: float
    runtime_s: float
    iou_2d: Optional[float] = None


@dataclass
class EvalReport:
    per_query: List[QueryEval]
    miou: float
    macc: float
    acc_threshold: float
    mean_runtime_s: float
    miou_2d: Optional[float] = None
    macc_2d: Optional[float] = None

    @classmethod
    def from_results(cls, results: List[QueryEval],
                     acc_threshold: float = DEFAULT_ACC_THRESHOLD) -> "EvalReport":
        if not results:
            raise ValueError("per_query: cannot aggregate an empty result list")
        ious = np.array([r.iou_3d for r in results])
        report = cls(
            per_query=results,
            miou=float(ious.mean()),
            macc=float((ious >= acc_threshold).mean()),
            acc_threshold=acc_threshold,
            mean_runtime_s=float(np.mean([r.runtime_s for r in results])),
        )
        ious2 = [r.iou_2d for r in results if r.iou_2d is not None]
        if ious2:
            report.miou_2d = float(np.mean(ious2))
            report.macc_2d = float(np.mean([i >= acc_threshold for i in ious2]))
        return report


def object_mask_stack(scene: GaussianScene,
                      raster_config: RasterConfig = RasterConfig(),
                      alpha_min: float = 0.05) -> List[np.ndarray]:
    """Per-view maps of the dominant contributor's ground-truth object id.

    Recomputed from geometry rather than read off ``instance_mask`` so that
    scenes whose masks use finer segment ids still evaluate against whole
    objects.  Pixels with insufficient coverage get id 0.
    """
    if scene.gt_object_ids is None:
        raise ValueError("gt_object_ids: scene carries no ground-truth object ids")
    ids64 = scene.gt_object_ids.astype(np.int64)
    stacks = []
    for view in scene.views:
        weights = compute_weights(scene, view.camera, raster_config)
        dominant = weights.dominant_contributor()
        idmap = np.zeros(dominant.shape, dtype=np.int64)
        hit = dominant >= 0
        idmap[hit] = ids64[dominant[hit]]
        idmap[weights.alpha_map() < alpha_min] = 0
        stacks.append(idmap)
    return stacks


def cases_from_vocabulary(scene: GaussianScene,
                          rng: Optional[np.random.Generator] = None,
                          raster_config: RasterConfig = RasterConfig(),
                          stuff_canonical: bool = False) -> List[QueryCase]:
    """One case per vocabulary object: query its vector, contrast with the others
    plus one random unit direction.

    With `stuff_canonical` the negated vocabulary mean joins every canonical set,
    the way canonical phrases cover non-object regions for real embeddings; it is
    never the maximum for on-object features, so object relevance is unchanged.
    """
    if scene.vocabulary is None or scene.gt_object_ids is None:
        raise ValueError("vocabulary: scene has no vocabulary/object ids to build "
                         "benchmark cases from")
    rng = rng or np.random.default_rng(0)
    cases = []
    ids = scene.gt_object_ids.astype(np.int64)
    id_stack = object_mask_stack(scene, raster_config) if scene.views else None
    stuff = []
    if stuff_canonical:
        vec = -np.mean([scene.vocabulary[o] for o in sorted(scene.vocabulary)],
                       axis=0, dtype=np.float64)
        stuff = [vec / np.linalg.norm(vec)]
    for oid in sorted(scene.vocabulary):
        emb = scene.vocabulary[oid].astype(np.float64)
        emb = emb / np.linalg.norm(emb)
        others = [scene.vocabulary[o].astype(np.float64)
                  for o in sorted(scene.vocabulary) if o != oid]
        extra = rng.standard_normal(scene.d_language)
        extra /= np.linalg.norm(extra)
        canonical = np.stack(others + stuff + [extra])
        canonical /= np.linalg.norm(canonical, axis=1, keepdims=True)
        gt = np.nonzero(ids == oid)[0]
        if gt.size == 0:
            raise ValueError(f"vocabulary[{oid}]: no Gaussians carry this object id")
        masks = [(m == oid) for m in id_stack] if id_stack is not None else None
        cases.append(QueryCase(
            label=f"object-{oid}", embedding=emb, canonical=canonical,
            gt_gaussians=gt, gt_masks=masks,
        ))
    return cases


def _case_query(case: QueryCase, tau: float, threshold_mode: str,
                similarity_threshold: float) -> Query:
    return Query(
        embedding=case.embedding, canonical=case.canonical, tau=tau,
        threshold_mode=threshold_mode, similarity_threshold=similarity_threshold,
        label=case.label,
    )


def run_benchmark(
    scene: GaussianScene,
    cases: Sequence[QueryCase],
    modes: Sequence[str] = EVAL_MODES,
    *,
    tau: float = 0.5,
    threshold_mode: str = "fixed",
    similarity_threshold: float = 0.8,
    seed: int = 0,
    num_clusters: Optional[int] = None,
    include_2d: bool = True,
    acc_threshold: float = DEFAULT_ACC_THRESHOLD,
    raster_config: RasterConfig = RasterConfig(),
) -> Dict[str, EvalReport]:
    """Evaluate every case under every mode; returns mode -> report."""
    if not cases:
        raise ValueError("cases: empty benchmark")
    for mode in modes:
        if mode not in EVAL_MODES:
            raise ValueError(f"modes: unknown mode {mode!r}; expected one of {EVAL_MODES}")

    cluster_labels = None
    if "instance_only" in modes:
        k = num_clusters
        if k is None:
            if scene.vocabulary is None:
                raise ValueError("num_clusters: needed when the scene has no vocabulary")
            k = len(scene.vocabulary)
        km = KMeans(n_clusters=k, n_init=10, random_state=seed)
        cluster_labels = km.fit_predict(scene.instance_features.astype(np.float64))

    reports: Dict[str, EvalReport] = {}
    for mode in modes:
        rows: List[QueryEval] = []
        for case in cases:
            query = _case_query(case, tau, threshold_mode, similarity_threshold)
            start = time.perf_counter()
            if mode == "collaborative":
                pred = refine(scene, query).final
            elif mode == "language_only":
                relevance = compute_relevance(scene, query)
                pred = np.nonzero(relevance > tau)[0]
            else:   # instance_only
                relevance = compute_relevance(scene, query)
                means = np.array([
                    relevance[cluster_labels == c].mean()
                    if np.any(cluster_labels == c) else -np.inf
                    for c in range(cluster_labels.max() + 1)
                ])
                pred = np.nonzero(cluster_labels == int(np.argmax(means)))[0]
            runtime = time.perf_counter() - start

            row = QueryEval(label=case.label, iou_3d=iou_3d(pred, case.gt_gaussians),
                            runtime_s=runtime)
            if include_2d and case.gt_masks is not None and scene.views:
                vals = [
                    iou_2d_rendered(scene, pred, view.camera, mask,
                                    raster_config=raster_config)
                    for view, mask in zip(scene.views, case.gt_masks)
                ]
                row.iou_2d = float(np.mean(vals))
            rows.append(row)
        reports[mode] = EvalReport.from_results(rows, acc_threshold)
    return reports


def format_report_table(reports: Dict[str, EvalReport]) -> str:
    """Plain-text mode x metric table.

    Timings are deliberately left out: written artifacts must be byte-identical
    across reruns with the same seed, so wall-clock numbers only go to stdout.
    """
    lines = [f"{'mode':<16}{'mIoU':>8}{'mAcc':>8}{'mIoU2d':>9}"]
    for mode, rep in reports.items():
        iou2 = f"{rep.miou_2d:.3f}" if rep.miou_2d is not None else "-"
        lines.append(f"{mode:<16}{rep.miou:>8.3f}{rep.macc:>8.3f}{iou2:>9}")
    return "\n".join(lines) + "\n"


def report_to_json(reports: Dict[str, EvalReport]) -> dict:
    """JSON-ready report; excludes timings so rerun artifacts are reproducible."""
    out = {}
    for mode, rep in reports.items():
        out[mode] = {
            "miou": rep.miou,
            "macc": rep.macc,
            "acc_threshold": rep.acc_threshold,
            "miou_2d": rep.miou_2d,
            "macc_2d": rep.macc_2d,
            "per_query": [
                {"label": r.label, "iou_3d": r.iou_3d, "iou_2d": r.iou_2d}
                for r in rep.per_query
            ],
        }
    return out
