"""Prompt-driven selection: relevance scoring plus adaptive region growing.

Relevance of a Gaussian with language feature L against a query embedding q and
canonical (contrast) embeddings c_k is the worst pairwise softmax

    R = min_k  exp(L.q) / (exp(L.q) + exp(L.c_k))  =  sigmoid(L.q - max_k L.c_k)

computed in the numerically shifted (logistic) form.  Selection then refines the
thresholded seed set in instance-feature space: seeds are visited in descending
relevance, each uncovered seed grows a region of Gaussians whose cosine similarity
(on unit-normalized instance features) clears a threshold T, and a region is kept
only when its opacity-weighted mean relevance exceeds tau.  Accepted regions
accumulate; the union is the answer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .scene import GaussianScene

THRESHOLD_MODES = ("fixed", "auto")
AUTO_T_BOUNDS = (0.6, 0.95)
AUTO_T_MAX_SEEDS = 256


@dataclass
class Query:
    """A text/image prompt reduced to an embedding plus contrast embeddings."""

    embedding: np.ndarray            # (d_L,) unit
    canonical: np.ndarray            # (K,d_L) unit rows, K >= 1
    tau: float = 0.5                 # relevance / region acceptance threshold
    threshold_mode: str = "fixed"    # "fixed" | "auto" (Otsu on seed similarities)
    similarity_threshold: float = 0.8
    label: str = ""

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        self.canonical = np.atleast_2d(np.asarray(self.canonical, dtype=np.float64))
        if self.canonical.shape[0] < 1:
            raise ValueError("canonical: need at least one canonical embedding")
        if self.canonical.shape[1] != self.embedding.shape[0]:
            raise ValueError(
                f"canonical: dimension {self.canonical.shape[1]} does not match "
                f"embedding dimension {self.embedding.shape[0]}"
            )
        for name, arr in (("embedding", self.embedding[None]), ("canonical", self.canonical)):
            norms = np.linalg.norm(arr, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError(f"{name}: vectors must be unit-norm")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau: must lie strictly inside (0, 1)")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValueError(
                f"threshold_mode: expected one of {THRESHOLD_MODES}, "
                f"got {self.threshold_mode!r}"
            )
        if not 0.0 < self.similarity_threshold < 1.0:
            raise ValueError("similarity_threshold: must lie strictly inside (0, 1)")


@dataclass
class RegionRecord:
    """One expanded region in processing order (accepted or not)."""

    center: int
    members: np.ndarray   # sorted ascending
    score: float          # nan when undefined (zero total opacity)
    accepted: bool


@dataclass
class RefinementResult:
    seeds: np.ndarray            # relevance > tau, ascending index
    regions: List[RegionRecord]  # full trace in processing order
    skipped_seeds: np.ndarray    # seeds skipped because already covered
    final: np.ndarray            # union of accepted regions, ascending
    relevance: np.ndarray        # per-Gaussian relevance
    threshold: float             # similarity threshold actually used
    empty: bool = False          # no seed cleared tau
    elapsed_s: float = 0.0

    @property
    def accepted_regions(self) -> List[RegionRecord]:
        return [r for r in self.regions if r.accepted]


def compute_relevance(scene: GaussianScene, query: Query) -> np.ndarray:
    """Worst-case pairwise softmax against the canonical set, per Gaussian."""
    if scene.language_features is None:
        raise ValueError("language_features: scene has no language field "
                         "(run the mapper first)")
    lang = scene.language_features.astype(np.float64)
    s_text = lang @ query.embedding
    s_canon_max = (lang @ query.canonical.T).max(axis=1)
    return expit(s_text - s_canon_max)


def normalized_instance_features(scene: GaussianScene) -> np.ndarray:
    """Unit-row instance features; zero rows stay zero (no direction)."""
    feats = scene.instance_features.astype(np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return np.where(norms > 1e-12, feats / np.where(norms > 1e-12, norms, 1.0), 0.0)


def expand_region(scene: GaussianScene, center: int, threshold: float,
                  normalized: Optional[np.ndarray] = None) -> np.ndarray:
    """Indices whose instance-feature cosine with the center clears the threshold.

    The center always belongs to its own region.  Result is sorted ascending.
    """
    if normalized is None:
        normalized = normalized_instance_features(scene)
    sims = normalized @ normalized[center]
    members = np.nonzero(sims >= threshold)[0]
    if center not in members:
        members = np.append(members, center)
        members.sort()
    return members.astype(np.int64)


def region_score(scene: GaussianScene, members: Sequence[int],
                 relevance: np.ndarray) -> float:
    """Opacity-weighted mean relevance over a region."""
    members = np.asarray(members, dtype=np.int64)
    if members.size == 0:
        raise ValueError("members: empty region")
    opac = scene.opacities.astype(np.float64)[members]
    total = opac.sum()
    if total <= 0.0:
        raise ValueError("members: zero total opacity, score undefined")
    return float((opac @ relevance[members]) / total)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Classic two-class variance split; returns the separating value."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("values: cannot split an empty sample")
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return lo
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    weight = hist.astype(np.float64)
    w0 = np.cumsum(weight)
    w1 = w0[-1] - w0
    mass = np.cumsum(weight * centers)
    mean0 = np.where(w0 > 0, mass / np.where(w0 > 0, w0, 1.0), 0.0)
    mean1 = np.where(w1 > 0, (mass[-1] - mass) / np.where(w1 > 0, w1, 1.0), 0.0)
    between = w0 * w1 * (mean0 - mean1) ** 2
    split = int(np.argmax(between))   # first maximum: deterministic
    return float(centers[split])


def resolve_similarity_threshold(query: Query, seeds: np.ndarray,
                                 normalized: np.ndarray) -> float:
    """Fixed T, or an Otsu split of seed-to-all cosine similarities (clamped).

    Auto mode subsamples at most AUTO_T_MAX_SEEDS seeds, evenly spaced over the
    seed list, to bound the similarity matrix; the subsample is deterministic.
    """
    if query.threshold_mode == "fixed":
        return query.similarity_threshold
    if seeds.size == 0:
        return query.similarity_threshold
    if seeds.size > AUTO_T_MAX_SEEDS:
        picks = np.unique(np.linspace(0, seeds.size - 1, AUTO_T_MAX_SEEDS).astype(int))
        probe = seeds[picks]
    else:
        probe = seeds
    sims = normalized[probe] @ normalized.T
    return float(np.clip(otsu_threshold(sims.ravel()), *AUTO_T_BOUNDS))


def refine(scene: GaussianScene, query: Query) -> RefinementResult:
    """Adaptive region growing from relevance seeds; returns the full trace."""
    start = time.perf_counter()
    relevance = compute_relevance(scene, query)
    seeds = np.nonzero(relevance > query.tau)[0].astype(np.int64)
    normalized = normalized_instance_features(scene)

    if seeds.size == 0:
        return RefinementResult(
            seeds=seeds, regions=[], skipped_seeds=np.empty(0, dtype=np.int64),
            final=np.empty(0, dtype=np.int64), relevance=relevance,
            threshold=query.similarity_threshold, empty=True,
            elapsed_s=time.perf_counter() - start,
        )

    threshold = resolve_similarity_threshold(query, seeds, normalized)
    # Descending relevance, exact ties by ascending index.
    order = seeds[np.lexsort((seeds, -relevance[seeds]))]

    opacities = scene.opacities.astype(np.float64)
    covered = np.zeros(len(scene), dtype=bool)
    regions: List[RegionRecord] = []
    skipped: List[int] = []
    for center in order:
        if covered[center]:
            skipped.append(int(center))
            continue
        members = expand_region(scene, int(center), threshold, normalized)
        total = opacities[members].sum()
        if total <= 0.0:   # undefined score: reject, keep it in the trace
            regions.append(RegionRecord(int(center), members, float("nan"), False))
            continue
        score = float((opacities[members] @ relevance[members]) / total)
        accepted = score > query.tau
        regions.append(RegionRecord(int(center), members, score, accepted))
        if accepted:
            covered[members] = True

    return RefinementResult(
        seeds=seeds,
        regions=regions,
        skipped_seeds=np.asarray(skipped, dtype=np.int64),
        final=np.nonzero(covered)[0].astype(np.int64),
        relevance=relevance,
        threshold=threshold,
        elapsed_s=time.perf_counter() - start,
    )


def query_by_embedding(scene: GaussianScene, embedding: np.ndarray, *,
                       canonical: np.ndarray, tau: float = 0.5,
                       threshold_mode: str = "fixed",
                       similarity_threshold: float = 0.8,
                       label: str = "") -> RefinementResult:
    """Convenience wrapper: build a Query from a raw embedding and refine.

    Non-unit embeddings are normalized (a zero embedding is rejected).
    """
    embedding = np.asarray(embedding, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(embedding)
    if norm < 1e-12:
        raise ValueError("embedding: zero-norm query embedding")
    canonical = np.atleast_2d(np.asarray(canonical, dtype=np.float64))
    norms = np.linalg.norm(canonical, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("canonical: zero-norm canonical embedding")
    query = Query(
        embedding=embedding / norm,
        canonical=canonical / norms,
        tau=tau,
        threshold_mode=threshold_mode,
        similarity_threshold=similarity_threshold,
        label=label,
    )
    return refine(scene, query)
