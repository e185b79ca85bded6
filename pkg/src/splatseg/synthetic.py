"""Synthetic labeled scenes: Gaussian blobs, a near-orthogonal vocabulary, orbit
cameras, and per-view supervision rendered from the ground truth.

Generation is a pure function of the spec (seed included): the same spec yields
bit-identical scenes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .rasterizer import RasterConfig, compute_weights
from .scene import Camera, GaussianScene, ViewSupervision

MASK_ALPHA_MIN = 0.05   # pixels with accumulated alpha below this stay unlabeled


@dataclass(frozen=True)
class SceneSpec:
    """Everything the generator needs; defaults give the standard training scene.

    The optional realism knobs model the supervision failure modes prompt
    refinement exists to fix: `split_objects` renders the first k objects as two
    mask segments each (mask granularity finer than query granularity),
    `language_noise` perturbs each view's segment language vectors independently
    (cross-view embedding inconsistency), `background_label` supervises the
    clutter as a "stuff" segment with an off-vocabulary embedding,
    `vocabulary_similarity` makes consecutive object pairs look alike, and
    `label_corruption` gives some segments one view labeled with the wrong
    object's embedding (a bad crop).  Ground-truth object ids and the
    vocabulary itself stay clean.
    """

    num_objects: int = 8
    gaussians_per_object: int = 100
    d_instance: int = 16
    d_language: int = 32
    num_views: int = 6
    image_size: int = 96
    seed: int = 0
    background_gaussians: int = 0   # unlabeled clutter (gt_object_id = 0)
    cluster_radius: float = 0.25
    camera_distance_factor: float = 3.0   # camera orbit radius over scene radius
    split_objects: int = 0          # objects rendered as two mask segments
    language_noise: float = 0.0     # per-view language perturbation scale
    background_label: bool = False  # supervise clutter as its own "stuff" segment
    vocabulary_similarity: float = 0.0  # cosine between consecutive object pairs
    label_corruption: float = 0.0   # per-segment prob of one mislabeled view

    def validate(self) -> None:
        if self.num_objects < 1:
            raise ValueError("num_objects: must be >= 1")
        if self.gaussians_per_object < 1:
            raise ValueError("gaussians_per_object: must be >= 1")
        if self.d_language < 4:
            raise ValueError("d_language: must be >= 4")
        if self.d_language < self.num_objects:
            raise ValueError(
                f"d_language: need at least num_objects={self.num_objects} dimensions "
                f"for a near-orthogonal vocabulary, got {self.d_language}"
            )
        if self.d_instance < 1:
            raise ValueError("d_instance: must be >= 1")
        if self.num_views < 1:
            raise ValueError("num_views: must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size: must be >= 16")
        if self.background_gaussians < 0:
            raise ValueError("background_gaussians: must be >= 0")
        if self.cluster_radius <= 0:
            raise ValueError("cluster_radius: must be positive")
        if not 0 <= self.split_objects <= self.num_objects:
            raise ValueError("split_objects: must lie in [0, num_objects]")
        if self.language_noise < 0:
            raise ValueError("language_noise: must be >= 0")
        if self.background_label and not self.background_gaussians:
            raise ValueError("background_label: requires background_gaussians > 0")
        if not 0 <= self.vocabulary_similarity < 1:
            raise ValueError("vocabulary_similarity: must lie in [0, 1)")
        if not 0 <= self.label_corruption < 1:
            raise ValueError("label_corruption: must lie in [0, 1)")
        if self.label_corruption > 0 and self.num_objects < 2:
            raise ValueError("label_corruption: needs >= 2 objects to mislabel")


def near_orthogonal_vocabulary(num: int, dim: int,
                               rng: np.random.Generator) -> Dict[int, np.ndarray]:
    """Unit vectors for object ids 1..num with small pairwise |cosine|.

    Random Gaussian directions are orthonormalized (Gram-Schmidt), then nudged with
    small noise and re-normalized so the vectors are *near*-orthogonal rather than
    exactly orthogonal.
    """
    if dim < num:
        raise ValueError(f"d_language: need dim >= num, got {dim} < {num}")
    basis = np.zeros((num, dim))
    made = 0
    while made < num:
        v = rng.standard_normal(dim)
        v -= basis[:made].T @ (basis[:made] @ v)
        norm = np.linalg.norm(v)
        if norm < 1e-6:   # degenerate draw; try again
            continue
        basis[made] = v / norm
        made += 1
    basis = basis + 0.02 * rng.standard_normal((num, dim))
    basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    return {i + 1: basis[i] for i in range(num)}


def pair_vocabulary(vocabulary: Dict[int, np.ndarray],
                    similarity: float) -> Dict[int, np.ndarray]:
    """Rotate every even-id vector toward its predecessor so consecutive object
    pairs (1,2), (3,4), ... have cosine ~ `similarity` — look-alike objects that
    a language query alone struggles to tell apart."""
    if not 0 <= similarity < 1:
        raise ValueError("similarity: must lie in [0, 1)")
    out = dict(vocabulary)
    mix = np.sqrt(1.0 - similarity ** 2)
    for a in sorted(vocabulary):
        b = a + 1
        if a % 2 == 1 and b in vocabulary:
            v = similarity * vocabulary[a] + mix * vocabulary[b]
            out[b] = v / np.linalg.norm(v)
    return out


def fibonacci_sphere(n: int) -> np.ndarray:
    """n roughly-uniform unit directions (n,3)."""
    i = np.arange(n, dtype=np.float64) + 0.5
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _separated_centers(num: int, min_sep: float, rng: np.random.Generator) -> np.ndarray:
    """Sequential rejection sampling in a cube that grows until placement succeeds."""
    half = max(1.5, num ** (1.0 / 3.0)) * min_sep
    while True:
        centers: List[np.ndarray] = []
        for _ in range(5000):
            cand = rng.uniform(-half, half, size=3)
            if all(np.linalg.norm(cand - c) >= min_sep for c in centers):
                centers.append(cand)
                if len(centers) == num:
                    return np.stack(centers)
        half *= 1.3   # too crowded; enlarge the domain and retry


def generate_synthetic_scene(spec: SceneSpec,
                             raster_config: RasterConfig = RasterConfig()) -> GaussianScene:
    """Build a labeled scene with rendered instance masks and a query vocabulary."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    centers = _separated_centers(spec.num_objects, 4.0 * spec.cluster_radius, rng)
    blob_std = spec.cluster_radius / 2.0

    positions, scales, rotations, opacities, colors, obj_ids, seg_ids = \
        [], [], [], [], [], [], []
    for k in range(spec.num_objects):
        n = spec.gaussians_per_object
        if k < spec.split_objects:
            # Two sub-blobs sharing one object id but carrying distinct mask
            # segment ids (the second half uses id num_objects + k + 1).
            u = rng.standard_normal(3)
            u /= np.linalg.norm(u)
            offset = 1.1 * spec.cluster_radius * u
            n_a = n // 2
            pos = np.concatenate([
                centers[k] + offset + blob_std * rng.standard_normal((n_a, 3)),
                centers[k] - offset + blob_std * rng.standard_normal((n - n_a, 3)),
            ])
            seg = np.full(n, k + 1, dtype=np.uint32)
            seg[n_a:] = spec.num_objects + k + 1
        else:
            pos = centers[k] + blob_std * rng.standard_normal((n, 3))
            seg = np.full(n, k + 1, dtype=np.uint32)
        positions.append(pos)
        seg_ids.append(seg)
        scales.append(spec.cluster_radius * rng.uniform(0.12, 0.30, size=(n, 3)))
        q = rng.standard_normal((n, 4))
        rotations.append(q / np.linalg.norm(q, axis=1, keepdims=True))
        opacities.append(rng.uniform(0.6, 0.95, size=n))
        base = rng.uniform(0.15, 0.85, size=3)
        colors.append(np.clip(base + rng.uniform(-0.1, 0.1, size=(n, 3)), 0.0, 1.0))
        obj_ids.append(np.full(n, k + 1, dtype=np.uint32))

    if spec.background_gaussians:
        n = spec.background_gaussians
        spread = np.abs(centers).max() + 4.0 * spec.cluster_radius
        # Keep clutter clear of the object blobs so supervision stays unambiguous.
        clearance = 3.0 * spec.cluster_radius
        pts = np.empty((0, 3))
        while len(pts) < n:
            cand = rng.uniform(-spread, spread, size=(n, 3))
            d = np.linalg.norm(cand[:, None, :] - centers[None, :, :], axis=2)
            pts = np.concatenate([pts, cand[d.min(axis=1) >= clearance]])
        positions.append(pts[:n])
        scales.append(spec.cluster_radius * rng.uniform(0.12, 0.30, size=(n, 3)))
        q = rng.standard_normal((n, 4))
        rotations.append(q / np.linalg.norm(q, axis=1, keepdims=True))
        opacities.append(rng.uniform(0.3, 0.6, size=n))
        colors.append(np.clip(0.5 + rng.uniform(-0.15, 0.15, size=(n, 3)), 0.0, 1.0))
        obj_ids.append(np.zeros(n, dtype=np.uint32))
        bg_segment = spec.num_objects + spec.split_objects + 1
        seg_ids.append(np.full(n, bg_segment if spec.background_label else 0,
                               dtype=np.uint32))

    positions = np.concatenate(positions)
    total = len(positions)
    vocabulary = near_orthogonal_vocabulary(spec.num_objects, spec.d_language, rng)
    if spec.vocabulary_similarity > 0:
        vocabulary = pair_vocabulary(vocabulary, spec.vocabulary_similarity)

    scene = GaussianScene(
        positions=positions,
        scales=np.concatenate(scales),
        rotations=np.concatenate(rotations),
        opacities=np.concatenate(opacities),
        colors=np.concatenate(colors),
        instance_features=0.01 * rng.standard_normal((total, spec.d_instance)),
        d_instance=spec.d_instance,
        d_language=spec.d_language,
        gt_object_ids=np.concatenate(obj_ids),
        vocabulary=vocabulary,
    )

    # Orbit cameras on a fibonacci sphere around the scene.
    centroid = positions.mean(axis=0)
    bound = float(np.linalg.norm(positions - centroid, axis=1).max()
                  + 3.0 * scene.scales.max())
    cam_dist = spec.camera_distance_factor * bound
    size = spec.image_size
    focal = 0.9 * size * spec.camera_distance_factor / 3.0
    seg64 = np.concatenate(seg_ids).astype(np.int64)

    # Background "stuff" language: far from every query by construction, the
    # role canonical phrases play for real embeddings.
    stuff = -np.mean([vocabulary[o] for o in sorted(vocabulary)], axis=0, dtype=np.float64)
    stuff /= np.linalg.norm(stuff)
    bg_segment = spec.num_objects + spec.split_objects + 1

    cameras, masks = [], []
    for d in fibonacci_sphere(spec.num_views):
        camera = Camera.look_at(centroid + cam_dist * d, centroid, size, size, fx=focal)
        weights = compute_weights(scene, camera, raster_config)
        dominant = weights.dominant_contributor()
        mask = np.zeros((size, size), dtype=np.uint32)
        hit = dominant >= 0
        mask[hit] = seg64[dominant[hit]].astype(np.uint32)
        mask[weights.alpha_map() < MASK_ALPHA_MIN] = 0
        cameras.append(camera)
        masks.append(mask)

    # Some object segments get one mislabeled view (another object's embedding) —
    # an occasional bad crop, never a systematically wrong object.  The
    # background is never mislabeled: stuff crops don't resemble objects.
    corrupt_plan = {}
    if spec.label_corruption > 0:
        for seg in sorted(set(int(s) for s in seg64 if s)):
            owner = 0 if seg == bg_segment and spec.background_label else \
                (seg if seg <= spec.num_objects else seg - spec.num_objects)
            if not owner or rng.random() >= spec.label_corruption:
                continue
            wrong = int(rng.integers(1, spec.num_objects))
            if wrong >= owner:
                wrong += 1
            corrupt_plan[seg] = (int(rng.integers(spec.num_views)), wrong)

    def segment_vector(view_index: int, seg: int) -> np.ndarray:
        if spec.background_label and seg == bg_segment:
            vec = stuff
        else:
            owner = seg if seg <= spec.num_objects else seg - spec.num_objects
            vec = vocabulary[owner].astype(np.float64)
        plan = corrupt_plan.get(seg)
        if plan is not None and plan[0] == view_index:
            vec = vocabulary[plan[1]].astype(np.float64)
        if spec.language_noise > 0:
            vec = vec + spec.language_noise * rng.standard_normal(spec.d_language)
            vec = vec / np.linalg.norm(vec)
        return vec.astype(np.float32)

    views: List[ViewSupervision] = []
    for j, (camera, mask) in enumerate(zip(cameras, masks)):
        present = np.unique(mask)
        views.append(ViewSupervision(
            camera=camera,
            instance_mask=mask,
            segment_language={int(s): segment_vector(j, int(s)) for s in present if s != 0},
        ))

    scene.views = views
    scene.validate()
    return scene


# The segmentation benchmark: a handful of fixed scenes whose supervision
# carries the documented damage (noisy, occasionally mislabeled per-view
# language plus a labeled stuff background).  Calibrated so the instance-only
# baseline loses to raw language querying, which in turn loses to region-grown
# refinement — the regime the method is built for.
BENCHMARK_SEEDS = (1, 2, 3)


def benchmark_spec(seed: int) -> SceneSpec:
    """Scene recipe for one benchmark entry."""
    return SceneSpec(
        seed=seed,
        num_views=12,
        language_noise=0.05,
        label_corruption=0.7,
        background_gaussians=250,
        background_label=True,
    )
