"""Contrastive training of the per-Gaussian instance feature field.

Supervision comes from 2D instance masks: rendered instance features sampled
inside one mask segment should agree with that segment's mean feature and
disagree with every other segment's mean.  Per view, with sampled pixel set
Omega partitioned into segments Omega_j and centroids Ibar_j = mean of the
rendered features over Omega_j:

    loss = -(1/|Omega|) * sum_j sum_{u in Omega_j}
           log[ exp(I_u . Ibar_j) / sum_l exp(I_u . Ibar_l) ]

Similarity is the raw dot product (no temperature, no normalization); gradients
flow through both the per-pixel term and the centroids, and reach the Gaussian
features through the exact transpose of the blending weights.  Geometry, opacity,
and color are frozen throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .optim import OPTIMIZERS, make_optimizer
from .rasterizer import RasterConfig, compute_weights
from .scene import GaussianScene, ViewSupervision


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 30000
    samples_per_segment: int = 64
    learning_rate: float = 2.5e-3
    optimizer: str = "adam"     # "adam" | "sgd"
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("steps: must be >= 0")
        if self.samples_per_segment < 2:
            raise ValueError("samples_per_segment: must be >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate: must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(
                f"optimizer: unknown optimizer {self.optimizer!r}; "
                f"expected one of {OPTIMIZERS}"
            )


@dataclass
class PixelSampleBatch:
    """Sampled supervision pixels for one view, grouped by mask segment."""

    view_index: int
    pixels: np.ndarray        # (S,2) int64 rows of (y, x)
    segment_ids: np.ndarray   # (S,) uint32, parallel to pixels
    by_segment: Dict[int, np.ndarray]   # segment id -> indices into pixels

    def __len__(self) -> int:
        return len(self.pixels)


def sample_pixels(view: ViewSupervision, samples_per_segment: int,
                  rng: np.random.Generator, view_index: int = 0) -> PixelSampleBatch:
    """Up to `samples_per_segment` pixels per nonzero segment, without replacement.

    Segments smaller than 2 pixels are skipped; ID 0 (unlabeled) is never sampled.
    Segments without a language entry still participate: the contrastive loss only
    needs the mask geometry.
    """
    if samples_per_segment < 2:
        raise ValueError("samples_per_segment: must be >= 2")
    pixels: List[np.ndarray] = []
    seg_ids: List[np.ndarray] = []
    by_segment: Dict[int, np.ndarray] = {}
    offset = 0
    for sid in view.segment_ids():   # ascending id order, deterministic
        ys, xs = np.nonzero(view.instance_mask == sid)
        count = len(ys)
        if count < 2:
            continue
        take = min(samples_per_segment, count)
        chosen = rng.choice(count, size=take, replace=False)
        pixels.append(np.stack([ys[chosen], xs[chosen]], axis=1).astype(np.int64))
        seg_ids.append(np.full(take, sid, dtype=np.uint32))
        by_segment[int(sid)] = np.arange(offset, offset + take)
        offset += take
    if pixels:
        return PixelSampleBatch(view_index, np.concatenate(pixels),
                                np.concatenate(seg_ids), by_segment)
    return PixelSampleBatch(view_index, np.empty((0, 2), dtype=np.int64),
                            np.empty(0, dtype=np.uint32), {})


def infonce_loss(rendered: np.ndarray,
                 batch: PixelSampleBatch) -> Tuple[float, np.ndarray]:
    """Contrastive loss over one sampled batch and its gradient w.r.t. `rendered`.

    Returns (loss, grad) where grad has the same (H,W,C) shape as `rendered` and is
    nonzero only at sampled pixels.  A batch with a single segment scores exactly 0.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    if len(batch) == 0:
        raise ValueError("batch: empty sample batch")
    if len(batch) < 2:
        raise ValueError("batch: a single sampled pixel is degenerate")
    ys, xs = batch.pixels[:, 0], batch.pixels[:, 1]
    feats = rendered[ys, xs]                     # (S,C)
    groups = sorted(batch.by_segment.items())    # deterministic segment order
    centroids = np.stack([feats[idx].mean(axis=0) for _, idx in groups])
    own = np.empty(len(batch), dtype=np.int64)   # centroid row of each sample
    for row, (_, idx) in enumerate(groups):
        own[idx] = row

    logits = feats @ centroids.T                 # (S,K)
    shift = logits.max(axis=1, keepdims=True)    # max-shifted log-sum-exp
    expz = np.exp(logits - shift)
    denom = expz.sum(axis=1)
    lse = shift[:, 0] + np.log(denom)
    loss = float(np.mean(lse - logits[np.arange(len(batch)), own]))

    # d loss / d logits = (softmax - onehot) / S, then through both factors of
    # logits = F C^T, folding the centroid means back onto their samples.
    dlogits = expz / denom[:, None]
    dlogits[np.arange(len(batch)), own] -= 1.0
    dlogits /= len(batch)
    dfeats = dlogits @ centroids
    dcentroids = dlogits.T @ feats
    for row, (_, idx) in enumerate(groups):
        dfeats[idx] += dcentroids[row] / len(idx)

    grad = np.zeros_like(rendered)
    np.add.at(grad, (ys, xs), dfeats)
    return loss, grad


def train_instance_field(
    scene: GaussianScene,
    cfg: TrainConfig = TrainConfig(),
    raster_config: RasterConfig = RasterConfig(),
) -> Tuple[GaussianScene, np.ndarray]:
    """Optimize scene.instance_features against every supervised view.

    Views are visited round-robin with a fresh seeded shuffle each epoch.  Blending
    weights are computed once per view (geometry is frozen) and reused for every
    forward/backward pass.  Returns the scene (features replaced, everything else
    untouched) and the per-step loss trace.
    """
    cfg.validate()
    if not scene.views:
        raise ValueError("views: scene has no supervised views")
    usable = [k for k, v in enumerate(scene.views)
              if any(np.count_nonzero(v.instance_mask == s) >= 2
                     for s in v.segment_ids())]
    if not usable:
        raise ValueError("views: no view has a sampleable nonzero segment")

    if cfg.steps == 0:
        return scene, np.empty(0, dtype=np.float64)

    weights = {k: compute_weights(scene, scene.views[k].camera, raster_config)
               for k in usable}
    feats = scene.instance_features.astype(np.float64)
    opt = make_optimizer(cfg.optimizer, [feats.shape], cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    losses = np.empty(cfg.steps, dtype=np.float64)
    step = 0
    while step < cfg.steps:
        for k in rng.permutation(len(usable)):   # one epoch
            view_index = usable[k]
            view = scene.views[view_index]
            batch = sample_pixels(view, cfg.samples_per_segment, rng, view_index)
            if len(batch) < 2:
                continue
            rendered = weights[view_index].blend(feats)
            loss, grad_grid = infonce_loss(rendered, batch)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite loss at step {step}")
            grad_feats = weights[view_index].backward(grad_grid)
            opt.step([feats], [grad_feats])
            losses[step] = loss
            step += 1
            if step == cfg.steps:
                break

    scene.instance_features = feats.astype(np.float32)
    return scene, losses
