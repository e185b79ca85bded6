"""Tile-based forward/backward rasterizer for per-Gaussian channel vectors.

Forward: project Gaussians to screen-space splats (EWA-style affine approximation),
sort front-to-back, and alpha-blend arbitrary per-Gaussian channel vectors over
16x16 pixel tiles.  Per pixel u and Gaussian i (in depth order):

    alpha_i(u) = min(alpha_max, opacity_i * exp(-0.5 * d^T conic_i d)),  d = u - mean2d_i
    w_i(u)     = alpha_i(u) * prod_{t < i} (1 - alpha_t(u))
    channels_u = sum_i w_i(u) * f_i,     alpha_u = sum_i w_i(u)

alpha_i is zero outside the splat's circular footprint (radius = footprint_sigmas
standard deviations), and a Gaussian contributes only while the transmittance
accumulated strictly before it is >= transmittance_min.

With geometry and opacity fixed, the forward map is linear in the channel values,
so the exact backward pass for the channels is the transpose of the same weights:
grad_i = sum_u w_i(u) * upstream_u.  Geometry receives no gradient by design.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .scene import Camera, GaussianScene, quats_to_rotmats

CHANNEL_SELECTORS = ("color", "instance", "language", "object_id_onehot")


@dataclass(frozen=True)
class RasterConfig:
    """Rasterization constants (3D-GS defaults)."""

    near_plane: float = 0.01          # camera-space z at or below this is culled
    cov_regularizer: float = 0.3      # added to both 2D covariance diagonals
    alpha_max: float = 0.99           # per-splat alpha clamp
    transmittance_min: float = 1e-4   # stop blending once transmittance drops below
    footprint_sigmas: float = 3.0     # footprint radius in units of sqrt(max eigenvalue)
    tile_size: int = 16


@dataclass
class ProjectedSplats:
    """Screen-space splats that survived culling, in input order (struct-of-arrays)."""

    mean2d: np.ndarray          # (M,2) pixel coordinates
    cov2d: np.ndarray           # (M,2,2) regularized screen-space covariance
    depth: np.ndarray           # (M,) camera-space z
    gaussian_index: np.ndarray  # (M,) index into the scene arrays
    radius: np.ndarray          # (M,) footprint radius in pixels
    n_culled: int               # behind near plane or footprint fully off-screen
    n_degenerate: int           # non-finite / non-positive-definite projections

    def __len__(self) -> int:
        return self.mean2d.shape[0]


def project(scene: GaussianScene, camera: Camera,
            config: RasterConfig = RasterConfig()) -> ProjectedSplats:
    """Project all Gaussians into screen space, culling the invisible ones."""
    pos_cam = camera.world_to_camera(scene.positions)
    z = pos_cam[:, 2]
    front = z > config.near_plane

    # 3D covariance R S S^T R^T, then into camera frame.
    R_q = quats_to_rotmats(scene.rotations)
    M = R_q * scene.scales.astype(np.float64)[:, None, :]   # columns scaled
    cov3d = M @ np.transpose(M, (0, 2, 1))
    W = camera.rotation
    cov_cam = W[None] @ cov3d @ W.T[None]

    zs = np.where(front, z, 1.0)  # placeholder depth for culled rows
    x, y = pos_cam[:, 0], pos_cam[:, 1]
    mean_x = camera.fx * x / zs + camera.cx
    mean_y = camera.fy * y / zs + camera.cy

    # Affine (Jacobian) approximation of the perspective projection at the center.
    n = len(scene)
    J = np.zeros((n, 2, 3), dtype=np.float64)
    J[:, 0, 0] = camera.fx / zs
    J[:, 0, 2] = -camera.fx * x / zs**2
    J[:, 1, 1] = camera.fy / zs
    J[:, 1, 2] = -camera.fy * y / zs**2
    cov2d = J @ cov_cam @ np.transpose(J, (0, 2, 1))
    cov2d[:, 0, 0] += config.cov_regularizer
    cov2d[:, 1, 1] += config.cov_regularizer

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = config.footprint_sigmas * np.sqrt(np.maximum(lam_max, 0.0))

    finite = (
        np.isfinite(mean_x) & np.isfinite(mean_y)
        & np.isfinite(cov2d).all(axis=(1, 2)) & np.isfinite(radius)
    )
    degenerate = front & (~finite | (det <= 0))
    on_screen = (
        (mean_x + radius >= 0.0) & (mean_x - radius <= camera.width - 1.0)
        & (mean_y + radius >= 0.0) & (mean_y - radius <= camera.height - 1.0)
    )
    keep = front & ~degenerate & on_screen
    n_degenerate = int(np.count_nonzero(degenerate))
    n_culled = int(len(scene) - np.count_nonzero(keep) - n_degenerate)

    return ProjectedSplats(
        mean2d=np.stack([mean_x[keep], mean_y[keep]], axis=1),
        cov2d=cov2d[keep],
        depth=z[keep].astype(np.float64),
        gaussian_index=np.nonzero(keep)[0].astype(np.int64),
        radius=radius[keep],
        n_culled=n_culled,
        n_degenerate=n_degenerate,
    )


@dataclass
class PixelWeights:
    """Per-pixel blending weights in CSR form, contributors in depth order per pixel.

    Row p = flattened pixel index (row-major); entries are (gaussian index, w_i(u))
    in the front-to-back order they were blended.  This is the whole linear map of
    the forward render: channels = W @ features, backward = W^T @ upstream.
    """

    width: int
    height: int
    n_gaussians: int
    indptr: np.ndarray    # (H*W + 1,) int64
    indices: np.ndarray   # (nnz,) int64 gaussian indices
    values: np.ndarray    # (nnz,) float64 blending weights
    n_culled: int = 0
    n_degenerate: int = 0

    @cached_property
    def _matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.indices, self.indptr),
            shape=(self.width * self.height, self.n_gaussians),
        )

    def alpha_map(self) -> np.ndarray:
        """Accumulated alpha (sum of blending weights) per pixel, (H,W) float64."""
        sums = np.add.reduceat(
            np.concatenate([self.values, [0.0]]),
            np.minimum(self.indptr[:-1], len(self.values)),
        )
        sums[self.indptr[:-1] == self.indptr[1:]] = 0.0
        return sums.reshape(self.height, self.width)

    def blend(self, features: np.ndarray) -> np.ndarray:
        """Forward render: (N,C) channel values -> (H,W,C) blended image."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.n_gaussians:
            raise ValueError(
                f"features: expected shape ({self.n_gaussians}, C), got {feats.shape}"
            )
        out = self._matrix @ feats
        return out.reshape(self.height, self.width, feats.shape[1])

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Transpose map: (H,W,C) upstream gradient -> (N,C) channel gradients."""
        up = np.asarray(upstream, dtype=np.float64)
        if up.shape[:2] != (self.height, self.width) or up.ndim != 3:
            raise ValueError(
                f"upstream: expected shape ({self.height}, {self.width}, C), "
                f"got {up.shape}"
            )
        flat = up.reshape(-1, up.shape[2])
        return self._matrix.T @ flat

    def contributors(self, row: int, col: int) -> Tuple[np.ndarray, np.ndarray]:
        """(gaussian indices, weights) for one pixel, in blending order."""
        p = row * self.width + col
        lo, hi = self.indptr[p], self.indptr[p + 1]
        return self.indices[lo:hi], self.values[lo:hi]

    def dominant_contributor(self) -> np.ndarray:
        """Per pixel, the gaussian index with the largest blending weight.

        (H,W) int64; -1 where no Gaussian contributes.  Ties resolve to the
        contributor blended first (nearest, then lowest index).
        """
        out = np.full(self.width * self.height, -1, dtype=np.int64)
        nnz = len(self.values)
        if nnz:
            rows = np.repeat(np.arange(len(self.indptr) - 1), np.diff(self.indptr))
            # stable first-maximum per row: sort by (row, -weight, blend position)
            order = np.lexsort((np.arange(nnz), -self.values, rows))
            _, first = np.unique(rows[order], return_index=True)
            take = order[first]
            out[rows[take]] = self.indices[take]
        return out.reshape(self.height, self.width)


def compute_weights(scene: GaussianScene, camera: Camera,
                    config: RasterConfig = RasterConfig()) -> PixelWeights:
    """Project, depth-sort, and rasterize blending weights tile by tile."""
    splats = project(scene, camera, config)
    w_img, h_img = camera.width, camera.height
    n_pixels = w_img * h_img

    # Global front-to-back order; exact depth ties resolve by ascending index so
    # the result is invariant to permutations of the input array.
    order = np.lexsort((splats.gaussian_index, splats.depth))
    mean2d = splats.mean2d[order]
    depth_idx = splats.gaussian_index[order]
    radius = splats.radius[order]
    cov = splats.cov2d[order]
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)  # inverse covariance
    opacity = scene.opacities.astype(np.float64)[depth_idx]

    ts = config.tile_size
    n_tx = (w_img + ts - 1) // ts
    n_ty = (h_img + ts - 1) // ts

    # Tile ranges overlapped by each splat's footprint disc (conservative AABB).
    tx0 = np.clip(np.floor((mean2d[:, 0] - radius) / ts).astype(np.int64), 0, n_tx - 1)
    tx1 = np.clip(np.floor((mean2d[:, 0] + radius) / ts).astype(np.int64), 0, n_tx - 1)
    ty0 = np.clip(np.floor((mean2d[:, 1] - radius) / ts).astype(np.int64), 0, n_ty - 1)
    ty1 = np.clip(np.floor((mean2d[:, 1] + radius) / ts).astype(np.int64), 0, n_ty - 1)

    per_tile: List[List[int]] = [[] for _ in range(n_tx * n_ty)]
    for k in range(len(mean2d)):  # depth order preserved within each tile list
        for tyi in range(ty0[k], ty1[k] + 1):
            base = tyi * n_tx
            for txi in range(tx0[k], tx1[k] + 1):
                per_tile[base + txi].append(k)

    pix_chunks: List[np.ndarray] = []
    idx_chunks: List[np.ndarray] = []
    val_chunks: List[np.ndarray] = []
    for tyi in range(n_ty):
        y_lo, y_hi = tyi * ts, min((tyi + 1) * ts, h_img)
        for txi in range(n_tx):
            cand = per_tile[tyi * n_tx + txi]
            if not cand:
                continue
            x_lo, x_hi = txi * ts, min((txi + 1) * ts, w_img)
            xs = np.arange(x_lo, x_hi, dtype=np.float64)
            ys = np.arange(y_lo, y_hi, dtype=np.float64)
            gx, gy = np.meshgrid(xs, ys)     # (rows, cols)
            gx = gx.ravel()
            gy = gy.ravel()

            k = np.asarray(cand, dtype=np.int64)
            dx = gx[None, :] - mean2d[k, 0][:, None]
            dy = gy[None, :] - mean2d[k, 1][:, None]
            q = (conic[k, 0][:, None] * dx * dx
                 + 2.0 * conic[k, 1][:, None] * dx * dy
                 + conic[k, 2][:, None] * dy * dy)
            alpha = opacity[k][:, None] * np.exp(-0.5 * q)
            alpha[dx * dx + dy * dy > (radius[k] ** 2)[:, None]] = 0.0
            np.minimum(alpha, config.alpha_max, out=alpha)

            trans = np.cumprod(1.0 - alpha, axis=0)
            t_before = np.vstack([np.ones((1, alpha.shape[1])), trans[:-1]])
            w = alpha * t_before
            w[t_before < config.transmittance_min] = 0.0

            mask = w > 0.0
            if not mask.any():
                continue
            # nonzero() on the transposed mask walks pixels in row-major order and,
            # within a pixel, contributors in depth order.
            p_local, k_local = np.nonzero(mask.T)
            pixel_flat = (y_lo + p_local // len(xs)) * w_img + (x_lo + p_local % len(xs))
            pix_chunks.append(pixel_flat)
            idx_chunks.append(depth_idx[k[k_local]])
            val_chunks.append(w.T[mask.T])

    if pix_chunks:
        pix = np.concatenate(pix_chunks)
        idx = np.concatenate(idx_chunks)
        val = np.concatenate(val_chunks)
        # Tiles partition the pixels, so a stable sort by pixel keeps depth order.
        srt = np.argsort(pix, kind="stable")
        pix, idx, val = pix[srt], idx[srt], val[srt]
        counts = np.bincount(pix, minlength=n_pixels)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    else:
        idx = np.empty(0, dtype=np.int64)
        val = np.empty(0, dtype=np.float64)
        indptr = np.zeros(n_pixels + 1, dtype=np.int64)

    return PixelWeights(
        width=w_img,
        height=h_img,
        n_gaussians=len(scene),
        indptr=indptr,
        indices=idx,
        values=val,
        n_culled=splats.n_culled,
        n_degenerate=splats.n_degenerate,
    )


@dataclass
class RenderOutput:
    channels: np.ndarray                       # (H,W,C) float64
    alpha: np.ndarray                          # (H,W) float64, in [0,1]
    contributors: Optional[PixelWeights] = None


def channel_matrix(scene: GaussianScene, channel_selector: str) -> np.ndarray:
    """The (N,C) per-Gaussian value matrix a selector blends."""
    if channel_selector == "color":
        return scene.colors.astype(np.float64)
    if channel_selector == "instance":
        return scene.instance_features.astype(np.float64)
    if channel_selector == "language":
        if scene.language_features is None:
            raise ValueError("language: scene has no language features")
        return scene.language_features.astype(np.float64)
    if channel_selector == "object_id_onehot":
        if scene.gt_object_ids is None:
            raise ValueError("object_id_onehot: scene has no ground-truth object ids")
        ids = scene.gt_object_ids.astype(np.int64)
        onehot = np.zeros((len(scene), int(ids.max()) + 1), dtype=np.float64)
        onehot[np.arange(len(scene)), ids] = 1.0
        return onehot
    raise ValueError(
        f"channel_selector: unknown selector {channel_selector!r}; "
        f"expected one of {CHANNEL_SELECTORS}"
    )


def render(scene: GaussianScene, camera: Camera, channel_selector: str,
           config: RasterConfig = RasterConfig(),
           return_contributors: bool = False) -> RenderOutput:
    """Render the selected channels plus the accumulated alpha map."""
    weights = compute_weights(scene, camera, config)
    channels = weights.blend(channel_matrix(scene, channel_selector))
    return RenderOutput(
        channels=channels,
        alpha=weights.alpha_map(),
        contributors=weights if return_contributors else None,
    )


def render_backward(scene: GaussianScene, camera: Camera, channel_selector: str,
                    upstream: np.ndarray,
                    config: RasterConfig = RasterConfig(),
                    weights: Optional[PixelWeights] = None) -> np.ndarray:
    """Exact channel gradients: grad_i = sum_u w_i(u) * upstream_u.

    `upstream` must match the forward output shape (H,W,C) for the selector;
    geometry, opacity, and the other channel groups receive no gradient.
    """
    n_channels = channel_matrix(scene, channel_selector).shape[1]
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (camera.height, camera.width, n_channels):
        raise ValueError(
            f"upstream: expected shape {(camera.height, camera.width, n_channels)}, "
            f"got {up.shape}"
        )
    if weights is None:
        weights = compute_weights(scene, camera, config)
    return weights.backward(up)
