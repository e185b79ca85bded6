"""Data model for Gaussian scenes: per-Gaussian tensors, cameras, per-view supervision.

A scene is a struct-of-arrays over N Gaussians plus a list of supervised views.
Scene objects are treated as immutable after construction; the only sanctioned
mutations are whole-array replacements of the learned feature fields performed by
the trainer and the mapper, which own the scene exclusively while running.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_INSTANCE_DIM = 16


def quats_to_rotmats(quats: np.ndarray) -> np.ndarray:
    """Unit quaternions (N,4) in (w,x,y,z) order -> rotation matrices (N,3,3)."""
    q = np.asarray(quats, dtype=np.float64)
    if q.ndim == 1:
        q = q[None]
    n = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("rotations: zero-norm quaternion")
    w, x, y, z = (q / n).T
    R = np.empty((len(q), 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform.

    Camera space: x right, y down, z forward (points in front have z > 0).
    Pixel (row j, col i) samples the image plane at continuous coordinates
    (x=i, y=j); cx/cy live in the same coordinate system.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3,3) world-to-camera rotation
    translation: np.ndarray   # (3,) world-to-camera translation

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width < 1 or self.height < 1:
            raise ValueError("camera: width and height must be >= 1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("camera: fx and fy must be positive")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(
        cls,
        position: Sequence[float],
        target: Sequence[float],
        width: int,
        height: int,
        fx: float,
        fy: Optional[float] = None,
        up: Sequence[float] = (0.0, 0.0, 1.0),
    ) -> "Camera":
        """Camera at `position` with the optical axis through `target`."""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        dist = np.linalg.norm(forward)
        if dist < 1e-12:
            raise ValueError("camera: position and target coincide")
        z = forward / dist
        up = np.asarray(up, dtype=np.float64)
        if abs(float(up @ z)) > 0.999:  # looking straight along `up`
            up = np.array([0.0, 1.0, 0.0])
        x = np.cross(up, z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(
            width=width,
            height=height,
            fx=float(fx),
            fy=float(fx if fy is None else fy),
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            rotation=R,
            translation=-R @ position,
        )


@dataclass
class ViewSupervision:
    """One supervised view: camera, 2D instance-ID mask, per-segment language vectors.

    Mask IDs are uint32; 0 means unlabeled/background. Every nonzero ID present in
    the mask must either have a language vector in `segment_language` or be listed
    in `language_free`.
    """

    camera: Camera
    instance_mask: np.ndarray                 # (H,W) uint32
    segment_language: Dict[int, np.ndarray]   # segment id -> (d_L,) float
    language_free: FrozenSet[int] = frozenset()

    def __post_init__(self):
        self.instance_mask = np.ascontiguousarray(self.instance_mask, dtype=np.uint32)
        self.segment_language = {
            int(k): np.asarray(v, dtype=np.float32).reshape(-1)
            for k, v in self.segment_language.items()
        }
        self.language_free = frozenset(int(k) for k in self.language_free)

    def segment_ids(self) -> np.ndarray:
        """Nonzero segment IDs present in the mask, ascending."""
        ids = np.unique(self.instance_mask)
        return ids[ids != 0]

    def validate(self, d_language: int) -> None:
        h, w = self.instance_mask.shape
        if (h, w) != (self.camera.height, self.camera.width):
            raise ValueError(
                f"instance_mask: shape {(h, w)} does not match camera "
                f"{(self.camera.height, self.camera.width)}"
            )
        for sid, vec in self.segment_language.items():
            if sid == 0:
                raise ValueError("segment_language: segment id 0 is reserved for unlabeled")
            if vec.shape != (d_language,):
                raise ValueError(
                    f"segment_language[{sid}]: expected shape ({d_language},), got {vec.shape}"
                )
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"segment_language[{sid}]: non-finite values")
        labeled = set(self.segment_language) | set(self.language_free)
        missing = [int(s) for s in self.segment_ids() if int(s) not in labeled]
        if missing:
            raise ValueError(
                f"instance_mask: segments {missing} have no language entry and are "
                "not listed as language-free"
            )


@dataclass
class Gaussian:
    """Scalar view of a single Gaussian; convenient for hand-built fixtures."""

    position: np.ndarray            # (3,)
    scale: np.ndarray               # (3,) strictly positive
    rotation: np.ndarray            # (4,) unit quaternion (w,x,y,z)
    opacity: float                  # in [0,1]
    color: np.ndarray               # (3,) in [0,1]
    instance_feature: np.ndarray    # (d_I,)
    language_feature: Optional[np.ndarray] = None
    gt_object_id: Optional[int] = None


@dataclass
class GaussianScene:
    """Struct-of-arrays Gaussian scene plus supervision views and query vocabulary."""

    positions: np.ndarray             # (N,3) float32
    scales: np.ndarray                # (N,3) float32, > 0
    rotations: np.ndarray             # (N,4) float32, unit quaternions (w,x,y,z)
    opacities: np.ndarray             # (N,)  float32, in [0,1]
    colors: np.ndarray                # (N,3) float32, in [0,1]
    instance_features: np.ndarray     # (N,d_I) float32
    d_instance: int
    d_language: int
    language_features: Optional[np.ndarray] = None   # (N,d_L) float32
    gt_object_ids: Optional[np.ndarray] = None       # (N,) uint32, 0 = background
    views: List[ViewSupervision] = field(default_factory=list)
    vocabulary: Optional[Dict[int, np.ndarray]] = None  # object id -> (d_L,) unit

    def __post_init__(self):
        for name in ("positions", "scales", "rotations", "opacities", "colors",
                     "instance_features"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))
        if self.language_features is not None:
            self.language_features = np.ascontiguousarray(self.language_features,
                                                          dtype=np.float32)
        if self.gt_object_ids is not None:
            self.gt_object_ids = np.ascontiguousarray(self.gt_object_ids, dtype=np.uint32)
        if self.vocabulary is not None:
            self.vocabulary = {
                int(k): np.asarray(v, dtype=np.float32).reshape(-1)
                for k, v in self.vocabulary.items()
            }

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def num_gaussians(self) -> int:
        return len(self)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i],
            scale=self.scales[i],
            rotation=self.rotations[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i],
            instance_feature=self.instance_features[i],
            language_feature=None if self.language_features is None
            else self.language_features[i],
            gt_object_id=None if self.gt_object_ids is None
            else int(self.gt_object_ids[i]),
        )

    def select(self, indices: np.ndarray) -> "GaussianScene":
        """Geometry/feature subset (no views, no vocabulary); used for masked renders."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        return GaussianScene(
            positions=self.positions[idx],
            scales=self.scales[idx],
            rotations=self.rotations[idx],
            opacities=self.opacities[idx],
            colors=self.colors[idx],
            instance_features=self.instance_features[idx],
            d_instance=self.d_instance,
            d_language=self.d_language,
            language_features=None if self.language_features is None
            else self.language_features[idx],
            gt_object_ids=None if self.gt_object_ids is None
            else self.gt_object_ids[idx],
        )

    @classmethod
    def from_gaussians(
        cls,
        gaussians: Sequence[Gaussian],
        d_instance: int,
        d_language: int,
        views: Sequence[ViewSupervision] = (),
        vocabulary: Optional[Dict[int, np.ndarray]] = None,
    ) -> "GaussianScene":
        if not gaussians:
            raise ValueError("positions: scene must contain at least one Gaussian")
        has_lang = all(g.language_feature is not None for g in gaussians)
        has_ids = all(g.gt_object_id is not None for g in gaussians)
        return cls(
            positions=np.stack([g.position for g in gaussians]),
            scales=np.stack([g.scale for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            opacities=np.array([g.opacity for g in gaussians]),
            colors=np.stack([g.color for g in gaussians]),
            instance_features=np.stack([g.instance_feature for g in gaussians]),
            d_instance=d_instance,
            d_language=d_language,
            language_features=np.stack([g.language_feature for g in gaussians])
            if has_lang else None,
            gt_object_ids=np.array([g.gt_object_id for g in gaussians])
            if has_ids else None,
            views=list(views),
            vocabulary=vocabulary,
        )

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        """Check every structural invariant; raises ValueError naming the field."""
        n = len(self)
        if n == 0:
            raise ValueError("positions: scene must contain at least one Gaussian")
        expected: List[Tuple[str, Tuple[int, ...]]] = [
            ("positions", (n, 3)),
            ("scales", (n, 3)),
            ("rotations", (n, 4)),
            ("opacities", (n,)),
            ("colors", (n, 3)),
            ("instance_features", (n, self.d_instance)),
        ]
        if self.language_features is not None:
            expected.append(("language_features", (n, self.d_language)))
        for name, shape in expected:
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
        if np.any(self.scales <= 0):
            raise ValueError("scales: must be strictly positive")
        qnorm = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if np.any(np.abs(qnorm - 1.0) > 1e-4):
            raise ValueError("rotations: quaternions must be unit-norm")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacities: must lie in [0, 1]")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ValueError("colors: must lie in [0, 1]")
        if self.gt_object_ids is not None and self.gt_object_ids.shape != (n,):
            raise ValueError(
                f"gt_object_ids: expected shape {(n,)}, got {self.gt_object_ids.shape}"
            )
        if self.vocabulary is not None:
            for oid, vec in self.vocabulary.items():
                if oid == 0:
                    raise ValueError("vocabulary: object id 0 is reserved for background")
                if vec.shape != (self.d_language,):
                    raise ValueError(
                        f"vocabulary[{oid}]: expected shape ({self.d_language},), "
                        f"got {vec.shape}"
                    )
                if not np.all(np.isfinite(vec)):
                    raise ValueError(f"vocabulary[{oid}]: non-finite values")
        for k, view in enumerate(self.views):
            try:
                view.validate(self.d_language)
            except ValueError as exc:
                raise ValueError(f"views[{k}].{exc}") from exc
