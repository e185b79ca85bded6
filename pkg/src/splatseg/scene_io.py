"""On-disk scene container: manifest.json plus raw little-endian tensors.

Layout of a scene directory:

    manifest.json        schema/version, counts, dims, stage markers, per-tensor
                         shapes, camera list, vocabulary (inline floats), meta
    positions.f32        (N,3) float32, row-major, little-endian
    scales.f32           (N,3)
    rotations.f32        (N,4)
    opacities.f32        (N,)
    colors.f32           (N,3)
    instance.f32         (N,d_I)
    language.f32         (N,d_L)      optional, present once mapped
    object_ids.u32       (N,)         optional ground-truth labels
    mask_<k>.u32         (H,W) per view
    segments_<k>.json    segment id -> language vector; ids present in the mask
                         but absent here are treated as language-free

Round trips are bit-exact: tensors are stored in the same dtype the scene holds
them in memory.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .scene import Camera, GaussianScene, ViewSupervision

MANIFEST_NAME = "manifest.json"
CONTAINER_VERSION = 1

PathLike = Union[str, Path]


class SceneFormatError(ValueError):
    """A scene directory violates the container contract; message names the field."""


def write_tensor(path: PathLike, array: np.ndarray, dtype: str) -> None:
    """Raw row-major little-endian dump."""
    np.ascontiguousarray(array, dtype=dtype).tofile(path)


def read_tensor(path: PathLike, shape: Sequence[int], dtype: str,
                field: str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise SceneFormatError(f"{field}: missing tensor file {path.name}")
    data = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape)) if shape else 0
    if data.size != expected:
        raise SceneFormatError(
            f"{field}: expected {expected} values for shape {tuple(shape)}, "
            f"file holds {data.size}"
        )
    return data.reshape(shape)


def _camera_to_json(cam: Camera) -> dict:
    return {
        "width": cam.width, "height": cam.height,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
    }


def _camera_from_json(obj: dict, field: str) -> Camera:
    try:
        return Camera(
            width=int(obj["width"]), height=int(obj["height"]),
            fx=float(obj["fx"]), fy=float(obj["fy"]),
            cx=float(obj["cx"]), cy=float(obj["cy"]),
            rotation=np.asarray(obj["rotation"], dtype=np.float64),
            translation=np.asarray(obj["translation"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"{field}: malformed camera ({exc})") from exc


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_manifest(scene_dir: PathLike) -> dict:
    path = Path(scene_dir) / MANIFEST_NAME
    if not path.is_file():
        raise SceneFormatError(f"manifest: missing {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"manifest: invalid JSON ({exc})") from exc


def update_manifest(scene_dir: PathLike, **entries) -> dict:
    """Merge top-level entries into an existing manifest (stage markers, meta)."""
    manifest = read_manifest(scene_dir)
    manifest.update(entries)
    _write_json(Path(scene_dir) / MANIFEST_NAME, manifest)
    return manifest


def save_scene(scene: GaussianScene, scene_dir: PathLike, *,
               overwrite: bool = False,
               trained: bool = False,
               mapped: Optional[str] = None,
               meta: Optional[dict] = None) -> None:
    """Write the full container; refuses to clobber an existing scene unless asked."""
    scene.validate()
    out = Path(scene_dir)
    if (out / MANIFEST_NAME).exists() and not overwrite:
        raise FileExistsError(f"{out / MANIFEST_NAME} exists (pass overwrite=True)")
    out.mkdir(parents=True, exist_ok=True)

    n = len(scene)
    tensors: Dict[str, Tuple[str, np.ndarray, str]] = {
        "positions": ("positions.f32", scene.positions, "<f4"),
        "scales": ("scales.f32", scene.scales, "<f4"),
        "rotations": ("rotations.f32", scene.rotations, "<f4"),
        "opacities": ("opacities.f32", scene.opacities, "<f4"),
        "colors": ("colors.f32", scene.colors, "<f4"),
        "instance": ("instance.f32", scene.instance_features, "<f4"),
    }
    if scene.language_features is not None:
        tensors["language"] = ("language.f32", scene.language_features, "<f4")
    if scene.gt_object_ids is not None:
        tensors["object_ids"] = ("object_ids.u32", scene.gt_object_ids, "<u4")

    shape_table = {}
    for field, (fname, arr, dtype) in tensors.items():
        write_tensor(out / fname, arr, dtype)
        shape_table[field] = list(arr.shape)

    for k, view in enumerate(scene.views):
        write_tensor(out / f"mask_{k}.u32", view.instance_mask, "<u4")
        _write_json(out / f"segments_{k}.json",
                    {str(s): v.tolist() for s, v in view.segment_language.items()})

    manifest = {
        "version": CONTAINER_VERSION,
        "n_gaussians": n,
        "d_I": scene.d_instance,
        "d_L": scene.d_language,
        "trained": bool(trained),
        "mapped": mapped,
        "tensors": shape_table,
        "views": [_camera_to_json(v.camera) for v in scene.views],
        "vocabulary": None if scene.vocabulary is None
        else {str(k): v.tolist() for k, v in scene.vocabulary.items()},
        "meta": meta or {},
    }
    _write_json(out / MANIFEST_NAME, manifest)


def load_scene(scene_dir: PathLike) -> GaussianScene:
    """Read and validate a scene container; raises SceneFormatError naming the field."""
    src = Path(scene_dir)
    manifest = read_manifest(src)
    for key in ("version", "n_gaussians", "d_I", "d_L", "tensors", "views"):
        if key not in manifest:
            raise SceneFormatError(f"manifest: missing key {key!r}")
    if manifest["version"] != CONTAINER_VERSION:
        raise SceneFormatError(
            f"manifest: unsupported version {manifest['version']!r}"
        )
    n = int(manifest["n_gaussians"])
    d_i = int(manifest["d_I"])
    d_l = int(manifest["d_L"])
    shapes = manifest["tensors"]

    expected = {
        "positions": (n, 3), "scales": (n, 3), "rotations": (n, 4),
        "opacities": (n,), "colors": (n, 3), "instance": (n, d_i),
    }
    optional = {"language": (n, d_l), "object_ids": (n,)}
    for field, shape in expected.items():
        if field not in shapes:
            raise SceneFormatError(f"manifest.tensors: missing entry {field!r}")
    for field in shapes:
        if field not in expected and field not in optional:
            raise SceneFormatError(f"manifest.tensors: unknown entry {field!r}")
        want = expected.get(field) or optional[field]
        if tuple(shapes[field]) != want:
            raise SceneFormatError(
                f"{field}: manifest shape {tuple(shapes[field])} does not match "
                f"expected {want}"
            )

    def tensor(field: str, fname: str, shape, dtype: str) -> np.ndarray:
        arr = read_tensor(src / fname, shape, dtype, field)
        if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
            raise SceneFormatError(f"{field}: non-finite values")
        return arr

    language = None
    if "language" in shapes:
        language = tensor("language", "language.f32", (n, d_l), "<f4")
    object_ids = None
    if "object_ids" in shapes:
        object_ids = tensor("object_ids", "object_ids.u32", (n,), "<u4")

    vocabulary = None
    if manifest.get("vocabulary"):
        vocabulary = {}
        for key, vec in manifest["vocabulary"].items():
            arr = np.asarray(vec, dtype=np.float32)
            if arr.shape != (d_l,):
                raise SceneFormatError(
                    f"vocabulary[{key}]: expected {d_l} values, got {arr.shape}"
                )
            vocabulary[int(key)] = arr

    views = []
    for k, cam_json in enumerate(manifest["views"]):
        cam = _camera_from_json(cam_json, f"views[{k}]")
        mask = read_tensor(src / f"mask_{k}.u32", (cam.height, cam.width), "<u4",
                           f"mask_{k}")
        seg_path = src / f"segments_{k}.json"
        if not seg_path.is_file():
            raise SceneFormatError(f"segments_{k}: missing file {seg_path.name}")
        try:
            seg_json = json.loads(seg_path.read_text())
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"segments_{k}: invalid JSON ({exc})") from exc
        segment_language = {}
        for sid, vec in seg_json.items():
            arr = np.asarray(vec, dtype=np.float32)
            if arr.shape != (d_l,):
                raise SceneFormatError(
                    f"segments_{k}[{sid}]: expected {d_l} values, got {arr.shape}"
                )
            segment_language[int(sid)] = arr
        present = np.unique(mask)
        language_free = frozenset(int(s) for s in present
                                  if s != 0 and int(s) not in segment_language)
        views.append(ViewSupervision(
            camera=cam, instance_mask=mask,
            segment_language=segment_language, language_free=language_free,
        ))

    scene = GaussianScene(
        positions=tensor("positions", "positions.f32", (n, 3), "<f4"),
        scales=tensor("scales", "scales.f32", (n, 3), "<f4"),
        rotations=tensor("rotations", "rotations.f32", (n, 4), "<f4"),
        opacities=tensor("opacities", "opacities.f32", (n,), "<f4"),
        colors=tensor("colors", "colors.f32", (n, 3), "<f4"),
        instance_features=tensor("instance", "instance.f32", (n, d_i), "<f4"),
        d_instance=d_i,
        d_language=d_l,
        language_features=language,
        gt_object_ids=object_ids,
        views=views,
        vocabulary=vocabulary,
    )
    try:
        scene.validate()
    except ValueError as exc:
        raise SceneFormatError(str(exc)) from exc
    return scene


def export_ply(path: PathLike, positions: np.ndarray, colors: np.ndarray) -> None:
    """Colored point cloud (x,y,z,r,g,b), binary little-endian PLY."""
    pos = np.asarray(positions, dtype="<f4").reshape(-1, 3)
    col = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(pos) != len(col):
        raise ValueError(
            f"colors: expected {len(pos)} rows to match positions, got {len(col)}"
        )
    rgb = np.clip(np.round(col * 255.0), 0, 255).astype(np.uint8)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(pos)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    record = np.zeros(len(pos), dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
    record["xyz"] = pos
    record["rgb"] = rgb
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        record.tofile(fh)
