"""Instance-to-language mapping: learn Phi so language = Phi(instance feature).

Training pairs come from the supervised views: for every mask segment with a
language vector, the rendered instance features are averaged over the segment's
covered pixels to give I_m, paired with the (unit-normalized) language vector L_m.

Two interchangeable mappers:
  * kernel   -- Nadaraya-Watson regression over the pairs (no training loop):
                Phi(I) = sum_m k(I,I_m) L_m / sum_m k(I,I_m),
                k(I,I_m) = exp(-|I-I_m|^2 / (2 sigma^2))
  * mlp      -- [d_I, 256, 256, d_L] with a smooth rectifier (softplus), trained
                full-batch on mean absolute error with hand-derived gradients.

Both re-normalize their outputs to unit length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from .optim import Adam
from .rasterizer import RasterConfig, compute_weights
from .scene import GaussianScene
from .scene_io import SceneFormatError, read_tensor, write_tensor

HIDDEN_WIDTH = 256
DEFAULT_SIGMA = 0.1
DEFAULT_MIN_PIXELS = 20
DEFAULT_ALPHA_MIN = 0.05
DEFAULT_MAX_PAIRS = 4096

PathLike = Union[str, Path]


@dataclass
class MappingPairSet:
    """Segment-level (instance, language) training pairs pooled across views."""

    instance: np.ndarray   # (M,d_I) float64, mean rendered features
    language: np.ndarray   # (M,d_L) float64, unit rows
    source: List[Tuple[int, int]]   # (view index, segment id) per pair

    def __len__(self) -> int:
        return self.instance.shape[0]


def build_training_pairs(
    scene: GaussianScene,
    min_pixels: int = DEFAULT_MIN_PIXELS,
    alpha_min: float = DEFAULT_ALPHA_MIN,
    raster_config: RasterConfig = RasterConfig(),
) -> MappingPairSet:
    """One pair per (view, labeled segment) with enough rendered coverage.

    A segment pixel counts as covered when the accumulated alpha is >= alpha_min;
    segments with fewer than min_pixels covered pixels are dropped.
    """
    inst, lang, source = [], [], []
    for k, view in enumerate(scene.views):
        weights = compute_weights(scene, view.camera, raster_config)
        rendered = weights.blend(scene.instance_features.astype(np.float64))
        covered = weights.alpha_map() >= alpha_min
        for sid in sorted(view.segment_language):
            sel = (view.instance_mask == sid) & covered
            n_px = int(np.count_nonzero(sel))
            if n_px < min_pixels:
                continue
            vec = view.segment_language[sid].astype(np.float64)
            norm = np.linalg.norm(vec)
            if norm < 1e-12:
                raise ValueError(f"segment_language[{sid}]: zero-norm language vector")
            inst.append(rendered[sel].mean(axis=0))
            lang.append(vec / norm)
            source.append((k, sid))
    if not inst:
        raise ValueError(
            "pairs: no (view, segment) produced a training pair -- check that the "
            f"instance field is trained, masks have labeled segments, and segments "
            f"have >= {min_pixels} covered pixels"
        )
    return MappingPairSet(np.stack(inst), np.stack(lang), source)


def _normalize_rows(x: np.ndarray, fallback: Optional[np.ndarray] = None) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = norms > 1e-12
    out = np.where(safe, x / np.where(safe, norms, 1.0), 0.0)
    if fallback is not None and not safe.all():
        rows = ~safe[:, 0]
        out[rows] = fallback[rows]
    return out


class KernelMapping:
    """Nadaraya-Watson regression over the pair set; construction is the whole fit."""

    kind = "kernel"
    training_steps = 0   # no iterative optimization by construction

    def __init__(self, pairs: MappingPairSet, sigma: float = DEFAULT_SIGMA):
        if len(pairs) < 1:
            raise ValueError("pairs: kernel mapping needs at least one pair")
        if sigma <= 0:
            raise ValueError("sigma: bandwidth must be positive")
        self.pairs = pairs
        self.sigma = float(sigma)

    def predict(self, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """(Q,d_I) -> (Q,d_L) unit rows."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty((len(x), self.pairs.language.shape[1]), dtype=np.float64)
        inv = -0.5 / (self.sigma * self.sigma)
        for lo in range(0, len(x), chunk):
            block = x[lo:lo + chunk]
            d2 = ((block[:, None, :] - self.pairs.instance[None]) ** 2).sum(axis=2)
            logw = inv * d2
            logw -= logw.max(axis=1, keepdims=True)   # max-shift: best pair -> w=1
            w = np.exp(logw)
            denom = w.sum(axis=1, keepdims=True)
            nearest = self.pairs.language[np.argmin(d2, axis=1)]
            safe = denom[:, 0] > 0
            blend = np.where(safe[:, None],
                             (w @ self.pairs.language) / np.where(safe[:, None], denom, 1.0),
                             nearest)
            # a cancelled-out blend (zero norm) also falls back to the nearest pair
            out[lo:lo + chunk] = _normalize_rows(blend, fallback=nearest)
        return out


class MlpMapping:
    """Fixed-architecture [d_I, 256, 256, d_L] network with softplus activations."""

    kind = "mlp"
    activation = "softplus"

    def __init__(self, weights: List[np.ndarray], biases: List[np.ndarray]):
        if len(weights) != 3 or len(biases) != 3:
            raise ValueError("weights: expected 3 layers")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        d_in = self.weights[0].shape[0]
        if (self.weights[0].shape[1] != HIDDEN_WIDTH
                or self.weights[1].shape != (HIDDEN_WIDTH, HIDDEN_WIDTH)
                or self.weights[2].shape[0] != HIDDEN_WIDTH):
            raise ValueError(
                f"weights: architecture must be [{d_in}, {HIDDEN_WIDTH}, "
                f"{HIDDEN_WIDTH}, d_L]"
            )

    @property
    def widths(self) -> List[int]:
        return [self.weights[0].shape[0], HIDDEN_WIDTH, HIDDEN_WIDTH,
                self.weights[2].shape[1]]

    def raw_forward(self, x: np.ndarray) -> np.ndarray:
        """Network output before unit re-normalization."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        h = np.logaddexp(0.0, x @ self.weights[0] + self.biases[0])
        h = np.logaddexp(0.0, h @ self.weights[1] + self.biases[1])
        return h @ self.weights[2] + self.biases[2]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return _normalize_rows(self.raw_forward(x))


MappingFunction = Union[KernelMapping, MlpMapping]


@dataclass(frozen=True)
class MlpFitConfig:
    steps: int = 30000
    learning_rate: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps: must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate: must be positive")


def fit_mlp(pairs: MappingPairSet,
            cfg: MlpFitConfig = MlpFitConfig()) -> Tuple[MlpMapping, np.ndarray]:
    """Full-batch Adam on mean absolute error; gradients written out by hand.

    Returns the trained mapping and the per-step loss trace.
    """
    cfg.validate()
    if len(pairs) < 1:
        raise ValueError("pairs: cannot fit an MLP on an empty pair set")
    rng = np.random.default_rng(cfg.seed)
    d_in = pairs.instance.shape[1]
    d_out = pairs.language.shape[1]
    widths = [d_in, HIDDEN_WIDTH, HIDDEN_WIDTH, d_out]
    weights = [rng.standard_normal((widths[i], widths[i + 1]))
               * np.sqrt(2.0 / widths[i]) for i in range(3)]
    biases = [np.zeros(widths[i + 1]) for i in range(3)]

    x = pairs.instance
    target = pairs.language
    opt = Adam([w.shape for w in weights] + [b.shape for b in biases],
               lr=cfg.learning_rate)
    losses = np.empty(cfg.steps, dtype=np.float64)

    for step in range(cfg.steps):
        a1 = x @ weights[0] + biases[0]
        h1 = np.logaddexp(0.0, a1)
        a2 = h1 @ weights[1] + biases[1]
        h2 = np.logaddexp(0.0, a2)
        y = h2 @ weights[2] + biases[2]

        resid = y - target
        loss = float(np.abs(resid).mean())
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step}")
        losses[step] = loss

        dy = np.sign(resid) / resid.size          # d(mean |r|)/dy
        dw3 = h2.T @ dy
        db3 = dy.sum(axis=0)
        dh2 = dy @ weights[2].T
        da2 = dh2 * expit(a2)                     # softplus' = logistic
        dw2 = h1.T @ da2
        db2 = da2.sum(axis=0)
        dh1 = da2 @ weights[1].T
        da1 = dh1 * expit(a1)
        dw1 = x.T @ da1
        db1 = da1.sum(axis=0)

        opt.step(weights + biases, [dw1, dw2, dw3, db1, db2, db3])

    return MlpMapping(weights, biases), losses


def apply_mapping(scene: GaussianScene, mapping: MappingFunction, *,
                  max_pairs: int = DEFAULT_MAX_PAIRS,
                  subsample_seed: int = 0) -> GaussianScene:
    """Materialize the language field: language_i = Phi(instance_i), unit rows.

    Kernel mappings with more than `max_pairs` pairs are evaluated on a seeded
    subsample to bound the cost of scoring every Gaussian.  Instance features are
    untouched, so re-applying a mapping is idempotent.
    """
    phi = mapping
    if isinstance(mapping, KernelMapping) and len(mapping.pairs) > max_pairs:
        rng = np.random.default_rng(subsample_seed)
        keep = np.sort(rng.choice(len(mapping.pairs), size=max_pairs, replace=False))
        phi = KernelMapping(
            MappingPairSet(mapping.pairs.instance[keep], mapping.pairs.language[keep],
                           [mapping.pairs.source[i] for i in keep]),
            sigma=mapping.sigma,
        )
    language = phi.predict(scene.instance_features.astype(np.float64))
    scene.language_features = language.astype(np.float32)
    return scene


# -- serialization ------------------------------------------------------------

def save_mapping(mapping: MappingFunction, out_dir: PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if mapping.kind == "kernel":
        manifest = {
            "kind": "kernel",
            "sigma": mapping.sigma,
            "n_pairs": len(mapping.pairs),
            "d_I": mapping.pairs.instance.shape[1],
            "d_L": mapping.pairs.language.shape[1],
            "source": [list(s) for s in mapping.pairs.source],
        }
        write_tensor(out / "pairs_instance.f32", mapping.pairs.instance, "<f4")
        write_tensor(out / "pairs_language.f32", mapping.pairs.language, "<f4")
    else:
        manifest = {
            "kind": "mlp",
            "widths": mapping.widths,
            "activation": mapping.activation,
        }
        for i, (w, b) in enumerate(zip(mapping.weights, mapping.biases)):
            write_tensor(out / f"w{i}.f32", w, "<f4")
            write_tensor(out / f"b{i}.f32", b, "<f4")
    (out / "mapping.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_mapping(in_dir: PathLike) -> MappingFunction:
    src = Path(in_dir)
    path = src / "mapping.json"
    if not path.is_file():
        raise SceneFormatError(f"mapping: missing {path}")
    manifest = json.loads(path.read_text())
    kind = manifest.get("kind")
    if kind == "kernel":
        m = int(manifest["n_pairs"])
        d_i, d_l = int(manifest["d_I"]), int(manifest["d_L"])
        pairs = MappingPairSet(
            instance=read_tensor(src / "pairs_instance.f32", (m, d_i), "<f4",
                                 "pairs_instance").astype(np.float64),
            language=read_tensor(src / "pairs_language.f32", (m, d_l), "<f4",
                                 "pairs_language").astype(np.float64),
            source=[tuple(s) for s in manifest.get("source", [])],
        )
        return KernelMapping(pairs, sigma=float(manifest["sigma"]))
    if kind == "mlp":
        widths = [int(w) for w in manifest["widths"]]
        weights, biases = [], []
        for i in range(3):
            weights.append(read_tensor(src / f"w{i}.f32",
                                       (widths[i], widths[i + 1]), "<f4",
                                       f"w{i}").astype(np.float64))
            biases.append(read_tensor(src / f"b{i}.f32", (widths[i + 1],), "<f4",
                                      f"b{i}").astype(np.float64))
        return MlpMapping(weights, biases)
    raise SceneFormatError(f"mapping: unknown kind {kind!r}")
