"""Command-line pipeline: gen -> train -> map -> query / eval over scene directories.

Every command is deterministic given its --seed: rerunning a stage with identical
inputs reproduces its output files byte-for-byte; wall-clock timings go to stdout
only.  Stage order is enforced through manifest markers ("trained", "mapped"); violations
exit nonzero with a single-line machine-parsable error:

    splatseg: error: <kind>: <message>

Exit codes: 0 ok; 2 usage/config; 3 stage-order; 4 missing or malformed files;
5 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import ConfigError, config_value, load_config
from .evaluate import (DEFAULT_ACC_THRESHOLD, EVAL_MODES, QueryCase,
                       cases_from_vocabulary, format_report_table, report_to_json,
                       run_benchmark)
from .inference import Query, refine
from .ins2lang import (DEFAULT_MAX_PAIRS, DEFAULT_MIN_PIXELS, DEFAULT_SIGMA,
                       MlpFitConfig, apply_mapping, build_training_pairs, fit_mlp,
                       KernelMapping, save_mapping)
from .instance_field import TrainConfig, train_instance_field
from .scene_io import (SceneFormatError, export_ply, load_scene, read_manifest,
                       save_scene, update_manifest, write_tensor)
from .synthetic import (BENCHMARK_SEEDS, SceneSpec, benchmark_spec,
                        generate_synthetic_scene)


class StageOrderError(RuntimeError):
    """A pipeline stage ran before its prerequisite stage."""


_ERROR_KINDS = [
    (ConfigError, "config", 2),
    (StageOrderError, "stage-order", 3),
    (SceneFormatError, "format", 4),
    (FileNotFoundError, "missing-file", 4),
    (FileExistsError, "exists", 4),
    (ValueError, "invalid-argument", 2),
    (RuntimeError, "runtime", 5),
]


def _fail(kind: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())   # single line
    print(f"splatseg: error: {kind}: {message}", file=sys.stderr)
    return code


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_vector(path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"vector file not found: {p}")
    return np.fromfile(p, dtype="<f4").astype(np.float64)


def _load_cli_config(args) -> Dict[str, Dict[str, str]]:
    if getattr(args, "config", None):
        return load_config(args.config)
    return {}


def _apply_threads(threads: int) -> None:
    if threads and threads > 0:
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(limits=threads)
        except ImportError:
            print("splatseg: note: threadpoolctl unavailable, --threads ignored",
                  file=sys.stderr)


def _require_stage(scene_dir: str, stage: str) -> dict:
    manifest = read_manifest(scene_dir)
    if stage == "trained" and not manifest.get("trained"):
        raise StageOrderError(
            f"scene {scene_dir} is not trained yet (run `splatseg train` first)"
        )
    if stage == "mapped" and not manifest.get("mapped"):
        raise StageOrderError(
            f"scene {scene_dir} has no language field yet (run `splatseg map` first)"
        )
    return manifest


def _merge_meta(scene_dir: str, key: str, value: dict) -> None:
    manifest = read_manifest(scene_dir)
    meta = manifest.get("meta") or {}
    meta[key] = value
    update_manifest(scene_dir, meta=meta)


# -- commands -----------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _load_cli_config(args)

    def val(key, cast, default):
        return config_value(cfg, "scene", key, cast, default)

    if args.benchmark:
        spec = benchmark_spec(args.seed if args.seed is not None
                              else val("seed", int, BENCHMARK_SEEDS[0]))
        scene = generate_synthetic_scene(spec)
        save_scene(scene, args.out, overwrite=args.overwrite,
                   meta={"generator": asdict(spec)})
        print(f"wrote benchmark scene {args.out}: {len(scene)} gaussians, "
              f"{len(scene.views)} views, seed {spec.seed}")
        return 0

    spec = SceneSpec(
        num_objects=args.num_objects if args.num_objects is not None
        else val("num_objects", int, 8),
        gaussians_per_object=args.gaussians_per_object
        if args.gaussians_per_object is not None
        else val("gaussians_per_object", int, 100),
        d_instance=args.instance_dim if args.instance_dim is not None
        else val("instance_dim", int, 16),
        d_language=args.language_dim if args.language_dim is not None
        else val("language_dim", int, 32),
        num_views=args.num_views if args.num_views is not None
        else val("num_views", int, 6),
        image_size=args.image_size if args.image_size is not None
        else val("image_size", int, 96),
        background_gaussians=args.background_gaussians
        if args.background_gaussians is not None
        else val("background_gaussians", int, 0),
        seed=args.seed if args.seed is not None else val("seed", int, 0),
    )
    scene = generate_synthetic_scene(spec)
    save_scene(scene, args.out, overwrite=args.overwrite,
               meta={"generator": asdict(spec)})
    print(f"wrote scene {args.out}: {len(scene)} gaussians, "
          f"{len(scene.views)} views, seed {spec.seed}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cli_config(args)

    def val(key, cast, default):
        return config_value(cfg, "train", key, cast, default)

    _require_stage(args.scene, "exists")
    scene = load_scene(args.scene)
    train_cfg = TrainConfig(
        steps=args.steps if args.steps is not None else val("steps", int, 30000),
        samples_per_segment=args.samples_per_segment
        if args.samples_per_segment is not None
        else val("samples_per_segment", int, 64),
        learning_rate=args.learning_rate if args.learning_rate is not None
        else val("learning_rate", float, 2.5e-3),
        optimizer=args.optimizer if args.optimizer is not None
        else val("optimizer", str, "adam"),
        seed=args.seed if args.seed is not None else val("seed", int, 0),
    )
    t0 = time.perf_counter()
    scene, losses = train_instance_field(scene, train_cfg)
    elapsed = time.perf_counter() - t0

    write_tensor(Path(args.scene) / "instance.f32", scene.instance_features, "<f4")
    update_manifest(args.scene, trained=True)
    _merge_meta(args.scene, "train", asdict(train_cfg))

    loss_csv = Path(args.loss_csv) if args.loss_csv else Path(args.scene) / "loss_instance.csv"
    loss_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(loss_csv, "w") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss!r}\n")
    final = losses[-1] if len(losses) else float("nan")
    print(f"trained {len(losses)} steps in {elapsed:.1f}s, final loss {final:.6f}, "
          f"trace {loss_csv}")
    return 0


def cmd_map(args) -> int:
    cfg = _load_cli_config(args)

    def val(key, cast, default):
        return config_value(cfg, "mapper", key, cast, default)

    _require_stage(args.scene, "trained")
    scene = load_scene(args.scene)
    kind = args.mapper if args.mapper is not None else val("kind", str, "kernel")
    if kind not in ("kernel", "mlp"):
        raise ValueError(f"mapper: unknown mapper {kind!r}; expected kernel or mlp")
    seed = args.seed if args.seed is not None else val("seed", int, 0)
    min_pixels = args.min_pixels if args.min_pixels is not None \
        else val("min_pixels", int, DEFAULT_MIN_PIXELS)
    max_pairs = args.max_pairs if args.max_pairs is not None \
        else val("max_pairs", int, DEFAULT_MAX_PAIRS)

    pairs = build_training_pairs(scene, min_pixels=min_pixels)
    if kind == "kernel":
        sigma = args.sigma if args.sigma is not None else val("sigma", float, DEFAULT_SIGMA)
        mapping = KernelMapping(pairs, sigma=sigma)
    else:
        fit_cfg = MlpFitConfig(
            steps=args.steps if args.steps is not None else val("steps", int, 30000),
            learning_rate=args.learning_rate if args.learning_rate is not None
            else val("learning_rate", float, 1e-3),
            seed=seed,
        )
        mapping, losses = fit_mlp(pairs, fit_cfg)
        if args.loss_csv:
            loss_csv = Path(args.loss_csv)
            loss_csv.parent.mkdir(parents=True, exist_ok=True)
            with open(loss_csv, "w") as fh:
                fh.write("step,loss\n")
                for i, loss in enumerate(losses):
                    fh.write(f"{i},{loss!r}\n")

    scene = apply_mapping(scene, mapping, max_pairs=max_pairs, subsample_seed=seed)
    write_tensor(Path(args.scene) / "language.f32", scene.language_features, "<f4")
    manifest = read_manifest(args.scene)
    tensors = manifest.get("tensors", {})
    tensors["language"] = [len(scene), scene.d_language]
    update_manifest(args.scene, mapped=kind, tensors=tensors)
    _merge_meta(args.scene, "map", {
        "kind": kind, "seed": seed, "n_pairs": len(pairs), "min_pixels": min_pixels,
    })
    mapping_out = args.mapping_out or str(Path(args.scene) / "mapping")
    save_mapping(mapping, mapping_out)
    print(f"mapped {len(scene)} gaussians with {kind} ({len(pairs)} pairs), "
          f"mapping saved to {mapping_out}")
    return 0


def _canonical_for_object(scene, object_id: int, seed: int,
                          stuff_canonical: bool = False) -> np.ndarray:
    """Contrast set for a vocabulary query: the other objects + one random unit.

    With `stuff_canonical`, the negated vocabulary mean joins the set so that
    off-vocabulary (stuff) regions have something to side with.
    """
    rng = np.random.default_rng(seed)
    others = [scene.vocabulary[o].astype(np.float64)
              for o in sorted(scene.vocabulary) if o != object_id]
    if stuff_canonical:
        vec = -np.mean([scene.vocabulary[o] for o in sorted(scene.vocabulary)],
                       axis=0, dtype=np.float64)
        others.append(vec / np.linalg.norm(vec))
    extra = rng.standard_normal(scene.d_language)
    extra /= np.linalg.norm(extra)
    canon = np.stack(others + [extra]) if others else extra[None]
    return canon / np.linalg.norm(canon, axis=1, keepdims=True)


def _parse_similarity_threshold(raw: Optional[str], cfg, section: str):
    """'auto' or a float in (0,1); returns (mode, value)."""
    if raw is None:
        raw = config_value(cfg, section, "similarity_threshold", str, "0.8")
    raw = str(raw).strip().lower()
    if raw == "auto":
        return "auto", 0.8
    try:
        return "fixed", float(raw)
    except ValueError as exc:
        raise ValueError(
            f"similarity-threshold: expected a float or 'auto', got {raw!r}"
        ) from exc


def cmd_query(args) -> int:
    cfg = _load_cli_config(args)
    _require_stage(args.scene, "mapped")
    scene = load_scene(args.scene)
    seed = args.seed if args.seed is not None \
        else config_value(cfg, "inference", "seed", int, 0)
    tau = args.tau if args.tau is not None \
        else config_value(cfg, "inference", "tau", float, 0.5)
    mode, t_value = _parse_similarity_threshold(args.similarity_threshold, cfg,
                                                "inference")
    stuff = args.stuff_canonical or config_value(
        cfg, "inference", "stuff_canonical", bool, False)

    if (args.query_vec is None) == (args.query_object_id is None):
        raise ValueError(
            "query: pass exactly one of --query-vec or --query-object-id"
        )
    if args.query_object_id is not None:
        if scene.vocabulary is None:
            raise ValueError("query-object-id: scene has no vocabulary")
        oid = args.query_object_id
        if oid not in scene.vocabulary:
            raise ValueError(
                f"query-object-id: {oid} not in vocabulary "
                f"{sorted(scene.vocabulary)}"
            )
        embedding = scene.vocabulary[oid].astype(np.float64)
        label = args.label or f"object-{oid}"
        canonical = (np.stack([_read_vector(p) for p in args.canon_vec])
                     if args.canon_vec
                     else _canonical_for_object(scene, oid, seed,
                                                stuff_canonical=stuff))
    else:
        embedding = _read_vector(args.query_vec)
        label = args.label or Path(args.query_vec).stem
        if args.canon_vec:
            canonical = np.stack([_read_vector(p) for p in args.canon_vec])
        elif scene.vocabulary is not None:
            rng = np.random.default_rng(seed)
            extra = rng.standard_normal(scene.d_language)
            extra /= np.linalg.norm(extra)
            vocab = [scene.vocabulary[o].astype(np.float64)
                     for o in sorted(scene.vocabulary)]
            if stuff:
                vec = -np.mean(vocab, axis=0)
                vocab.append(vec / np.linalg.norm(vec))
            canonical = np.stack(vocab + [extra])
        else:
            raise ValueError(
                "canon-vec: scene has no vocabulary; pass at least one --canon-vec"
            )

    norm = np.linalg.norm(embedding)
    if norm < 1e-12:
        raise ValueError("query-vec: zero-norm query embedding")
    canonical = canonical / np.linalg.norm(canonical, axis=1, keepdims=True)
    query = Query(embedding=embedding / norm, canonical=canonical, tau=tau,
                  threshold_mode=mode, similarity_threshold=t_value, label=label)
    result = refine(scene, query)

    payload = {
        "label": label,
        "tau": tau,
        "threshold_mode": mode,
        "similarity_threshold": result.threshold,
        "seed": seed,
        "seeds": result.seeds.tolist(),
        "skipped_seeds": result.skipped_seeds.tolist(),
        "regions": [
            {"center": r.center, "size": int(len(r.members)),
             "score": None if np.isnan(r.score) else r.score,
             "accepted": r.accepted}
            for r in result.regions
        ],
        "final": result.final.tolist(),
        "n_final": int(len(result.final)),
        "warning": "no seeds above tau" if result.empty else None,
    }
    out = Path(args.out) if args.out else Path(args.scene) / "result.json"
    _write_json(out, payload)
    if args.export_ply:
        export_ply(args.export_ply, scene.positions[result.final],
                   scene.colors[result.final])
    print(f"query '{label}': {len(result.final)} gaussians selected "
          f"({len(result.accepted_regions)}/{len(result.regions)} regions accepted) "
          f"in {result.elapsed_s:.3f}s, result {out}")
    return 0


def _load_cases(scene, path: Optional[str], seed: int,
                stuff_canonical: bool = False) -> List[QueryCase]:
    if path is None:
        return cases_from_vocabulary(scene, np.random.default_rng(seed),
                                     stuff_canonical=stuff_canonical)
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"cases file not found: {p}")
    raw = json.loads(p.read_text())
    entries = raw["cases"] if isinstance(raw, dict) else raw
    ids = scene.gt_object_ids.astype(np.int64) if scene.gt_object_ids is not None else None
    cases = []
    for i, entry in enumerate(entries):
        if "object_id" in entry:
            oid = int(entry["object_id"])
            if scene.vocabulary is None or oid not in scene.vocabulary:
                raise ValueError(f"cases[{i}]: object_id {oid} not in scene vocabulary")
            emb = scene.vocabulary[oid].astype(np.float64)
            gt_oid = oid
        else:
            emb = np.asarray(entry["embedding"], dtype=np.float64)
            gt_oid = int(entry["gt_object_id"])
        if ids is None:
            raise ValueError(f"cases[{i}]: scene has no ground-truth object ids")
        gt = np.nonzero(ids == gt_oid)[0]
        if gt.size == 0:
            raise ValueError(f"cases[{i}]: no gaussians carry object id {gt_oid}")
        emb = emb / np.linalg.norm(emb)
        canonical = _canonical_for_object(scene, gt_oid, seed,
                                          stuff_canonical=stuff_canonical) \
            if scene.vocabulary else None
        if canonical is None:
            raise ValueError(f"cases[{i}]: scene has no vocabulary for contrast set")
        cases.append(QueryCase(
            label=str(entry.get("label", f"case-{i}")), embedding=emb,
            canonical=canonical, gt_gaussians=gt,
            gt_masks=[(v.instance_mask == gt_oid) for v in scene.views] or None,
        ))
    return cases


def cmd_eval(args) -> int:
    cfg = _load_cli_config(args)
    _require_stage(args.scene, "mapped")
    scene = load_scene(args.scene)
    seed = args.seed if args.seed is not None \
        else config_value(cfg, "eval", "seed", int, 0)
    tau = args.tau if args.tau is not None \
        else config_value(cfg, "inference", "tau", float, 0.5)
    mode, t_value = _parse_similarity_threshold(args.similarity_threshold, cfg,
                                                "inference")
    modes_raw = args.modes if args.modes is not None \
        else config_value(cfg, "eval", "modes", str, ",".join(EVAL_MODES))
    modes = [m.strip() for m in modes_raw.split(",") if m.strip()]
    acc_threshold = args.acc_threshold if args.acc_threshold is not None \
        else config_value(cfg, "eval", "acc_threshold", float, DEFAULT_ACC_THRESHOLD)
    include_2d = not args.no_2d and config_value(cfg, "eval", "include_2d", bool, True)
    stuff = args.stuff_canonical or config_value(
        cfg, "eval", "stuff_canonical", bool, False)

    cases = _load_cases(scene, args.cases, seed, stuff_canonical=stuff)
    reports = run_benchmark(
        scene, cases, modes, tau=tau, threshold_mode=mode,
        similarity_threshold=t_value, seed=seed, include_2d=include_2d,
        acc_threshold=acc_threshold,
    )
    payload = {
        "seed": seed, "tau": tau, "threshold_mode": mode,
        "similarity_threshold": t_value, "modes": report_to_json(reports),
    }
    out = Path(args.out) if args.out else Path(args.scene) / "report.json"
    _write_json(out, payload)
    table = format_report_table(reports)
    if args.table:
        Path(args.table).parent.mkdir(parents=True, exist_ok=True)
        Path(args.table).write_text(table)
    print(table, end="")
    timing = "  ".join(f"{m} {r.mean_runtime_s:.4f}s/query"
                       for m, r in reports.items())
    print(f"timing (stdout only): {timing}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatseg",
        description="Prompt-driven segmentation pipeline over Gaussian scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file with INI sections")
    common.add_argument("--threads", type=int, default=0,
                        help="BLAS thread cap (0 = library default)")
    common.add_argument("--seed", type=int, default=None,
                        help="seed for every random draw in this command (default 0)")

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen", parents=[common], formatter_class=fmt,
                       help="generate a synthetic labeled scene")
    p.add_argument("--out", required=True, help="scene directory to create")
    p.add_argument("--num-objects", type=int, default=None, help="labeled blobs (default 8)")
    p.add_argument("--gaussians-per-object", type=int, default=None, help="default 100")
    p.add_argument("--instance-dim", type=int, default=None,
                   help="instance feature dimension (default 16)")
    p.add_argument("--language-dim", type=int, default=None,
                   help="language embedding dimension (default 32)")
    p.add_argument("--num-views", type=int, default=None, help="default 6")
    p.add_argument("--image-size", type=int, default=None,
                   help="square image side in pixels (default 96)")
    p.add_argument("--background-gaussians", type=int, default=None,
                   help="unlabeled clutter gaussians (default 0)")
    p.add_argument("--benchmark", action="store_true",
                   help="use the fixed benchmark recipe for --seed "
                        f"(suite seeds: {', '.join(map(str, BENCHMARK_SEEDS))}); "
                        "other scene flags are ignored")
    p.add_argument("--overwrite", action="store_true",
                   help="replace an existing scene directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt,
                       help="train the contrastive instance field")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--steps", type=int, default=None, help="optimizer steps (default 30000)")
    p.add_argument("--learning-rate", type=float, default=None, help="default 2.5e-3")
    p.add_argument("--samples-per-segment", type=int, default=None, help="default 64")
    p.add_argument("--optimizer", choices=["adam", "sgd"], default=None,
                   help="default adam")
    p.add_argument("--loss-csv", default=None,
                   help="loss trace path (default <scene>/loss_instance.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("map", parents=[common], formatter_class=fmt,
                       help="fit instance->language mapping, materialize language field")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--mapper", choices=["kernel", "mlp"], default=None,
                   help="default kernel")
    p.add_argument("--sigma", type=float, default=None,
                   help="kernel bandwidth (default 0.1)")
    p.add_argument("--steps", type=int, default=None, help="mlp steps (default 30000)")
    p.add_argument("--learning-rate", type=float, default=None,
                   help="mlp learning rate (default 1e-3)")
    p.add_argument("--min-pixels", type=int, default=None,
                   help="minimum covered pixels per training pair (default 20)")
    p.add_argument("--max-pairs", type=int, default=None,
                   help="kernel pair subsample cap (default 4096)")
    p.add_argument("--mapping-out", default=None,
                   help="mapping directory (default <scene>/mapping)")
    p.add_argument("--loss-csv", default=None, help="mlp loss trace path")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("query", parents=[common], formatter_class=fmt,
                       help="prompt-driven selection with region-growing refinement")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--query-vec", default=None,
                   help="raw float32 little-endian embedding file")
    p.add_argument("--query-object-id", type=int, default=None,
                   help="query a vocabulary object instead of a vector file")
    p.add_argument("--canon-vec", action="append", default=None,
                   help="contrast embedding file (repeatable)")
    p.add_argument("--tau", type=float, default=None,
                   help="relevance/acceptance threshold (default 0.5)")
    p.add_argument("--similarity-threshold", default=None,
                   help="region-growing cosine threshold, float or 'auto' (default 0.8)")
    p.add_argument("--label", default=None, help="label recorded in result.json")
    p.add_argument("--stuff-canonical", action="store_true",
                   help="add a generic off-vocabulary contrast vector "
                        "(for scenes with labeled background)")
    p.add_argument("--out", default=None,
                   help="result path (default <scene>/result.json)")
    p.add_argument("--export-ply", default=None,
                   help="write selected gaussians as a colored PLY point cloud")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt,
                       help="benchmark selection modes against ground truth")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--cases", default=None,
                   help="JSON cases file (default: one query per vocabulary object)")
    p.add_argument("--modes", default=None,
                   help=f"comma-separated subset of {','.join(EVAL_MODES)}")
    p.add_argument("--tau", type=float, default=None, help="default 0.5")
    p.add_argument("--similarity-threshold", default=None,
                   help="float or 'auto' (default 0.8)")
    p.add_argument("--acc-threshold", type=float, default=None,
                   help="IoU cutoff for mAcc (default 0.25)")
    p.add_argument("--stuff-canonical", action="store_true",
                   help="add a generic off-vocabulary contrast vector "
                        "(for scenes with labeled background)")
    p.add_argument("--no-2d", action="store_true",
                   help="skip rendered 2D IoU (faster)")
    p.add_argument("--out", default=None,
                   help="report path (default <scene>/report.json)")
    p.add_argument("--table", default=None, help="plain-text table path")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except tuple(exc for exc, _, _ in _ERROR_KINDS) as err:
        for exc_type, kind, code in _ERROR_KINDS:
            if isinstance(err, exc_type):
                return _fail(kind, str(err), code)
        raise   # unreachable
    except OSError as err:
        return _fail("io", str(err), 4)


if __name__ == "__main__":
    sys.exit(main())
