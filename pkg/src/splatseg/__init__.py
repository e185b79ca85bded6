"""splatseg: prompt-driven segmentation of 3D Gaussian scenes.

Pipeline: render-and-train a contrastive per-Gaussian instance field from 2D
instance masks, map instance features to language embeddings (kernel regression
or a small MLP), then answer embedding queries by relevance scoring plus adaptive
region growing.  Includes a synthetic labeled-scene generator, 3D/2D IoU
evaluation, and a deterministic CLI (gen / train / map / query / eval).
"""

from .scene import Camera, Gaussian, GaussianScene, ViewSupervision
from .synthetic import (BENCHMARK_SEEDS, SceneSpec, benchmark_spec,
                        generate_synthetic_scene)
from .scene_io import (SceneFormatError, export_ply, load_scene, read_manifest,
                       save_scene, update_manifest)
from .rasterizer import (CHANNEL_SELECTORS, PixelWeights, ProjectedSplats,
                         RasterConfig, RenderOutput, channel_matrix,
                         compute_weights, project, render, render_backward)
from .instance_field import (PixelSampleBatch, TrainConfig, infonce_loss,
                             sample_pixels, train_instance_field)
from .ins2lang import (KernelMapping, MappingPairSet, MlpFitConfig, MlpMapping,
                       apply_mapping, build_training_pairs, fit_mlp, load_mapping,
                       save_mapping)
from .inference import (Query, RefinementResult, RegionRecord, compute_relevance,
                        expand_region, normalized_instance_features, otsu_threshold,
                        query_by_embedding, refine, region_score)
from .evaluate import (EVAL_MODES, EvalReport, QueryCase, QueryEval,
                       cases_from_vocabulary, format_report_table, iou_2d_rendered,
                       iou_3d, run_benchmark)

__version__ = "0.1.0"

__all__ = [
    "Camera", "Gaussian", "GaussianScene", "ViewSupervision",
    "BENCHMARK_SEEDS", "SceneSpec", "benchmark_spec", "generate_synthetic_scene",
    "SceneFormatError", "export_ply", "load_scene", "read_manifest", "save_scene",
    "update_manifest",
    "CHANNEL_SELECTORS", "PixelWeights", "ProjectedSplats", "RasterConfig",
    "RenderOutput", "channel_matrix", "compute_weights", "project", "render",
    "render_backward",
    "PixelSampleBatch", "TrainConfig", "infonce_loss", "sample_pixels",
    "train_instance_field",
    "KernelMapping", "MappingPairSet", "MlpFitConfig", "MlpMapping",
    "apply_mapping", "build_training_pairs", "fit_mlp", "load_mapping",
    "save_mapping",
    "Query", "RefinementResult", "RegionRecord", "compute_relevance",
    "expand_region", "normalized_instance_features", "otsu_threshold",
    "query_by_embedding", "refine", "region_score",
    "EVAL_MODES", "EvalReport", "QueryCase", "QueryEval", "cases_from_vocabulary",
    "format_report_table", "iou_2d_rendered", "iou_3d", "run_benchmark",
    "__version__",
]
