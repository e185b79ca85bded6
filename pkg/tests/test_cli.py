"""End-to-end pipeline runs through the command-line entry point."""

import json
from pathlib import Path

import numpy as np
import pytest

from splatseg.cli import main
from splatseg.scene_io import read_manifest

GEN = ["--num-objects", "2", "--gaussians-per-object", "15",
       "--num-views", "2", "--image-size", "32",
       "--instance-dim", "8", "--language-dim", "8", "--seed", "0"]


def run_pipeline(scene_dir, *, steps="150", no_2d=False):
    assert main(["gen", "--out", scene_dir] + GEN) == 0
    assert main(["train", "--scene", scene_dir, "--steps", steps,
                 "--seed", "0"]) == 0
    assert main(["map", "--scene", scene_dir, "--mapper", "kernel",
                 "--seed", "0"]) == 0
    assert main(["query", "--scene", scene_dir, "--query-object-id", "1",
                 "--seed", "0"]) == 0
    eval_args = ["eval", "--scene", scene_dir, "--seed", "0"]
    if no_2d:
        eval_args.append("--no-2d")
    assert main(eval_args) == 0


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    scene_dir = str(tmp_path_factory.mktemp("pipe") / "scene")
    run_pipeline(scene_dir)
    return Path(scene_dir)


def test_gen_writes_scene_and_refuses_overwrite(tmp_path, capsys):
    out = str(tmp_path / "scene")
    assert main(["gen", "--out", out] + GEN) == 0
    assert "wrote scene" in capsys.readouterr().out
    manifest = read_manifest(out)
    assert manifest["n_gaussians"] == 30
    assert len(manifest["views"]) == 2

    assert main(["gen", "--out", out] + GEN) == 4      # already exists
    assert "exists" in capsys.readouterr().err
    assert main(["gen", "--out", out, "--overwrite"] + GEN) == 0


def test_stage_order_is_enforced(tmp_path, capsys):
    out = str(tmp_path / "scene")
    assert main(["train", "--scene", out, "--steps", "1"]) == 4   # no scene at all
    assert "missing" in capsys.readouterr().err

    assert main(["gen", "--out", out] + GEN) == 0
    assert main(["map", "--scene", out]) == 3
    assert "not trained" in capsys.readouterr().err
    assert main(["query", "--scene", out, "--query-object-id", "1"]) == 3
    assert main(["eval", "--scene", out]) == 3
    err = capsys.readouterr().err
    assert "stage-order" in err and "map" in err


def test_bad_arguments_exit_2(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "s"), "--num-objects", "0"]) == 2
    assert "splatseg: error: invalid-argument" in capsys.readouterr().err


def test_pipeline_artifacts(pipeline_dir):
    manifest = read_manifest(pipeline_dir)
    assert manifest["trained"] is True
    assert manifest["mapped"] == "kernel"
    for name in ("instance.f32", "language.f32", "loss_instance.csv",
                 "result.json", "report.json", "mapping/mapping.json"):
        assert (pipeline_dir / name).is_file(), name

    csv = (pipeline_dir / "loss_instance.csv").read_text().splitlines()
    assert csv[0] == "step,loss"
    assert len(csv) == 151


def test_query_result_payload(pipeline_dir):
    payload = json.loads((pipeline_dir / "result.json").read_text())
    assert payload["label"] == "object-1"
    assert payload["tau"] == 0.5
    assert isinstance(payload["final"], list)
    assert payload["n_final"] == len(payload["final"])
    for region in payload["regions"]:
        assert set(region) == {"center", "size", "score", "accepted"}
    text = json.dumps(payload)
    assert "elapsed" not in text and "time" not in text


def test_eval_report_payload(pipeline_dir, capsys):
    payload = json.loads((pipeline_dir / "report.json").read_text())
    assert set(payload["modes"]) == {"instance_only", "language_only",
                                     "collaborative"}
    for mode in payload["modes"].values():
        assert set(q["label"] for q in mode["per_query"]) == \
               {"object-1", "object-2"}
    assert "runtime" not in json.dumps(payload)

    table = str(pipeline_dir / "table.txt")
    assert main(["eval", "--scene", str(pipeline_dir), "--modes",
                 "language_only", "--no-2d", "--table", table]) == 0
    out = capsys.readouterr().out
    assert "language_only" in out and "timing (stdout only):" in out
    assert "instance_only" not in Path(table).read_text()
    report = json.loads((pipeline_dir / "report.json").read_text())
    assert list(report["modes"]) == ["language_only"]


def test_query_with_vector_files(pipeline_dir, tmp_path, capsys):
    qvec = tmp_path / "prompt.f32"
    np.array([1, 0, 0, 0, 0, 0, 0, 0], dtype="<f4").tofile(qvec)
    cvec = tmp_path / "contrast.f32"
    np.array([0, 1, 0, 0, 0, 0, 0, 0], dtype="<f4").tofile(cvec)
    out = tmp_path / "result.json"
    ply = tmp_path / "hits.ply"
    assert main(["query", "--scene", str(pipeline_dir),
                 "--query-vec", str(qvec), "--canon-vec", str(cvec),
                 "--out", str(out), "--export-ply", str(ply)]) == 0
    payload = json.loads(out.read_text())
    assert payload["label"] == "prompt"
    assert ply.read_bytes().startswith(b"ply\n")

    zero = tmp_path / "zero.f32"
    np.zeros(8, dtype="<f4").tofile(zero)
    assert main(["query", "--scene", str(pipeline_dir),
                 "--query-vec", str(zero), "--canon-vec", str(cvec)]) == 2
    assert "zero-norm" in capsys.readouterr().err


def test_query_argument_validation(pipeline_dir, capsys):
    assert main(["query", "--scene", str(pipeline_dir)]) == 2
    assert "exactly one" in capsys.readouterr().err
    assert main(["query", "--scene", str(pipeline_dir),
                 "--query-object-id", "99"]) == 2
    assert "not in vocabulary" in capsys.readouterr().err
    assert main(["query", "--scene", str(pipeline_dir),
                 "--query-object-id", "1",
                 "--similarity-threshold", "sharp"]) == 2
    assert "float or 'auto'" in capsys.readouterr().err


def test_auto_threshold_accepted(pipeline_dir, tmp_path):
    out = tmp_path / "auto.json"
    assert main(["query", "--scene", str(pipeline_dir),
                 "--query-object-id", "2", "--similarity-threshold", "auto",
                 "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["threshold_mode"] == "auto"
    assert 0.6 <= payload["similarity_threshold"] <= 0.95


def test_config_file_supplies_defaults(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[scene]\nnum_objects = 3\ngaussians_per_object = 10\n"
                   "num_views = 2\nimage_size = 32\n"
                   "instance_dim = 8\nlanguage_dim = 8\n")
    out = str(tmp_path / "scene")
    assert main(["gen", "--out", out, "--config", str(cfg)]) == 0
    assert read_manifest(out)["n_gaussians"] == 30

    # explicit flags win over the config file
    out2 = str(tmp_path / "scene2")
    assert main(["gen", "--out", out2, "--config", str(cfg),
                 "--num-objects", "2"]) == 0
    assert read_manifest(out2)["n_gaussians"] == 20

    bad = tmp_path / "bad.cfg"
    bad.write_text("[scene]\nblob_count = 3\n")
    assert main(["gen", "--out", str(tmp_path / "s3"), "--config", str(bad)]) == 2
    assert "config" in capsys.readouterr().err


def test_benchmark_generation(tmp_path):
    out = str(tmp_path / "bench")
    assert main(["gen", "--benchmark", "--seed", "2", "--out", out]) == 0
    manifest = read_manifest(out)
    spec = manifest["meta"]["generator"]
    assert spec["seed"] == 2
    assert spec["num_views"] == 12
    assert spec["label_corruption"] == 0.7
    assert spec["background_gaussians"] == 250
    assert spec["background_label"] is True


def test_reruns_are_byte_identical(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    run_pipeline(a, steps="60", no_2d=True)
    run_pipeline(b, steps="60", no_2d=True)

    files_a = sorted(p.relative_to(a) for p in Path(a).rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in Path(b).rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (Path(a) / rel).read_bytes() == (Path(b) / rel).read_bytes(), rel
