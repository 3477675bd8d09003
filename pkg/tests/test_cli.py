import json
import numpy as np
import pytest
import yaml
from unittest.mock import patch

from face_tracer.checkpoint import capture, save_checkpoint
from face_tracer.cli import main, build_parser, apply_overrides, settings as cli_settings
from face_tracer.config import RunConfig, ModelConfig, RESOLVED_CONFIG_NAME
from face_tracer.data import (
    MANIFEST_NAME, SYNTHETIC_META_NAME, SyntheticSpec, generate_synthetic, write_png, to_raster, read_image,
)
from face_tracer.errors import EXIT_OK, EXIT_CONFIGURATION, EXIT_DATA
from face_tracer.evaluation import REPORT_NAME, SUMMARY_NAME, GRID_NAME, FAILURE_GRID_NAME
from face_tracer.training import FINAL_CHECKPOINT_NAME, TRAIN_LOG_NAME

"""
End-to-end tests of the face-tracer command line: each subcommand on tiny
inputs, flag overrides, and exit codes with the JSON error record.
"""


@pytest.fixture
def desk_yaml(tmp_path):
    """YAML config for a desk-scale model and a tiny synthetic corpus."""
    path = tmp_path / "desk.yaml"
    payload = {
        "seed": 1,
        "data": {"synthetic": {"n_identities": 3, "frames_per_identity": 2, "resolution": 32}, "test_fraction": 0.5},
        "model": {"resolution": 32, "channels": [16, 32, 64, 128], "id_dim": 64, "attr_dim": 64},
        "train": {"batch_size": 4, "epochs": 2, "checkpoint_every": 1},
        "eval": {"grid": 2, "failure_cases": 2, "batch_size": 4},
    }
    path.write_text(yaml.safe_dump(payload), encoding="utf-8")
    return path


@pytest.fixture
def desk_checkpoint(tmp_path, desk_network):
    """An untrained desk-scale checkpoint carrying its model config."""
    config = RunConfig(model=ModelConfig.desk_scale()).to_dict()
    return save_checkpoint(capture(desk_network, None, 0, 0, config), tmp_path / "desk.safetensors")


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_deterministic(tmp_path, desk_yaml):
    """Two synth runs with the same config write identical trees."""
    for name in ("a", "b"):
        assert main(["synth", "--config", str(desk_yaml), "--output", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a" / MANIFEST_NAME).exists()
    assert (tmp_path / "a" / SYNTHETIC_META_NAME).exists()
    assert (tmp_path / "a" / RESOLVED_CONFIG_NAME).exists()
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_synth_single_identity_exit_code(tmp_path, capsys):
    """A one-identity corpus exits with the configuration code and a JSON error record."""
    config = tmp_path / "bad.yaml"
    config.write_text(yaml.safe_dump({"data": {"synthetic": {"n_identities": 1}}}), encoding="utf-8")
    assert main(["synth", "--config", str(config), "--output", str(tmp_path / "out")]) == EXIT_CONFIGURATION
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "ConfigurationError"
    assert record["exit_code"] == EXIT_CONFIGURATION
    assert "n_identities" in record["message"]


def test_train_missing_manifest_exit_code(tmp_path, desk_yaml):
    """Training on an absent manifest exits with the data code."""
    code = main([
        "train", "--config", str(desk_yaml), "--manifest", str(tmp_path / "none.jsonl"),
        "--output", str(tmp_path / "run"),
    ])
    assert code == EXIT_DATA


def test_train_epochs_override(tmp_path, desk_yaml):
    """--epochs overrides the file config; outputs land in the output directory."""
    corpus = tmp_path / "corpus"
    assert main(["synth", "--config", str(desk_yaml), "--output", str(corpus)]) == EXIT_OK
    run = tmp_path / "run"
    code = main([
        "train", "--config", str(desk_yaml), "--manifest", str(corpus / MANIFEST_NAME),
        "--epochs", "1", "--output", str(run),
    ])
    assert code == EXIT_OK
    assert (run / FINAL_CHECKPOINT_NAME).exists()
    epochs = [json.loads(line) for line in (run / TRAIN_LOG_NAME).read_text(encoding="utf-8").splitlines()]
    assert [r["epoch"] for r in epochs if r["kind"] == "epoch"] == [1]
    assert yaml.safe_load((run / RESOLVED_CONFIG_NAME).read_text(encoding="utf-8"))["train"]["epochs"] == 1


def test_trace_single_image(tmp_path, desk_checkpoint):
    """Tracing one image writes one PNG named after it."""
    source = tmp_path / "face.jpg"
    write_png(source, np.zeros((48, 48, 3), dtype=np.uint8))
    out = tmp_path / "traced"
    assert main(["trace", "--checkpoint", str(desk_checkpoint), "--input", str(source), "--output", str(out)]) == EXIT_OK
    assert (out / "face.png").exists()
    archived = yaml.safe_load((out / RESOLVED_CONFIG_NAME).read_text(encoding="utf-8"))
    assert archived["checkpoint"] == str(desk_checkpoint)
    assert archived["model"]["resolution"] == 32


def test_trace_directory_mirrors_layout(tmp_path, desk_checkpoint, random_images):
    """Tracing a directory mirrors its relative layout."""
    inputs = tmp_path / "fakes"
    for relative in ("a/one.png", "b/two.png"):
        write_png(inputs / relative, to_raster(random_images(n=1)[0]))
    out = tmp_path / "traced"
    assert main(["trace", "--checkpoint", str(desk_checkpoint), "--input", str(inputs), "--output", str(out)]) == EXIT_OK
    assert (out / "a" / "one.png").exists() and (out / "b" / "two.png").exists()


def test_trace_byte_identical_reruns(tmp_path, desk_checkpoint, random_images):
    """The same checkpoint traces the same input to byte-identical outputs."""
    inputs = tmp_path / "fakes"
    for index, image in enumerate(random_images(n=3, seed=4)):
        write_png(inputs / f"{index}.png", to_raster(image))
    for name in ("a", "b"):
        code = main(["trace", "--checkpoint", str(desk_checkpoint), "--input", str(inputs), "--output", str(tmp_path / name)])
        assert code == EXIT_OK
    assert len(_tree(tmp_path / "a")) == 4
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_trace_missing_input(tmp_path, desk_checkpoint):
    """A missing input path exits with the data code."""
    code = main([
        "trace", "--checkpoint", str(desk_checkpoint), "--input", str(tmp_path / "nothing"),
        "--output", str(tmp_path / "out"),
    ])
    assert code == EXIT_DATA


def test_eval_writes_report_and_grids(tmp_path, desk_yaml, desk_checkpoint, tiny_corpus):
    """Eval writes the per-pair report, the summary table and both grids."""
    out = tmp_path / "eval"
    code = main([
        "eval", "--config", str(desk_yaml), "--checkpoint", str(desk_checkpoint),
        "--manifest", str(tiny_corpus.root / MANIFEST_NAME), "--grid", "3", "--output", str(out),
    ])
    assert code == EXIT_OK
    for name in (REPORT_NAME, SUMMARY_NAME, GRID_NAME, FAILURE_GRID_NAME):
        assert (out / name).exists(), name
    assert read_image(out / GRID_NAME).shape == (3 * 32, 4 * 32, 3)
    assert read_image(out / FAILURE_GRID_NAME).shape == (2 * 32, 4 * 32, 3)
    pairs = [line for line in (out / REPORT_NAME).read_text(encoding="utf-8").splitlines() if '"kind": "pair"' in line]
    assert len(pairs) == tiny_corpus.counts["test"]


def test_eval_corrupt_checkpoint(tmp_path, tiny_corpus):
    """A corrupt checkpoint exits with the data code."""
    broken = tmp_path / "broken.safetensors"
    broken.write_bytes(b"\x00" * 16)
    code = main([
        "eval", "--checkpoint", str(broken), "--manifest", str(tiny_corpus.root / MANIFEST_NAME),
        "--output", str(tmp_path / "eval"),
    ])
    assert code == EXIT_DATA


def test_apply_overrides():
    """Flags win over the file config."""
    args = build_parser().parse_args([
        "train", "--seed", "8", "--resolution", "64", "--epochs", "3",
        "--redundancy-mode", "absolute", "--attr-loss-weight", "0.25",
    ])
    config = apply_overrides(RunConfig(), args)
    assert config.seed == 8
    assert config.model.resolution == 64 and config.data.synthetic.resolution == 64
    assert config.train.epochs == 3
    assert config.train.redundancy_mode == "absolute"
    assert config.train.weights.lambda_attr == 0.25


class StubTracer:
    """Pass-through tracer standing in for a trained checkpoint."""
    config = ModelConfig.desk_scale()

    def trace(self, fakes):
        return fakes, None, None, None


def test_eval_with_stubbed_network(tmp_path, desk_yaml):
    """Eval scores a pass-through tracer perfectly on a corpus whose fakes equal their originals."""
    spec = SyntheticSpec(n_identities=2, frames_per_identity=4, resolution=32, blend_alpha=1.0, seed=3)
    manifest = generate_synthetic(spec, tmp_path / "identical", test_fraction=0.5)
    out = tmp_path / "eval"
    with patch("face_tracer.cli.load_network", return_value=(StubTracer(), None)) as mock_load:
        code = main([
            "eval", "--config", str(desk_yaml), "--checkpoint", "stub.safetensors",
            "--manifest", str(manifest.root / MANIFEST_NAME), "--output", str(out),
        ])
    assert code == EXIT_OK
    mock_load.assert_called_once_with("stub.safetensors")
    assert "| synthetic | 99.00 | 1.0000 |" in (out / SUMMARY_NAME).read_text(encoding="utf-8")


@pytest.fixture
def isolated_cache(tmp_path, monkeypatch):
    """Points the default output root at a temporary directory."""
    monkeypatch.setattr(cli_settings, "cache_dir", tmp_path / "cache")


@pytest.mark.usefixtures("isolated_cache")
def test_default_output_under_cache_dir(tmp_path, desk_yaml):
    """Without --output, a command writes under <cache dir>/<command>."""
    assert main(["synth", "--config", str(desk_yaml)]) == EXIT_OK
    assert (tmp_path / "cache" / "synth" / MANIFEST_NAME).exists()


def _step_totals(run):
    lines = [json.loads(line) for line in (run / TRAIN_LOG_NAME).read_text(encoding="utf-8").splitlines()]
    return [r["total"] for r in lines if r["kind"] == "step"]


def test_pipeline_reproducible(tmp_path, desk_yaml):
    """Two synth, train and eval runs with one seed agree on every step loss and every report byte."""
    for name in ("a", "b"):
        root = tmp_path / name
        assert main(["synth", "--config", str(desk_yaml), "--output", str(root / "corpus")]) == EXIT_OK
        manifest = str(root / "corpus" / MANIFEST_NAME)
        assert main(["train", "--config", str(desk_yaml), "--manifest", manifest, "--output", str(root / "train")]) == EXIT_OK
        code = main([
            "eval", "--config", str(desk_yaml), "--checkpoint", str(root / "train" / FINAL_CHECKPOINT_NAME),
            "--manifest", manifest, "--output", str(root / "eval"),
        ])
        assert code == EXIT_OK
    totals_a, totals_b = _step_totals(tmp_path / "a" / "train"), _step_totals(tmp_path / "b" / "train")
    assert totals_a == pytest.approx(totals_b, rel=1e-6)
    for name in (REPORT_NAME, SUMMARY_NAME):
        assert (tmp_path / "a" / "eval" / name).read_bytes() == (tmp_path / "b" / "eval" / name).read_bytes()
