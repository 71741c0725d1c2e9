import csv
import json
from unittest.mock import patch

import pytest
import yaml

from latent_lab import curriculum
from latent_lab.cli import main
from latent_lab.config import RunConfig, dump_config, load_config, write_run_header
from latent_lab.const import FINAL_STAGE_DROP_REMAINDER
from latent_lab.dataset import load_examples
from latent_lab.errors import ConfigError

TINY = {
    "generation": {"split_sizes": [6, 2, 2], "n_nodes": 10, "max_path": 4},
    "model": {"n_layer": 1, "d_model": 16, "n_head": 2, "context_length": 512},
    "schedule": {"n_stages": 1, "epochs_per_stage": [1, 1], "max_total_epochs": 2, "batch_size": 4, "max_new": 8},
    "eval": {"max_new": 8, "workers": 2},
}


@pytest.fixture
def tiny_config_file(tmp_path):
    """Write a tiny run configuration pointing into ``tmp_path``."""

    def write(**sections):
        raw = {**TINY, "data": {"dir": str(tmp_path / "data")}, "output_dir": str(tmp_path / "runs")}
        for name, values in sections.items():
            raw[name] = {**raw.get(name, {}), **values}
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(raw))
        return str(path)

    return write


def test_defaults():
    """Test the configuration an empty file produces."""
    config = RunConfig.from_dict({})
    assert config.seed == 0
    assert config.data["dir"] == "data"
    assert config.generation["n_nodes"] == 25
    assert config.eval["split"] == "test"
    assert config.eval["max_new"] == 64
    assert config.eval["k"] == []
    assert config.probe["analysis"] == "parallelism"
    assert config.probe["top_k"] == 5


def test_yaml_round_trip(tmp_path):
    """Test that a dumped config loads back unchanged."""
    config = RunConfig.from_dict({"seed": 4, **TINY})
    dump_config(tmp_path / "config.yaml", config)
    assert load_config(tmp_path / "config.yaml") == config
    assert load_config(None) == RunConfig.from_dict({})


@pytest.mark.parametrize(
    "raw",
    [
        {"schedule": {"variant": "bogus"}},
        {"generation": {"split_sizes": [10, 10]}},
        {"generation": {"n_nodes": 2}},
        {"eval": {"split": "dev"}},
        {"unknown": 1},
    ],
)
def test_invalid_config(raw):
    """Test that schema violations become configuration errors."""
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


def test_unreadable_config_files(tmp_path):
    """Test missing, malformed and non-mapping config files."""
    with pytest.raises(ConfigError, match="Cannot read"):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("seed: [1,\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(tmp_path / "list.yaml")


def test_dotted_overrides():
    """Test nested overrides, skipped ``None`` values and revalidation."""
    config = RunConfig.from_dict({}).with_overrides(
        {"schedule.variant": "cot", "eval.k": [0, 2], "seed": None, "generation.n_nodes": 12}
    )
    assert config.schedule["variant"] == "cot"
    assert config.eval["k"] == [0, 2]
    assert config.seed == 0
    assert config.generation["n_nodes"] == 12
    with pytest.raises(ConfigError):
        config.with_overrides({"eval.max_new": 0})


def test_output_root(monkeypatch):
    """Test the output root from config, environment and default."""
    monkeypatch.delenv("LATENT_LAB_OUTPUT", raising=False)
    assert str(RunConfig.from_dict({}).output_root()) == "runs"
    monkeypatch.setenv("LATENT_LAB_OUTPUT", "/tmp/lab")
    assert str(RunConfig.from_dict({}).output_root()) == "/tmp/lab"
    assert str(RunConfig.from_dict({"output_dir": "mine"}).output_root()) == "mine"


def test_schedule_from_preset():
    """Test that presets fill the schedule and explicit keys override them."""
    config = RunConfig.from_dict({"seed": 7, "schedule": {"preset": "gsm8k", "batch_size": 8}})
    schedule = config.stage_schedule()
    assert schedule.c == 2
    assert schedule.n_stages == 3
    assert schedule.final_stage_policy == FINAL_STAGE_DROP_REMAINDER
    assert schedule.batch_size == 8
    assert schedule.seed == 7


def test_model_config_and_split_paths():
    """Test model sizing defaults and explicit split files."""
    config = RunConfig.from_dict({"model": {"d_model": 32, "n_head": 4}, "data": {"test": "elsewhere.jsonl"}})
    model = config.model_config(100)
    assert model.d_ff == 128
    assert model.vocab_size == 100
    assert str(config.split_path("test")) == "elsewhere.jsonl"
    assert str(config.split_path("train")) == "data/train.jsonl"


def test_write_run_header(tmp_path):
    """Test that a run directory starts with its config and versions."""
    run_dir = write_run_header(tmp_path / "run", RunConfig.from_dict({"seed": 2}))
    assert load_config(run_dir / "config.yaml").seed == 2
    versions = json.loads((run_dir / "version.json").read_text())
    assert set(versions) == {"latent_lab", "numpy", "python"}
    assert not (run_dir / "resolved.json").exists()


def test_write_run_header_records_resolved_settings(tmp_path):
    """Test that the expanded schedule and model shape are written next to the config."""
    config = RunConfig.from_dict({"seed": 3, "schedule": {"preset": "prosqa", "batch_size": 16}})
    resolved = {"schedule": config.stage_schedule().to_dict(), "model": config.model_config(40).to_dict()}
    run_dir = write_run_header(tmp_path / "run", config, resolved=resolved)
    written = json.loads((run_dir / "resolved.json").read_text())
    assert written["schedule"]["n_stages"] == 6
    assert written["schedule"]["epochs_per_stage"] == [5] * 7
    assert written["schedule"]["batch_size"] == 16
    assert written["schedule"]["seed"] == 3
    assert written["model"]["vocab_size"] == 40


def test_cli_end_to_end(tmp_path, tiny_config_file):
    """Test generation, training, evaluation and every probe from the command line."""
    config = tiny_config_file()
    assert main(["gen", "--config", config]) == 0
    assert len(load_examples(tmp_path / "data" / "train.jsonl")) == 6
    assert (tmp_path / "data" / "stats.json").exists()

    assert main(["train", "--config", config]) == 0
    run_dir = tmp_path / "runs" / "train-coconut-seed0"
    assert (run_dir / "config.yaml").exists()
    assert (run_dir / "metrics.csv").exists()
    assert json.loads((run_dir / "selected.json").read_text())["stage"] == 1
    resolved = json.loads((run_dir / "resolved.json").read_text())
    assert resolved["schedule"]["n_stages"] == 1
    assert resolved["schedule"]["max_total_epochs"] == 2
    assert resolved["model"]["d_model"] == 16
    assert resolved["model"]["vocab_size"] > 0

    assert main(["eval", "--config", config, "--checkpoint", str(run_dir), "--k", "0,1"]) == 0
    report = json.loads((tmp_path / "runs" / "eval-coconut-seed0" / "report.json").read_text())
    assert set(report["per_k"]) == {"0", "1"}
    assert all(summary["count"] == 2 for summary in report["per_k"].values())

    assert main(["probe", "--config", config, "--checkpoint", str(run_dir), "--analysis", "parallelism"]) == 0
    with open(tmp_path / "runs" / "probe-parallelism-seed0" / "parallelism_step1.csv", newline="") as handle:
        assert len(list(csv.DictReader(handle))) == 2
    for analysis, output in (("height", "heights.csv"), ("values", "values.csv"), ("decode", "thoughts.jsonl")):
        assert main(["probe", "--config", config, "--checkpoint", str(run_dir), "--analysis", analysis]) == 0
        assert (tmp_path / "runs" / f"probe-{analysis}-seed0" / output).exists()


def assert_same_files(first, second, names):
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_cli_generation_is_reproducible(tmp_path, tiny_config_file):
    """Test that generating twice with one seed writes byte-identical splits."""
    config = tiny_config_file()
    for name in ("first", "second"):
        assert main(["gen", "--config", config, "--seed", "5", "--data", str(tmp_path / name)]) == 0
    assert_same_files(tmp_path / "first", tmp_path / "second", ("train.jsonl", "val.jsonl", "test.jsonl", "stats.json"))


def test_cli_eval_and_probes_are_reproducible(tmp_path, tiny_config_file):
    """Test that repeated evaluation and probing of one checkpoint write byte-identical files."""
    config = tiny_config_file()
    assert main(["gen", "--config", config]) == 0
    assert main(["train", "--config", config]) == 0
    checkpoint = str(tmp_path / "runs" / "train-coconut-seed0")
    outputs = {
        "parallelism": "parallelism_step1.csv",
        "height": "heights.csv",
        "values": "values.csv",
        "decode": "thoughts.jsonl",
    }
    for name in ("first", "second"):
        out = str(tmp_path / name)
        assert main(["eval", "--config", config, "--checkpoint", checkpoint, "--k", "0,1", "--out", out]) == 0
        for analysis in outputs:
            assert main(["probe", "--config", config, "--checkpoint", checkpoint, "--analysis", analysis, "--out", out]) == 0

    first, second = tmp_path / "first", tmp_path / "second"
    eval_files = ("report.json", "trace.jsonl", "categories.csv")
    assert_same_files(first / "eval-coconut-seed0", second / "eval-coconut-seed0", eval_files)
    for analysis, output in outputs.items():
        assert_same_files(first / f"probe-{analysis}-seed0", second / f"probe-{analysis}-seed0", (output,))


def test_cli_bad_config_exit_code(tiny_config_file):
    """Test that an invalid config exits with code 2."""
    assert main(["gen", "--config", tiny_config_file(schedule={"variant": "bogus"})]) == 2


def test_cli_missing_inputs_exit_code(tmp_path, tiny_config_file):
    """Test that missing data and checkpoints exit with code 3."""
    config = tiny_config_file()
    assert main(["train", "--config", config]) == 3
    assert main(["eval", "--config", config, "--checkpoint", str(tmp_path / "none.ckpt")]) == 3
    (tmp_path / "empty_run").mkdir()
    assert main(["eval", "--config", config, "--checkpoint", str(tmp_path / "empty_run")]) == 3


def test_cli_requires_a_checkpoint(tiny_config_file):
    """Test that evaluating without a checkpoint is a configuration error."""
    assert main(["eval", "--config", tiny_config_file()]) == 2


def test_cli_capacity_exit_code(tiny_config_file):
    """Test that a context window shorter than the questions exits with code 4."""
    config = tiny_config_file(model={"context_length": 8})
    assert main(["gen", "--config", config]) == 0
    assert main(["train", "--config", config]) == 4


def test_cli_divergence_exit_code(tiny_config_file):
    """Test that a non-finite training loss exits with code 5."""
    config = tiny_config_file()
    assert main(["gen", "--config", config]) == 0
    with patch.object(curriculum, "train_step", return_value=float("nan")):
        assert main(["train", "--config", config]) == 5
