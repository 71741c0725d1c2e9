"""Run configuration: YAML files validated with voluptuous."""
from __future__ import annotations

import copy
import json
import logging
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import voluptuous as vol
import yaml

from . import __version__
from .const import (
    ANALYSES,
    ANALYSIS_PARALLELISM,
    CONF_DATA,
    CONF_EVAL,
    CONF_GENERATION,
    CONF_MODEL,
    CONF_OUTPUT_DIR,
    CONF_PRESET,
    CONF_PROBE,
    CONF_SCHEDULE,
    CONF_SEED,
    DEFAULT_EVAL_WORKERS,
    DEFAULT_MAX_NEW,
    DEFAULT_MAX_PATH,
    DEFAULT_MIN_PATH,
    DEFAULT_NODES,
    DEFAULT_OUTPUT_ROOT,
    DEFAULT_POISSON_LAMBDA,
    DEFAULT_SPLIT_SIZES,
    DEFAULT_TOP_K,
    ENV_OUTPUT_ROOT,
    FINAL_STAGE_DROP_REMAINDER,
    FINAL_STAGE_HOLD,
    PRESET_GSM8K,
    PRESET_PROSQA,
    VARIANT_COCONUT,
    VARIANTS,
    VOCAB_CORPUS,
    VOCAB_PROSQA,
)
from .curriculum import StageSchedule, preset
from .errors import ConfigError
from .model import ModelConfig

_LOGGER = logging.getLogger(__name__)

PositiveInt = vol.All(vol.Coerce(int), vol.Range(min=1))
NonNegativeInt = vol.All(vol.Coerce(int), vol.Range(min=0))
Probability = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))
OptionalPath = vol.Any(None, str)

DATA_SCHEMA = vol.Schema(
    {
        vol.Optional("dir", default="data"): str,
        vol.Optional("train", default=None): OptionalPath,
        vol.Optional("val", default=None): OptionalPath,
        vol.Optional("test", default=None): OptionalPath,
        vol.Optional("vocabulary", default=VOCAB_PROSQA): vol.In([VOCAB_PROSQA, VOCAB_CORPUS]),
        vol.Optional("subword", default=True): bool,
    }
)

GENERATION_SCHEMA = vol.Schema(
    {
        vol.Optional("split_sizes", default=list(DEFAULT_SPLIT_SIZES)): vol.All(
            [PositiveInt], vol.Length(min=3, max=3)
        ),
        vol.Optional("n_nodes", default=DEFAULT_NODES): vol.All(vol.Coerce(int), vol.Range(min=3)),
        vol.Optional("poisson_lambda", default=DEFAULT_POISSON_LAMBDA): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, min_included=False)
        ),
        vol.Optional("min_path", default=DEFAULT_MIN_PATH): PositiveInt,
        vol.Optional("max_path", default=DEFAULT_MAX_PATH): PositiveInt,
        vol.Optional("workers", default=1): PositiveInt,
    }
)

# Model and schedule keys carry no defaults here: the dataclasses and presets own them.
MODEL_SCHEMA = vol.Schema(
    {
        vol.Optional("n_layer"): PositiveInt,
        vol.Optional("d_model"): PositiveInt,
        vol.Optional("n_head"): PositiveInt,
        vol.Optional("d_ff"): PositiveInt,
        vol.Optional("context_length"): vol.All(vol.Coerce(int), vol.Range(min=2)),
        vol.Optional("tie_output_head"): bool,
    }
)

SCHEDULE_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_PRESET, default=None): vol.Any(None, vol.In([PRESET_PROSQA, PRESET_GSM8K])),
        vol.Optional("variant", default=VARIANT_COCONUT): vol.In(VARIANTS),
        vol.Optional("c"): NonNegativeInt,
        vol.Optional("n_stages"): NonNegativeInt,
        vol.Optional("epochs_per_stage"): [NonNegativeInt],
        vol.Optional("max_total_epochs"): PositiveInt,
        vol.Optional("final_stage_policy"): vol.In([FINAL_STAGE_HOLD, FINAL_STAGE_DROP_REMAINDER]),
        vol.Optional("learning_rate"): vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False)),
        vol.Optional("batch_size"): PositiveInt,
        vol.Optional("micro_batch_size"): vol.Any(None, PositiveInt),
        vol.Optional("reset_optimizer_on_switch"): bool,
        vol.Optional("stage_mixing"): Probability,
        vol.Optional("weight_decay"): vol.All(vol.Coerce(float), vol.Range(min=0.0)),
        vol.Optional("val_subset"): vol.Any(None, PositiveInt),
        vol.Optional("keep_all_checkpoints"): bool,
        vol.Optional("max_new"): PositiveInt,
    }
)

EVAL_SCHEMA = vol.Schema(
    {
        vol.Optional("k", default=list): [NonNegativeInt],
        vol.Optional("checkpoint", default=None): OptionalPath,
        vol.Optional("split", default="test"): vol.In(["train", "val", "test"]),
        vol.Optional("max_new", default=DEFAULT_MAX_NEW): PositiveInt,
        vol.Optional("workers", default=DEFAULT_EVAL_WORKERS): PositiveInt,
        vol.Optional("limit", default=None): vol.Any(None, PositiveInt),
    }
)

PROBE_SCHEMA = vol.Schema(
    {
        vol.Optional("analysis", default=ANALYSIS_PARALLELISM): vol.In(ANALYSES),
        vol.Optional("step", default=1): PositiveInt,
        vol.Optional("example", default=0): NonNegativeInt,
        vol.Optional("checkpoint", default=None): OptionalPath,
        vol.Optional("split", default="test"): vol.In(["train", "val", "test"]),
        vol.Optional("top_k", default=DEFAULT_TOP_K): PositiveInt,
        vol.Optional("renormalize", default=False): bool,
        vol.Optional("limit", default=None): vol.Any(None, PositiveInt),
    }
)

RUN_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_SEED, default=0): NonNegativeInt,
        vol.Optional(CONF_OUTPUT_DIR, default=None): OptionalPath,
        vol.Optional(CONF_DATA, default=dict): DATA_SCHEMA,
        vol.Optional(CONF_GENERATION, default=dict): GENERATION_SCHEMA,
        vol.Optional(CONF_MODEL, default=dict): MODEL_SCHEMA,
        vol.Optional(CONF_SCHEDULE, default=dict): SCHEDULE_SCHEMA,
        vol.Optional(CONF_EVAL, default=dict): EVAL_SCHEMA,
        vol.Optional(CONF_PROBE, default=dict): PROBE_SCHEMA,
    }
)


@dataclass
class RunConfig:
    """A validated run description."""

    seed: int = 0
    output_dir: str | None = None
    data: dict[str, Any] = field(default_factory=dict)
    generation: dict[str, Any] = field(default_factory=dict)
    model: dict[str, Any] = field(default_factory=dict)
    schedule: dict[str, Any] = field(default_factory=dict)
    eval: dict[str, Any] = field(default_factory=dict)
    probe: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict[str, Any] | None) -> RunConfig:
        try:
            data = RUN_SCHEMA(raw or {})
        except vol.Invalid as err:
            raise ConfigError(f"Invalid configuration: {err}") from err
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return {
            CONF_SEED: self.seed,
            CONF_OUTPUT_DIR: self.output_dir,
            CONF_DATA: copy.deepcopy(self.data),
            CONF_GENERATION: copy.deepcopy(self.generation),
            CONF_MODEL: copy.deepcopy(self.model),
            CONF_SCHEDULE: copy.deepcopy(self.schedule),
            CONF_EVAL: copy.deepcopy(self.eval),
            CONF_PROBE: copy.deepcopy(self.probe),
        }

    def with_overrides(self, overrides: dict[str, Any]) -> RunConfig:
        """Apply dotted-key overrides (``"schedule.variant"``); ``None`` values are skipped."""
        raw = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            target = raw
            *parents, leaf = dotted.split(".")
            for key in parents:
                target = target.setdefault(key, {})
            target[leaf] = value
        return RunConfig.from_dict(raw)

    def output_root(self) -> Path:
        return Path(self.output_dir or os.environ.get(ENV_OUTPUT_ROOT, DEFAULT_OUTPUT_ROOT))

    def stage_schedule(self) -> StageSchedule:
        options = {k: v for k, v in self.schedule.items() if k != CONF_PRESET}
        if isinstance(options.get("epochs_per_stage"), list):
            options["epochs_per_stage"] = tuple(options["epochs_per_stage"])
        options["seed"] = self.seed
        name = self.schedule.get(CONF_PRESET)
        if name:
            return preset(name, **options)
        return StageSchedule(**options)

    def model_config(self, vocab_size: int) -> ModelConfig:
        options = dict(self.model)
        if "d_model" in options and "d_ff" not in options:
            options["d_ff"] = 4 * options["d_model"]
        return ModelConfig(vocab_size=vocab_size, seed=self.seed, **options)

    def split_path(self, split: str) -> Path:
        explicit = self.data.get(split)
        return Path(explicit) if explicit else Path(self.data["dir"]) / f"{split}.jsonl"


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"Cannot read config {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"Config {path} is not valid YAML: {err}") from err
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"Config {path} must be a mapping")
    return RunConfig.from_dict(raw)


def dump_config(path: str | Path, config: RunConfig) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True), encoding="utf-8")


def write_run_header(
    run_dir: str | Path, config: RunConfig, resolved: dict[str, Any] | None = None
) -> Path:
    """Write ``config.yaml`` and ``version.json`` before anything else.

    ``resolved`` holds the effective settings a run derived from the file,
    such as the expanded stage schedule and the model shape; it goes to
    ``resolved.json``.
    """
    run_dir = Path(run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        dump_config(run_dir / "config.yaml", config)
        if resolved is not None:
            (run_dir / "resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        version = {
            "latent_lab": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        }
        (run_dir / "version.json").write_text(json.dumps(version, indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise ConfigError(f"Cannot initialize run directory {run_dir}: {err}") from err
    _LOGGER.debug("Initialized run directory %s", run_dir)
    return run_dir
