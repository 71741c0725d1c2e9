"""Command line entry point: ``latent-lab {gen,train,eval,probe}``."""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
from typing import Any, Callable, Sequence

from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig, load_config, write_run_header
from .const import (
    ANALYSES,
    ANALYSIS_DECODE,
    ANALYSIS_HEIGHT,
    ANALYSIS_PARALLELISM,
    ANALYSIS_VALUES,
    EXIT_OK,
    PRESET_GSM8K,
    PRESET_PROSQA,
    SPLITS,
    VARIANT_COCONUT,
    VARIANTS,
    VOCAB_PROSQA,
)
from .curriculum import CheckpointRecord, run_curriculum
from .dataset import ReasoningExample, load_examples, write_csv
from .errors import ConfigError, DataError, LatentLabError
from .evaluation import EvalReport, evaluate, write_report
from .latent import write_probe_dump
from .model import CausalTransformer
from .probe import decode_analysis, height_value_analysis, parallelism_analysis, value_rows
from .prosqa import DatasetStats, GenerationSettings, generate_dataset
from .tokenizer import Vocabulary

_LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from err


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--out", help="output root for run directories")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="latent-lab", description="Continuous latent reasoning experiments.")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", parents=[common], help="generate a ProsQA dataset")
    gen.add_argument("--split-sizes", "--n", dest="split_sizes", type=_int_list, help="train,val,test sizes")
    gen.add_argument("--nodes", type=int, help="nodes per graph")
    gen.add_argument("--workers", type=int, help="generator processes")

    train = commands.add_parser("train", parents=[common], help="train through the curriculum")
    train.add_argument("--preset", choices=[PRESET_PROSQA, PRESET_GSM8K])
    train.add_argument("--variant", choices=VARIANTS)
    train.add_argument("--epochs", type=int, help="total epoch budget")
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--progress", action="store_true", help="show per-epoch progress bars")

    ev = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint over latent depths")
    ev.add_argument("--k", type=_int_list, help="comma-separated latent thought counts")
    ev.add_argument("--checkpoint", help="checkpoint file or training run directory")
    ev.add_argument("--split", choices=SPLITS)
    ev.add_argument("--max-new", type=int)
    ev.add_argument("--workers", type=int)
    ev.add_argument("--limit", type=int)

    probe = commands.add_parser("probe", parents=[common], help="probe continuous thoughts")
    probe.add_argument("--analysis", choices=ANALYSES)
    probe.add_argument("--step", type=int)
    probe.add_argument("--example", type=int)
    probe.add_argument("--checkpoint", help="checkpoint file or training run directory")
    probe.add_argument("--split", choices=SPLITS)
    probe.add_argument("--top-k", type=int)
    probe.add_argument("--renormalize", action="store_true", default=None)
    probe.add_argument("--limit", type=int)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    overrides = {"seed": get("seed"), "output_dir": get("out"), "data.dir": get("data")}
    if args.command == "gen":
        overrides.update(
            {
                "generation.split_sizes": get("split_sizes"),
                "generation.n_nodes": get("nodes"),
                "generation.workers": get("workers"),
            }
        )
    elif args.command == "train":
        overrides.update(
            {
                "schedule.preset": get("preset"),
                "schedule.variant": get("variant"),
                "schedule.max_total_epochs": get("epochs"),
                "schedule.batch_size": get("batch_size"),
                "schedule.learning_rate": get("lr"),
            }
        )
    elif args.command == "eval":
        overrides.update(
            {
                "eval.k": get("k"),
                "eval.checkpoint": get("checkpoint"),
                "eval.split": get("split"),
                "eval.max_new": get("max_new"),
                "eval.workers": get("workers"),
                "eval.limit": get("limit"),
            }
        )
    elif args.command == "probe":
        overrides.update(
            {
                "probe.analysis": get("analysis"),
                "probe.step": get("step"),
                "probe.example": get("example"),
                "probe.checkpoint": get("checkpoint"),
                "probe.split": get("split"),
                "probe.top_k": get("top_k"),
                "probe.renormalize": get("renormalize"),
                "probe.limit": get("limit"),
            }
        )
    return overrides


def _vocabulary(config: RunConfig) -> Vocabulary:
    subword = config.data["subword"]
    if config.data["vocabulary"] == VOCAB_PROSQA:
        return Vocabulary.for_prosqa(subword)
    examples: list[ReasoningExample] = []
    for split in SPLITS:
        path = config.split_path(split)
        if path.exists():
            examples.extend(load_examples(path))
    return Vocabulary.from_examples(examples, subword)


def _resolve_checkpoint(path: str | None) -> Checkpoint:
    if not path:
        raise ConfigError("No checkpoint given; pass --checkpoint or set it in the config")
    target = Path(path)
    if target.is_dir():
        try:
            selected = json.loads((target / "selected.json").read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise DataError(f"Run directory {target} has no readable selected.json: {err}") from err
        target = Path(selected["path"])
    return load_checkpoint(target)


def _limited(examples: list[ReasoningExample], limit: int | None) -> list[ReasoningExample]:
    return examples[:limit] if limit else examples


def cmd_gen(config: RunConfig) -> DatasetStats:
    out = write_run_header(config.data["dir"], config)
    generation = config.generation
    settings = GenerationSettings(
        n_nodes=generation["n_nodes"],
        poisson_lambda=generation["poisson_lambda"],
        min_path=generation["min_path"],
        max_path=generation["max_path"],
    )
    sizes = dict(zip(SPLITS, generation["split_sizes"]))
    stats = generate_dataset(sizes, config.seed, out, settings, workers=generation["workers"])
    _LOGGER.info(
        "Generated %s: mean nodes %.1f, edges %.1f, shortest path %.2f (x%.2f)",
        sizes,
        stats.mean_nodes,
        stats.mean_edges,
        stats.mean_shortest_path_length,
        stats.mean_shortest_path_count,
    )
    return stats


def cmd_train(config: RunConfig, progress: bool = False) -> list[CheckpointRecord]:
    schedule = config.stage_schedule()
    vocab = _vocabulary(config)
    model_config = config.model_config(len(vocab))
    run_dir = write_run_header(
        config.output_root() / f"train-{schedule.variant}-seed{config.seed}",
        config,
        resolved={"schedule": schedule.to_dict(), "model": model_config.to_dict()},
    )
    train = load_examples(config.split_path("train"))
    val = load_examples(config.split_path("val"))
    model = CausalTransformer(model_config)
    _LOGGER.info("Training %s with %d parameters on %d examples", schedule.variant, model.num_parameters(), len(train))
    return run_curriculum(train, val, schedule, model, vocab, run_dir, progress=progress)


def cmd_eval(config: RunConfig) -> EvalReport:
    options = config.eval
    checkpoint = _resolve_checkpoint(options["checkpoint"])
    meta = checkpoint.metadata
    variant = meta.get("variant", VARIANT_COCONUT)
    k_values = options["k"] or [int(meta.get("inference_k", 0))]
    run_dir = write_run_header(
        config.output_root() / f"eval-{variant}-seed{config.seed}",
        config,
        resolved={"k": k_values, "model": checkpoint.model.config.to_dict()},
    )
    examples = _limited(load_examples(config.split_path(options["split"])), options["limit"])
    report, outcomes = evaluate(
        checkpoint.model,
        checkpoint.vocab,
        examples,
        k_values,
        variant=variant,
        c=int(meta.get("c", 1)),
        max_new=options["max_new"],
        workers=options["workers"],
    )
    write_report(run_dir, report, outcomes)
    return report


def cmd_probe(config: RunConfig) -> Path:
    options = config.probe
    analysis = options["analysis"]
    checkpoint = _resolve_checkpoint(options["checkpoint"])
    model, vocab = checkpoint.model, checkpoint.vocab
    run_dir = write_run_header(
        config.output_root() / f"probe-{analysis}-seed{config.seed}",
        config,
        resolved={"model": model.config.to_dict()},
    )
    examples = _limited(load_examples(config.split_path(options["split"])), options["limit"])

    if analysis == ANALYSIS_PARALLELISM:
        rows = parallelism_analysis(model, vocab, examples, options["step"], options["renormalize"])
        path = run_dir / f"parallelism_step{options['step']}.csv"
        write_csv(path, ("percentile", "top1", "top2", "top3"), rows)
    elif analysis == ANALYSIS_HEIGHT:
        rows = height_value_analysis(model, vocab, examples)
        path = run_dir / "heights.csv"
        fields = ("mode", "height", "correct_mean", "correct_count", "incorrect_mean", "incorrect_count")
        write_csv(path, fields, rows)
    elif analysis == ANALYSIS_VALUES:
        rows = value_rows(model, vocab, examples)
        path = run_dir / "values.csv"
        write_csv(path, ("example_id", "step", "node", "concept", "value", "correct"), rows)
    elif analysis == ANALYSIS_DECODE:
        index = options["example"]
        if index >= len(examples):
            raise DataError(f"Example {index} is outside a split of {len(examples)}")
        k = int(checkpoint.metadata.get("inference_k", options["step"]))
        rows = decode_analysis(model, vocab, examples[index], index, k, options["top_k"])
        path = run_dir / "thoughts.jsonl"
        write_probe_dump(path, rows)
    else:
        raise ConfigError(f"Unknown analysis {analysis!r}")
    _LOGGER.info("Wrote %s", path)
    return path


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    commands: dict[str, Callable[[RunConfig], Any]] = {
        "gen": cmd_gen,
        "train": lambda config: cmd_train(config, progress=args.progress),
        "eval": cmd_eval,
        "probe": cmd_probe,
    }
    try:
        config = load_config(args.config).with_overrides(_overrides(args))
        commands[args.command](config)
    except LatentLabError as err:
        _LOGGER.error("%s failed: %s", args.command, err)
        return err.exit_code
    return EXIT_OK
