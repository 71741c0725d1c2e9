"""Multi-stage training: each stage swaps more language steps for latent thoughts."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from tqdm import tqdm

from . import tensor as T
from .checkpoint import save_checkpoint
from .const import (
    CURRICULUM_VARIANTS,
    DEFAULT_MAX_NEW,
    FINAL_STAGE_DROP_REMAINDER,
    FINAL_STAGE_HOLD,
    PRESET_GSM8K,
    PRESET_PROSQA,
    VARIANT_COCONUT,
    VARIANT_COT,
    VARIANT_NO_COT,
    VARIANT_PAUSE_AS_THOUGHT,
    VARIANT_PAUSE_TOKEN,
    VARIANT_WO_CURRICULUM,
    VARIANT_WO_THOUGHT,
    VARIANTS,
)
from .dataset import ReasoningExample, write_csv
from .errors import ConfigError, DivergenceError, NonFiniteError, SelectionError
from .evaluation import answer_correct
from .latent import InferencePlan, LanguageTokens, LatentSlots, TrainingItem, coconut_forward_train
from .model import CausalTransformer
from .tokenizer import Vocabulary

_LOGGER = logging.getLogger(__name__)

__all__ = [
    "CheckpointRecord",
    "ReasoningExample",
    "StageSchedule",
    "build_stage_example",
    "preset",
    "run_curriculum",
    "select_checkpoint",
]


@dataclass(frozen=True)
class StageSchedule:
    """Training schedule for one variant.

    ``epochs_per_stage`` covers stage 0 plus ``n_stages`` curriculum stages;
    after it the final stage is held until ``max_total_epochs``.
    """

    variant: str = VARIANT_COCONUT
    c: int = 1
    n_stages: int = 6
    epochs_per_stage: tuple[int, ...] = (5,) * 7
    max_total_epochs: int = 50
    final_stage_policy: str = FINAL_STAGE_HOLD
    learning_rate: float = 1e-4
    batch_size: int = 128
    micro_batch_size: int | None = None
    seed: int = 0
    reset_optimizer_on_switch: bool = True
    stage_mixing: float = 0.0
    weight_decay: float = 0.0
    val_subset: int | None = None
    keep_all_checkpoints: bool = False
    max_new: int = DEFAULT_MAX_NEW

    def __post_init__(self) -> None:
        object.__setattr__(self, "epochs_per_stage", tuple(int(e) for e in self.epochs_per_stage))
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant {self.variant!r}")
        if self.c < 0 or self.n_stages < 0:
            raise ConfigError("c and n_stages must be non-negative")
        if len(self.epochs_per_stage) != self.n_stages + 1:
            raise ConfigError(
                f"epochs_per_stage has {len(self.epochs_per_stage)} entries, expected n_stages+1={self.n_stages + 1}"
            )
        if any(e < 0 for e in self.epochs_per_stage) or self.max_total_epochs < 1:
            raise ConfigError("Epoch counts must be non-negative and max_total_epochs positive")
        if self.final_stage_policy not in (FINAL_STAGE_HOLD, FINAL_STAGE_DROP_REMAINDER):
            raise ConfigError(f"Unknown final stage policy {self.final_stage_policy!r}")
        if self.batch_size < 1 or (self.micro_batch_size is not None and self.micro_batch_size < 1):
            raise ConfigError("Batch sizes must be positive")
        if not 0.0 <= self.stage_mixing <= 1.0:
            raise ConfigError("stage_mixing must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    @property
    def drops_remainder(self) -> bool:
        return self.final_stage_policy == FINAL_STAGE_DROP_REMAINDER

    @property
    def final_stage(self) -> int:
        return self.n_stages + 1 if self.drops_remainder else self.n_stages

    def stage_plan(self) -> list[int]:
        """The stage trained in every epoch."""
        if self.variant == VARIANT_COT:
            return [0] * self.max_total_epochs
        if self.variant not in CURRICULUM_VARIANTS:
            return [self.final_stage] * self.max_total_epochs
        plan = [stage for stage, epochs in enumerate(self.epochs_per_stage) for _ in range(epochs)]
        plan = plan[: self.max_total_epochs]
        plan.extend([self.final_stage] * (self.max_total_epochs - len(plan)))
        return plan

    def latent_steps(self, stage: int) -> int:
        """Language steps replaced (or dropped) at ``stage``, before clipping to an example."""
        return min(stage, self.n_stages)

    def inference_plan(self, stage: int) -> InferencePlan:
        """How a checkpoint trained at ``stage`` is prompted."""
        steps = self.latent_steps(stage)
        if self.variant in (VARIANT_COCONUT, VARIANT_WO_CURRICULUM, VARIANT_PAUSE_AS_THOUGHT):
            return InferencePlan(self.variant, steps * self.c, self.c)
        if self.variant == VARIANT_WO_THOUGHT:
            return InferencePlan(self.variant, steps, self.c)
        if self.variant == VARIANT_PAUSE_TOKEN:
            return InferencePlan(self.variant, self.n_stages * self.c, self.c)
        return InferencePlan(self.variant, 0, self.c)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["epochs_per_stage"] = list(self.epochs_per_stage)
        return data


def preset(name: str, variant: str = VARIANT_COCONUT, **overrides: Any) -> StageSchedule:
    """Reference schedules for ProsQA-style and GSM8k-style data."""
    if name == PRESET_PROSQA:
        base: dict[str, Any] = {"c": 1, "n_stages": 6, "epochs_per_stage": (5,) * 7}
    elif name == PRESET_GSM8K:
        base = {
            "c": 2,
            "n_stages": 3,
            "epochs_per_stage": (6, 3, 3, 3),
            "final_stage_policy": FINAL_STAGE_DROP_REMAINDER,
        }
    else:
        raise ConfigError(f"Unknown preset {name!r}")
    base.update(max_total_epochs=50, learning_rate=1e-4, batch_size=128, variant=variant)
    base.update(overrides)
    return StageSchedule(**base)


def build_stage_example(
    example: ReasoningExample,
    stage: int,
    schedule: StageSchedule,
    vocab: Vocabulary,
) -> TrainingItem:
    """Tokenize ``example`` in the training form its variant uses at ``stage``."""
    question = LanguageTokens(vocab.tokenize(example.question))
    steps = [vocab.tokenize(step) for step in example.steps]
    tail = [LanguageTokens(vocab.tokenize(example.answer) + [vocab.eos_id])]
    bot, eot = LanguageTokens((vocab.bot_id,)), LanguageTokens((vocab.eot_id,))
    variant = schedule.variant

    if variant == VARIANT_COT:
        kept, thoughts = steps, 0
    elif variant in (VARIANT_NO_COT, VARIANT_PAUSE_TOKEN):
        kept, thoughts = [], 0
    elif variant in CURRICULUM_VARIANTS or variant == VARIANT_WO_CURRICULUM:
        if variant == VARIANT_WO_CURRICULUM:
            stage = schedule.final_stage
        if stage > schedule.n_stages and schedule.drops_remainder:
            kept, thoughts = [], min(schedule.n_stages, len(steps))
        else:
            removed = min(stage, len(steps))
            kept, thoughts = steps[removed:], removed
    else:
        raise ConfigError(f"Unknown variant {variant!r}")

    rest = [LanguageTokens(ids) for ids in kept] + tail
    slots = thoughts * schedule.c
    if variant in (VARIANT_COCONUT, VARIANT_WO_CURRICULUM):
        parts = [(question, False), (bot, False), (LatentSlots(slots), False), (eot, False)]
    elif variant == VARIANT_PAUSE_AS_THOUGHT:
        parts = [(question, False), (bot, False), (LanguageTokens((vocab.pause_id,) * slots), False), (eot, False)]
    elif variant == VARIANT_PAUSE_TOKEN:
        pauses = LanguageTokens((vocab.pause_id,) * (schedule.n_stages * schedule.c))
        parts = [(question, False), (pauses, False)]
    else:
        parts = [(question, False)]
    parts.extend((segment, True) for segment in rest)
    return TrainingItem.from_parts(parts)


@dataclass(frozen=True)
class CheckpointRecord:
    stage: int
    epoch: int
    val_accuracy: float
    path: str
    train_loss: float = float("nan")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def select_checkpoint(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Best validation accuracy among last-stage records; ties go to the earliest epoch."""
    if not records:
        raise SelectionError("No checkpoint records to select from")
    last_stage = max(r.stage for r in records)
    candidates = [r for r in records if r.stage == last_stage]
    return min(candidates, key=lambda r: (-r.val_accuracy, r.epoch))


def validation_accuracy(
    model: CausalTransformer,
    vocab: Vocabulary,
    examples: Sequence[ReasoningExample],
    plan: InferencePlan,
    max_new: int,
) -> float:
    if not examples:
        return 0.0
    correct = 0
    for example in examples:
        result = plan.run(model, vocab.tokenize(example.question), vocab, max_new)
        correct += answer_correct(vocab.detokenize(result.tokens), example)
    return correct / len(examples)


def supervised_count(item: TrainingItem) -> int:
    return sum(item.loss_mask)


def train_step(model: CausalTransformer, items: Sequence[TrainingItem], schedule: StageSchedule, pad_id: int) -> float:
    """Accumulate the batch-mean loss gradient over micro-batches, then take one step.

    Items are grouped by latent slot count so every micro-batch runs the same
    number of passes; each group is weighted by its share of supervised tokens.
    """
    total = sum(supervised_count(item) for item in items)
    ordered = sorted(items, key=lambda item: item.n_latent)
    size = schedule.micro_batch_size or len(items)
    loss_value = 0.0
    for _, group in groupby(ordered, key=lambda item: item.n_latent):
        group = list(group)
        for start in range(0, len(group), size):
            chunk = group[start : start + size]
            weight = sum(supervised_count(item) for item in chunk) / total
            loss = coconut_forward_train(chunk, model, pad_id) * weight
            T.backward(loss)
            loss_value += loss.item()
    T.adam_step(model.store, schedule.learning_rate, weight_decay=schedule.weight_decay)
    return loss_value


@dataclass
class RunOutputs:
    records: list[CheckpointRecord] = field(default_factory=list)
    metrics: list[dict[str, Any]] = field(default_factory=list)
    loss_trace: list[dict[str, Any]] = field(default_factory=list)


def _checkpoint_metadata(schedule: StageSchedule, stage: int, epoch: int) -> dict[str, Any]:
    plan = schedule.inference_plan(stage)
    return {
        "variant": schedule.variant,
        "c": schedule.c,
        "n_stages": schedule.n_stages,
        "final_stage_policy": schedule.final_stage_policy,
        "stage": stage,
        "epoch": epoch,
        "seed": schedule.seed,
        "inference_k": plan.k,
    }


def _prune_checkpoints(records: Sequence[CheckpointRecord]) -> None:
    """Keep the latest checkpoint and the best one of the latest stage so far."""
    keep = {records[-1].path, select_checkpoint(records).path}
    for record in records:
        path = Path(record.path)
        if record.path not in keep and path.exists():
            path.unlink()


def run_curriculum(
    train: Sequence[ReasoningExample],
    val: Sequence[ReasoningExample],
    schedule: StageSchedule,
    model: CausalTransformer,
    vocab: Vocabulary,
    run_dir: str | Path,
    progress: bool = False,
) -> list[CheckpointRecord]:
    """Train through every stage, checkpointing and validating each epoch."""
    if not train:
        raise ConfigError("Training split is empty")
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    val = list(val[: schedule.val_subset] if schedule.val_subset else val)
    outputs = RunOutputs()
    previous_stage: int | None = None
    step = 0

    for epoch, stage in enumerate(schedule.stage_plan()):
        if previous_stage is not None and stage != previous_stage:
            _LOGGER.info("Switching from stage %d to stage %d at epoch %d", previous_stage, stage, epoch)
            if schedule.reset_optimizer_on_switch:
                T.reset_optimizer_state(model.store)
        previous_stage = stage

        rng = np.random.default_rng([schedule.seed, epoch])
        order = rng.permutation(len(train))
        starts = range(0, len(order), schedule.batch_size)
        epoch_losses = []
        for start in tqdm(starts, desc=f"stage {stage} epoch {epoch}", leave=False, disable=not progress):
            batch_stage = stage
            if schedule.stage_mixing and stage > 0 and schedule.variant in CURRICULUM_VARIANTS:
                if rng.random() < schedule.stage_mixing:
                    batch_stage = int(rng.integers(0, stage))
            items = [build_stage_example(train[i], batch_stage, schedule, vocab) for i in order[start : start + schedule.batch_size]]
            try:
                loss = train_step(model, items, schedule, vocab.pad_id)
            except NonFiniteError as err:
                _LOGGER.error("Non-finite value during stage %d epoch %d", stage, epoch)
                raise DivergenceError(stage, epoch, str(err)) from err
            if not np.isfinite(loss):
                raise DivergenceError(stage, epoch, f"loss {loss}")
            epoch_losses.append(loss)
            outputs.loss_trace.append({"step": step, "stage": stage, "epoch": epoch, "loss": loss})
            step += 1
            _LOGGER.debug("step %d stage %d batch_stage %d loss %.6f", step, stage, batch_stage, loss)

        train_loss = float(np.mean(epoch_losses))
        accuracy = validation_accuracy(model, vocab, val, schedule.inference_plan(stage), schedule.max_new)
        path = ckpt_dir / f"stage{stage}_epoch{epoch}.ckpt"
        save_checkpoint(path, model, vocab, _checkpoint_metadata(schedule, stage, epoch))
        record = CheckpointRecord(stage=stage, epoch=epoch, val_accuracy=accuracy, path=str(path), train_loss=train_loss)
        outputs.records.append(record)
        outputs.metrics.append({"stage": stage, "epoch": epoch, "train_loss": train_loss, "val_accuracy": accuracy})
        _LOGGER.info("stage %d epoch %d train_loss %.4f val_accuracy %.4f", stage, epoch, train_loss, accuracy)
        if not schedule.keep_all_checkpoints:
            _prune_checkpoints(outputs.records)
        _write_outputs(run_dir, outputs)

    selected = select_checkpoint(outputs.records)
    (run_dir / "selected.json").write_text(json.dumps(selected.to_dict(), indent=2, sort_keys=True) + "\n")
    _LOGGER.info("Selected %s (val accuracy %.4f)", selected.path, selected.val_accuracy)
    return outputs.records


def _write_outputs(run_dir: Path, outputs: RunOutputs) -> None:
    write_csv(run_dir / "metrics.csv", ("stage", "epoch", "train_loss", "val_accuracy"), outputs.metrics)
    write_csv(run_dir / "loss_trace.csv", ("step", "stage", "epoch", "loss"), outputs.loss_trace)
    (run_dir / "records.json").write_text(
        json.dumps([r.to_dict() for r in outputs.records], indent=2, sort_keys=True) + "\n"
    )
