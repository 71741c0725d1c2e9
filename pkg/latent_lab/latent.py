"""Continuous-thought reasoning: mixed language/latent sequences.

A latent slot takes as input the final hidden state of the position right
before it instead of a token embedding. Training runs one forward pass per
latent slot plus one, each extending the key/value cache of the previous
ones, and backpropagates through every fed-back hidden state.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np

from . import tensor as T
from .const import (
    IGNORE_INDEX,
    LATENT_ID,
    VARIANT_COCONUT,
    VARIANT_PAUSE_AS_THOUGHT,
    VARIANT_PAUSE_TOKEN,
    VARIANT_WO_CURRICULUM,
    VARIANT_WO_THOUGHT,
    VARIANTS,
)
from .dataset import write_jsonl
from .errors import ConfigError, StructureError
from .model import CausalTransformer, greedy_continue, greedy_decode
from .tensor import Tensor
from .tokenizer import Vocabulary

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class LanguageTokens:
    ids: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class LatentSlots:
    count: int

    def __post_init__(self) -> None:
        if self.count < 0:
            raise StructureError(f"Negative latent slot count {self.count}")

    def __len__(self) -> int:
        return self.count


Segment = Union[LanguageTokens, LatentSlots]


@dataclass(frozen=True)
class ModeTrace:
    """Ordered language and latent segments of one sequence."""

    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        latent = [s for s in self.segments if isinstance(s, LatentSlots) and s.count]
        if len(latent) > 1:
            raise StructureError("A sequence holds at most one latent segment")

    @property
    def length(self) -> int:
        return sum(len(s) for s in self.segments)

    @property
    def n_latent(self) -> int:
        return sum(s.count for s in self.segments if isinstance(s, LatentSlots))

    @property
    def first_latent(self) -> int | None:
        position = 0
        for segment in self.segments:
            if isinstance(segment, LatentSlots) and segment.count:
                return position
            position += len(segment)
        return None

    def tokens(self) -> list[int]:
        """Token ids with ``LATENT_ID`` at every latent slot."""
        out: list[int] = []
        for segment in self.segments:
            if isinstance(segment, LatentSlots):
                out.extend([LATENT_ID] * segment.count)
            else:
                out.extend(segment.ids)
        return out

    def check_delimiters(self, bot_id: int, eot_id: int) -> None:
        """Latent slots must sit between a ``<bot>`` and an ``<eot>`` token."""
        tokens = self.tokens()
        start = self.first_latent
        if start is None:
            return
        end = start + self.n_latent
        if start == 0 or tokens[start - 1] != bot_id:
            raise StructureError("Latent slots are not preceded by <bot>")
        if end >= len(tokens) or tokens[end] != eot_id:
            raise StructureError("Latent slots are not followed by <eot>")


@dataclass(frozen=True)
class TrainingItem:
    """A trace plus a per-position flag marking tokens the loss predicts."""

    trace: ModeTrace
    loss_mask: tuple[bool, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "loss_mask", tuple(bool(m) for m in self.loss_mask))
        if len(self.loss_mask) != self.trace.length:
            raise StructureError(
                f"Loss mask covers {len(self.loss_mask)} positions, sequence has {self.trace.length}"
            )
        if self.loss_mask and self.loss_mask[0]:
            raise StructureError("The first position has no predecessor to predict it")
        tokens = self.trace.tokens()
        if any(m and t == LATENT_ID for m, t in zip(self.loss_mask, tokens)):
            raise StructureError("Latent slots cannot be supervised")

    @classmethod
    def from_parts(cls, parts: Sequence[tuple[Segment, bool]]) -> TrainingItem:
        segments, mask = [], []
        for segment, supervised in parts:
            segments.append(segment)
            mask.extend([supervised and isinstance(segment, LanguageTokens)] * len(segment))
        return cls(ModeTrace(tuple(segments)), tuple(mask))

    @property
    def n_latent(self) -> int:
        return self.trace.n_latent


@dataclass
class LatentBatch:
    """Padded batch whose first latent slot sits in the same column on every row."""

    ids: np.ndarray
    attend: np.ndarray
    latent: np.ndarray
    targets: np.ndarray
    latent_columns: tuple[int, ...]
    offsets: tuple[int, ...] = field(default_factory=tuple)

    @property
    def supervised(self) -> np.ndarray:
        return self.targets != IGNORE_INDEX

    @property
    def n_latent(self) -> int:
        return len(self.latent_columns)


def collate(items: Sequence[TrainingItem], pad_id: int = 0) -> LatentBatch:
    """Left-pad to align the latent segment, right-pad to the longest row.

    ``targets[b, t]`` is the token position ``t`` must predict, or
    ``IGNORE_INDEX``.
    """
    if not items:
        raise StructureError("Cannot collate an empty batch")
    n_latent = items[0].n_latent
    if any(item.n_latent != n_latent for item in items):
        raise StructureError("Items in one batch must share the latent slot count")
    if n_latent:
        firsts = [item.trace.first_latent for item in items]
        lead = max(firsts)
        offsets = [lead - f for f in firsts]
    else:
        lead = 0
        offsets = [0] * len(items)
    width = max(off + item.trace.length for off, item in zip(offsets, items))
    batch = len(items)
    ids = np.full((batch, width), pad_id, dtype=np.int64)
    attend = np.zeros((batch, width), dtype=bool)
    latent = np.zeros((batch, width), dtype=bool)
    targets = np.full((batch, width), IGNORE_INDEX, dtype=np.int64)
    for row, (off, item) in enumerate(zip(offsets, items)):
        tokens = np.asarray(item.trace.tokens(), dtype=np.int64)
        span = slice(off, off + len(tokens))
        is_latent = tokens == LATENT_ID
        ids[row, span] = np.where(is_latent, pad_id, tokens)
        attend[row, span] = True
        latent[row, span] = is_latent
        mask = np.asarray(item.loss_mask, dtype=bool)
        supervised = np.nonzero(mask[1:])[0]
        targets[row, off + supervised] = tokens[supervised + 1]
    return LatentBatch(
        ids=ids,
        attend=attend,
        latent=latent,
        targets=targets,
        latent_columns=tuple(range(lead, lead + n_latent)),
        offsets=tuple(offsets),
    )


def _run_passes(model: CausalTransformer, batch: LatentBatch) -> tuple[Tensor, Tensor]:
    """Return (realized inputs, final hidden states), both ``(B, T, d)``.

    Pass 1 covers everything before the first latent column, each following
    pass starts at a latent column whose input is the last hidden state of
    the previous pass.
    """
    columns = batch.latent_columns
    if columns and columns[0] == 0:
        raise StructureError("A latent slot at position 0 has no preceding state")
    embedded = model.embed_tokens(batch.ids)
    n_rows, width = batch.ids.shape
    d = model.config.d_model
    bounds = [0, *columns, width]
    latent_starts = set(columns)
    cache = None
    fed_back: Tensor | None = None
    inputs: list[Tensor] = []
    hiddens: list[Tensor] = []
    for start, stop in zip(bounds, bounds[1:]):
        if stop <= start:
            continue
        chunk = embedded[:, start:stop, :]
        if start in latent_starts:
            head = fed_back.reshape(n_rows, 1, d)
            chunk = head if stop - start == 1 else T.concat([head, chunk[:, 1:, :]], axis=1)
        out = model.forward_embeds(chunk, cache=cache, attend=batch.attend[:, start:stop], compute_logits=False)
        inputs.append(chunk)
        hiddens.append(out.hidden)
        cache = out.cache
        fed_back = out.hidden[:, -1, :]
    if len(hiddens) == 1:
        return inputs[0], hiddens[0]
    return T.concat(inputs, axis=1), T.concat(hiddens, axis=1)


def _supervised_loss(model: CausalTransformer, hidden: Tensor, targets: np.ndarray) -> Tensor:
    rows, cols = np.nonzero(targets != IGNORE_INDEX)
    picked = hidden[rows, cols]
    logits = model.head(picked)
    return T.cross_entropy_masked(logits, targets[rows, cols], np.ones(len(rows), dtype=bool))


def realize_input(trace: ModeTrace, model: CausalTransformer) -> Tensor:
    """The ``(T, d)`` input vectors the model actually sees for ``trace``."""
    item = TrainingItem(trace, (False,) * trace.length)
    inputs, _ = _run_passes(model, collate([item]))
    return inputs[0]


def coconut_forward_train(
    items: TrainingItem | Sequence[TrainingItem],
    model: CausalTransformer,
    pad_id: int = 0,
) -> Tensor:
    """Scalar training loss over one item or a batch sharing a latent count."""
    if isinstance(items, TrainingItem):
        items = [items]
    batch = collate(items, pad_id)
    _, hidden = _run_passes(model, batch)
    return _supervised_loss(model, hidden, batch.targets)


def language_model_loss(model: CausalTransformer, ids: Sequence[int], loss_mask: Sequence[bool]) -> Tensor:
    """Plain next-token loss; ``loss_mask[t]`` marks token ``t`` as a target."""
    item = TrainingItem(ModeTrace((LanguageTokens(tuple(ids)),)), tuple(loss_mask))
    return coconut_forward_train(item, model)


@dataclass
class GenerationResult:
    tokens: list[int]
    thoughts: list[np.ndarray]
    new_token_count: int
    truncated: bool = False


def coconut_generate(
    model: CausalTransformer,
    question: Sequence[int],
    k: int,
    vocab: Vocabulary,
    max_new: int,
) -> GenerationResult:
    """``<bot>``, ``k`` continuous thoughts, ``<eot>``, then greedy language decoding.

    ``thoughts[j]`` is the hidden state fed as input to latent slot ``j``.
    """
    if k < 0:
        raise ConfigError(f"Latent thought count must be non-negative, got {k}")
    stop = frozenset({vocab.eos_id})
    if k == 0:
        result = greedy_decode(model, list(question) + [vocab.bot_id, vocab.eot_id], stop, max_new)
        return GenerationResult(result.tokens, [], 2 + len(result.tokens), result.truncated)
    state = model.prefill(list(question) + [vocab.bot_id])
    thoughts: list[np.ndarray] = []
    for _ in range(k):
        thoughts.append(state.last_hidden.copy())
        state = model.prefill([state.last_hidden], cache=state.cache)
    state = model.prefill([vocab.eot_id], cache=state.cache)
    result = greedy_continue(model, state, stop, max_new)
    return GenerationResult(result.tokens, thoughts, k + 2 + len(result.tokens), result.truncated)


def decode_thought(model: CausalTransformer, thought: np.ndarray, top_k: int) -> list[tuple[int, float]]:
    """Rank tokens by softmax(W h); ties go to the lower id."""
    weight = model.output_weight.data.astype(np.float64)
    logits = np.asarray(thought, dtype=np.float64) @ weight
    probs = np.exp(T.log_softmax(logits[None, :])[0])
    order = np.lexsort((np.arange(len(probs)), -probs))
    return [(int(i), float(probs[i])) for i in order[: max(0, min(top_k, len(probs)))]]


def thought_rows(
    example_id: int,
    thoughts: Sequence[np.ndarray],
    model: CausalTransformer,
    vocab: Vocabulary,
    top_k: int,
) -> list[dict[str, Any]]:
    rows = []
    for slot, thought in enumerate(thoughts):
        ranked = decode_thought(model, thought, top_k)
        rows.append(
            {
                "example_id": example_id,
                "slot": slot,
                "tokens": [vocab.token(i) for i, _ in ranked],
                "probabilities": [p for _, p in ranked],
            }
        )
    return rows


def write_probe_dump(path: str | Path, rows: Sequence[dict[str, Any]]) -> None:
    write_jsonl(path, rows)
    _LOGGER.info("Wrote %d decoded thoughts to %s", len(rows), path)


_LATENT_PLANS = (VARIANT_COCONUT, VARIANT_WO_CURRICULUM)
_REMOVING_PLANS = (VARIANT_COCONUT, VARIANT_WO_CURRICULUM, VARIANT_PAUSE_AS_THOUGHT, VARIANT_WO_THOUGHT)


@dataclass(frozen=True)
class InferencePlan:
    """How a trained variant is prompted: ``k`` latent slots, pauses or nothing."""

    variant: str
    k: int = 0
    c: int = 1

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant {self.variant!r}")
        if self.k < 0 or self.c < 0:
            raise ConfigError(f"Negative thought count k={self.k}, c={self.c}")

    @property
    def removed_steps(self) -> int:
        """Leading reasoning steps the model is expected to skip in its output."""
        if self.variant == VARIANT_WO_THOUGHT:
            return self.k
        if self.variant in _REMOVING_PLANS and self.c:
            return self.k // self.c
        return 0

    def run(self, model: CausalTransformer, question: Sequence[int], vocab: Vocabulary, max_new: int) -> GenerationResult:
        stop = frozenset({vocab.eos_id})
        question = list(question)
        if self.variant in _LATENT_PLANS:
            return coconut_generate(model, question, self.k, vocab, max_new)
        if self.variant == VARIANT_PAUSE_AS_THOUGHT:
            prefix = question + [vocab.bot_id] + [vocab.pause_id] * self.k + [vocab.eot_id]
            extra = self.k + 2
        elif self.variant == VARIANT_PAUSE_TOKEN:
            prefix = question + [vocab.pause_id] * self.k
            extra = self.k
        else:
            # cot, no_cot and wo_thought decode straight from the question
            prefix, extra = question, 0
        result = greedy_decode(model, prefix, stop, max_new)
        return GenerationResult(result.tokens, [], extra + len(result.tokens), result.truncated)

