"""Probing latent search: frontier values, their spread, and node heights."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Any, Iterable, Sequence

import networkx as nx
import numpy as np

from .dataset import ReasoningExample
from .errors import ConfigError
from .latent import coconut_generate, thought_rows
from .model import CausalTransformer, PrefixState, continuation_logprob
from .prosqa import ConceptGraph, ProblemInstance
from .tokenizer import Vocabulary

_LOGGER = logging.getLogger(__name__)

HEIGHT_SHORTEST = "shortest"
HEIGHT_LONGEST = "longest"
HEIGHT_MODES = (HEIGHT_SHORTEST, HEIGHT_LONGEST)


@dataclass(frozen=True)
class FrontierValue:
    node: int
    concept: str
    value: float
    step: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def latent_state(model: CausalTransformer, vocab: Vocabulary, question: Sequence[int], k: int) -> PrefixState:
    """Model state after the question, ``<bot>``, ``k`` thoughts and ``<eot>``."""
    state = model.prefill(list(question) + [vocab.bot_id])
    for _ in range(k):
        state = model.prefill([state.last_hidden], cache=state.cache)
    return model.prefill([vocab.eot_id], cache=state.cache)


def sentence_frame(instance: ProblemInstance, k: int, vocab: Vocabulary) -> list[int]:
    """Tokens forced before the first concept of the next emitted statement."""
    if k == 0:
        return vocab.tokenize(f"{instance.graph.names[instance.entity]} is a")
    return vocab.tokenize("Every")


def _framed_state(model: CausalTransformer, vocab: Vocabulary, instance: ProblemInstance, k: int) -> PrefixState:
    state = latent_state(model, vocab, vocab.tokenize(instance.example.question), k)
    return model.prefill(sentence_frame(instance, k, vocab), cache=state.cache)


def _value(model: CausalTransformer, vocab: Vocabulary, state: PrefixState, instance: ProblemInstance, node: int, k: int) -> FrontierValue:
    name = instance.graph.names[node]
    logprob = continuation_logprob(model, state, vocab.tokenize(name))
    return FrontierValue(node=node, concept=name, value=math.exp(logprob), step=k)


def candidate_value(
    model: CausalTransformer,
    vocab: Vocabulary,
    instance: ProblemInstance,
    k: int,
    node: int,
) -> FrontierValue:
    """Probability that ``node``'s concept is the next concept emitted after ``k`` thoughts."""
    if node == instance.entity or node not in instance.graph.names:
        raise ConfigError(f"Node {node} is not a concept of this instance")
    return _value(model, vocab, _framed_state(model, vocab, instance, k), instance, node, k)


def frontier_set(instance: ProblemInstance, step: int) -> set[int]:
    """Nodes exactly ``step`` hops from the entity."""
    if step < 1:
        raise ConfigError(f"Frontier step must be at least 1, got {step}")
    distances = instance.graph.distances_from(instance.entity)
    return {node for node, distance in distances.items() if distance == step}


def frontier_values(
    model: CausalTransformer,
    vocab: Vocabulary,
    instance: ProblemInstance,
    step: int,
    nodes: Iterable[int] | None = None,
) -> list[FrontierValue]:
    """Values of every frontier node (or of ``nodes``) after ``step`` thoughts, one shared prefix."""
    nodes = sorted(frontier_set(instance, step) if nodes is None else nodes)
    if not nodes:
        return []
    state = _framed_state(model, vocab, instance, step)
    return [_value(model, vocab, state, instance, node, step) for node in nodes]


def cumulative_top(values: Sequence[float], ranks: int = 3, renormalize: bool = False) -> list[float]:
    """Cumulative mass of the top-1..``ranks`` values; short lists repeat their last total."""
    ordered = sorted(values, reverse=True)
    total = sum(ordered)
    if renormalize and total > 0:
        ordered = [v / total for v in ordered]
    running, out = 0.0, []
    for rank in range(ranks):
        if rank < len(ordered):
            running += ordered[rank]
        out.append(running)
    return out


def parallelism_curves(values_per_example: Sequence[Sequence[float]], renormalize: bool = False) -> list[dict[str, float]]:
    """Each rank's cumulative value sorted across examples, against percentile."""
    if not values_per_example:
        return []
    table = np.array([cumulative_top(v, 3, renormalize) for v in values_per_example])
    curves = np.sort(table, axis=0)
    percentiles = np.linspace(0.0, 100.0, len(curves)) if len(curves) > 1 else np.array([100.0])
    return [
        {"percentile": float(p), "top1": float(row[0]), "top2": float(row[1]), "top3": float(row[2])}
        for p, row in zip(percentiles, curves)
    ]


def parallelism_analysis(
    model: CausalTransformer,
    vocab: Vocabulary,
    examples: Sequence[ReasoningExample],
    step: int,
    renormalize: bool = False,
) -> list[dict[str, float]]:
    if step not in (1, 2):
        raise ConfigError(f"Parallelism curves are defined for steps 1 and 2, got {step}")
    values = []
    for example in examples:
        instance = ProblemInstance.from_example(example)
        values.append([fv.value for fv in frontier_values(model, vocab, instance, step)])
    return parallelism_curves(values, renormalize)


def heights(graph: ConceptGraph, mode: str = HEIGHT_SHORTEST) -> dict[int, int]:
    """Distance from every node to the leaf set; leaves are 0."""
    if mode not in HEIGHT_MODES:
        raise ConfigError(f"Unknown height mode {mode!r}")
    pick = min if mode == HEIGHT_SHORTEST else max
    out: dict[int, int] = {}
    for node in reversed(list(nx.topological_sort(graph.digraph))):
        children = graph.children(node)
        out[node] = 1 + pick(out[c] for c in children) if children else 0
    return out


def node_height(graph: ConceptGraph, node: int, mode: str = HEIGHT_SHORTEST) -> int:
    return heights(graph, mode)[node]


def height_value_analysis(
    model: CausalTransformer,
    vocab: Vocabulary,
    examples: Sequence[ReasoningExample],
    steps: Sequence[int] = (1, 2),
    modes: Sequence[str] = HEIGHT_MODES,
) -> list[dict[str, Any]]:
    """Mean frontier value per height, split by whether the node reaches the target."""
    buckets: dict[tuple[str, int, bool], list[float]] = defaultdict(list)
    for example in examples:
        instance = ProblemInstance.from_example(example)
        node_heights = {mode: heights(instance.graph, mode) for mode in modes}
        for step in steps:
            for fv in frontier_values(model, vocab, instance, step):
                correct = instance.graph.reachable(fv.node, instance.correct)
                for mode in modes:
                    buckets[(mode, node_heights[mode][fv.node], correct)].append(fv.value)

    rows = []
    for mode in modes:
        for height in sorted({h for m, h, _ in buckets if m == mode}):
            right = buckets.get((mode, height, True), [])
            wrong = buckets.get((mode, height, False), [])
            rows.append(
                {
                    "mode": mode,
                    "height": height,
                    "correct_mean": float(np.mean(right)) if right else None,
                    "correct_count": len(right),
                    "incorrect_mean": float(np.mean(wrong)) if wrong else None,
                    "incorrect_count": len(wrong),
                }
            )
    return rows


def value_rows(
    model: CausalTransformer,
    vocab: Vocabulary,
    examples: Sequence[ReasoningExample],
    steps: Sequence[int] = (1, 2),
) -> list[dict[str, Any]]:
    """Per-example frontier values for every step."""
    rows = []
    for example_id, example in enumerate(examples):
        instance = ProblemInstance.from_example(example)
        for step in steps:
            for fv in frontier_values(model, vocab, instance, step):
                row = fv.to_dict()
                row["example_id"] = example_id
                row["correct"] = instance.graph.reachable(fv.node, instance.correct)
                rows.append(row)
    return rows


def decode_analysis(
    model: CausalTransformer,
    vocab: Vocabulary,
    example: ReasoningExample,
    example_id: int,
    k: int,
    top_k: int = 5,
    max_new: int = 64,
) -> list[dict[str, Any]]:
    """Top-k decodings of each continuous thought for one example."""
    result = coconut_generate(model, vocab.tokenize(example.question), k, vocab, max_new)
    rows = thought_rows(example_id, result.thoughts, model, vocab, top_k)
    _LOGGER.debug("Example %d decoded output: %s", example_id, vocab.detokenize(result.tokens))
    return rows
