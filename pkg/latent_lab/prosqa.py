"""ProsQA: DAG-based binary entailment questions and exact graph oracles."""
from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import networkx as nx
import numpy as np

from .const import (
    BRANCH_ONLY_ONE,
    BRANCH_ONLY_ZERO,
    DEFAULT_MAX_PATH,
    DEFAULT_MIN_PATH,
    DEFAULT_NODES,
    DEFAULT_POISSON_LAMBDA,
    DEPTH_WEIGHT,
    MAX_GRAPH_ATTEMPTS,
    SPLITS,
)
from .dataset import ReasoningExample, save_examples
from .errors import ConfigError, DataError, GenerationError

_LOGGER = logging.getLogger(__name__)

FRAME_WORDS = ("Every", "is", "a", "Is", "or", ".", "?")
PERSON_NAMES = (
    "Alex", "Amy", "Ben", "Bob", "Carl", "Clara", "Dan", "Davis", "Eva", "Emma",
    "Fae", "Fred", "Gary", "Grace", "Hank", "Holly", "Ivan", "Iris", "Jack", "Jane",
    "Kate", "Kyle", "Leo", "Lily", "Max", "Mia", "Nina", "Noah", "Olga", "Owen",
    "Paul", "Polly", "Quinn", "Rex", "Rose", "Sally", "Sam", "Stella", "Tom", "Tina",
    "Uma", "Vic", "Wren", "Wendy", "Xena", "Yara", "Zack", "Zoe",
)
CONSONANTS = ("b", "d", "f", "g", "l", "m", "n", "r", "s", "t")
VOWELS = ("a", "e", "i", "o", "u")

_STATEMENT_RE = re.compile(r"^(?:(Every) )?([A-Za-z]+) is a ([a-z]+)\.$")
_QUESTION_RE = re.compile(r"^Is ([A-Za-z]+) a ([a-z]+) or ([a-z]+)\?$")
_SENTENCE_RE = re.compile(r"[^.?]+[.?]")


def concept_inventory() -> list[str]:
    """Every pseudoword concept name: two consonant-vowel syllables then "pus"."""
    syllables = [c + v for c in CONSONANTS for v in VOWELS]
    return [a + b + "pus" for a in syllables for b in syllables]


@dataclass
class ConceptGraph:
    """Labeled DAG grown one node at a time.

    Labels: bit 1 marks descendants of node 0, bit 2 descendants of node 1.
    """

    n_nodes: int
    edges: list[tuple[int, int]] = field(default_factory=list)
    labels: dict[int, int] = field(default_factory=dict)
    groups: dict[int, list[int]] = field(default_factory=dict)
    depth: dict[int, int] = field(default_factory=dict)
    names: dict[int, str] = field(default_factory=dict)

    @cached_property
    def digraph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(range(self.n_nodes))
        graph.add_edges_from(self.edges)
        return graph

    @property
    def roots(self) -> list[int]:
        return [n for n in range(self.n_nodes) if self.digraph.in_degree(n) == 0]

    @property
    def leaves(self) -> list[int]:
        return [n for n in range(self.n_nodes) if self.digraph.out_degree(n) == 0]

    def is_root(self, node: int) -> bool:
        return self.digraph.in_degree(node) == 0

    def children(self, node: int) -> list[int]:
        return sorted(self.digraph.successors(node))

    def has_edge(self, src: int, dst: int) -> bool:
        return self.digraph.has_edge(src, dst)

    def reachable(self, src: int, dst: int) -> bool:
        return nx.has_path(self.digraph, src, dst)

    def distances_from(self, src: int) -> dict[int, int]:
        return dict(nx.single_source_shortest_path_length(self.digraph, src))

    def node_by_name(self) -> dict[str, int]:
        return {name: node for node, name in self.names.items()}


@dataclass(frozen=True)
class ShortestPaths:
    """All shortest paths as node tuples; a zero-edge path is ``(src,)``."""

    length: int | None
    paths: tuple[tuple[int, ...], ...]


def oracle_shortest_paths(graph: ConceptGraph, src: int, dst: int) -> ShortestPaths:
    """Exhaustive enumeration of the shortest ``src`` → ``dst`` paths."""
    try:
        paths = sorted(tuple(p) for p in nx.all_shortest_paths(graph.digraph, src, dst))
    except nx.NetworkXNoPath:
        return ShortestPaths(length=None, paths=())
    return ShortestPaths(length=len(paths[0]) - 1, paths=tuple(paths))


def sample_poisson(rng: np.random.Generator, lam: float = DEFAULT_POISSON_LAMBDA) -> int:
    """Poisson draw by multiplicative inversion."""
    if lam <= 0:
        raise ConfigError(f"Poisson rate must be positive, got {lam}")
    threshold = math.exp(-lam)
    count, product = 0, rng.random()
    while product > threshold:
        count += 1
        product *= rng.random()
    return count


def weighted_sample_without_replacement(
    candidates: Sequence[int],
    weights: Sequence[float],
    n: int,
    rng: np.random.Generator,
) -> list[int]:
    """Draw ``n`` distinct candidates, each draw proportional to the remaining weights."""
    if len(candidates) != len(weights):
        raise ConfigError("candidates and weights differ in length")
    if any(w < 0 for w in weights):
        raise ConfigError("sampling weights must be non-negative")
    if n > len(candidates):
        raise ConfigError(f"cannot draw {n} items from {len(candidates)} candidates")
    pool = list(candidates)
    remaining = [float(w) for w in weights]
    chosen: list[int] = []
    for _ in range(n):
        total = sum(remaining)
        target = rng.random() * total
        cumulative = 0.0
        pick = len(pool) - 1
        for i, weight in enumerate(remaining):
            cumulative += weight
            if target < cumulative:
                pick = i
                break
        chosen.append(pool.pop(pick))
        remaining.pop(pick)
    return chosen


def build_graph(n_nodes: int, rng: np.random.Generator, lam: float = DEFAULT_POISSON_LAMBDA) -> ConceptGraph:
    """Grow a labeled DAG of ``n_nodes`` nodes; nodes 0 and 1 are the seeds."""
    if n_nodes < 3:
        raise ConfigError(f"ProsQA graphs need at least 3 nodes, got {n_nodes}")
    graph = ConceptGraph(
        n_nodes=n_nodes,
        labels={0: 1, 1: 2},
        groups={0: [], 1: [0], 2: [1], 3: []},
        depth={0: 0, 1: 0},
    )
    for idx in range(2, n_nodes):
        n_in = sample_poisson(rng, lam)
        branch = rng.random()
        if branch <= BRANCH_ONLY_ZERO:
            # cannot be a descendant of node 1
            candidates = sorted(graph.groups[0] + graph.groups[1])
        elif branch <= BRANCH_ONLY_ONE:
            # cannot be a descendant of node 0
            candidates = sorted(graph.groups[0] + graph.groups[2])
        else:
            candidates = list(range(idx))
        n_in = min(len(candidates), n_in)
        weights = [graph.depth[c] * DEPTH_WEIGHT + 1 for c in candidates]
        parents = weighted_sample_without_replacement(candidates, weights, n_in, rng)
        label = 0
        for parent in parents:
            label |= graph.labels[parent]
            graph.edges.append((parent, idx))
        graph.groups[label].append(idx)
        graph.labels[idx] = label
        graph.depth[idx] = 1 + max(graph.depth[p] for p in parents) if parents else 0
    return graph


def select_question(
    graph: ConceptGraph,
    rng: np.random.Generator,
    min_path: int = DEFAULT_MIN_PATH,
    max_path: int = DEFAULT_MAX_PATH,
) -> tuple[int, int, int] | None:
    """Pick (entity, correct leaf, incorrect leaf), or None to reject the graph."""
    leaves = [n for n in graph.leaves if not graph.is_root(n)]
    correct_pool = [n for n in leaves if graph.labels[n] == 1]
    incorrect_pool = [n for n in leaves if graph.labels[n] == 2]
    if not correct_pool or not incorrect_pool:
        return None
    correct = correct_pool[int(rng.integers(len(correct_pool)))]
    incorrect = incorrect_pool[int(rng.integers(len(incorrect_pool)))]
    length = oracle_shortest_paths(graph, 0, correct).length
    if length is None or not min_path <= length <= max_path:
        return None
    return 0, correct, incorrect


@dataclass
class ProblemInstance:
    graph: ConceptGraph
    entity: int
    correct: int
    incorrect: int
    options: tuple[int, int]
    statement_order: tuple[int, ...]
    path: tuple[int, ...]

    @property
    def example(self) -> ReasoningExample:
        return render(self)

    def statement(self, src: int, dst: int) -> str:
        names = self.graph.names
        if self.graph.is_root(src):
            return f"{names[src]} is a {names[dst]}."
        return f"Every {names[src]} is a {names[dst]}."

    @classmethod
    def from_example(cls, example: ReasoningExample) -> ProblemInstance:
        """Rebuild the graph and question from a rendered example."""
        sentences = [s.strip() for s in _SENTENCE_RE.findall(example.question)]
        if not sentences:
            raise DataError("Empty ProsQA question")
        question = _QUESTION_RE.match(sentences[-1])
        if question is None:
            raise DataError(f"Not a ProsQA question: {sentences[-1]!r}")
        entity_name, first, second = question.groups()
        answer = _STATEMENT_RE.match(example.answer.strip())
        if answer is None or answer.group(1) or answer.group(2) != entity_name:
            raise DataError(f"Not a ProsQA answer: {example.answer!r}")
        correct_name = answer.group(3)
        if correct_name not in (first, second):
            raise DataError(f"Answer {correct_name!r} is not one of the options")

        ids: dict[str, int] = {entity_name: 0}
        edges: list[tuple[int, int]] = []
        for sentence in sentences[:-1]:
            match = _STATEMENT_RE.match(sentence)
            if match is None:
                raise DataError(f"Unparseable statement: {sentence!r}")
            src, dst = (ids.setdefault(name, len(ids)) for name in match.group(2, 3))
            edges.append((src, dst))
        for name in (first, second):
            ids.setdefault(name, len(ids))

        graph = ConceptGraph(n_nodes=len(ids), edges=edges, names={v: k for k, v in ids.items()})
        reach = graph.distances_from(0)
        for node in nx.topological_sort(graph.digraph):
            parents = list(graph.digraph.predecessors(node))
            graph.depth[node] = 1 + max(graph.depth[p] for p in parents) if parents else 0
            graph.labels[node] = 1 if node in reach else 0
        path = [0]
        for step in example.steps:
            match = _STATEMENT_RE.match(step.strip())
            if match and match.group(3) in ids:
                path.append(ids[match.group(3)])
        correct = ids[correct_name]
        incorrect = ids[second if correct_name == first else first]
        return cls(
            graph=graph,
            entity=0,
            correct=correct,
            incorrect=incorrect,
            options=(ids[first], ids[second]),
            statement_order=tuple(range(len(edges))),
            path=tuple(path),
        )


def assign_names(graph: ConceptGraph, rng: np.random.Generator, inventory: Sequence[str]) -> None:
    """Person names for parentless nodes, unique pseudowords for the rest."""
    roots = graph.roots
    concepts = [n for n in range(graph.n_nodes) if n not in set(roots)]
    if len(roots) > len(PERSON_NAMES):
        raise GenerationError(f"{len(roots)} entities exceed the pool of {len(PERSON_NAMES)} names")
    if len(concepts) > len(inventory):
        raise GenerationError(f"{len(concepts)} concepts exceed the pool of {len(inventory)} names")
    people = rng.choice(len(PERSON_NAMES), size=len(roots), replace=False)
    words = rng.choice(len(inventory), size=len(concepts), replace=False)
    graph.names = {}
    graph.names.update({node: PERSON_NAMES[i] for node, i in zip(roots, people)})
    graph.names.update({node: inventory[i] for node, i in zip(concepts, words)})


def make_instance(
    graph: ConceptGraph,
    choice: tuple[int, int, int],
    rng: np.random.Generator,
    inventory: Sequence[str] | None = None,
) -> ProblemInstance:
    entity, correct, incorrect = choice
    assign_names(graph, rng, inventory or concept_inventory())
    options = (correct, incorrect) if rng.random() < 0.5 else (incorrect, correct)
    order = tuple(int(i) for i in rng.permutation(len(graph.edges)))
    shortest = oracle_shortest_paths(graph, entity, correct)
    path = shortest.paths[int(rng.integers(len(shortest.paths)))]
    return ProblemInstance(
        graph=graph,
        entity=entity,
        correct=correct,
        incorrect=incorrect,
        options=options,
        statement_order=order,
        path=path,
    )


def render(instance: ProblemInstance) -> ReasoningExample:
    """Render statements, question, path steps and answer as text."""
    graph, names = instance.graph, instance.graph.names
    statements = [instance.statement(*graph.edges[i]) for i in instance.statement_order]
    first, second = (names[n] for n in instance.options)
    entity = names[instance.entity]
    question = " ".join(statements + [f"Is {entity} a {first} or {second}?"])
    steps = tuple(instance.statement(a, b) for a, b in zip(instance.path, instance.path[1:]))
    return ReasoningExample(question=question, steps=steps, answer=f"{entity} is a {names[instance.correct]}.")


@dataclass(frozen=True)
class GenerationSettings:
    n_nodes: int = DEFAULT_NODES
    poisson_lambda: float = DEFAULT_POISSON_LAMBDA
    min_path: int = DEFAULT_MIN_PATH
    max_path: int = DEFAULT_MAX_PATH


def instance_rng(master_seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, SPLITS.index(split), index]))


def generate_instance(
    master_seed: int,
    split: str,
    index: int,
    settings: GenerationSettings = GenerationSettings(),
) -> tuple[ProblemInstance, int]:
    """Instance ``index`` of ``split``: a pure function of its arguments. Returns (instance, rejections)."""
    rng = instance_rng(master_seed, split, index)
    for rejections in range(MAX_GRAPH_ATTEMPTS):
        graph = build_graph(settings.n_nodes, rng, settings.poisson_lambda)
        choice = select_question(graph, rng, settings.min_path, settings.max_path)
        if choice is not None:
            return make_instance(graph, choice, rng), rejections
    raise GenerationError(f"No acceptable graph for {split}[{index}] after {MAX_GRAPH_ATTEMPTS} attempts")


def _generate_row(args: tuple[int, str, int, GenerationSettings]) -> tuple[dict[str, Any], tuple[int, int, int, int, int]]:
    master_seed, split, index, settings = args
    instance, rejections = generate_instance(master_seed, split, index, settings)
    shortest = oracle_shortest_paths(instance.graph, instance.entity, instance.correct)
    stats = (instance.graph.n_nodes, len(instance.graph.edges), shortest.length, len(shortest.paths), rejections)
    return render(instance).to_dict(), stats


@dataclass
class DatasetStats:
    sizes: dict[str, int]
    mean_nodes: float
    mean_edges: float
    mean_shortest_path_length: float
    mean_shortest_path_count: float
    rejections: int
    rejection_rate: float
    n_nodes: int
    poisson_lambda: float
    master_seed: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def summarize(rows: Sequence[tuple[int, int, int, int, int]]) -> dict[str, float]:
    array = np.asarray(rows, dtype=np.float64)
    accepted = len(array)
    rejections = int(array[:, 4].sum())
    return {
        "mean_nodes": float(array[:, 0].mean()),
        "mean_edges": float(array[:, 1].mean()),
        "mean_shortest_path_length": float(array[:, 2].mean()),
        "mean_shortest_path_count": float(array[:, 3].mean()),
        "rejections": rejections,
        "rejection_rate": rejections / (rejections + accepted),
    }


def generate_dataset(
    sizes: dict[str, int],
    master_seed: int,
    out_dir: str | Path,
    settings: GenerationSettings = GenerationSettings(),
    workers: int = 1,
) -> DatasetStats:
    """Write ``{split}.jsonl`` for every split plus ``stats.json``."""
    if any(size <= 0 for size in sizes.values()):
        raise ConfigError(f"Split sizes must be positive: {sizes}")
    unknown = set(sizes) - set(SPLITS)
    if unknown:
        raise ConfigError(f"Unknown splits {sorted(unknown)}")
    out_dir = Path(out_dir)
    all_stats: list[tuple[int, int, int, int, int]] = []
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for split, size in sizes.items():
            jobs = [(master_seed, split, i, settings) for i in range(size)]
            if executor is not None:
                results = list(executor.map(_generate_row, jobs, chunksize=64))
            else:
                results = [_generate_row(job) for job in jobs]
            save_examples(out_dir / f"{split}.jsonl", (ReasoningExample.from_dict(row) for row, _ in results))
            all_stats.extend(stats for _, stats in results)
            _LOGGER.info("Wrote %d %s examples to %s", size, split, out_dir / f"{split}.jsonl")
    finally:
        if executor is not None:
            executor.shutdown()

    summary = summarize(all_stats)
    if summary["rejection_rate"] > 0.5:
        _LOGGER.warning("High graph rejection rate: %.2f", summary["rejection_rate"])
    stats = DatasetStats(
        sizes=dict(sizes),
        n_nodes=settings.n_nodes,
        poisson_lambda=settings.poisson_lambda,
        master_seed=master_seed,
        **summary,
    )
    try:
        (out_dir / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise DataError(f"Cannot write stats to {out_dir}: {err}") from err
    return stats
