"""Inference over a test split, reasoning-path classification and accounting."""
from __future__ import annotations

import asyncio
import json
import logging
import re
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

from .const import DEFAULT_EVAL_WORKERS, DEFAULT_MAX_NEW, VARIANT_COCONUT
from .dataset import ReasoningExample, write_csv, write_jsonl
from .errors import DataError
from .latent import InferencePlan
from .model import CausalTransformer
from .prosqa import ProblemInstance, oracle_shortest_paths
from .tokenizer import Vocabulary

_LOGGER = logging.getLogger(__name__)

_SENTENCE_RE = re.compile(r"[^.?!]+[.?!]")
_STATEMENT_RE = re.compile(r"^(?:Every )?([A-Za-z]+) is a ([A-Za-z]+)\.$")
_CLAIM_RE = re.compile(r"^([A-Za-z]+) is a ([A-Za-z]+)\.$")

Node = int | str


class EvalCategory(str, Enum):
    CORRECT_PATH = "CorrectPath"
    LONGER_PATH = "LongerPath"
    HALLUCINATION = "Hallucination"
    WRONG_TARGET = "WrongTarget"
    CORRECT_LABEL = "CorrectLabel"
    INCORRECT_LABEL = "IncorrectLabel"


@dataclass(frozen=True)
class ParsedOutput:
    """Emitted edges in order; names absent from the graph stay as strings."""

    edges: tuple[tuple[Node, Node], ...]
    claim: Node | None


@dataclass(frozen=True)
class EvalOutcome:
    category: EvalCategory | None
    path: tuple[tuple[Node, Node], ...] = ()
    answer_correct: bool = False
    new_tokens: int = 0
    seconds: float = 0.0
    example_id: int = 0
    k: int = 0
    output: str = ""

    def to_dict(self) -> dict[str, Any]:
        """Trace row; wall-clock time is left to the timing table."""
        row = asdict(self)
        del row["seconds"]
        row["category"] = self.category.value if self.category else None
        row["path"] = [list(edge) for edge in self.path]
        return row


def sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_RE.findall(text)]


def parse_output(text: str, instance: ProblemInstance) -> ParsedOutput:
    """Map statements to graph edges and pull the final claim about the entity.

    An unparseable statement becomes the edge ``("?", "?")``.
    """
    ids = instance.graph.node_by_name()
    entity_name = instance.graph.names[instance.entity]

    def node(name: str) -> Node:
        return ids.get(name, name)

    parts = sentences(text)
    claim: Node | None = None
    if parts:
        match = _CLAIM_RE.match(parts[-1])
        if match and match.group(1) == entity_name:
            claim = node(match.group(2))
            parts = parts[:-1]
    edges = []
    for sentence in parts:
        match = _STATEMENT_RE.match(sentence)
        edges.append((node(match.group(1)), node(match.group(2))) if match else ("?", "?"))
    return ParsedOutput(edges=tuple(edges), claim=claim)


def _is_chain(instance: ProblemInstance, edges: Sequence[tuple[Node, Node]]) -> bool:
    graph = instance.graph
    for src, dst in edges:
        if not isinstance(src, int) or not isinstance(dst, int) or not graph.has_edge(src, dst):
            return False
    return all(a[1] == b[0] for a, b in zip(edges, edges[1:]))


def classify(parsed: ParsedOutput, removed_steps: int, instance: ProblemInstance) -> EvalOutcome:
    """Assign exactly one reasoning-process category.

    With ``removed_steps > 0`` the emitted edges are read as the suffix of a
    path whose prefix was reasoned in latent space.
    """
    edges = parsed.edges
    correct = instance.correct
    if not edges:
        label = EvalCategory.CORRECT_LABEL if parsed.claim == correct else EvalCategory.INCORRECT_LABEL
        return EvalOutcome(category=label, path=edges)

    shortest = oracle_shortest_paths(instance.graph, instance.entity, correct).length
    category = EvalCategory.HALLUCINATION
    if _is_chain(instance, edges):
        start, end = edges[0][0], edges[-1][1]
        if removed_steps == 0:
            reached = 0 if start == instance.entity else None
        else:
            reached = instance.graph.distances_from(instance.entity).get(start)
        if reached is not None:
            if end == correct:
                exact = shortest is not None and reached + len(edges) == shortest
                category = EvalCategory.CORRECT_PATH if exact else EvalCategory.LONGER_PATH
            elif end == parsed.claim:
                category = EvalCategory.WRONG_TARGET
    return EvalOutcome(category=category, path=edges)


def answer_correct(text: str, example: ReasoningExample) -> bool:
    """The last generated sentence equals the reference answer."""
    parts = sentences(text)
    return bool(parts) and parts[-1] == example.answer.strip()


@dataclass
class KSummary:
    k: int
    count: int = 0
    accuracy: float = 0.0
    categories: dict[str, float] = field(default_factory=dict)
    mean_new_tokens: float = 0.0


@dataclass
class EvalReport:
    variant: str
    per_k: dict[int, KSummary] = field(default_factory=dict)

    @classmethod
    def from_outcomes(cls, variant: str, outcomes: Sequence[EvalOutcome]) -> EvalReport:
        report = cls(variant=variant)
        for k in sorted({o.k for o in outcomes}):
            group = [o for o in outcomes if o.k == k]
            classified = [o.category.value for o in group if o.category is not None]
            counts = Counter(classified)
            report.per_k[k] = KSummary(
                k=k,
                count=len(group),
                accuracy=sum(o.answer_correct for o in group) / len(group),
                categories={c.value: counts[c.value] / len(classified) for c in EvalCategory} if classified else {},
                mean_new_tokens=sum(o.new_tokens for o in group) / len(group),
            )
        return report

    def to_dict(self) -> dict[str, Any]:
        return {"variant": self.variant, "per_k": {str(k): asdict(s) for k, s in self.per_k.items()}}


def evaluate_example(
    model: CausalTransformer,
    vocab: Vocabulary,
    example: ReasoningExample,
    plan: InferencePlan,
    max_new: int = DEFAULT_MAX_NEW,
    example_id: int = 0,
) -> EvalOutcome:
    started = time.perf_counter()
    result = plan.run(model, vocab.tokenize(example.question), vocab, max_new)
    seconds = time.perf_counter() - started
    text = vocab.detokenize(result.tokens)
    if result.truncated:
        _LOGGER.warning("Example %d (k=%d) hit max_new=%d without <eos>", example_id, plan.k, max_new)
    try:
        instance = ProblemInstance.from_example(example)
    except DataError:
        outcome = EvalOutcome(category=None)
    else:
        outcome = classify(parse_output(text, instance), plan.removed_steps, instance)
    return replace(
        outcome,
        answer_correct=answer_correct(text, example),
        new_tokens=result.new_token_count,
        seconds=seconds,
        example_id=example_id,
        k=plan.k,
        output=text,
    )


async def async_evaluate(
    model: CausalTransformer,
    vocab: Vocabulary,
    examples: Sequence[ReasoningExample],
    k_values: Sequence[int],
    variant: str = VARIANT_COCONUT,
    c: int = 1,
    max_new: int = DEFAULT_MAX_NEW,
    workers: int = DEFAULT_EVAL_WORKERS,
) -> tuple[EvalReport, list[EvalOutcome]]:
    """Run every (k, example) pair on worker threads over one read-only model."""
    semaphore = asyncio.Semaphore(max(1, workers))

    async def run_one(plan: InferencePlan, index: int, example: ReasoningExample) -> EvalOutcome:
        async with semaphore:
            return await asyncio.to_thread(evaluate_example, model, vocab, example, plan, max_new, index)

    jobs = []
    for k in k_values:
        plan = InferencePlan(variant, k, c)
        jobs.extend(run_one(plan, i, example) for i, example in enumerate(examples))
    outcomes = list(await asyncio.gather(*jobs))
    report = EvalReport.from_outcomes(variant, outcomes)
    for k, summary in report.per_k.items():
        _LOGGER.info("k=%d accuracy=%.3f mean_new_tokens=%.2f", k, summary.accuracy, summary.mean_new_tokens)
    return report, outcomes


def evaluate(
    model: CausalTransformer,
    vocab: Vocabulary,
    examples: Sequence[ReasoningExample],
    k_values: Sequence[int],
    variant: str = VARIANT_COCONUT,
    c: int = 1,
    max_new: int = DEFAULT_MAX_NEW,
    workers: int = DEFAULT_EVAL_WORKERS,
) -> tuple[EvalReport, list[EvalOutcome]]:
    return asyncio.run(async_evaluate(model, vocab, examples, k_values, variant, c, max_new, workers))


def write_report(out_dir: str | Path, report: EvalReport, outcomes: Sequence[EvalOutcome]) -> None:
    """``report.json``, ``trace.jsonl`` and the per-(k, category) share table.

    Timings go to ``timing.csv`` only, so the other three files are identical across reruns.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise DataError(f"Cannot write report to {out_dir}: {err}") from err
    write_jsonl(out_dir / "trace.jsonl", (o.to_dict() for o in outcomes))
    rows = [
        {"k": k, "category": category, "share": share, "accuracy": summary.accuracy}
        for k, summary in report.per_k.items()
        for category, share in summary.categories.items()
    ]
    write_csv(out_dir / "categories.csv", ("k", "category", "share", "accuracy"), rows)
    timings = [{"k": o.k, "example_id": o.example_id, "seconds": o.seconds} for o in outcomes]
    write_csv(out_dir / "timing.csv", ("k", "example_id", "seconds"), timings)
