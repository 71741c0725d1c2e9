"""Reasoning examples and their JSONL files."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import DataError

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReasoningExample:
    """A question, its ordered language reasoning steps and the answer."""

    question: str
    steps: tuple[str, ...] = field(default_factory=tuple)
    answer: str = ""

    def __post_init__(self) -> None:
        if not self.answer:
            raise DataError("ReasoningExample needs a non-empty answer")
        object.__setattr__(self, "steps", tuple(self.steps))

    def to_dict(self) -> dict[str, Any]:
        return {"question": self.question, "steps": list(self.steps), "answer": self.answer}

    @classmethod
    def from_dict(cls, row: dict[str, Any]) -> ReasoningExample:
        try:
            steps = row.get("steps") or []
            if isinstance(steps, str):
                steps = [steps]
            return cls(question=str(row["question"]), steps=tuple(str(s) for s in steps), answer=str(row["answer"]))
        except KeyError as err:
            raise DataError(f"Example row lacks field {err}") from err


def load_examples(path: str | Path) -> list[ReasoningExample]:
    """Read a JSONL file of ``{"question", "steps", "answer"}`` rows."""
    path = Path(path)
    examples = []
    try:
        with path.open(encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    examples.append(ReasoningExample.from_dict(json.loads(line)))
                except json.JSONDecodeError as err:
                    raise DataError(f"{path}:{lineno}: invalid JSON: {err}") from err
    except OSError as err:
        raise DataError(f"Cannot read {path}: {err}") from err
    _LOGGER.debug("Loaded %d examples from %s", len(examples), path)
    return examples


def save_examples(path: str | Path, examples: Iterable[ReasoningExample]) -> int:
    path = Path(path)
    count = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for example in examples:
                handle.write(json.dumps(example.to_dict(), ensure_ascii=False) + "\n")
                count += 1
    except OSError as err:
        raise DataError(f"Cannot write {path}: {err}") from err
    return count


def write_jsonl(path: str | Path, rows: Iterable[dict[str, Any]]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for row in rows:
                handle.write(json.dumps(row, sort_keys=True) + "\n")
    except OSError as err:
        raise DataError(f"Cannot write {path}: {err}") from err


def write_csv(path: str | Path, fieldnames: Sequence[str], rows: Iterable[dict[str, Any]]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    except OSError as err:
        raise DataError(f"Cannot write {path}: {err}") from err
