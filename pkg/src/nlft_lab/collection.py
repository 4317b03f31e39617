"""Per-token conditional probabilities of a fixed output under each condition.

A correct output is scored under the base and standard contexts (two forward
passes); an incorrect output additionally under the judge context (three).
The tables are snapshots: they carry no gradients and record which checkpoint
they came from.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import engine
from .corpus import Dataset, ReasoningExample, Vocab, tokenize
from .fileio import atomic_write_text
from .instrumentation import Counters
from .models.base import DifferentiableLM
from .prompts import PromptCondition, TemplateSet, render

DEFAULT_CLAMP_EPS = 1e-12


def output_token_ids(example: ReasoningExample, vocab: Vocab) -> np.ndarray:
    """Token ids of the generated output with the end-of-sequence id appended."""
    if example.generated_output is None:
        raise ValueError(f"example {example.id} has no generated output")
    ids = tokenize(example.generated_output, vocab).ids
    return np.asarray(list(ids) + [vocab.eos_id], dtype=np.int64)


def output_token_strings(example: ReasoningExample, vocab: Vocab) -> tuple[str, ...]:
    ids = output_token_ids(example, vocab)
    return tuple(vocab.token_of(int(i)) for i in ids)


@dataclass(frozen=True, eq=False)
class ConditionProbTable:
    """Clamped token probabilities for one example under each condition."""

    example_id: str
    tokens: tuple[str, ...]
    y_ids: tuple[int, ...]
    p_base: np.ndarray
    p_standard: np.ndarray
    p_judge: Optional[np.ndarray]
    is_correct: bool
    collected_at: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.y_ids)
        if len(self.tokens) != n:
            raise ValueError("tokens and y_ids must share length")
        vectors = [self.p_base, self.p_standard]
        if self.is_correct and self.p_judge is not None:
            raise ValueError("p_judge must be absent for correct outputs")
        if not self.is_correct:
            if self.p_judge is None:
                raise ValueError("p_judge must be present for incorrect outputs")
            vectors.append(self.p_judge)
        for vec in vectors:
            if len(vec) != n:
                raise ValueError("probability vectors must share the output length")
            if n and (vec.min() <= 0.0 or vec.max() > 1.0):
                raise ValueError("probabilities must lie in (0, 1] after clamping")

    def __len__(self) -> int:
        return len(self.y_ids)


def _clamped_probs(
    model: DifferentiableLM,
    prompt_ids,
    y_ids,
    eps: float,
    counter: Optional[Counters],
) -> np.ndarray:
    logp = engine.conditional_logprobs(model, prompt_ids, y_ids, counter=counter)
    return np.clip(np.exp(logp), eps, 1.0 - eps)


def collect(
    model: DifferentiableLM,
    example: ReasoningExample,
    templates: TemplateSet,
    vocab: Vocab,
    eps: float = DEFAULT_CLAMP_EPS,
    counter: Optional[Counters] = None,
    collected_at: Optional[dict] = None,
) -> ConditionProbTable:
    """Gather conditional probabilities for one example's output.

    Exactly two teacher-forced forwards on the correct branch (base,
    standard) and exactly three on the incorrect branch (base, judge,
    standard). The judge condition is never evaluated for correct outputs.
    """
    if example.is_correct is None:
        raise ValueError(f"example {example.id}: correctness flag not set")
    y = output_token_ids(example, vocab)
    base = render(PromptCondition.BASE, example, templates, vocab)
    p_base = _clamped_probs(model, base.token_ids.ids, y, eps, counter)
    p_judge = None
    if not example.is_correct:
        if not example.judgment:
            raise ValueError(f"example {example.id}: incorrect output has no judgment")
        judge_prompt = render(PromptCondition.JUDGE, example, templates, vocab)
        p_judge = _clamped_probs(model, judge_prompt.token_ids.ids, y, eps, counter)
    standard = render(PromptCondition.STANDARD, example, templates, vocab)
    p_standard = _clamped_probs(model, standard.token_ids.ids, y, eps, counter)
    return ConditionProbTable(
        example_id=example.id,
        tokens=output_token_strings(example, vocab),
        y_ids=tuple(int(i) for i in y),
        p_base=p_base,
        p_standard=p_standard,
        p_judge=p_judge,
        is_correct=bool(example.is_correct),
        collected_at=dict(collected_at or {}),
    )


def collect_batch(
    model: DifferentiableLM,
    dataset: Dataset,
    templates: TemplateSet,
    vocab: Vocab,
    eps: float = DEFAULT_CLAMP_EPS,
    parallelism: int = 1,
    counter: Optional[Counters] = None,
    collected_at: Optional[dict] = None,
) -> list[ConditionProbTable]:
    """Map collect over a dataset; results follow dataset order.

    The parameter snapshot is read-only during collection, so any
    parallelism degree yields identical tables. The first failure aborts
    the batch, naming the offending example.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    def one(example: ReasoningExample) -> ConditionProbTable:
        try:
            return collect(
                model, example, templates, vocab,
                eps=eps, counter=counter, collected_at=collected_at,
            )
        except Exception as exc:
            raise type(exc)(f"collect failed for example {example.id}: {exc}") from exc

    if len(dataset) == 0:
        return []
    if parallelism == 1:
        return [one(e) for e in dataset]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, dataset.examples))


# ---------------------------------------------------------------------------
# JSONL interchange (also the format an external LM could populate)
# ---------------------------------------------------------------------------

def table_to_record(table: ConditionProbTable) -> dict:
    record = {
        "example_id": table.example_id,
        "tokens": list(table.tokens),
        "y_ids": list(table.y_ids),
        "p_base": [float(p) for p in table.p_base],
        "p_standard": [float(p) for p in table.p_standard],
        "correct": table.is_correct,
        "collected_at": table.collected_at,
    }
    if table.p_judge is not None:
        record["p_judge"] = [float(p) for p in table.p_judge]
    return record


def table_from_record(record: dict) -> ConditionProbTable:
    p_judge = record.get("p_judge")
    return ConditionProbTable(
        example_id=record["example_id"],
        tokens=tuple(record["tokens"]),
        y_ids=tuple(record["y_ids"]),
        p_base=np.asarray(record["p_base"], dtype=np.float64),
        p_standard=np.asarray(record["p_standard"], dtype=np.float64),
        p_judge=None if p_judge is None else np.asarray(p_judge, dtype=np.float64),
        is_correct=record["correct"],
        collected_at=record.get("collected_at", {}),
    )


def save_tables(tables: list[ConditionProbTable], path: str | Path) -> None:
    lines = [json.dumps(table_to_record(table)) for table in tables]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_tables(path: str | Path) -> list[ConditionProbTable]:
    tables = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                tables.append(table_from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"malformed table record at line {lineno}: {exc}") from None
    return tables
