"""Saliency token allocation from probability contrasts.

Correct outputs: a token is salient when its probability under the standard
(reference-solution) context exceeds a threshold; neighbors inside the same
punctuation-bounded phrase become sub-salient. Incorrect outputs: a token is
salient when its judge-context probability dominates both the base and
standard contexts by a ratio margin and clears an absolute floor; everything
else is irrelevant. Incorrect examples whose salient fraction is too large
are filtered out of training entirely.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .collection import ConditionProbTable
from .fileio import atomic_write_text

PHRASE_PUNCTUATION = {".", ";", "\n"}


class TokenLabel(enum.Enum):
    SALIENCY = "saliency"
    SUB_SALIENCY = "sub_saliency"
    IRRELEVANT = "irrelevant"


@dataclass(frozen=True)
class NlftConfig:
    """All method hyperparameters plus the artifact's own knobs."""

    p0_correct: float = 0.95
    p0_incorrect: float = 0.01
    r0: float = 1.5
    c1: float = 5.0
    c2: float = 0.3
    c3: float = 0.6
    eps: float = 1e-12
    cluster_radius: int = 2
    filter_threshold: float = 0.5
    loss_convention: str = "unlikelihood"  # or "literal"
    # Which probability the incorrect-branch absolute floor applies to.
    incorrect_prob_source: str = "judge"  # or "base"

    def __post_init__(self):
        if not 0.0 < self.p0_incorrect < self.p0_correct < 1.0:
            raise ValueError("need 0 < p0_incorrect < p0_correct < 1")
        if self.r0 <= 0.0:
            raise ValueError("r0 must be positive")
        if self.c1 <= 0.0:
            raise ValueError("c1 must be positive")
        if not self.c2 < self.c3:
            raise ValueError("c2 must be strictly less than c3")
        if not 0.0 < self.filter_threshold <= 1.0:
            raise ValueError("filter_threshold must lie in (0, 1]")
        if self.eps <= 0.0 or self.eps >= 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.cluster_radius < 0:
            raise ValueError("cluster_radius must be >= 0")
        if self.loss_convention not in ("unlikelihood", "literal"):
            raise ValueError(f"unknown loss convention {self.loss_convention!r}")
        if self.incorrect_prob_source not in ("judge", "base"):
            raise ValueError(
                f"unknown incorrect_prob_source {self.incorrect_prob_source!r}"
            )


@dataclass(frozen=True)
class RatioPair:
    r1: float
    r2: float

    def __post_init__(self):
        if not (math.isfinite(self.r1) and math.isfinite(self.r2)):
            raise ValueError("ratios must be finite")
        if self.r1 <= 0.0 or self.r2 <= 0.0:
            raise ValueError("ratios must be positive")


@dataclass(frozen=True)
class SaliencyAssignment:
    example_id: str
    labels: tuple[TokenLabel, ...]
    branch: str  # "correct" or "incorrect"
    ratios: Optional[tuple[RatioPair, ...]] = None
    filtered_out: bool = False
    # Incorrect branch only: indices that clustering would have marked as
    # sub-salient; they stay irrelevant (scale zero) and are kept purely as
    # a diagnostic annotation.
    cluster_neighbors: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.branch not in ("correct", "incorrect"):
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.branch == "incorrect":
            if any(lab is TokenLabel.SUB_SALIENCY for lab in self.labels):
                raise ValueError("incorrect branch admits only saliency/irrelevant")
            if self.ratios is None or len(self.ratios) != len(self.labels):
                raise ValueError("incorrect branch requires one ratio pair per token")
        elif self.ratios is not None:
            raise ValueError("correct branch carries no ratios")

    def saliency_indices(self) -> list[int]:
        return [i for i, lab in enumerate(self.labels) if lab is TokenLabel.SALIENCY]

    def __len__(self) -> int:
        return len(self.labels)


def phrase_ids(tokens: Sequence[str]) -> np.ndarray:
    """Phrase index per token; sentence punctuation closes its own phrase."""
    ids = np.zeros(len(tokens), dtype=np.int64)
    current = 0
    for i, tok in enumerate(tokens):
        ids[i] = current
        if tok in PHRASE_PUNCTUATION:
            current += 1
    return ids


def cluster_sub_saliency(
    tokens: Sequence[str],
    saliency_indices: Sequence[int],
    config: NlftConfig,
) -> set[int]:
    """Non-salient tokens in the same phrase and within the cluster radius.

    A phrase is a maximal run of tokens not separated by sentence
    punctuation (period, semicolon, newline); the closing punctuation token
    belongs to the phrase it terminates.
    """
    n = len(tokens)
    saliency = set(int(i) for i in saliency_indices)
    for i in saliency:
        if not 0 <= i < n:
            raise ValueError(f"saliency index {i} out of range for {n} tokens")
    if config.cluster_radius == 0 or not saliency:
        return set()
    phrases = phrase_ids(tokens)
    out: set[int] = set()
    for i in saliency:
        lo = max(0, i - config.cluster_radius)
        hi = min(n - 1, i + config.cluster_radius)
        for j in range(lo, hi + 1):
            if j not in saliency and phrases[j] == phrases[i]:
                out.add(j)
    return out


def allocate_correct(table: ConditionProbTable, config: NlftConfig) -> SaliencyAssignment:
    """Threshold rule on the standard-context probability, then clustering."""
    if not table.is_correct:
        raise ValueError(f"example {table.example_id}: correct-branch allocator "
                         "requires a correct output")
    saliency = {t for t in range(len(table)) if table.p_standard[t] > config.p0_correct}
    sub = cluster_sub_saliency(table.tokens, sorted(saliency), config)
    labels = tuple(
        TokenLabel.SALIENCY if t in saliency
        else TokenLabel.SUB_SALIENCY if t in sub
        else TokenLabel.IRRELEVANT
        for t in range(len(table))
    )
    return SaliencyAssignment(
        example_id=table.example_id, labels=labels, branch="correct"
    )


def allocate_incorrect(table: ConditionProbTable, config: NlftConfig) -> SaliencyAssignment:
    """Conjunction rule: both ratios above r0 and the probability floor met.

    Clustering around incorrect-branch saliency tokens is recorded as a
    diagnostic only; the neighbors stay irrelevant and will receive scale
    zero downstream.
    """
    if table.is_correct:
        raise ValueError(f"example {table.example_id}: incorrect-branch allocator "
                         "requires an incorrect output")
    p_judge = np.asarray(table.p_judge, dtype=np.float64)
    p_base = np.maximum(np.asarray(table.p_base, dtype=np.float64), config.eps)
    p_standard = np.maximum(np.asarray(table.p_standard, dtype=np.float64), config.eps)
    r1 = p_judge / p_base
    r2 = p_judge / p_standard
    floor_prob = p_judge if config.incorrect_prob_source == "judge" else p_base
    salient = (r1 > config.r0) & (r2 > config.r0) & (floor_prob > config.p0_incorrect)
    labels = tuple(
        TokenLabel.SALIENCY if salient[t] else TokenLabel.IRRELEVANT
        for t in range(len(table))
    )
    neighbors = cluster_sub_saliency(
        table.tokens, [t for t in range(len(table)) if salient[t]], config
    )
    assignment = SaliencyAssignment(
        example_id=table.example_id,
        labels=labels,
        branch="incorrect",
        ratios=tuple(RatioPair(float(a), float(b)) for a, b in zip(r1, r2)),
        cluster_neighbors=frozenset(neighbors),
    )
    return replace(assignment, filtered_out=should_filter(assignment, config))


def erroneous_fraction(assignment: SaliencyAssignment) -> float:
    """Fraction of the output flagged as erroneous (incorrect branch only)."""
    if assignment.branch != "incorrect":
        raise ValueError("erroneous fraction applies to the incorrect branch only")
    if len(assignment) == 0:
        return 0.0
    return len(assignment.saliency_indices()) / len(assignment)


def should_filter(assignment: SaliencyAssignment, config: NlftConfig) -> bool:
    """True when the erroneous fraction strictly exceeds the filter threshold."""
    return erroneous_fraction(assignment) > config.filter_threshold


# ---------------------------------------------------------------------------
# JSONL serialization for the report tooling
# ---------------------------------------------------------------------------

def assignment_to_record(assignment: SaliencyAssignment) -> dict:
    record = {
        "example_id": assignment.example_id,
        "labels": [lab.value for lab in assignment.labels],
        "branch": assignment.branch,
        "filtered": assignment.filtered_out,
        "cluster_neighbors": sorted(assignment.cluster_neighbors),
    }
    if assignment.ratios is not None:
        record["r1"] = [pair.r1 for pair in assignment.ratios]
        record["r2"] = [pair.r2 for pair in assignment.ratios]
    return record


def assignment_from_record(record: dict) -> SaliencyAssignment:
    ratios = None
    if "r1" in record:
        ratios = tuple(RatioPair(a, b) for a, b in zip(record["r1"], record["r2"]))
    return SaliencyAssignment(
        example_id=record["example_id"],
        labels=tuple(TokenLabel(v) for v in record["labels"]),
        branch=record["branch"],
        ratios=ratios,
        filtered_out=record.get("filtered", False),
        cluster_neighbors=frozenset(record.get("cluster_neighbors", ())),
    )


def save_assignments(assignments, path: str | Path) -> None:
    lines = [json.dumps(assignment_to_record(assignment)) for assignment in assignments]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_assignments(path: str | Path) -> list[SaliencyAssignment]:
    out = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                out.append(assignment_from_record(json.loads(line)))
    return out
