"""Prompt conditions and instruction templates.

Every conditional probability in the pipeline is taken over the same output
sequence appended after one of three rendered contexts: the bare question, the
question plus a judgment block, or the question plus a reference-solution
block. Blocks are delimited with explicit sentinel lines so condition diffs
stay auditable, and the base prompt is a literal string prefix of the other
two conditions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .corpus import ReasoningExample, TokenSequence, Vocab, tokenize

TEMPLATE_VERSIONS = ("toy-v1", "paper-v1")
DEFAULT_TEMPLATE_VERSION = "toy-v1"

JUDGMENT_OPEN = "[JUDGMENT]"
JUDGMENT_CLOSE = "[/JUDGMENT]"
REFERENCE_OPEN = "[REFERENCE]"
REFERENCE_CLOSE = "[/REFERENCE]"

CORRECT_SENTINEL = "### The response is correct. ###"


class PromptCondition(enum.Enum):
    """The three contexts an output sequence can be scored under."""

    BASE = "base"
    JUDGE = "judge"
    STANDARD = "standard"


@dataclass(frozen=True)
class TemplateSet:
    """Versioned instruction texts backing the rendered prompts."""

    version: str
    cot_instruction: str
    judge_instruction: str


@dataclass(frozen=True)
class RenderedPrompt:
    condition: PromptCondition
    text: str
    token_ids: TokenSequence
    template_version: str


def _read_asset(version: str, name: str) -> str:
    root = resources.files(__package__) / "templates" / version / name
    return root.read_text(encoding="utf-8").rstrip("\n")


@lru_cache(maxsize=None)
def get_templates(version: str = DEFAULT_TEMPLATE_VERSION) -> TemplateSet:
    if version not in TEMPLATE_VERSIONS:
        raise ValueError(
            f"unknown template version {version!r}; expected one of {TEMPLATE_VERSIONS}"
        )
    return TemplateSet(
        version=version,
        cot_instruction=_read_asset(version, "cot_instruction.txt"),
        judge_instruction=_read_asset(version, "judge_instruction.txt"),
    )


def cot_instruction(version: str = DEFAULT_TEMPLATE_VERSION) -> str:
    """The fixed chain-of-thought instruction, including the '####' format rule."""
    return get_templates(version).cot_instruction


def judge_instruction(version: str = DEFAULT_TEMPLATE_VERSION) -> str:
    """The fixed judgment-generation instruction for the external judge."""
    return get_templates(version).judge_instruction


def render(
    condition: PromptCondition,
    example: ReasoningExample,
    templates: TemplateSet,
    vocab: Vocab,
) -> RenderedPrompt:
    """Render one prompt condition for an example.

    The base prompt is instruction plus question; the judge and standard
    prompts append a sentinel-delimited block to it, so the base text is a
    strict prefix of both. The scored output is appended after the full
    rendered prompt, never interleaved.
    """
    if not example.question:
        raise ValueError(f"example {example.id}: question is empty")
    base = f"{templates.cot_instruction}\nQuestion: {example.question}\n"
    if condition is PromptCondition.BASE:
        text = base
    elif condition is PromptCondition.JUDGE:
        if not example.judgment:
            raise ValueError(
                f"example {example.id}: judge condition requires a non-empty judgment"
            )
        text = f"{base}{JUDGMENT_OPEN}\n{example.judgment}\n{JUDGMENT_CLOSE}\n"
    elif condition is PromptCondition.STANDARD:
        if not example.standard_solution:
            raise ValueError(
                f"example {example.id}: standard condition requires a reference solution"
            )
        text = f"{base}{REFERENCE_OPEN}\n{example.standard_solution}\n{REFERENCE_CLOSE}\n"
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown condition {condition!r}")
    return RenderedPrompt(
        condition=condition,
        text=text,
        token_ids=tokenize(text, vocab),
        template_version=templates.version,
    )
