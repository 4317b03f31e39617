"""Tokenization, dataset model, and the synthetic arithmetic reasoning task.

The corpus layer is deliberately tiny: a word-level tokenizer whose vocabulary
is enumerable up front, chain-of-thought solutions that end in a ``#### N``
answer marker, and a templated generator for 2-3 step arithmetic word problems
small enough to train a from-scratch model on a laptop CPU.
"""

from __future__ import annotations

import json
import random
import re
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

from .fileio import atomic_write_text

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)

ANSWER_MARKER = "####"

# Word-level rule: the answer marker stays atomic, digit runs and letter runs
# are single tokens, any other non-space character is its own token. This
# keeps "12+3" -> ["12", "+", "3"] so saliency lands on meaningful units.
_WORD_TOKEN_RE = re.compile(r"####|\d+|[A-Za-z]+|\S")
_CHAR_TOKEN_RE = re.compile(r"\S")


class FormatWarning(UserWarning):
    """Raised-as-warning for recoverable output-format violations."""


@dataclass(frozen=True)
class Vocab:
    """Dense token alphabet with reserved pad/bos/eos/unk ids."""

    tokens: tuple[str, ...]
    mode: str = "word"  # "word" or "char" token split rule

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab contains duplicate tokens")
        for special in SPECIAL_TOKENS:
            if special not in self.tokens:
                raise ValueError(f"vocab is missing special token {special!r}")
        if self.mode not in ("word", "char"):
            raise ValueError(f"unknown tokenizer mode {self.mode!r}")
        object.__setattr__(
            self, "_id_of", {tok: i for i, tok in enumerate(self.tokens)}
        )

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], mode: str = "word") -> "Vocab":
        """Build a vocab with the specials prepended in canonical order."""
        seen = dict.fromkeys(tokens)
        for special in SPECIAL_TOKENS:
            seen.pop(special, None)
        return cls(tokens=SPECIAL_TOKENS + tuple(seen), mode=mode)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._id_of.get(token, self.unk_id)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    @property
    def pad_id(self) -> int:
        return self._id_of[PAD_TOKEN]

    @property
    def bos_id(self) -> int:
        return self._id_of[BOS_TOKEN]

    @property
    def eos_id(self) -> int:
        return self._id_of[EOS_TOKEN]

    @property
    def unk_id(self) -> int:
        return self._id_of[UNK_TOKEN]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self._id_of[t] for t in SPECIAL_TOKENS)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus the character span each token covers in the source."""

    ids: tuple[int, ...]
    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.ids) != len(self.offsets):
            raise ValueError("ids and offsets must have equal length")
        prev_end = -1
        for start, end in self.offsets:
            if start < prev_end or end < start:
                raise ValueError("offsets must be ascending and non-overlapping")
            prev_end = end

    def __len__(self) -> int:
        return len(self.ids)


def surface_tokens(text: str, mode: str = "word") -> list[str]:
    """Split text into surface token strings under the given rule."""
    pattern = _WORD_TOKEN_RE if mode == "word" else _CHAR_TOKEN_RE
    return pattern.findall(text)


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    """Map text to token ids; out-of-vocabulary tokens become the unknown id."""
    pattern = _WORD_TOKEN_RE if vocab.mode == "word" else _CHAR_TOKEN_RE
    ids = []
    offsets = []
    for match in pattern.finditer(text):
        ids.append(vocab.id_of(match.group()))
        offsets.append(match.span())
    return TokenSequence(ids=tuple(ids), offsets=tuple(offsets))


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    """Render token ids back to text; specials are skipped."""
    specials = vocab.special_ids
    sep = " " if vocab.mode == "word" else ""
    return sep.join(vocab.token_of(i) for i in ids if i not in specials)


def normalize_text(text: str, mode: str = "word") -> str:
    """Whitespace-normal form: the surface tokens joined by single spaces."""
    sep = " " if mode == "word" else ""
    return sep.join(surface_tokens(text, mode))


def parse_number(text: str) -> Optional[Fraction]:
    """Parse a decimal number with optional sign and thousands commas."""
    cleaned = text.strip().replace(",", "")
    if not re.fullmatch(r"[+-]?(\d+(\.\d*)?|\.\d+)", cleaned):
        return None
    return Fraction(cleaned)


def extract_answer(text: str) -> Optional[Fraction]:
    """Return the number after the final '####' marker, or None.

    Multiple markers are tolerated (the last one wins) but flagged with a
    FormatWarning, since the expected output format uses the marker once.
    """
    pieces = text.split(ANSWER_MARKER)
    if len(pieces) < 2:
        return None
    if len(pieces) > 2:
        warnings.warn(
            f"output contains {len(pieces) - 1} '{ANSWER_MARKER}' markers; using the last",
            FormatWarning,
            stacklevel=2,
        )
    tail = pieces[-1].strip()
    match = re.match(r"[+-]?[\d,]+(\.\d+)?", tail)
    if match is None:
        return None
    return parse_number(match.group())


def score_answer(generated_output: str) -> Optional[Fraction]:
    """extract_answer for scoring arbitrary model output; format noise is
    expected there, so the warning is suppressed."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FormatWarning)
        return extract_answer(generated_output)


def check_correctness(generated_output: str, standard_answer: Fraction | int) -> bool:
    """True iff the extracted final answer equals the reference exactly."""
    extracted = score_answer(generated_output)
    return extracted is not None and extracted == Fraction(standard_answer)


@dataclass(frozen=True)
class ReasoningExample:
    """One task instance: question, reference solution, and model artifacts."""

    id: str
    question: str
    standard_solution: str
    standard_answer: Fraction
    generated_output: Optional[str] = None
    judgment: Optional[str] = None
    is_correct: Optional[bool] = None

    def __post_init__(self):
        if self.is_correct is not None and self.generated_output is None:
            raise ValueError(f"example {self.id}: is_correct set without an output")
        solution_answer = extract_answer(self.standard_solution)
        if solution_answer != self.standard_answer:
            raise ValueError(
                f"example {self.id}: solution answer {solution_answer} "
                f"!= standard answer {self.standard_answer}"
            )

    def with_output(self, output: str, is_correct: bool) -> "ReasoningExample":
        # A new output invalidates any judgment of the previous one.
        return replace(
            self, generated_output=output, is_correct=is_correct, judgment=None
        )

    def with_judgment(self, judgment: str) -> "ReasoningExample":
        return replace(self, judgment=judgment)


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of examples with provenance."""

    examples: tuple[ReasoningExample, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise ValueError("dataset contains duplicate example ids")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, index: int) -> ReasoningExample:
        return self.examples[index]

    def map_examples(self, fn) -> "Dataset":
        return Dataset(
            examples=tuple(fn(e) for e in self.examples),
            provenance=dict(self.provenance),
        )


# ---------------------------------------------------------------------------
# Synthetic arithmetic word problems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Difficulty:
    """Knobs for the synthetic generator; defaults keep the vocab under 300."""

    operand_min: int = 1
    operand_max: int = 20
    steps: int = 2  # arithmetic lines per solution
    multiplier_max: int = 5
    value_cap: int = 200  # every value in a problem stays in [0, value_cap]


DIFFICULTY_PRESETS = {
    "easy": Difficulty(operand_max=10, steps=2),
    "default": Difficulty(),
    "hard": Difficulty(steps=3),
}

_NAMES = ("Alice", "Ben", "Carla", "Dev", "Emma", "Frank", "Grace", "Hugo")
_ITEMS = ("apples", "books", "coins", "pens", "stickers", "marbles", "cards", "shells")
# Exact word inventory of the question templates.
_TEMPLATE_WORDS = "has more gives away Then each of friends How many does have now".split()
# Exact word inventory of the rule judge's prose (see nlft_lab.judge).
_JUDGE_WORDS = (
    "The step is incorrect final answer correct the response not follow required format does"
).split()
# Exact word inventory of the toy prompt templates (see nlft_lab.prompts).
_PROMPT_WORDS = (
    "Solve the math problem STEP BY and end with answer Question JUDGMENT REFERENCE"
).split()


def _resolve_difficulty(difficulty: str | Difficulty) -> Difficulty:
    if isinstance(difficulty, Difficulty):
        return difficulty
    try:
        return DIFFICULTY_PRESETS[difficulty]
    except KeyError:
        raise ValueError(
            f"unknown difficulty {difficulty!r}; expected one of {sorted(DIFFICULTY_PRESETS)}"
        ) from None


def build_vocab(difficulty: str | Difficulty = "default", mode: str = "word") -> Vocab:
    """Enumerate every token the toy pipeline can emit.

    Covers generator output, the toy prompt templates, and rule-judge prose,
    so the round trip through token ids is lossless end to end.
    """
    diff = _resolve_difficulty(difficulty)
    tokens: list[str] = [ANSWER_MARKER, "#"]
    tokens.extend(str(n) for n in range(diff.value_cap + 1))
    tokens.extend(["+", "-", "*", "/", "=", ".", ",", "?", ":", ";", "'", "[", "]"])
    tokens.extend(_PROMPT_WORDS)
    tokens.extend(_NAMES)
    tokens.extend(_ITEMS)
    tokens.extend(_TEMPLATE_WORDS)
    tokens.extend(_JUDGE_WORDS)
    return Vocab.from_tokens(tokens, mode=mode)


def _step_line(a: int, op: str, b: int, c: int) -> str:
    return f"{a} {op} {b} = {c}."


def _make_problem(rng: random.Random, diff: Difficulty) -> tuple[str, str, int]:
    """Sample one word problem; returns (question, solution, answer)."""
    while True:
        name = rng.choice(_NAMES)
        other = rng.choice([n for n in _NAMES if n != name])
        item = rng.choice(_ITEMS)
        value = rng.randint(diff.operand_min, diff.operand_max)

        question_parts = [f"{name} has {value} {item}."]
        solution_lines = []
        lines_left = diff.steps
        ok = True
        while lines_left > 0:
            kinds = ["gain", "loss"]
            if lines_left >= 2:
                kinds.append("multi_gift")
            kind = rng.choice(kinds)
            if kind == "gain":
                b = rng.randint(diff.operand_min, diff.operand_max)
                question_parts.append(f"Then {other} gives {name} {b} more {item}.")
                solution_lines.append(_step_line(value, "+", b, value + b))
                value += b
                lines_left -= 1
            elif kind == "loss":
                if value < diff.operand_min:
                    ok = False
                    break
                b = rng.randint(diff.operand_min, min(diff.operand_max, value))
                question_parts.append(f"Then {name} gives away {b} {item}.")
                solution_lines.append(_step_line(value, "-", b, value - b))
                value -= b
                lines_left -= 1
            else:  # multi_gift: one multiply line, one add line
                k = rng.randint(2, diff.multiplier_max)
                b = rng.randint(diff.operand_min, diff.operand_max)
                question_parts.append(
                    f"Then each of {k} friends gives {name} {b} {item}."
                )
                solution_lines.append(_step_line(k, "*", b, k * b))
                solution_lines.append(_step_line(value, "+", k * b, value + k * b))
                value += k * b
                lines_left -= 2
            if value > diff.value_cap:
                ok = False
                break
        if not ok:
            continue
        question_parts.append(f"How many {item} does {name} have now?")
        solution_lines.append(f"{ANSWER_MARKER} {value}")
        return " ".join(question_parts), "\n".join(solution_lines), value


def generate_synthetic(
    seed: int, count: int, difficulty: str | Difficulty = "default"
) -> Dataset:
    """Deterministically generate templated arithmetic word problems."""
    if count < 1:
        raise ValueError("count must be >= 1")
    diff = _resolve_difficulty(difficulty)
    rng = random.Random(seed)
    examples = []
    for i in range(count):
        question, solution, answer = _make_problem(rng, diff)
        examples.append(
            ReasoningExample(
                id=f"syn-{seed}-{i:05d}",
                question=question,
                standard_solution=solution,
                standard_answer=Fraction(answer),
            )
        )
    provenance = {
        "source": "synthetic-arithmetic",
        "seed": seed,
        "split": f"full[{count}]",
        "difficulty": difficulty if isinstance(difficulty, str) else "custom",
    }
    return Dataset(examples=tuple(examples), provenance=provenance)


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Fisher-Yates shuffle of the whole dataset, then take the first n.

    The shuffle covers the full dataset before truncation, so subset(D, m, s)
    is a prefix of subset(D, n, s) whenever m <= n.
    """
    if not 1 <= n <= len(dataset):
        raise ValueError(f"n={n} out of range for dataset of size {len(dataset)}")
    order = list(dataset.examples)
    random.Random(seed).shuffle(order)
    provenance = dict(dataset.provenance)
    provenance["split"] = f"subset[n={n},seed={seed}]"
    return Dataset(examples=tuple(order[:n]), provenance=provenance)


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

_REQUIRED_FIELDS = ("id", "question", "solution", "answer")


def _answer_to_json(answer: Fraction):
    if answer.denominator == 1:
        return int(answer)
    return f"{answer.numerator}/{answer.denominator}"


def _answer_from_json(value) -> Fraction:
    if isinstance(value, bool):
        raise ValueError(f"answer must be a number, got {value!r}")
    if isinstance(value, (int, str)):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(str(value))
    raise ValueError(f"answer must be a number, got {value!r}")


def example_to_record(example: ReasoningExample) -> dict:
    return {
        "id": example.id,
        "question": example.question,
        "solution": example.standard_solution,
        "answer": _answer_to_json(example.standard_answer),
        "output": example.generated_output,
        "judgment": example.judgment,
        "correct": example.is_correct,
    }


def example_from_record(record: dict) -> ReasoningExample:
    return ReasoningExample(
        id=record["id"],
        question=record["question"],
        standard_solution=record["solution"],
        standard_answer=_answer_from_json(record["answer"]),
        generated_output=record.get("output"),
        judgment=record.get("judgment"),
        is_correct=record.get("correct"),
    )


def save_jsonl(dataset: Dataset, path: str | Path) -> None:
    """Write one example per line, UTF-8, with fixed field names."""
    lines = [
        json.dumps(example_to_record(example), ensure_ascii=False)
        for example in dataset
    ]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_jsonl(path: str | Path, provenance: Optional[dict] = None) -> Dataset:
    """Read a JSONL dataset; errors name the offending line and field."""
    path = Path(path)
    examples = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"malformed JSON at line {lineno}: {exc}") from None
            for name in _REQUIRED_FIELDS:
                if name not in record:
                    raise ValueError(f"missing field {name} at line {lineno}")
            examples.append(example_from_record(record))
    return Dataset(
        examples=tuple(examples),
        provenance=provenance or {"source": str(path), "split": "loaded"},
    )
