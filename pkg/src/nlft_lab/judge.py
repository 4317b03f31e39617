"""Natural-language judgments for incorrect outputs.

Two judges ship: a deterministic rule-based judge that re-evaluates every
arithmetic step of a synthetic-task output, and a remote chat-completions
client with retry and an on-disk cache. The correctness flag used for branch
selection always comes from the numeric answer check; a disagreeing judge
verdict is logged, never trusted.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

from .corpus import Dataset, ReasoningExample, score_answer
from .prompts import CORRECT_SENTINEL, judge_instruction

RULE_JUDGE_VERSION = "rule-v1"
FORMAT_JUDGMENT = "The response does not follow the required format."

_STEP_RE = re.compile(r"(\d+)\s*([+\-*/])\s*(\d+)\s*=\s*(\d+)")

_OPS = {
    "+": lambda a, b: Fraction(a) + b,
    "-": lambda a, b: Fraction(a) - b,
    "*": lambda a, b: Fraction(a) * b,
    "/": lambda a, b: Fraction(a, b) if b != 0 else None,
}


class JudgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Judgment:
    text: str
    verdict: str  # "correct" or "incorrect"
    source: str  # "rule" or "remote"
    cache_key: str

    def __post_init__(self):
        correct = self.text == CORRECT_SENTINEL
        if correct != (self.verdict == "correct"):
            raise ValueError("verdict must mirror the exact sentinel text")


def judgment_cache_key(
    question: str, output: str, solution: str, judge_version: str
) -> str:
    digest = hashlib.sha256()
    for part in (question, output, solution, judge_version):
        digest.update(part.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()


def _verdict_for(text: str) -> str:
    return "correct" if text == CORRECT_SENTINEL else "incorrect"


def rule_judge(example: ReasoningExample) -> Judgment:
    """Re-evaluate each 'a op b = c' step and the final answer exactly."""
    if example.generated_output is None:
        raise ValueError(f"example {example.id} has no output to judge")
    output = example.generated_output
    key = judgment_cache_key(
        example.question, output, example.standard_solution, RULE_JUDGE_VERSION
    )
    steps = _STEP_RE.findall(output)
    extracted = score_answer(output)
    if not steps and extracted is None:
        return Judgment(FORMAT_JUDGMENT, "incorrect", "rule", key)

    problems = []
    for a_s, op, b_s, c_s in steps:
        a, b, c = int(a_s), int(b_s), int(c_s)
        truth = _OPS[op](a, b)
        if truth == c:
            continue
        quoted = f"{a} {op} {b} = {c}"
        if truth is not None and truth.denominator == 1:
            problems.append(
                f"The step '{quoted}' is incorrect; {a} {op} {b} = {int(truth)}."
            )
        else:
            problems.append(f"The step '{quoted}' is incorrect.")
    if extracted is None:
        problems.append("The final answer is not in the required format.")
    elif extracted != example.standard_answer:
        shown = int(extracted) if extracted.denominator == 1 else extracted
        truth = (
            int(example.standard_answer)
            if example.standard_answer.denominator == 1
            else example.standard_answer
        )
        problems.append(
            f"The final answer {shown} is incorrect; the correct answer is {truth}."
        )

    if not problems:
        return Judgment(CORRECT_SENTINEL, "correct", "rule", key)
    return Judgment(" ".join(problems), "incorrect", "rule", key)


# ---------------------------------------------------------------------------
# Remote judge (chat-completions protocol)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JudgeClientConfig:
    endpoint: str
    model: str
    max_concurrency: int = 4
    cache_dir: Optional[str] = None
    api_key_env: str = "NLFT_JUDGE_API_KEY"
    timeout_s: float = 60.0
    max_attempts: int = 3
    backoff_s: float = 1.0
    template_version: str = "toy-v1"

    @property
    def judge_version(self) -> str:
        return f"remote-{self.model}"


def _default_transport(url: str, headers: dict, payload: dict, timeout_s: float) -> dict:
    import requests

    response = requests.post(url, headers=headers, json=payload, timeout=timeout_s)
    response.raise_for_status()
    return response.json()


def remote_judge(
    config: JudgeClientConfig,
    example: ReasoningExample,
    transport: Optional[Callable] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> Judgment:
    """Request a judgment over HTTP with exponential-backoff retries."""
    if example.generated_output is None:
        raise ValueError(f"example {example.id} has no output to judge")
    api_key = os.environ.get(config.api_key_env)
    if not api_key:
        raise JudgeError(
            f"no credential found in environment variable {config.api_key_env}"
        )
    transport = transport or _default_transport
    content = (
        f"{judge_instruction(config.template_version)}\n\n"
        f"Problem: {example.question}\n"
        f"Student's response: {example.generated_output}\n"
        f"Correct answer: {example.standard_answer}\n"
    )
    payload = {
        "model": config.model,
        "messages": [{"role": "user", "content": content}],
    }
    headers = {
        "Content-Type": "application/json",
        "Authorization": f"Bearer {api_key}",
    }
    last_error: Optional[Exception] = None
    for attempt in range(config.max_attempts):
        try:
            reply = transport(config.endpoint, headers, payload, config.timeout_s)
            text = reply["choices"][0]["message"]["content"].strip()
            key = judgment_cache_key(
                example.question,
                example.generated_output,
                example.standard_solution,
                config.judge_version,
            )
            return Judgment(text, _verdict_for(text), "remote", key)
        except Exception as exc:  # noqa: BLE001 - any transport failure retries
            last_error = exc
            if attempt + 1 < config.max_attempts:
                sleep(config.backoff_s * (2**attempt))
    raise JudgeError(
        f"judge request to {config.endpoint} failed after "
        f"{config.max_attempts} attempts: {last_error}"
    )


class JudgmentCache:
    """Content-addressed on-disk store; writes are temp-then-rename atomic."""

    def __init__(self, cache_dir: str | Path):
        self.path = Path(cache_dir) / "judgments.jsonl"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._entries: dict[str, Judgment] = {}
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as handle:
                for line in handle:
                    if not line.strip():
                        continue
                    record = json.loads(line)
                    self._entries[record["cache_key"]] = Judgment(
                        text=record["text"],
                        verdict=record["verdict"],
                        source=record["source"],
                        cache_key=record["cache_key"],
                    )

    def get(self, key: str) -> Optional[Judgment]:
        return self._entries.get(key)

    def put(self, key: str, judgment: Judgment) -> None:
        self._entries[key] = judgment
        tmp = self.path.with_suffix(".tmp")
        with tmp.open("w", encoding="utf-8") as handle:
            for entry_key, entry in self._entries.items():
                handle.write(
                    json.dumps(
                        {
                            "cache_key": entry_key,
                            "text": entry.text,
                            "verdict": entry.verdict,
                            "source": entry.source,
                        }
                    )
                )
                handle.write("\n")
        tmp.replace(self.path)

    def __len__(self) -> int:
        return len(self._entries)


def judge_dataset(
    dataset: Dataset,
    judge: Callable[[ReasoningExample], Judgment],
    cache: Optional[JudgmentCache] = None,
    judge_version: str = RULE_JUDGE_VERSION,
    max_concurrency: int = 1,
) -> Dataset:
    """Fill judgments for every incorrect example; correct ones get none.

    Idempotent: examples that already carry a judgment are left alone, and a
    cache hit short-circuits the judge call entirely.
    """

    def needs_judgment(example: ReasoningExample) -> bool:
        if example.is_correct is None:
            if example.generated_output is not None:
                raise ValueError(
                    f"example {example.id} has an output but no correctness flag"
                )
            return False
        return not example.is_correct and example.judgment is None

    def one(example: ReasoningExample) -> ReasoningExample:
        if not needs_judgment(example):
            return example
        key = judgment_cache_key(
            example.question,
            example.generated_output,
            example.standard_solution,
            judge_version,
        )
        judgment = cache.get(key) if cache is not None else None
        if judgment is None:
            try:
                judgment = judge(example)
            except Exception as exc:
                raise JudgeError(f"judging example {example.id} failed: {exc}") from exc
            if cache is not None:
                cache.put(key, judgment)
        if (judgment.verdict == "correct") != bool(example.is_correct):
            warnings.warn(
                f"example {example.id}: judge verdict {judgment.verdict!r} disagrees "
                "with the numeric answer check; the numeric check wins",
                stacklevel=2,
            )
        return example.with_judgment(judgment.text)

    if max_concurrency <= 1:
        updated = [one(e) for e in dataset]
    else:
        with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
            updated = list(pool.map(one, dataset.examples))
    return Dataset(examples=tuple(updated), provenance=dict(dataset.provenance))
