"""Text-level output generation on top of the token-level engine.

Anything that can produce an output string for an example can drive both the
teaching/self-study data flows and accuracy evaluation. Two implementations
ship: a sampling wrapper around a differentiable model, and an oracle teacher
that emits the reference solution verbatim (the stand-in for a stronger
external generator).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from . import engine
from .corpus import ReasoningExample, Vocab, detokenize
from .instrumentation import Counters
from .models.base import DifferentiableLM
from .prompts import PromptCondition, get_templates, render


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 0.6
    max_tokens: int = 512
    seed: int = 0


def example_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    """Stable per-example sampling seed, independent of batch composition."""
    return np.random.SeedSequence([int(base_seed), int(index)])


class OutputGenerator(Protocol):
    def generate_output(
        self, example: ReasoningExample, decode: DecodeConfig, index: int
    ) -> str: ...


class OracleTeacher:
    """Emits the reference solution verbatim; every output is correct."""

    def generate_output(
        self, example: ReasoningExample, decode: DecodeConfig, index: int
    ) -> str:
        return example.standard_solution


class ModelGenerator:
    """Samples an output from a model under the base prompt condition."""

    def __init__(
        self,
        model: DifferentiableLM,
        vocab: Vocab,
        template_version: str = "toy-v1",
        counter: Optional[Counters] = None,
    ):
        self.model = model
        self.vocab = vocab
        self.templates = get_templates(template_version)
        self.counter = counter

    def generate_output(
        self, example: ReasoningExample, decode: DecodeConfig, index: int
    ) -> str:
        prompt = render(PromptCondition.BASE, example, self.templates, self.vocab)
        ids = engine.generate(
            self.model,
            prompt.token_ids.ids,
            temperature=decode.temperature,
            max_tokens=decode.max_tokens,
            seed=example_seed(decode.seed, index),
            eos_id=self.vocab.eos_id,
            counter=self.counter,
        )
        return detokenize(ids, self.vocab)
