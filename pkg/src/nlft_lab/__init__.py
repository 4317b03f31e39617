"""Desk-scale laboratory for natural-language fine-tuning (NLFT).

Implements token-level saliency allocation from conditional-probability
contrasts across prompt conditions, scale-weighted loss computation, and a
train/evaluate pipeline on small differentiable autoregressive models, with a
supervised fine-tuning baseline for comparison.
"""

__version__ = "0.1.0"

from . import collection, corpus, engine, evaluation, generation, judge, models
from . import prompts, saliency, scales, trainer
from .corpus import Dataset, ReasoningExample, Vocab, build_vocab, generate_synthetic
from .generation import DecodeConfig, ModelGenerator, OracleTeacher
from .instrumentation import Counters
from .models import TabularLM, TinyTransformer, TransformerConfig
from .saliency import NlftConfig
from .trainer import TrainConfig, train

__all__ = [
    "collection",
    "corpus",
    "engine",
    "evaluation",
    "generation",
    "judge",
    "models",
    "prompts",
    "saliency",
    "scales",
    "trainer",
    "Dataset",
    "ReasoningExample",
    "Vocab",
    "build_vocab",
    "generate_synthetic",
    "DecodeConfig",
    "ModelGenerator",
    "OracleTeacher",
    "Counters",
    "TabularLM",
    "TinyTransformer",
    "TransformerConfig",
    "NlftConfig",
    "TrainConfig",
    "train",
    "__version__",
]
