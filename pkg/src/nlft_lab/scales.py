"""Per-token scale values and the scale-weighted objectives.

Correct branch: salient tokens get 1 + ((p - p0)/(1 - p0))^c1, sub-salient
tokens (p/p0)^c2, irrelevant tokens (p/p0)^c3 with c2 < c3, all driven by the
standard-context probability. Incorrect branch: salient tokens get the
sigmoid form 2 / (1 + exp(-(r1 - r0))) and irrelevant tokens exactly zero.

Two loss conventions are exposed. The default, minimized form pushes base-
context probabilities of correct-output tokens up and of incorrect-output
saliency tokens down (an unlikelihood term). The signed "literal" form
reproduces the printed objective exactly and is kept for study; minimizing
it drives the probabilities the opposite way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .collection import ConditionProbTable
from .saliency import NlftConfig, SaliencyAssignment, TokenLabel

LOSS_CONVENTIONS = ("unlikelihood", "literal")


@dataclass(frozen=True, eq=False)
class ScaleVector:
    values: np.ndarray
    branch: str


@dataclass(frozen=True)
class LossValue:
    value: float
    n_tokens: int
    per_token_terms: Optional[list[np.ndarray]] = None


@dataclass(frozen=True, eq=False)
class TokenTermSpec:
    """Per-example weight vector for the model-side gradient computation.

    loss = constant + sum_t weights[t] * term_t, where term_t is
    -log P(y_t | base context) or, where the mask is set, -log(1 - P).
    """

    weights: np.ndarray
    unlikelihood_mask: np.ndarray
    constant: float


def scale_correct(label: TokenLabel, p_standard_t: float, config: NlftConfig) -> float:
    """Correct-branch scale for one token, from its standard-context probability."""
    p = min(max(float(p_standard_t), config.eps), 1.0)
    p0 = config.p0_correct
    if label is TokenLabel.SALIENCY:
        if p <= p0:
            raise ValueError(
                f"saliency scale requires p > {p0}, got {p}; allocation bug upstream"
            )
        return 1.0 + ((p - p0) / (1.0 - p0)) ** config.c1
    if label is TokenLabel.SUB_SALIENCY:
        return (p / p0) ** config.c2
    if label is TokenLabel.IRRELEVANT:
        return (p / p0) ** config.c3
    raise ValueError(f"unknown label {label!r}")


def scale_incorrect(label: TokenLabel, r1_t: float, config: NlftConfig) -> float:
    """Incorrect-branch scale for one token, from its judge/base ratio."""
    if label is TokenLabel.SALIENCY:
        return 2.0 / (1.0 + np.exp(-(float(r1_t) - config.r0)))
    if label is TokenLabel.IRRELEVANT:
        return 0.0
    raise ValueError(f"label {label!r} does not occur on the incorrect branch")


def scale_vector(
    table: ConditionProbTable,
    assignment: SaliencyAssignment,
    config: NlftConfig,
) -> ScaleVector:
    if len(table) != len(assignment):
        raise ValueError(
            f"example {table.example_id}: table has {len(table)} tokens, "
            f"assignment has {len(assignment)}"
        )
    if assignment.branch == "correct":
        values = np.array(
            [
                scale_correct(lab, table.p_standard[t], config)
                for t, lab in enumerate(assignment.labels)
            ]
        )
    else:
        values = np.array(
            [
                scale_incorrect(lab, assignment.ratios[t].r1, config)
                for t, lab in enumerate(assignment.labels)
            ]
        )
    return ScaleVector(values=values, branch=assignment.branch)


def _term_spec(
    scales: ScaleVector, n_norm: int, convention: str
) -> TokenTermSpec:
    """Weights handed to the gradient path for one example."""
    share = scales.values / float(n_norm)
    if convention == "unlikelihood":
        if scales.branch == "correct":
            return TokenTermSpec(share, np.zeros(len(share), dtype=bool), 0.0)
        return TokenTermSpec(share, share != 0.0, 0.0)
    if convention == "literal":
        if scales.branch == "correct":
            # S * log P == -(S) * (-log P)
            return TokenTermSpec(-share, np.zeros(len(share), dtype=bool), 0.0)
        # S * (1 - log P) == S + S * (-log P)
        return TokenTermSpec(share, np.zeros(len(share), dtype=bool), float(share.sum()))
    raise ValueError(f"unknown loss convention {convention!r}")


def loss_from_scales(
    scale_vectors: Sequence[ScaleVector],
    p_base_vectors: Sequence[np.ndarray],
    config: NlftConfig,
    keep_terms: bool = False,
) -> tuple[LossValue, list[TokenTermSpec]]:
    """Scale-weighted objective over a batch, normalized by total token count.

    The value is computed from the supplied (snapshot) base-context
    probabilities; the returned term specs let the model side recompute the
    same objective with live probabilities for the gradient.
    """
    n_tokens = int(sum(len(s.values) for s in scale_vectors))
    if n_tokens == 0:
        return LossValue(0.0, 0, [] if keep_terms else None), []
    specs = []
    total = 0.0
    breakdown: list[np.ndarray] = []
    for scales, p_base in zip(scale_vectors, p_base_vectors):
        if len(scales.values) != len(p_base):
            raise ValueError("scale and probability vectors must share length")
        spec = _term_spec(scales, n_tokens, config.loss_convention)
        p = np.clip(np.asarray(p_base, dtype=np.float64), config.eps, 1.0 - config.eps)
        terms = -np.log(p)
        if np.any(spec.unlikelihood_mask):
            terms = terms.copy()
            terms[spec.unlikelihood_mask] = -np.log1p(-p[spec.unlikelihood_mask])
        contrib = spec.weights * terms
        total += spec.constant + float(contrib.sum())
        specs.append(spec)
        if keep_terms:
            breakdown.append(contrib)
    return LossValue(total, n_tokens, breakdown if keep_terms else None), specs


def nlft_loss(
    items: Sequence[tuple[ConditionProbTable, SaliencyAssignment]],
    config: NlftConfig,
    keep_terms: bool = False,
) -> tuple[LossValue, list[TokenTermSpec]]:
    """Objective for a batch of unfiltered examples plus gradient-path weights.

    N is the total token count over the batch. Filtered assignments are the
    caller's responsibility to exclude; passing one raises.
    """
    for _, assignment in items:
        if assignment.filtered_out:
            raise ValueError(
                f"example {assignment.example_id} is filtered out; "
                "exclude it before computing the loss"
            )
    scale_vectors = [scale_vector(t, a, config) for t, a in items]
    p_base_vectors = [t.p_base for t, _ in items]
    return loss_from_scales(scale_vectors, p_base_vectors, config, keep_terms=keep_terms)


def sft_loss(y: Sequence[int], logp_base: Sequence[float]) -> LossValue:
    """Plain token-mean negative log-likelihood baseline."""
    logp = np.asarray(logp_base, dtype=np.float64)
    if len(logp) != len(y):
        raise ValueError("need one log-probability per output token")
    if len(logp) == 0:
        return LossValue(0.0, 0)
    return LossValue(float(-logp.mean()), len(logp))
