"""Model-agnostic inference and training primitives.

Everything here operates on the DifferentiableLM interface: teacher-forced
conditional log-probabilities, temperature sampling, weighted token losses
with exact parameter gradients, and self-describing checkpoints.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fileio import atomic_write_text
from .instrumentation import Counters
from .models.base import DifferentiableLM
from .models.tabular import TabularLM
from .models.transformer import TinyTransformer

CHECKPOINT_FORMAT_VERSION = 1

_MODEL_CLASSES = {
    "tabular": TabularLM,
    "tiny_transformer": TinyTransformer,
}


class ContextOverflowError(ValueError):
    def __init__(self, required: int, available: int):
        super().__init__(
            f"sequence needs {required} positions but the context window has {available}"
        )
        self.required = required
        self.available = available


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


def _log1mexp(logp: np.ndarray) -> np.ndarray:
    """log(1 - exp(logp)) for logp <= 0, numerically stable in both regimes."""
    logp = np.asarray(logp, dtype=np.float64)
    out = np.full_like(logp, -np.inf)
    small = logp < -np.log(2.0)  # exp(logp) < 1/2
    with np.errstate(divide="ignore"):
        out[small] = np.log1p(-np.exp(logp[small]))
        big = ~small & (logp < 0)
        out[big] = np.log(-np.expm1(logp[big]))
    return out


def _concat_ids(prompt: Sequence[int], y: Sequence[int]) -> np.ndarray:
    return np.concatenate(
        [np.asarray(prompt, dtype=np.int64), np.asarray(y, dtype=np.int64)]
    )


def _check_window(model: DifferentiableLM, prompt, y) -> None:
    required = len(prompt) + len(y)
    if required > model.context_window:
        raise ContextOverflowError(required, model.context_window)
    if len(prompt) == 0:
        raise ValueError("prompt must contain at least one token")


def conditional_logprobs(
    model: DifferentiableLM,
    prompt: Sequence[int],
    y: Sequence[int],
    counter: Optional[Counters] = None,
    purpose: str = "collection",
) -> np.ndarray:
    """Teacher-forced log P(y_t | prompt, y_<t) per output position, base e."""
    _check_window(model, prompt, y)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        return np.zeros(0, dtype=np.float64)
    ids = _concat_ids(prompt, y)
    logits = model.forward_logits(ids[:-1])
    if counter is not None:
        counter.bump(purpose)
    rows = logits[len(prompt) - 1 :]
    logp = log_softmax(rows)
    return logp[np.arange(len(y)), y]


def generate(
    model: DifferentiableLM,
    prompt: Sequence[int],
    temperature: float = 0.6,
    max_tokens: int = 512,
    seed: int = 0,
    eos_id: Optional[int] = None,
    counter: Optional[Counters] = None,
) -> np.ndarray:
    """Autoregressive sampling; temperature 0 means greedy argmax decoding.

    Stops at the end-of-sequence id (excluded from the result), at max_tokens,
    or when the context window fills up.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if len(prompt) == 0:
        raise ValueError("prompt must contain at least one token")
    ids = list(np.asarray(prompt, dtype=np.int64))
    rng = np.random.default_rng(seed)
    out: list[int] = []
    for _ in range(max_tokens):
        if len(ids) >= model.context_window:
            break
        logits = model.forward_logits(np.asarray(ids, dtype=np.int64))[-1]
        if counter is not None:
            counter.bump("generation")
        if temperature == 0.0:
            next_id = int(np.argmax(logits))
        else:
            probs = softmax(logits / temperature)
            next_id = int(rng.choice(len(probs), p=probs))
        if eos_id is not None and next_id == eos_id:
            break
        out.append(next_id)
        ids.append(next_id)
    return np.asarray(out, dtype=np.int64)


def loss_and_grad(
    model: DifferentiableLM,
    prompt: Sequence[int],
    y: Sequence[int],
    token_weights: Sequence[float],
    unlikelihood_mask: Optional[Sequence[bool]] = None,
    constant: float = 0.0,
    counter: Optional[Counters] = None,
) -> tuple[float, np.ndarray]:
    """Weighted token loss and its exact parameter gradient.

    loss = constant + sum_t w_t * term_t with term_t = -log P(y_t | ...) by
    default, or -log(1 - P(y_t | ...)) where the unlikelihood mask is set.
    Weights are constants: no gradient flows through them. Tokens with zero
    weight are skipped in the gradient entirely.
    """
    _check_window(model, prompt, y)
    y = np.asarray(y, dtype=np.int64)
    weights = np.asarray(token_weights, dtype=np.float64)
    if weights.shape != y.shape:
        raise ValueError(
            f"got {weights.size} token weights for {y.size} output tokens"
        )
    if unlikelihood_mask is None:
        unl = np.zeros(len(y), dtype=bool)
    else:
        unl = np.asarray(unlikelihood_mask, dtype=bool)
        if unl.shape != y.shape:
            raise ValueError("unlikelihood mask length must match y")
    if len(y) == 0 or not np.any(weights != 0.0):
        return float(constant), np.zeros_like(model.params)

    ids = _concat_ids(prompt, y)
    logits, cache = model.forward_with_cache(ids[:-1])
    if counter is not None:
        counter.bump("training")
    rows = slice(len(prompt) - 1, len(ids) - 1)
    logp_full = log_softmax(logits[rows])
    probs_full = np.exp(logp_full)
    idx = np.arange(len(y))
    logp_y = logp_full[idx, y]

    terms = -logp_y.copy()
    if np.any(unl):
        terms[unl] = -_log1mexp(logp_y[unl])
        bad = unl & ~np.isfinite(terms)
        if np.any(bad):
            raise ValueError(
                f"unlikelihood loss is nonfinite at token index {int(np.argmax(bad))}"
                " (probability is exactly 1)"
            )
    loss = float(constant + np.dot(weights, terms))

    # d(term)/d(logits): NLL rows give w * (p - onehot); unlikelihood rows
    # give w * (p_y / (1 - p_y)) * (onehot - p), i.e. the NLL row times
    # -p_y / (1 - p_y).
    drows = probs_full * weights[:, None]
    drows[idx, y] -= weights
    if np.any(unl):
        p_y = probs_full[idx, y]
        drows[unl] *= -(p_y[unl] / (1.0 - p_y[unl]))[:, None]
    dlogits = np.zeros_like(logits)
    dlogits[rows] = drows
    grad = model.backward(cache, dlogits)
    return loss, grad


def loss_and_grad_batch(
    model: DifferentiableLM,
    items: Sequence[tuple],
    counter: Optional[Counters] = None,
) -> tuple[list[float], np.ndarray]:
    """Per-example losses and the summed gradient over a minibatch.

    Each item is (prompt_ids, y_ids, token_weights, unlikelihood_mask,
    constant). Models that support it are driven through one padded batched
    forward/backward; others fall back to per-example calls. Examples whose
    weights are all zero contribute their constant and no gradient.
    """
    losses = [0.0] * len(items)
    grad_total = np.zeros_like(model.params)
    active: list[int] = []
    for i, (prompt, y, weights, unl, const) in enumerate(items):
        losses[i] = float(const)
        if len(y) > 0 and np.any(np.asarray(weights, dtype=np.float64) != 0.0):
            active.append(i)
    if not active:
        return losses, grad_total

    if not model.supports_batched_grad or len(active) == 1:
        for i in active:
            prompt, y, weights, unl, const = items[i]
            loss, grad = loss_and_grad(
                model, prompt, y, weights,
                unlikelihood_mask=unl, constant=const, counter=counter,
            )
            losses[i] = loss
            grad_total += grad
        return losses, grad_total

    rows = [_concat_ids(items[i][0], items[i][1]) for i in active]
    lengths = [len(r) for r in rows]
    for i, length in zip(active, lengths):
        _check_window(model, items[i][0], items[i][1])
    width = max(lengths)
    ids = np.zeros((len(active), width), dtype=np.int64)
    for b, row in enumerate(rows):
        ids[b, : len(row)] = row
    logits, cache = model.forward_with_cache(ids)
    if counter is not None:
        counter.bump("training", n=len(active))
    dlogits = np.zeros_like(logits)
    for b, i in enumerate(active):
        prompt, y, weights, unl, const = items[i]
        y = np.asarray(y, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        unl = (
            np.zeros(len(y), dtype=bool)
            if unl is None
            else np.asarray(unl, dtype=bool)
        )
        span = slice(len(prompt) - 1, len(prompt) + len(y) - 1)
        logp_full = log_softmax(logits[b, span])
        probs_full = np.exp(logp_full)
        idx = np.arange(len(y))
        logp_y = logp_full[idx, y]
        terms = -logp_y.copy()
        if np.any(unl):
            terms[unl] = -_log1mexp(logp_y[unl])
            bad = unl & ~np.isfinite(terms)
            if np.any(bad):
                raise ValueError(
                    "unlikelihood loss is nonfinite at token index "
                    f"{int(np.argmax(bad))} (probability is exactly 1)"
                )
        losses[i] = float(const + np.dot(weights, terms))
        drows = probs_full * weights[:, None]
        drows[idx, y] -= weights
        if np.any(unl):
            p_y = probs_full[idx, y]
            drows[unl] *= -(p_y[unl] / (1.0 - p_y[unl]))[:, None]
        dlogits[b, span] = drows
    grad_total = model.backward(cache, dlogits)
    return losses, grad_total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_params(model: DifferentiableLM, path: str | Path) -> None:
    """Bit-exact, self-describing checkpoint (JSON header + raw float64)."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": model.config_dict(),
        "dtype": "float64",
        "n_params": int(model.params.size),
        "params_b64": base64.b64encode(
            np.ascontiguousarray(model.params, dtype="<f8").tobytes()
        ).decode("ascii"),
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True))


def load_params(
    path: str | Path, expected_vocab_size: Optional[int] = None
) -> DifferentiableLM:
    """Rebuild a model from a checkpoint; header mismatches are errors."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {version!r} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    arch = payload["arch"]
    model_name = arch.get("model")
    if model_name not in _MODEL_CLASSES:
        raise ValueError(f"unknown model kind {model_name!r} in checkpoint")
    if (
        expected_vocab_size is not None
        and arch.get("vocab_size") != expected_vocab_size
    ):
        raise ValueError(
            f"checkpoint vocab size {arch.get('vocab_size')} does not match "
            f"expected vocab size {expected_vocab_size}"
        )
    model = _MODEL_CLASSES[model_name].from_config(arch)
    params = np.frombuffer(
        base64.b64decode(payload["params_b64"]), dtype="<f8"
    ).astype(np.float64)
    if params.size != payload["n_params"] or params.size != model.params.size:
        raise ValueError(
            f"checkpoint holds {params.size} parameters, model needs {model.params.size}"
        )
    model.set_params(params)
    return model
