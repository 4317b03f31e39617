"""Fine-tuning loop for the saliency-weighted objective and the SFT baseline.

Per epoch: (re)generate outputs when in self-study mode, judge new incorrect
outputs, recollect probability tables at the configured cadence, allocate and
scale tokens, drop filtered examples, then iterate minibatches with AdamW
under a cosine learning-rate schedule. The SFT path shares the batching,
optimizer, and schedule code and trains on reference solutions with uniform
token weights.

Filtered examples are removed before minibatch partitioning and do not count
toward batch means, so excluding one is exactly equivalent to training
without it. Minibatches follow dataset order unless per-epoch shuffling is
switched on; either way runs are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import random
import re
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import collection, engine, evaluation, judge as judge_mod, scales as scales_mod
from .corpus import ANSWER_MARKER, Dataset, Vocab, check_correctness, save_jsonl, tokenize
from .fileio import atomic_write_text
from .generation import DecodeConfig, ModelGenerator, OracleTeacher, OutputGenerator
from .instrumentation import Counters
from .models.base import DifferentiableLM
from .prompts import PromptCondition, get_templates, render
from .saliency import NlftConfig, allocate_correct, allocate_incorrect

ALGORITHMS = ("nlft", "sft")
DATA_MODES = ("teaching", "self_study")
MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.csv"


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def initial(cls, params: np.ndarray) -> "AdamWState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), step=0)


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> tuple[np.ndarray, AdamWState]:
    """One decoupled-weight-decay Adam update with bias-corrected moments."""
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise ValueError(
            f"nonfinite gradient in {bad.size} entries (first indices {bad[:5].tolist()})"
        )
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    new_params = params - lr * (m_hat / (np.sqrt(v_hat) + eps)) - lr * weight_decay * params
    return new_params, AdamWState(m=m, v=v, step=step)


def cosine_lr(step: float, total_steps: float, base_lr: float) -> float:
    """Cosine decay from base_lr at step 0 to zero at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# Configuration and manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "nlft"
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    data_mode: str = "teaching"
    nlft: NlftConfig = field(default_factory=NlftConfig)
    recollect_every: int = 1
    template_version: str = "toy-v1"
    gen_decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval_decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval_every: int = 0  # 0 -> evaluate after the final epoch only
    batch_normalization: str = "per_example"  # or "global"
    force_unit_scales: bool = False
    shuffle_each_epoch: bool = False
    checkpoint_every: int = 1  # 0 -> final checkpoint only
    record_timing: bool = False
    run_name: str = ""

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.data_mode not in DATA_MODES:
            raise ValueError(f"unknown data mode {self.data_mode!r}")
        if self.recollect_every < 1:
            raise ValueError("recollect_every must be >= 1")
        if self.batch_normalization not in ("per_example", "global"):
            raise ValueError(
                f"unknown batch normalization {self.batch_normalization!r}"
            )

    @property
    def name(self) -> str:
        return self.run_name or self.algorithm

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunManifest:
    run_name: str
    config: dict
    config_provenance: dict = field(default_factory=dict)
    template_version: str = "toy-v1"
    dataset_provenance: dict = field(default_factory=dict)
    eval_split: Optional[str] = None
    epoch_rows: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    checkpoints: list = field(default_factory=list)
    final_checkpoint: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Output generation for training data
# ---------------------------------------------------------------------------

def generate_outputs(
    mode: str,
    generator_model,
    trainee_model,
    dataset: Dataset,
    gen_config: DecodeConfig,
    vocab: Optional[Vocab] = None,
    template_version: str = "toy-v1",
    counter: Optional[Counters] = None,
) -> Dataset:
    """Fill generated_output and is_correct for every example.

    Teaching mode draws outputs from a separate, stronger generator; self
    study draws them from the model being trained. Plain models are wrapped
    in a sampling generator; anything matching the OutputGenerator protocol
    is used as is.
    """
    if mode not in DATA_MODES:
        raise ValueError(f"unknown data mode {mode!r}")
    source = generator_model if mode == "teaching" else trainee_model
    if source is None:
        raise ValueError(f"{mode} mode requires a generator")
    if not hasattr(source, "generate_output"):
        if vocab is None:
            raise ValueError("wrapping a raw model as generator requires a vocab")
        source = ModelGenerator(source, vocab, template_version, counter=counter)

    def fill(i: int, example):
        text = source.generate_output(example, gen_config, i)
        return example.with_output(text, check_correctness(text, example.standard_answer))

    updated = tuple(fill(i, e) for i, e in enumerate(dataset))
    return Dataset(examples=updated, provenance=dict(dataset.provenance))


# ---------------------------------------------------------------------------
# Base-model recipe
# ---------------------------------------------------------------------------

_RESULT_RE = re.compile(r"= (\d+)\.")


def _corrupt_results(example, rng: random.Random, value_cap: int = 200):
    """Perturb every step result (and the final answer) of a solution.

    Used by the pretraining copy drill: with a corrupted reference the only
    way to predict the result tokens is to copy them from the visible
    block, which is exactly the skill the probability contrasts rely on.
    """
    lines = example.standard_solution.split("\n")
    last_result = None

    def bump(match):
        nonlocal last_result
        value = min(value_cap, int(match.group(1)) + rng.randint(1, 9))
        last_result = value
        return f"= {value}."

    new_lines = [_RESULT_RE.sub(bump, line) for line in lines[:-1]]
    if last_result is None:
        last_result = int(example.standard_answer) + rng.randint(1, 9)
    new_lines.append(f"{ANSWER_MARKER} {last_result}")
    return replace(
        example,
        standard_solution="\n".join(new_lines),
        standard_answer=Fraction(last_result),
    )


def pretrain_base(
    model: DifferentiableLM,
    dataset: Dataset,
    vocab: Vocab,
    epochs: int = 12,
    batch_size: int = 16,
    learning_rate: float = 3e-3,
    weight_decay: float = 0.01,
    seed: int = 0,
    conditions: tuple[str, ...] = ("base", "standard"),
    copy_drill_fraction: float = 0.5,
    template_version: str = "toy-v1",
    counter: Optional[Counters] = None,
) -> DifferentiableLM:
    """Teach a fresh model the task format and reference-block copying.

    Fine-tuning contrasts conditional probabilities across prompt
    conditions, which is only informative when the model can exploit the
    extra context; a from-scratch model cannot, so the lab's experiments
    start from a checkpoint pretrained here with reference solutions
    visible in part of the prompts. For the given fraction of
    standard-condition sequences the reference and target carry corrupted
    step results, forcing the model to copy from the block instead of
    redoing the arithmetic. Including "judge" in the conditions adds a
    judgment-reading drill: the target is a corrupted solution and the
    prompt carries the rule judge's critique of it, so quoted errors become
    predictable from the judgment block. Plain next-token NLL, AdamW,
    cosine schedule.
    """
    from .judge import rule_judge

    templates = get_templates(template_version)
    cond_map = {c.value: c for c in PromptCondition}
    drill_rng = random.Random(seed)

    def item_for(prompt, target_solution):
        y = np.asarray(list(tokenize(target_solution, vocab).ids) + [vocab.eos_id])
        weights = np.full(len(y), 1.0 / len(y))
        return (np.asarray(prompt.token_ids.ids), y, weights, None, 0.0)

    items = []
    for example in dataset:
        for name in conditions:
            if name == "judge":
                corrupted = _corrupt_results(example, drill_rng)
                wrong = example.with_output(corrupted.standard_solution, False)
                judged = example.with_judgment(rule_judge(wrong).text)
                prompt = render(PromptCondition.JUDGE, judged, templates, vocab)
                items.append(item_for(prompt, corrupted.standard_solution))
                continue
            target = example
            if name == "standard" and drill_rng.random() < copy_drill_fraction:
                target = _corrupt_results(example, drill_rng)
            prompt = render(cond_map[name], target, templates, vocab)
            items.append(item_for(prompt, target.standard_solution))
    state = AdamWState.initial(model.params)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA]))
    n_batches = max(1, math.ceil(len(items) / batch_size))
    for epoch in range(epochs):
        order = rng.permutation(len(items))
        for b_idx in range(n_batches):
            batch = [items[i] for i in order[b_idx * batch_size : (b_idx + 1) * batch_size]]
            if not batch:
                continue
            _, grad_sum = engine.loss_and_grad_batch(model, batch, counter=counter)
            lr = cosine_lr(epoch + b_idx / n_batches, epochs, learning_rate)
            new_params, state = adamw_step(
                model.params, grad_sum / len(batch), state, lr,
                weight_decay=weight_decay,
            )
            model.set_params(new_params)
    return model


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _sft_item(example, templates, vocab):
    prompt = render(PromptCondition.BASE, example, templates, vocab)
    y = tokenize(example.standard_solution, vocab).ids + (vocab.eos_id,)
    weights = np.full(len(y), 1.0 / len(y))
    return (np.asarray(prompt.token_ids.ids), np.asarray(y), weights, None, 0.0)


def _order_digest(example_ids) -> str:
    return hashlib.sha256("\n".join(example_ids).encode("utf-8")).hexdigest()


def _nlft_epoch_items(model_dataset, tables, config: TrainConfig, templates, vocab):
    """Allocation, scaling, and filtering for one collection snapshot.

    Returns (ids, items, n_filtered): one loss item per contributing
    example, in dataset order, with weights normalized per example.
    """
    nlft = config.nlft
    ids = []
    items = []
    n_filtered = 0
    for example, table in zip(model_dataset, tables):
        assignment = (
            allocate_correct(table, nlft)
            if table.is_correct
            else allocate_incorrect(table, nlft)
        )
        if assignment.filtered_out:
            n_filtered += 1
            continue
        vec = scales_mod.scale_vector(table, assignment, nlft)
        if config.force_unit_scales:
            vec = scales_mod.ScaleVector(
                values=np.ones_like(vec.values), branch=vec.branch
            )
        _, specs = scales_mod.loss_from_scales([vec], [table.p_base], nlft)
        spec = specs[0]
        prompt = render(PromptCondition.BASE, example, templates, vocab)
        ids.append(example.id)
        items.append(
            (
                np.asarray(prompt.token_ids.ids),
                np.asarray(table.y_ids),
                spec.weights,
                spec.unlikelihood_mask,
                spec.constant,
            )
        )
    return ids, items, n_filtered


def train(
    config: TrainConfig,
    dataset: Dataset,
    model: DifferentiableLM,
    vocab: Vocab,
    run_dir: Optional[str | Path] = None,
    counter: Optional[Counters] = None,
    teacher: Optional[OutputGenerator] = None,
    judge_fn: Optional[Callable] = None,
    eval_dataset: Optional[Dataset] = None,
    config_provenance: Optional[dict] = None,
) -> tuple[DifferentiableLM, RunManifest]:
    """Run the full fine-tuning loop; returns the model and its manifest."""
    started = time.perf_counter()
    counter = counter or Counters()
    templates = get_templates(config.template_version)
    judge_fn = judge_fn or judge_mod.rule_judge
    if config.algorithm == "nlft" and config.data_mode == "teaching" and teacher is None:
        teacher = OracleTeacher()

    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        (run_path / "checkpoints").mkdir(parents=True, exist_ok=True)

    manifest = RunManifest(
        run_name=config.name,
        config=config.to_dict(),
        config_provenance=dict(config_provenance or {}),
        template_version=config.template_version,
        dataset_provenance=dict(dataset.provenance),
        eval_split=(
            str(eval_dataset.provenance.get("split")) if eval_dataset is not None else None
        ),
    )
    if run_path is not None:
        atomic_write_text(
            run_path / "config.json",
            json.dumps(config.to_dict(), indent=2, sort_keys=True),
        )

    opt_state = AdamWState.initial(model.params)
    working = dataset
    tables = None
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB]))

    def maybe_checkpoint(tag: str) -> Optional[str]:
        if run_path is None:
            return None
        path = run_path / "checkpoints" / f"{tag}.json"
        engine.save_params(model, path)
        return str(path)

    for epoch in range(config.epochs):
        epoch_loss_sum = 0.0
        last_lr = config.learning_rate
        n_filtered = 0

        if config.algorithm == "nlft":
            regenerate = config.data_mode == "self_study" or any(
                e.generated_output is None for e in working
            )
            if regenerate:
                with counter.timed("generation"):
                    working = generate_outputs(
                        config.data_mode,
                        teacher,
                        model,
                        working,
                        config.gen_decode,
                        vocab=vocab,
                        template_version=config.template_version,
                        counter=counter,
                    )
                working = judge_mod.judge_dataset(working, judge_fn)
            if tables is None or epoch % config.recollect_every == 0 or regenerate:
                with counter.timed("collection"):
                    tables = collection.collect_batch(
                        model,
                        working,
                        templates,
                        vocab,
                        eps=config.nlft.eps,
                        counter=counter,
                        collected_at={"epoch": epoch},
                    )
            item_ids, items, n_filtered = _nlft_epoch_items(
                working, tables, config, templates, vocab
            )
        else:
            item_ids = [e.id for e in working]
            items = [_sft_item(e, templates, vocab) for e in working]

        if config.shuffle_each_epoch:
            perm = order_rng.permutation(len(items))
            items = [items[i] for i in perm]
            item_ids = [item_ids[i] for i in perm]

        n_batches = max(1, math.ceil(len(items) / config.batch_size))
        with counter.timed("training"):
            for b_idx in range(n_batches):
                batch = items[b_idx * config.batch_size : (b_idx + 1) * config.batch_size]
                if not batch:
                    continue
                losses, grad_sum = engine.loss_and_grad_batch(model, batch, counter=counter)
                if config.batch_normalization == "per_example":
                    batch_loss = float(np.mean(losses))
                    grad = grad_sum / len(batch)
                else:
                    batch_loss = float(np.sum(losses))
                    grad = grad_sum
                if not math.isfinite(batch_loss):
                    raise RuntimeError(
                        f"nonfinite loss {batch_loss} at epoch {epoch} step {b_idx}"
                    )
                last_lr = cosine_lr(
                    epoch + b_idx / n_batches, config.epochs, config.learning_rate
                )
                try:
                    new_params, opt_state = adamw_step(
                        model.params,
                        grad,
                        opt_state,
                        last_lr,
                        beta1=config.beta1,
                        beta2=config.beta2,
                        eps=config.adam_eps,
                        weight_decay=config.weight_decay,
                    )
                except ValueError as exc:
                    raise RuntimeError(
                        f"optimizer step failed at epoch {epoch} step {b_idx}: {exc}"
                    ) from exc
                model.set_params(new_params)
                epoch_loss_sum += batch_loss

        accuracy = None
        is_last = epoch == config.epochs - 1
        want_eval = eval_dataset is not None and (
            is_last or (config.eval_every > 0 and (epoch + 1) % config.eval_every == 0)
        )
        if want_eval:
            with counter.timed("evaluation"):
                result = evaluation.evaluate(
                    ModelGenerator(
                        model, vocab, config.template_version, counter=counter
                    ),
                    eval_dataset,
                    config.eval_decode,
                )
            accuracy = result.accuracy

        checkpoint_id = None
        if config.checkpoint_every > 0 and (
            (epoch + 1) % config.checkpoint_every == 0 or is_last
        ):
            checkpoint_id = maybe_checkpoint(f"epoch_{epoch:04d}")
            if checkpoint_id:
                manifest.checkpoints.append(checkpoint_id)

        snapshot = counter.snapshot()["forwards"]
        manifest.epoch_rows.append(
            {
                "epoch": epoch,
                "loss": epoch_loss_sum / n_batches,
                "lr": last_lr,
                "accuracy": accuracy,
                "n_examples": len(items),
                "n_filtered": n_filtered,
                "order_digest": _order_digest(item_ids),
                "forwards_collection": snapshot.get("collection", 0),
                "forwards_generation": snapshot.get("generation", 0),
                "forwards_training": snapshot.get("training", 0),
                "checkpoint": checkpoint_id,
            }
        )

    manifest.final_checkpoint = maybe_checkpoint("final")
    if manifest.final_checkpoint:
        manifest.checkpoints.append(manifest.final_checkpoint)
    manifest.counters = counter.snapshot()
    manifest.wall_clock_s = time.perf_counter() - started
    if run_path is not None:
        save_jsonl(working, run_path / "data.jsonl")
        write_metrics_csv(manifest, run_path / METRICS_NAME, config.record_timing)
        manifest.save(run_path / MANIFEST_NAME)
    return model, manifest


def write_metrics_csv(
    manifest: RunManifest, path: str | Path, record_timing: bool = False
) -> None:
    """Per-epoch metrics table; the timing column is opt-in so that two runs
    with identical config and seed produce byte-identical files."""
    columns = [
        "run", "epoch", "accuracy", "loss", "lr",
        "forwards_collection", "forwards_generation", "forwards_training",
    ]
    if record_timing:
        columns.append("seconds")
    total_seconds = manifest.wall_clock_s
    n_rows = max(1, len(manifest.epoch_rows))
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(columns)
    for row in manifest.epoch_rows:
        record = [
            manifest.run_name,
            row["epoch"],
            "" if row["accuracy"] is None else repr(row["accuracy"]),
            repr(row["loss"]),
            repr(row["lr"]),
            row["forwards_collection"],
            row["forwards_generation"],
            row["forwards_training"],
        ]
        if record_timing:
            record.append(f"{total_seconds / n_rows:.3f}")
        writer.writerow(record)
    atomic_write_text(path, buffer.getvalue())
