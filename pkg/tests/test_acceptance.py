"""Acceptance suite: every exit criterion at its stated tolerance.

Each criterion prints one PASS line (visible with `pytest -s`); a failed
assertion is the corresponding FAIL. The desk-scale end-to-end comparison
(criterion 8) starts from a copy-pretrained base checkpoint: the method's
probability contrasts presume a model that can exploit reference context,
which a from-scratch toy model cannot.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from conftest import filtered_example_scenario
from nlft_lab import engine, evaluation
from nlft_lab.collection import collect, collect_batch
from nlft_lab.corpus import Dataset, build_vocab, generate_synthetic, subset
from nlft_lab.generation import DecodeConfig, ModelGenerator, OracleTeacher
from nlft_lab.instrumentation import Counters
from nlft_lab.judge import rule_judge
from nlft_lab.models.tabular import TabularLM
from nlft_lab.models.transformer import TinyTransformer, TransformerConfig
from nlft_lab.prompts import get_templates
from nlft_lab.saliency import NlftConfig, TokenLabel, allocate_correct, allocate_incorrect
from nlft_lab.scales import nlft_loss, scale_correct, scale_incorrect
from nlft_lab.trainer import AdamWState, TrainConfig, adamw_step, pretrain_base, train

from test_saliency import oracle_correct_labels, oracle_incorrect_labels, random_table

CFG = NlftConfig()
SAL, SUB, IRR = TokenLabel.SALIENCY, TokenLabel.SUB_SALIENCY, TokenLabel.IRRELEVANT


def _pass(criterion: int, message: str) -> None:
    print(f"\nACCEPTANCE C{criterion:02d} PASS: {message}")


def test_criterion_01_correct_branch_scale_exactness():
    started = time.perf_counter()
    assert scale_correct(SAL, 0.975, CFG) == pytest.approx(1.03125, abs=1e-12)

    rng = np.random.default_rng(101)
    p_sal = rng.uniform(CFG.p0_correct, 1.0, size=10_000)
    s_sal = np.array([scale_correct(SAL, p, CFG) for p in np.nextafter(p_sal, 2.0)])
    # (1, 2] at tolerance 1e-12; float64 cannot represent 1 + x for
    # x < 2^-53, so strictness is checked where the excess is resolvable.
    assert np.all(s_sal >= 1.0 - 1e-12) and np.all(s_sal <= 2.0 + 1e-12)
    resolvable = (p_sal - CFG.p0_correct) > 1e-3
    assert np.all(s_sal[resolvable] > 1.0)
    order = np.argsort(p_sal)
    assert np.all(np.diff(s_sal[order]) >= 0)

    p_low = rng.uniform(0.0, CFG.p0_correct, size=10_000)
    s_sub = np.array([scale_correct(SUB, p, CFG) for p in p_low])
    s_irr = np.array([scale_correct(IRR, p, CFG) for p in p_low])
    assert np.all((s_sub >= -1e-12) & (s_sub <= 1.0 + 1e-12))
    assert np.all((s_irr >= -1e-12) & (s_irr <= 1.0 + 1e-12))
    assert np.all(s_sub >= s_irr)  # pointwise, c2 = 0.3 < c3 = 0.6
    for series in (s_sub, s_irr):
        order = np.argsort(p_low)
        assert np.all(np.diff(series[order]) >= 0)

    elapsed = time.perf_counter() - started
    assert elapsed < 1.0
    _pass(1, f"correct-branch scale exact at 1.03125; 10k-sample ranges and "
             f"monotonicity hold ({elapsed:.2f}s)")


def test_criterion_02_incorrect_branch_scale_exactness():
    value = scale_incorrect(SAL, CFG.r0 + math.log(3.0), CFG)
    assert value == pytest.approx(1.5, abs=1e-12)

    rng = np.random.default_rng(102)
    # Allocation requires r1 > r0 strictly; exp(-(r1 - r0)) resolves the
    # open upper bound in float64 for r1 - r0 < ~36.
    r1 = CFG.r0 + rng.uniform(1e-9, 36.0, size=10_000)
    values = np.array([scale_incorrect(SAL, r, CFG) for r in r1])
    assert np.all((values > 1.0) & (values < 2.0))
    assert scale_incorrect(IRR, 7.0, CFG) == 0.0
    _pass(2, "incorrect-branch scale equals 1.5 at ln(3) offset; salient "
             "scales in (1,2), irrelevant exactly 0")


def test_criterion_03_allocation_matches_bruteforce_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(103)
    mismatches = 0
    for _ in range(1000):
        table = random_table(rng, correct=True)
        if list(allocate_correct(table, CFG).labels) != oracle_correct_labels(table, CFG):
            mismatches += 1
        table = random_table(rng, correct=False)
        if list(allocate_incorrect(table, CFG).labels) != oracle_incorrect_labels(table, CFG):
            mismatches += 1
    elapsed = time.perf_counter() - started
    assert mismatches == 0
    assert elapsed < 5.0
    _pass(3, f"both allocators match the brute-force oracle on 1000 random "
             f"tables per branch, zero mismatches ({elapsed:.2f}s)")


def _loss_args_for_branch(rng, vocab_size, correct: bool):
    """Weights and mask produced by the real allocation/scale pipeline."""
    n = 8
    prompt = rng.integers(0, vocab_size, size=4)
    y = rng.integers(0, vocab_size, size=n)

    def probs():
        return np.exp(rng.uniform(np.log(1e-4), 0.0, size=n)) * (1 - 1e-9)

    from nlft_lab.collection import ConditionProbTable

    table = ConditionProbTable(
        example_id="fd", tokens=tuple(str(i) for i in range(n)),
        y_ids=tuple(int(v) for v in y),
        p_base=probs(), p_standard=probs(),
        p_judge=None if correct else np.minimum(probs() * 50, 0.9),
        is_correct=correct,
    )
    assignment = (
        allocate_correct(table, CFG) if correct else allocate_incorrect(table, CFG)
    )
    if assignment.filtered_out:
        assignment = dataclasses.replace(assignment, filtered_out=False)
    _, specs = nlft_loss([(table, assignment)], CFG)
    spec = specs[0]
    return prompt, y, spec.weights, spec.unlikelihood_mask


def _fd_worst(model, args, h=1e-6, indices=None):
    prompt, y, weights, mask = args
    _, grad = engine.loss_and_grad(model, prompt, y, weights, unlikelihood_mask=mask)
    if indices is None:
        indices = range(model.params.size)

    def value_at(params):
        saved = model.params.copy()
        model.params[:] = params
        out, _ = engine.loss_and_grad(model, prompt, y, weights, unlikelihood_mask=mask)
        model.params[:] = saved
        return out

    worst = 0.0
    for i in indices:
        plus = model.params.copy()
        plus[i] += h
        minus = model.params.copy()
        minus[i] -= h
        fd = (value_at(plus) - value_at(minus)) / (2 * h)
        if abs(fd) < 1e-12 and abs(grad[i]) < 1e-12:
            continue
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i])))
    return worst


def test_criterion_04_gradients_match_finite_differences():
    started = time.perf_counter()
    rng = np.random.default_rng(104)

    tabular = TabularLM(vocab_size=10, init="normal", seed=3)
    worst_tabular = 0.0
    for correct in (True, False):
        args = _loss_args_for_branch(rng, 10, correct)
        worst_tabular = max(worst_tabular, _fd_worst(tabular, args))
    assert worst_tabular < 1e-6

    vocab = build_vocab()
    transformer = TinyTransformer(TransformerConfig(vocab_size=len(vocab), seed=5))
    worst_transformer = 0.0
    for correct in (True, False):
        args = _loss_args_for_branch(rng, len(vocab), correct)
        indices = rng.choice(transformer.params.size, size=20, replace=False)
        worst_transformer = max(
            worst_transformer, _fd_worst(transformer, args, indices=indices)
        )
    assert worst_transformer < 1e-3

    elapsed = time.perf_counter() - started
    assert elapsed < 60.0
    _pass(4, f"finite differences confirm gradients: table model worst rel "
             f"err {worst_tabular:.2e} (<1e-6, all parameters), transformer "
             f"worst {worst_transformer:.2e} (<1e-3, 20 sampled) ({elapsed:.1f}s)")


def test_criterion_05_one_step_moves_probabilities_directionally():
    rng = np.random.default_rng(105)
    vocab_size = 20
    violations = 0
    for trial in range(100):
        # Distinct bigram contexts (tokens sampled without replacement) keep
        # the per-token direction claim exact: repeated contexts with
        # conflicting targets can legitimately move the other target down.
        ids = rng.choice(vocab_size, size=7, replace=False)
        prompt, y = ids[:1], ids[1:]
        model = TabularLM(vocab_size=vocab_size, init="normal", seed=1000 + trial)

        # correct branch: positive scales on every token
        p_std = rng.uniform(0.2, 1.0, size=len(y))
        scales = np.array([
            scale_correct(SAL if p > CFG.p0_correct else IRR, p, CFG) for p in p_std
        ])
        weights = scales / len(y)
        before = np.exp(engine.conditional_logprobs(model, prompt, y))
        _, grad = engine.loss_and_grad(model, prompt, y, weights)
        params, _ = adamw_step(
            model.params, grad, AdamWState.initial(model.params),
            lr=1e-3, weight_decay=0.0,
        )
        model.set_params(params)
        after = np.exp(engine.conditional_logprobs(model, prompt, y))
        violations += int(np.any(after[weights > 0] <= before[weights > 0]))

        # incorrect branch: unlikelihood on salient tokens
        model = TabularLM(vocab_size=vocab_size, init="normal", seed=2000 + trial)
        r1 = CFG.r0 + rng.uniform(0.1, 5.0, size=len(y))
        salient = rng.random(len(y)) < 0.6
        weights = np.where(
            salient, [scale_incorrect(SAL, r, CFG) for r in r1], 0.0
        ) / len(y)
        if not salient.any():
            salient[0] = True
            weights[0] = scale_incorrect(SAL, r1[0], CFG) / len(y)
        before = np.exp(engine.conditional_logprobs(model, prompt, y))
        _, grad = engine.loss_and_grad(model, prompt, y, weights, unlikelihood_mask=salient)
        params, _ = adamw_step(
            model.params, grad, AdamWState.initial(model.params),
            lr=1e-3, weight_decay=0.0,
        )
        model.set_params(params)
        after = np.exp(engine.conditional_logprobs(model, prompt, y))
        violations += int(np.any(after[weights > 0] >= before[weights > 0]))

    assert violations == 0
    _pass(5, "one AdamW step raises every positive-scale correct-token "
             "probability and lowers every salient incorrect-token "
             "probability; 0 violations in 100 trials")


def test_criterion_06_unit_scale_nlft_reproduces_sft():
    vocab = build_vocab()
    dataset = generate_synthetic(seed=61, count=8)
    final = {}
    for algo, force in (("sft", False), ("nlft", True)):
        model = TinyTransformer(
            TransformerConfig(vocab_size=len(vocab), d_model=32, n_layers=1,
                              n_heads=2, context_window=192, seed=6)
        )
        config = TrainConfig(
            algorithm=algo, epochs=5, batch_size=4, learning_rate=1e-3, seed=6,
            data_mode="teaching", force_unit_scales=force,
            gen_decode=DecodeConfig(max_tokens=24, seed=6),
            eval_decode=DecodeConfig(max_tokens=24, seed=6),
            checkpoint_every=0,
        )
        # 2 batches/epoch * 5 epochs = 10 optimizer steps
        train(config, dataset, model, vocab, teacher=OracleTeacher())
        final[algo] = model.copy_params()
    deviation = np.abs(final["nlft"] - final["sft"]).max()
    assert deviation < 1e-10
    _pass(6, f"unit-scale correct-branch run reproduces the SFT trajectory; "
             f"max parameter deviation {deviation:.1e} after 10 steps")


def test_criterion_07_forward_pass_accounting():
    vocab = build_vocab()
    templates = get_templates("toy-v1")
    model = TabularLM(vocab_size=len(vocab))
    pool = generate_synthetic(seed=71, count=9)

    def wrongify(example):
        wrong = example.with_output("1 + 1 = 3.\n#### 3", False)
        return wrong.with_judgment(rule_judge(wrong).text)

    n_correct, n_incorrect = 5, 4
    examples = tuple(
        e.with_output(e.standard_solution, True) if i < n_correct else wrongify(e)
        for i, e in enumerate(pool)
    )
    dataset = Dataset(examples=examples)

    counter = Counters()
    collect(model, examples[0], templates, vocab, counter=counter)
    assert counter.snapshot()["forwards"]["collection"] == 2
    counter = Counters()
    collect(model, examples[-1], templates, vocab, counter=counter)
    assert counter.snapshot()["forwards"]["collection"] == 3

    counter = Counters()
    tables = collect_batch(model, dataset, templates, vocab, counter=counter)
    total = counter.snapshot()["forwards"]["collection"]
    assert total == 2 * n_correct + 3 * n_incorrect
    assert all(t.p_judge is None for t in tables[:n_correct])
    assert all(t.p_judge is not None for t in tables[n_correct:])
    _pass(7, f"collection ran exactly 2 forwards per correct and 3 per "
             f"incorrect example ({2 * n_correct + 3 * n_incorrect} total for "
             f"{n_correct}+{n_incorrect})")


@pytest.fixture(scope="module")
def pretrained_base(tmp_path_factory):
    """Shared copy-pretrained base checkpoint for the end-to-end criterion.

    The probability contrasts that drive token scaling presume a model able
    to exploit reference context; training the comparison from scratch
    degenerates the correct-branch scales (standard-context probabilities
    sit at the clamp floor). The base recipe is disjoint from the
    fine-tuning pool and shared by both algorithms.
    """
    vocab = build_vocab()
    model = TinyTransformer(TransformerConfig(vocab_size=len(vocab), seed=0))
    pretrain_base(
        model, generate_synthetic(seed=999, count=400, difficulty="easy"), vocab,
        epochs=12, batch_size=16, learning_rate=3e-3, seed=0,
    )
    path = tmp_path_factory.mktemp("base") / "base.json"
    engine.save_params(model, path)
    return path


def test_criterion_08_desk_scale_nlft_vs_sft(pretrained_base):
    started = time.perf_counter()
    vocab = build_vocab()
    pool = generate_synthetic(seed=101, count=200, difficulty="easy")
    heldout = generate_synthetic(seed=555, count=200, difficulty="easy")
    results = {"nlft": [], "sft": [], "untrained": [], "base": []}
    for seed in (0, 1, 2):
        data = subset(pool, 50, seed)
        eval_decode = DecodeConfig(temperature=0.0, max_tokens=24, seed=seed)
        fresh = TinyTransformer(TransformerConfig(vocab_size=len(vocab), seed=seed))
        results["untrained"].append(
            evaluation.evaluate(
                ModelGenerator(fresh, vocab, "toy-v1"), heldout, eval_decode
            ).accuracy
        )
        base_model = engine.load_params(pretrained_base)
        results["base"].append(
            evaluation.evaluate(
                ModelGenerator(base_model, vocab, "toy-v1"), heldout, eval_decode
            ).accuracy
        )
        for algo in ("nlft", "sft"):
            model = engine.load_params(pretrained_base)
            config = TrainConfig(
                algorithm=algo, epochs=20, batch_size=4, learning_rate=1e-3,
                seed=seed, data_mode="teaching", shuffle_each_epoch=True,
                gen_decode=DecodeConfig(temperature=0.6, max_tokens=48, seed=seed),
                eval_decode=eval_decode, checkpoint_every=0, eval_every=0,
            )
            _, manifest = train(
                config, data, model, vocab,
                teacher=OracleTeacher(), eval_dataset=heldout,
            )
            results[algo].append(manifest.epoch_rows[-1]["accuracy"])

    median = {k: sorted(v)[1] for k, v in results.items()}
    elapsed = time.perf_counter() - started
    assert median["nlft"] >= median["sft"]
    assert median["nlft"] >= median["untrained"]
    assert median["sft"] >= median["untrained"]
    assert elapsed < 600.0
    _pass(8, f"matched-budget held-out comparison over 3 seeds: median "
             f"accuracy nlft={median['nlft']:.3f} vs sft={median['sft']:.3f} "
             f"(gap {median['nlft'] - median['sft']:+.3f}, reported not "
             f"asserted), untrained={median['untrained']:.3f}, pretrained "
             f"base={median['base']:.3f}; per-seed nlft={results['nlft']} "
             f"sft={results['sft']} ({elapsed:.0f}s < 600s)")


def test_criterion_09_filtered_example_contributes_nothing():
    vocab = build_vocab()
    templates = get_templates("toy-v1")
    model, with_wrong, without_wrong = filtered_example_scenario(vocab, templates)
    config = TrainConfig(
        algorithm="nlft", epochs=3, batch_size=2, learning_rate=1e-3, seed=9,
        data_mode="teaching",
        gen_decode=DecodeConfig(max_tokens=24, seed=9),
        eval_decode=DecodeConfig(max_tokens=24, seed=9),
        checkpoint_every=0,
    )
    params = {}
    n_filtered = {}
    for name, dataset in (("with", with_wrong), ("without", without_wrong)):
        trainee = TabularLM(vocab_size=len(vocab), order=2, n_rows=1024)
        trainee.set_params(model.copy_params())
        _, manifest = train(config, dataset, trainee, vocab, teacher=OracleTeacher())
        params[name] = trainee.copy_params()
        n_filtered[name] = sum(r["n_filtered"] for r in manifest.epoch_rows)
    assert n_filtered["with"] == config.epochs
    assert n_filtered["without"] == 0
    deviation = np.abs(params["with"] - params["without"]).max()
    assert deviation < 1e-12
    _pass(9, f"an incorrect example above the erroneous-fraction threshold "
             f"was filtered every epoch and left the parameter trajectory "
             f"unchanged (max deviation {deviation:.1e})")


def test_criterion_10_runs_are_byte_reproducible(tmp_path):
    vocab = build_vocab()
    dataset = generate_synthetic(seed=10, count=8)
    artifacts = []
    for name in ("first", "second"):
        model = TinyTransformer(
            TransformerConfig(vocab_size=len(vocab), d_model=32, n_layers=1,
                              n_heads=2, context_window=192, seed=10)
        )
        config = TrainConfig(
            algorithm="nlft", epochs=2, batch_size=4, learning_rate=1e-3, seed=10,
            data_mode="teaching", shuffle_each_epoch=True,
            gen_decode=DecodeConfig(max_tokens=24, seed=10),
            eval_decode=DecodeConfig(temperature=0.6, max_tokens=24, seed=10),
            checkpoint_every=1,
        )
        run_dir = tmp_path / name
        train(config, dataset, model, vocab, run_dir=run_dir,
              teacher=OracleTeacher(), eval_dataset=dataset)
        artifacts.append(
            (
                (run_dir / "metrics.csv").read_bytes(),
                (run_dir / "checkpoints" / "final.json").read_bytes(),
            )
        )
    assert artifacts[0][0] == artifacts[1][0]
    assert artifacts[0][1] == artifacts[1][1]
    _pass(10, "two identical-config runs produced byte-identical metrics.csv "
              "and final checkpoints")
