import json
import math

import numpy as np
import pytest

from nlft_lab import engine
from nlft_lab.engine import (
    ContextOverflowError,
    conditional_logprobs,
    generate,
    load_params,
    loss_and_grad,
    loss_and_grad_batch,
    save_params,
)
from nlft_lab.instrumentation import Counters
from nlft_lab.models.tabular import TabularLM
from nlft_lab.models.transformer import TinyTransformer, TransformerConfig


def finite_difference(model, args, grad, indices, h=1e-6):
    """Central-difference check of d(loss)/d(params) at the given indices."""

    def loss_at(params):
        saved = model.params.copy()
        model.params[:] = params
        value, _ = loss_and_grad(model, *args)
        model.params[:] = saved
        return value

    worst = 0.0
    for i in indices:
        plus = model.params.copy()
        plus[i] += h
        minus = model.params.copy()
        minus[i] -= h
        fd = (loss_at(plus) - loss_at(minus)) / (2 * h)
        if abs(fd) < 1e-12 and abs(grad[i]) < 1e-12:
            continue
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i])))
    return worst


class TestConditionalLogprobs:
    def test_uniform_tabular_gives_log_vocab(self):
        model = TabularLM(vocab_size=10)
        rng = np.random.default_rng(0)
        y = rng.integers(0, 10, size=6)
        values = conditional_logprobs(model, [3], y)
        np.testing.assert_allclose(values, -math.log(10), atol=1e-12)

    def test_matches_bruteforce_softmax_tabular(self):
        # Independent oracle: per position, renormalize the raw logit row
        # with plain math.exp sums.
        model = TabularLM(vocab_size=10, init="normal", seed=2)
        rng = np.random.default_rng(1)
        prompt = rng.integers(0, 10, size=4)
        y = rng.integers(0, 10, size=8)
        values = conditional_logprobs(model, prompt, y)
        ids = list(prompt) + list(y)
        for t in range(len(y)):
            prev = ids[len(prompt) + t - 1]
            row = model.table[prev]
            expected = math.exp(row[y[t]]) / sum(math.exp(v) for v in row)
            assert abs(math.exp(values[t]) - expected) < 1e-12

    def test_matches_direct_softmax_transformer(self, tiny_transformer, vocab):
        rng = np.random.default_rng(3)
        prompt = rng.integers(0, len(vocab), size=5)
        y = rng.integers(0, len(vocab), size=7)
        values = conditional_logprobs(tiny_transformer, prompt, y)
        logits = tiny_transformer.forward_logits(np.concatenate([prompt, y])[:-1])
        for t in range(len(y)):
            row = logits[len(prompt) - 1 + t]
            expected = np.exp(row[y[t]]) / np.exp(row).sum()
            assert abs(math.exp(values[t]) - expected) < 1e-9

    def test_empty_y(self, random_tabular):
        assert len(conditional_logprobs(random_tabular, [1], [])) == 0

    def test_values_nonpositive(self, tiny_transformer, vocab):
        rng = np.random.default_rng(4)
        values = conditional_logprobs(
            tiny_transformer, rng.integers(0, len(vocab), 4), rng.integers(0, len(vocab), 9)
        )
        assert np.all(values <= 0)

    def test_context_overflow_reports_sizes(self, vocab):
        model = TinyTransformer(TransformerConfig(vocab_size=len(vocab), context_window=16))
        with pytest.raises(ContextOverflowError, match="17.*16"):
            conditional_logprobs(model, np.zeros(10, dtype=int), np.zeros(7, dtype=int))

    def test_empty_prompt_rejected(self, random_tabular):
        with pytest.raises(ValueError, match="prompt"):
            conditional_logprobs(random_tabular, [], [1, 2])


class TestModelInvariants:
    def test_normalization_within_1e9(self, tiny_transformer, vocab):
        rng = np.random.default_rng(5)
        logits = tiny_transformer.forward_logits(rng.integers(0, len(vocab), size=20))
        sums = engine.softmax(logits).sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)

    def test_causality_randomized(self, tiny_transformer, vocab):
        rng = np.random.default_rng(6)
        for _ in range(10):
            ids = rng.integers(0, len(vocab), size=24)
            t_perturb = int(rng.integers(5, 24))
            before = tiny_transformer.forward_logits(ids)
            mutated = ids.copy()
            mutated[t_perturb] = (mutated[t_perturb] + 1) % len(vocab)
            after = tiny_transformer.forward_logits(mutated)
            assert np.array_equal(before[:t_perturb], after[:t_perturb])

    def test_forward_deterministic(self, tiny_transformer, vocab):
        rng = np.random.default_rng(7)
        ids = rng.integers(0, len(vocab), size=30)
        assert np.array_equal(
            tiny_transformer.forward_logits(ids), tiny_transformer.forward_logits(ids)
        )

    def test_batched_forward_matches_single(self, tiny_transformer, vocab):
        rng = np.random.default_rng(8)
        batch = rng.integers(0, len(vocab), size=(4, 17))
        stacked = tiny_transformer.forward_logits_batch(batch)
        for b in range(4):
            np.testing.assert_allclose(
                stacked[b], tiny_transformer.forward_logits(batch[b]), rtol=0, atol=1e-12
            )

    def test_order_two_tabular_uses_longer_context(self):
        model = TabularLM(vocab_size=5, order=2, init="normal", seed=3)
        a = conditional_logprobs(model, [0, 1], [2])
        b = conditional_logprobs(model, [3, 1], [2])
        assert a[0] != b[0]  # different two-token contexts hit different rows

    def test_token_id_out_of_range(self, random_tabular):
        with pytest.raises(ValueError, match="out of range"):
            random_tabular.forward_logits(np.array([0, 99]))


class TestGenerate:
    def test_greedy_is_argmax_and_seed_independent(self, random_tabular):
        out1 = generate(random_tabular, [2], temperature=0.0, max_tokens=5, seed=1)
        out2 = generate(random_tabular, [2], temperature=0.0, max_tokens=5, seed=99)
        assert np.array_equal(out1, out2)
        ids = [2]
        for token in out1:
            expected = int(np.argmax(random_tabular.forward_logits(np.asarray(ids))[-1]))
            assert token == expected
            ids.append(expected)

    def test_seeded_sampling_reproducible(self, random_tabular):
        a = generate(random_tabular, [2], temperature=0.8, max_tokens=10, seed=5)
        b = generate(random_tabular, [2], temperature=0.8, max_tokens=10, seed=5)
        assert np.array_equal(a, b)

    def test_eos_stops_generation(self):
        model = TabularLM(vocab_size=4)
        model.table[:, 3] = 50.0  # every context deterministically emits id 3
        out = generate(model, [0], temperature=0.0, max_tokens=10, seed=0, eos_id=3)
        assert len(out) == 0

    def test_max_tokens_respected(self, random_tabular):
        out = generate(random_tabular, [1], temperature=1.0, max_tokens=7, seed=3)
        assert len(out) == 7

    def test_sampling_frequencies_match_softmax(self):
        # Monte-Carlo oracle: fixed 3-token distribution, identical in every
        # row, so each generated token is an independent draw.
        model = TabularLM(vocab_size=3)
        logits = np.array([0.3, -0.4, 1.1])
        model.table[:] = logits
        expected = np.exp(logits) / np.exp(logits).sum()
        counts = np.zeros(3)
        n_draws = 0
        for seed in range(100):
            out = generate(model, [0], temperature=1.0, max_tokens=1000, seed=seed)
            counts += np.bincount(out, minlength=3)
            n_draws += len(out)
        assert n_draws == 100_000
        np.testing.assert_allclose(counts / n_draws, expected, atol=0.01)

    def test_negative_temperature_rejected(self, random_tabular):
        with pytest.raises(ValueError):
            generate(random_tabular, [0], temperature=-1.0, max_tokens=1, seed=0)


class TestLossAndGrad:
    def test_all_zero_weights(self, random_tabular):
        loss, grad = loss_and_grad(random_tabular, [0], [1, 2], [0.0, 0.0])
        assert loss == 0.0
        assert not grad.any()

    def test_weight_length_validated(self, random_tabular):
        with pytest.raises(ValueError, match="weights"):
            loss_and_grad(random_tabular, [0], [1, 2], [1.0])

    def test_tabular_gradient_all_params(self, random_tabular):
        rng = np.random.default_rng(9)
        prompt = rng.integers(0, 10, size=3)
        y = rng.integers(0, 10, size=6)
        weights = rng.uniform(0.2, 1.5, size=6)
        mask = np.array([False, True, False, True, False, False])
        _, grad = loss_and_grad(random_tabular, prompt, y, weights, unlikelihood_mask=mask)
        worst = finite_difference(
            random_tabular, (prompt, y, weights, mask), grad,
            range(random_tabular.params.size),
        )
        assert worst < 1e-6

    def test_transformer_gradient_sampled_params(self, vocab):
        model = TinyTransformer(
            TransformerConfig(vocab_size=len(vocab), d_model=32, n_layers=2,
                              n_heads=2, context_window=64, seed=21)
        )
        rng = np.random.default_rng(10)
        prompt = rng.integers(0, len(vocab), size=5)
        y = rng.integers(0, len(vocab), size=8)
        weights = rng.uniform(0.2, 1.5, size=8)
        mask = rng.random(8) < 0.5
        _, grad = loss_and_grad(model, prompt, y, weights, unlikelihood_mask=mask)
        indices = rng.choice(model.params.size, size=20, replace=False)
        worst = finite_difference(model, (prompt, y, weights, mask), grad, indices)
        assert worst < 1e-3

    def test_unlikelihood_at_probability_one_raises(self):
        model = TabularLM(vocab_size=3)
        model.table[:, 1] = 2000.0  # softmax saturates to exactly 1.0 for id 1
        with pytest.raises(ValueError, match="token index 0"):
            loss_and_grad(model, [0], [1], [1.0], unlikelihood_mask=[True])

    def test_unlikelihood_direction_opposes_nll(self, random_tabular):
        prompt, y, w = [0], [4], [1.0]
        _, g_nll = loss_and_grad(random_tabular, prompt, y, w)
        _, g_unl = loss_and_grad(random_tabular, prompt, y, w, unlikelihood_mask=[True])
        target_index = random_tabular.layout.segments[0].shape[1] * 0 + 4
        assert np.sign(g_nll[target_index]) == -1
        assert np.sign(g_unl[target_index]) == 1

    def test_counter_counts_training_forwards(self, random_tabular):
        counter = Counters()
        loss_and_grad(random_tabular, [0], [1], [1.0], counter=counter)
        assert counter.snapshot()["forwards"]["training"] == 1


class TestLossAndGradBatch:
    def test_matches_per_example_sum(self, vocab):
        model = TinyTransformer(
            TransformerConfig(vocab_size=len(vocab), d_model=32, n_layers=2,
                              n_heads=2, context_window=96, seed=13)
        )
        rng = np.random.default_rng(11)
        items = []
        for n_prompt, n_y in ((4, 6), (7, 3), (5, 9)):
            prompt = rng.integers(0, len(vocab), size=n_prompt)
            y = rng.integers(0, len(vocab), size=n_y)
            weights = rng.uniform(0.1, 1.0, size=n_y)
            mask = rng.random(n_y) < 0.3
            items.append((prompt, y, weights, mask, 0.5))
        losses, grad_sum = loss_and_grad_batch(model, items)
        expected_grad = np.zeros_like(model.params)
        for i, item in enumerate(items):
            loss, grad = loss_and_grad(model, item[0], item[1], item[2],
                                       unlikelihood_mask=item[3], constant=item[4])
            assert abs(loss - losses[i]) < 1e-10
            expected_grad += grad
        np.testing.assert_allclose(grad_sum, expected_grad, atol=1e-12)

    def test_zero_weight_items_skipped(self, random_tabular):
        items = [
            ([0], [1], [0.0], None, 0.25),
            ([0], [2], [1.0], None, 0.0),
        ]
        losses, grad = loss_and_grad_batch(random_tabular, items)
        assert losses[0] == 0.25
        assert grad.any()


class TestCheckpoints:
    def test_roundtrip_identical_logprobs(self, tmp_path, tiny_transformer, vocab):
        path = tmp_path / "model.json"
        save_params(tiny_transformer, path)
        loaded = load_params(path)
        rng = np.random.default_rng(12)
        prompt = rng.integers(0, len(vocab), size=4)
        y = rng.integers(0, len(vocab), size=6)
        np.testing.assert_array_equal(
            conditional_logprobs(tiny_transformer, prompt, y),
            conditional_logprobs(loaded, prompt, y),
        )

    def test_format_version_present(self, tmp_path, random_tabular):
        path = tmp_path / "model.json"
        save_params(random_tabular, path)
        payload = json.loads(path.read_text())
        assert payload["format_version"] == 1
        assert payload["arch"]["model"] == "tabular"

    def test_wrong_vocab_size_rejected(self, tmp_path, random_tabular):
        path = tmp_path / "model.json"
        save_params(random_tabular, path)
        with pytest.raises(ValueError, match="vocab size"):
            load_params(path, expected_vocab_size=7)

    def test_unknown_format_version_rejected(self, tmp_path, random_tabular):
        path = tmp_path / "model.json"
        save_params(random_tabular, path)
        payload = json.loads(path.read_text())
        payload["format_version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError, match="format version"):
            load_params(path)

    def test_identical_saves_are_byte_identical(self, tmp_path, tiny_transformer):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_params(tiny_transformer, a)
        save_params(tiny_transformer, b)
        assert a.read_bytes() == b.read_bytes()
