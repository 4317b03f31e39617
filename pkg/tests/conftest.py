import warnings

import numpy as np
import pytest

from nlft_lab.corpus import FormatWarning, build_vocab, generate_synthetic
from nlft_lab.models.tabular import TabularLM
from nlft_lab.models.transformer import TinyTransformer, TransformerConfig
from nlft_lab.prompts import get_templates


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


@pytest.fixture(scope="session")
def templates():
    return get_templates("toy-v1")


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(seed=5, count=8)


@pytest.fixture()
def tiny_transformer(vocab):
    return TinyTransformer(
        TransformerConfig(
            vocab_size=len(vocab), d_model=32, n_layers=2, n_heads=2,
            context_window=192, seed=11,
        )
    )


@pytest.fixture()
def random_tabular():
    return TabularLM(vocab_size=10, init="normal", seed=4)


@pytest.fixture(autouse=True)
def _quiet_format_warnings():
    # Garbage model outputs legitimately trip format warnings during scoring.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FormatWarning)
        yield


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def filtered_example_scenario(vocab, templates):
    """A model and dataset where one incorrect example is surely filtered.

    The incorrect example has an empty output, so its only scored token is
    the end-of-sequence id; an order-2 table model whose judge-context row
    strongly prefers that id makes the token salient (erroneous fraction 1),
    which exceeds any filter threshold below 1.
    """
    from nlft_lab.corpus import Dataset, generate_synthetic
    from nlft_lab.judge import rule_judge
    from nlft_lab.models.tabular import TabularLM
    from nlft_lab.prompts import PromptCondition, render

    pool = generate_synthetic(seed=31, count=5)
    correct = tuple(e.with_output(e.standard_solution, True) for e in pool[:4])
    wrong = pool[4].with_output("", False)
    wrong = wrong.with_judgment(rule_judge(wrong).text)

    model = TabularLM(vocab_size=len(vocab), order=2, n_rows=1024)
    contexts = {}
    for condition in PromptCondition:
        prompt = render(condition, wrong, templates, vocab)
        ids = np.asarray(prompt.token_ids.ids + (vocab.eos_id,))
        contexts[condition] = int(model._rows_for(ids)[-2])
    rows = list(contexts.values())
    assert len(set(rows)) == 3, "context hash collision; adjust n_rows"
    model.table[contexts[PromptCondition.JUDGE], vocab.eos_id] = 4.0

    with_wrong = Dataset(examples=correct + (wrong,))
    without_wrong = Dataset(examples=correct)
    return model, with_wrong, without_wrong
