"""Show the probability contrasts that drive saliency allocation.

Run from the repository root (takes a minute or two; the script pretrains a
small base model the first time and caches it under demos/out/):

    python3 demos/02_probability_contrasts.py

A correct output is scored under the bare question and under the question
plus the reference solution; tokens whose reference-context probability
clears the threshold become salient. An incorrect output is additionally
scored under the question plus a judgment of the mistake; tokens whose
judge-context probability dominates both other conditions are the flagged
errors. The script prints both analyses and writes an HTML report.
"""

from pathlib import Path

import numpy as np

from nlft_lab import engine
from nlft_lab.collection import collect
from nlft_lab.corpus import build_vocab, generate_synthetic
from nlft_lab.evaluation import saliency_report
from nlft_lab.judge import rule_judge
from nlft_lab.models.transformer import TinyTransformer, TransformerConfig
from nlft_lab.prompts import get_templates
from nlft_lab.saliency import NlftConfig, allocate_correct, allocate_incorrect
from nlft_lab.scales import scale_vector
from nlft_lab.trainer import pretrain_base

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)
BASE = OUT / "demo_base.json"

vocab = build_vocab()
templates = get_templates("toy-v1")
config = NlftConfig()

if BASE.exists():
    model = engine.load_params(BASE, expected_vocab_size=len(vocab))
    print(f"loaded cached base checkpoint from {BASE}")
else:
    print("pretraining a small base model (one-time, ~1-2 minutes)...")
    model = TinyTransformer(TransformerConfig(vocab_size=len(vocab), seed=0))
    pretrain_base(
        model, generate_synthetic(seed=999, count=300, difficulty="easy"),
        vocab, epochs=10, batch_size=16, learning_rate=3e-3, seed=0,
        conditions=("base", "standard", "judge"),
    )
    engine.save_params(model, BASE)
    print(f"cached base checkpoint at {BASE}")
print()

probe = generate_synthetic(seed=321, count=1, difficulty="easy")[0]
print("question:", probe.question)
print("reference solution:", probe.standard_solution.replace("\n", " | "))
print()

# --- correct branch ---------------------------------------------------------
correct = probe.with_output(probe.standard_solution, True)
table = collect(model, correct, templates, vocab)
assignment = allocate_correct(table, config)
scales = scale_vector(table, assignment, config)
print("correct output, conditional probabilities per token:")
print(f"  {'token':10s} {'p_base':>8s} {'p_standard':>11s} {'label':>14s} {'scale':>7s}")
for t in range(len(table)):
    print(f"  {table.tokens[t]:10s} {table.p_base[t]:8.3f} "
          f"{table.p_standard[t]:11.3f} {assignment.labels[t].value:>14s} "
          f"{scales.values[t]:7.3f}")
report_path = OUT / "saliency_correct.html"
saliency_report(correct, table, assignment, scales, path=report_path)
print(f"  -> {report_path}")
print()

# --- incorrect branch -------------------------------------------------------
import re

lines = probe.standard_solution.split("\n")
broken_first = re.sub(
    r"= (\d+)\.", lambda m: f"= {int(m.group(1)) + 2}.", lines[0], count=1
)
wrong_output = "\n".join([broken_first] + lines[1:])
incorrect = probe.with_output(wrong_output, False)
incorrect = incorrect.with_judgment(rule_judge(incorrect).text)
print("a wrong output:", wrong_output.replace("\n", " | "))
print("rule judgment: ", incorrect.judgment)

table = collect(model, incorrect, templates, vocab)
assignment = allocate_incorrect(table, config)
scales = scale_vector(table, assignment, config)
print("incorrect output, ratios per token (judge/base and judge/standard):")
print(f"  {'token':10s} {'p_judge':>8s} {'r1':>8s} {'r2':>8s} {'label':>11s} {'scale':>7s}")
for t in range(len(table)):
    pair = assignment.ratios[t]
    print(f"  {table.tokens[t]:10s} {table.p_judge[t]:8.3f} {pair.r1:8.2f} "
          f"{pair.r2:8.2f} {assignment.labels[t].value:>11s} {scales.values[t]:7.3f}")
n_salient = len(assignment.saliency_indices())
print(f"flagged {n_salient} of {len(table)} tokens; filtered out: "
      f"{assignment.filtered_out}")
report_path = OUT / "saliency_incorrect.html"
saliency_report(incorrect, table, assignment, scales, path=report_path)
print(f"  -> {report_path}")
