"""Walk through the synthetic arithmetic task and its token layer.

Run from the repository root:

    python3 demos/01_task_and_tokens.py

Covers: dataset generation, the word-level tokenizer, answer extraction and
correctness checking, deterministic subsetting, and JSONL persistence.
"""

from pathlib import Path

from nlft_lab.corpus import (
    build_vocab,
    check_correctness,
    detokenize,
    extract_answer,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
    subset,
    tokenize,
)

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

vocab = build_vocab()
print(f"vocabulary: {len(vocab)} token types (bounded by design)")
print()

dataset = generate_synthetic(seed=7, count=100)
example = dataset[0]
print("one generated example:")
print("  question:", example.question)
print("  solution:")
for line in example.standard_solution.split("\n"):
    print("   ", line)
print("  answer:", example.standard_answer)
print()

seq = tokenize(example.standard_solution, vocab)
print(f"solution tokens ({len(seq)}):",
      [vocab.token_of(i) for i in seq.ids])
print("round trip ok:", detokenize(seq.ids, vocab))
print()

print("answer extraction on model-style outputs:")
for text in ("12 + 3 = 15.\n#### 15", "#### 1,234", "no marker at all"):
    print(f"  {text!r:40s} ->", extract_answer(text))
print("correctness check:",
      check_correctness("#### " + str(example.standard_answer), example.standard_answer))
print()

first_50 = subset(dataset, 50, seed=3)
first_25 = subset(dataset, 25, seed=3)
print("subset prefix property:",
      first_50.examples[:25] == first_25.examples)

path = OUT / "demo_dataset.jsonl"
save_jsonl(first_50, path)
print(f"saved {len(first_50)} examples to {path}; reload matches:",
      load_jsonl(path).examples == first_50.examples)
