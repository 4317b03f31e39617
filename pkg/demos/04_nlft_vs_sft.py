"""Small end-to-end comparison of saliency-weighted training against SFT.

Run from the repository root (a few minutes; reuses the cached base from
demo 02 if present):

    python3 demos/04_nlft_vs_sft.py

Fine-tunes the same pretrained base on 50 examples with both algorithms at a
matched step budget, evaluates on a held-out split after every few epochs,
and writes metrics, a comparison CSV, and an accuracy chart to demos/out/.
"""

from pathlib import Path

from nlft_lab import engine, evaluation
from nlft_lab.corpus import build_vocab, generate_synthetic, subset
from nlft_lab.generation import DecodeConfig, ModelGenerator, OracleTeacher
from nlft_lab.models.transformer import TinyTransformer, TransformerConfig
from nlft_lab.trainer import TrainConfig, pretrain_base, train

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)
BASE = OUT / "demo_base.json"

vocab = build_vocab()
if BASE.exists():
    print(f"using cached base checkpoint {BASE}")
else:
    print("pretraining a small base model (one-time, ~1-2 minutes)...")
    model = TinyTransformer(TransformerConfig(vocab_size=len(vocab), seed=0))
    pretrain_base(
        model, generate_synthetic(seed=999, count=300, difficulty="easy"),
        vocab, epochs=10, batch_size=16, learning_rate=3e-3, seed=0,
    )
    engine.save_params(model, BASE)

train_data = subset(generate_synthetic(seed=101, count=200, difficulty="easy"), 50, 0)
heldout = generate_synthetic(seed=555, count=100, difficulty="easy")
eval_decode = DecodeConfig(temperature=0.0, max_tokens=24, seed=0)

base_model = engine.load_params(BASE, expected_vocab_size=len(vocab))
base_acc = evaluation.evaluate(
    ModelGenerator(base_model, vocab, "toy-v1"), heldout, eval_decode
).accuracy
print(f"base model held-out accuracy before fine-tuning: {base_acc:.3f}")

run_dirs = []
for algo in ("nlft", "sft"):
    config = TrainConfig(
        algorithm=algo, epochs=20, batch_size=4, learning_rate=1e-3, seed=0,
        data_mode="teaching", shuffle_each_epoch=True,
        gen_decode=DecodeConfig(temperature=0.6, max_tokens=48, seed=0),
        eval_decode=eval_decode, eval_every=5, checkpoint_every=0,
        run_name=f"{algo}-demo",
    )
    run_dir = OUT / f"run-{algo}"
    model = engine.load_params(BASE, expected_vocab_size=len(vocab))
    print(f"training {algo} for {config.epochs} epochs on 50 examples...")
    _, manifest = train(
        config, train_data, model, vocab, run_dir=run_dir,
        teacher=OracleTeacher(), eval_dataset=heldout,
    )
    trajectory = [
        (row["epoch"], row["accuracy"])
        for row in manifest.epoch_rows if row["accuracy"] is not None
    ]
    print(f"  {algo} held-out accuracy by epoch: {trajectory}")
    run_dirs.append(run_dir / "manifest.json")

rows = evaluation.compare_runs(
    run_dirs, out_csv=OUT / "comparison.csv", out_svg=OUT / "comparison.svg"
)
print(f"wrote {len(rows)} comparison rows; chart at {OUT / 'comparison.svg'}")
print("tendency to look for in the trajectories: plain SFT peaks early and")
print("fades as it overfits the 50 examples, while the saliency-weighted run")
print("degrades less; exact numbers move with the base recipe and seed.")
