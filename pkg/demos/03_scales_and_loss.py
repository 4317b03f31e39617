"""The per-token scale functions and the two loss conventions, worked out.

Run from the repository root:

    python3 demos/03_scales_and_loss.py

Also demonstrates, on the exact-gradient table model, that one optimizer
step moves base-context probabilities the intended way: up for every
positive-scale token of a correct output, down for every flagged token of an
incorrect one.
"""

import math

import numpy as np

from nlft_lab import engine
from nlft_lab.models.tabular import TabularLM
from nlft_lab.saliency import NlftConfig, TokenLabel
from nlft_lab.scales import scale_correct, scale_incorrect
from nlft_lab.trainer import AdamWState, adamw_step

config = NlftConfig()
SAL, SUB, IRR = TokenLabel.SALIENCY, TokenLabel.SUB_SALIENCY, TokenLabel.IRRELEVANT

print("correct-branch scales (driven by the reference-context probability):")
print(f"  {'p_standard':>10s} {'saliency':>9s} {'sub':>7s} {'irrelevant':>11s}")
for p in (0.05, 0.25, 0.50, 0.75, 0.90, 0.951, 0.975, 0.999, 1.0):
    sal = f"{scale_correct(SAL, p, config):9.4f}" if p > config.p0_correct else "        -"
    print(f"  {p:10.3f} {sal} {scale_correct(SUB, p, config):7.3f} "
          f"{scale_correct(IRR, p, config):11.3f}")
print("  salient tokens always exceed 1; sub-salient >= irrelevant pointwise.")
print()

print("incorrect-branch scales (driven by the judge/base ratio):")
print(f"  {'r1':>6s} {'scale':>7s}")
for r1 in (1.6, 2.0, config.r0 + math.log(3), 4.0, 8.0):
    print(f"  {r1:6.2f} {scale_incorrect(SAL, r1, config):7.4f}")
print("  irrelevant tokens get exactly 0; note the 1.5 at the ln(3) offset.")
print()

print("loss conventions on one correct token with S = 1 and P_base = 1/e:")
print("  minimized (default):  S * (-log P)      =  1.0  pushes P up")
print("  literal as printed:   S * (log P)       = -1.0  would push P down")
print("  (the artifact trains with the minimized form; the literal form is")
print("   available through NlftConfig(loss_convention='literal'))")
print()

print("directional effect of one optimizer step (exact-gradient table model):")
rng = np.random.default_rng(0)
model = TabularLM(vocab_size=12, init="normal", seed=1)
ids = rng.choice(12, size=6, replace=False)  # distinct contexts
prompt, y = ids[:1], ids[1:]
weights = np.full(len(y), 0.3)

before = np.exp(engine.conditional_logprobs(model, prompt, y))
_, grad = engine.loss_and_grad(model, prompt, y, weights)
params, _ = adamw_step(model.params, grad, AdamWState.initial(model.params),
                       lr=1e-3, weight_decay=0.0)
model.set_params(params)
after = np.exp(engine.conditional_logprobs(model, prompt, y))
print("  correct branch, P_base per token before -> after:")
for b, a in zip(before, after):
    print(f"    {b:.4f} -> {a:.4f}  ({'+' if a > b else '-'})")

model = TabularLM(vocab_size=12, init="normal", seed=2)
before = np.exp(engine.conditional_logprobs(model, prompt, y))
_, grad = engine.loss_and_grad(model, prompt, y, weights,
                               unlikelihood_mask=np.ones(len(y), dtype=bool))
params, _ = adamw_step(model.params, grad, AdamWState.initial(model.params),
                       lr=1e-3, weight_decay=0.0)
model.set_params(params)
after = np.exp(engine.conditional_logprobs(model, prompt, y))
print("  incorrect branch (unlikelihood), P_base per token before -> after:")
for b, a in zip(before, after):
    print(f"    {b:.4f} -> {a:.4f}  ({'+' if a > b else '-'})")
