"""
Masked-image pretraining and kernel inflation
==============================================

Pretrain a patch encoder with 1x1 convolution kernels by reconstructing
masked patches, then pad the kernels to 3x3 and check that the encoder's
output does not change at all.
"""

import numpy as np

import vitae.tensor as T
from vitae.checkpoint import from_model, model_from_checkpoint
from vitae.config import preset
from vitae.mim import build_mim, inflate_checkpoint, make_mask_plan, pretrain_step
from vitae.nn import Module
from vitae.training import AdamW

g = np.random.default_rng(0)
images = g.standard_normal((16, 3, 32, 32)).astype(np.float32)

enc, dec = build_mim(preset("tiny-desk"), seed=0)
print(f"{enc.n_tokens} patch tokens of {enc.patch}x{enc.patch} pixels")

# Three quarters of the tokens are hidden; the encoder only sees the rest.
plan = make_mask_plan(1, enc.n_tokens, 0.75, seed=0)
print("kept", plan.kept.shape[1], "masked", plan.masked.shape[1])


class Both(Module):
    def __init__(self):
        super().__init__()
        self.enc, self.dec = enc, dec


opt = AdamW(Both(), lr=2e-3, weight_decay=0.0)
for step in range(60):
    loss = pretrain_step(enc, dec, images, 0.75, seed=step, optimizer=opt)
    if step % 10 == 0:
        print(f"step {step}: reconstruction loss {loss:.4f}")

# Zero-pad the 1x1 kernels to 3x3 and rebuild the encoder from the result.
big = model_from_checkpoint(inflate_checkpoint(from_model(enc)))
with T.no_grad():
    a, _ = enc.eval()(images)
    b, _ = big.eval()(images)
print("bit-identical after inflation:", np.array_equal(a.data, b.data))
