"""
How far does each layer look?
=============================

Mean attention distance in input pixels, per layer, for an untrained
desk-scale model. Pass a trained checkpoint to ``vitae attn-dist`` for the
same table after training.
"""

import numpy as np

import vitae.tensor as T
from vitae.analysis import attention_distance, attention_distances
from vitae.attention import AttentionStats
from vitae.model import build

# Uniform attention over a 2x2 grid: the four distances are 0, 1, 1 and sqrt(2).
print("uniform 2x2:", attention_distance(AttentionStats(np.full((1, 1, 4, 4), 0.25), (2, 2), 1.0)))

m = build("tiny-desk").eval()
x = np.random.default_rng(0).standard_normal((8, 3, 32, 32)).astype(np.float32)
with T.no_grad():
    _, stats = m(x, capture_stats=True)
for name, d in attention_distances(stats).items():
    print(f"{name:<12} {d:6.2f} px")
