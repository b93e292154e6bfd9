"""
Inside a reduction cell and a normal cell
==========================================

Trace feature shapes through the cells of a small isotropic model and look
at what the convolution branch contributes.
"""

import numpy as np

import vitae.tensor as T
from vitae.cells import NormalCell
from vitae.model import build
from vitae.rng import make_rng
from vitae.tensor import Tensor

m = build("tiny-desk").eval()
x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32))

# Each reduction cell shrinks the grid: 32 -> 8 -> 4 -> 2.
f = x
with T.no_grad():
    for i, stage in enumerate(m.stages):
        f, _ = stage.rc(f)
        print(f"after RC{i + 1}: {f.shape}")

# A normal cell keeps the token count. With a class token in front, the
# convolution branch only sees the spatial tokens, so it leaves row 0 alone.
nc = NormalCell(16, 2, make_rng(0), groups=4, ffn_ratio=2.0).eval()
t = Tensor(np.random.default_rng(1).standard_normal((1, 10, 16)).astype(np.float32))
with T.no_grad():
    before, _ = nc(t, (3, 3), True)
    for p in nc.pcm.parameters():
        p.data = p.data * 2
    after, _ = nc(t, (3, 3), True)
print("class row changed:", not np.array_equal(before.data[:, 0], after.data[:, 0]))
print("spatial rows changed:", not np.array_equal(before.data[:, 1:], after.data[:, 1:]))
