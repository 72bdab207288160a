"""
Reverse-mode gradients on a small expression
============================================

Every training objective in the package is built from ``Tensor`` operations
recorded on a ``Tape``. Here we differentiate a toy loss and compare with a
central difference.
"""
import numpy as np

from epochpose import autodiff as ad
from epochpose.autodiff import Tape, Tensor, grad

rng = np.random.default_rng(0)
a = Tensor(rng.normal(size=(3, 4)), True)
b = Tensor(rng.normal(size=(4, 1)), True)

with Tape() as tape:
    loss = ad.sum_(ad.tanh(a @ b) ** 2)
ga, gb = grad(tape, loss, [a, b])

# numerical check on one entry of b
h = 1e-6
bp, bm = b.data.copy(), b.data.copy()
bp[0, 0] += h
bm[0, 0] -= h
f = lambda v: float((np.tanh(a.data @ v) ** 2).sum())
print("autodiff", gb[0, 0], "central difference", (f(bp) - f(bm)) / (2 * h))
