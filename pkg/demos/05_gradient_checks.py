"""
Checking gradients against finite differences
=============================================

The tape records each primitive as it runs; backward() replays it in
reverse. Central differences in float64 give an independent answer.
"""

import numpy as np

from regla import autodiff as ad
from regla import verify

# a hand-sized example: d/dx sum(x * x) = 2x
value, (g,) = ad.grad(lambda x: ad.sum(ad.mul(x, x)), np.array([3.0, -1.0]))
print("f =", value, " grad =", g)

# the same machinery on a whole gated-attention block
print()
for r in verify.run_gradcheck("attention", seeds=(0,)):
    print(f"{r.unit:>28}  {r.error:.2e}  {'ok' if r.passed else 'FAIL'}")
