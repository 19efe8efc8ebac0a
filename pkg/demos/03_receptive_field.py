"""
How far does one pixel reach?
=============================

An ELRF block stacks a 3x3 and a 5x5 depthwise convolution, so a single
input pixel should influence exactly a 7x7 neighbourhood. We poke the block
with an impulse and print the footprint.
"""

import numpy as np

from regla import blocks as B
from regla.verify import impulse_response, support_box

rng = np.random.default_rng(2)
w = {k: rng.standard_normal(v.shape) * 0.5 for k, v in B.init_elrf(4, dtype=np.float64).items()}

resp = impulse_response(lambda x: B.elrf_block(x, w), (4, 11, 11), channel=0, row=5, col=5)
mask = np.any(resp != 0, axis=0)
for row in mask:
    print("".join("#" if m else "." for m in row))
print("support box (r0, r1, c0, c1):", support_box(resp))

# two blocks in a row: 7 + 7 - 1 = 13
resp2 = impulse_response(lambda x: B.elrf_block(B.elrf_block(x, w), w), (4, 17, 17), 0, 8, 8)
r0, r1, c0, c1 = support_box(resp2)
print(f"two blocks: {r1 - r0 + 1}x{c1 - c0 + 1}")
