"""
The three gate wirings
======================

RGMA multiplies the attention context by a sigmoid gate computed with a
depthwise 3x3 convolution. The variants differ only in whether, and where,
the gate touches the value path.
"""

import numpy as np

from regla.attention import AttentionParams, GateVariant, conv_gate, rgma_forward

rng = np.random.default_rng(1)
x = rng.standard_normal((8, 6, 6))
params = AttentionParams.init(8, rng, std=0.3, dtype=np.float64)

outs = {v: rgma_forward(x, params, v) for v in GateVariant}
for v, out in outs.items():
    print(f"{v.value:>10}: shape {out.shape}, mean {out.mean():+.4f}")

gate = conv_gate(x, params.w_g, params.b_g)
print("gate range:", gate.min().round(4), "to", gate.max().round(4))

# with the gate zeroed, sigmoid(0) = 0.5 everywhere
params.w_g[:] = 0
params.b_g[:] = 0
ratio = rgma_forward(x, params, "decoupled") / rgma_forward(x, params, "none")
print("decoupled / none with a zero gate:", np.unique(ratio.round(12)))
