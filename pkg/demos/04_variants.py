"""
Five network sizes
==================

Parameter and FLOP counts for each variant, then one forward pass of the
smallest network on a random image.
"""

import time

import numpy as np

from regla.bench import model_flops
from regla.model import VARIANTS, ModelConfig, build, count_params, forward

print(f"{'variant':>8} {'blocks':>16} {'channels':>20} {'params':>9} {'GFLOPs@224':>11}")
for name, (blocks, channels, _) in VARIANTS.items():
    cfg = ModelConfig.from_variant(name)
    total, _ = count_params(build(cfg))
    gflops = model_flops(cfg, 224)["total"] / 1e9
    print(f"{name:>8} {str(list(blocks)):>16} {str(list(channels)):>20} {total / 1e6:>8.2f}M {gflops:>11.3f}")

model = build(ModelConfig.from_variant("T"), seed=0)
x = np.random.default_rng(0).random((3, 224, 224)).astype(np.float32)
t0 = time.perf_counter()
logits, feats = forward(model, x)
print(f"\nT forward at 224px: {time.perf_counter() - t0:.2f}s")
for i, f in enumerate(feats, 1):
    print(f"  stage{i}: {f.shape}")
print("top-3 classes:", np.argsort(-logits)[:3])
