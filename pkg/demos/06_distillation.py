"""
Distilling from several teachers
================================

Teachers are just arrays of patch tokens plus a global token. Student stage
features are resampled onto a 4x4 grid, projected per teacher and compared
by cosine distance.
"""

import numpy as np

from regla.distill import TeacherFeatures, init_heads, multi_teacher_loss
from regla.model import build, forward
from regla.verify import TINY_CONFIG

rng = np.random.default_rng(3)
model = build(TINY_CONFIG, seed=0)
_, feats = forward(model, rng.random((3, 64, 64)).astype(np.float32))
feats = [f.astype(np.float64) for f in feats]
print("student stages:", [f.shape for f in feats])

teachers = [
    TeacherFeatures("dino", rng.standard_normal((16, 12)), rng.standard_normal(12)),
    TeacherFeatures("sam", rng.standard_normal((16, 6)), rng.standard_normal(6)),
]
heads = init_heads([f.shape[0] for f in feats], teachers, seed=0)
loss = multi_teacher_loss(feats, teachers, heads)
for tid, val in loss.per_teacher.items():
    print(f"  {tid:>5}: {val:.4f}")
print(f"  total: {loss.total:.4f}  (mean of the two)")

# the heads live outside the model; dropping them changes nothing it computes
print("model parameter names with 'head/':", [k for k in model.named_parameters() if k.startswith("head/")])
