"""Multi-teacher feature distillation losses.

Teachers are plain feature providers (patch tokens plus a CLS vector); no
teacher network is ever run here. Student stage features are resampled onto
the stride-16 token grid, projected per teacher by a ladder of linear heads
(one per (stage, teacher) pair, summed) and compared with standardized teacher
features by cosine distance only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .errors import AlignmentError, ConfigurationError
from .init import INIT_STD, trunc_normal, zeros

STD_FLOOR = 1e-6
NORM_FLOOR = 1e-8


@dataclass
class TeacherFeatures:
    teacher_id: str
    patch_tokens: np.ndarray  # (N, d_t)
    cls_token: np.ndarray  # (d_t,)

    def __post_init__(self):
        self.patch_tokens = np.asarray(self.patch_tokens)
        self.cls_token = np.asarray(self.cls_token).reshape(-1)
        if self.patch_tokens.ndim != 2 or self.patch_tokens.shape[0] < 1:
            raise ConfigurationError(f"teacher {self.teacher_id}: patch tokens must be (N, d), N >= 1")
        if self.cls_token.shape[0] != self.patch_tokens.shape[1]:
            raise ConfigurationError(f"teacher {self.teacher_id}: CLS width != patch width")
        if not (np.all(np.isfinite(self.patch_tokens)) and np.all(np.isfinite(self.cls_token))):
            raise ConfigurationError(f"teacher {self.teacher_id}: non-finite features")

    @property
    def dim(self) -> int:
        return self.patch_tokens.shape[1]


@dataclass
class ProjectionHead:
    """Per-teacher ladder: one linear map per student stage, for patch and CLS paths."""

    patch_w: list  # per stage (C_s, d_t)
    patch_b: object  # (d_t,)
    cls_w: list
    cls_b: object

    @classmethod
    def init(cls, stage_channels: Sequence[int], dim: int, rng: np.random.Generator, dtype=np.float64):
        return cls(
            [trunc_normal(rng, (c, dim), INIT_STD, dtype) for c in stage_channels],
            zeros((dim,), dtype),
            [trunc_normal(rng, (c, dim), INIT_STD, dtype) for c in stage_channels],
            zeros((dim,), dtype),
        )

    def to_tensors(self, teacher_id: str) -> dict[str, np.ndarray]:
        out = {f"head/{teacher_id}/patch_b": self.patch_b, f"head/{teacher_id}/cls_b": self.cls_b}
        for s, (pw, cw) in enumerate(zip(self.patch_w, self.cls_w)):
            out[f"head/{teacher_id}/patch_w/{s}"] = pw
            out[f"head/{teacher_id}/cls_w/{s}"] = cw
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, teacher_id: str, num_stages: int) -> "ProjectionHead":
        p = f"head/{teacher_id}/"
        return cls([tensors[f"{p}patch_w/{s}"] for s in range(num_stages)], tensors[f"{p}patch_b"],
                    [tensors[f"{p}cls_w/{s}"] for s in range(num_stages)], tensors[f"{p}cls_b"])


def init_heads(stage_channels: Sequence[int], teachers: Sequence[TeacherFeatures], seed: int = 0,
               dtype=np.float64) -> dict[str, ProjectionHead]:
    rng = np.random.default_rng(seed)
    return {t.teacher_id: ProjectionHead.init(stage_channels, t.dim, rng, dtype)
            for t in sorted(teachers, key=lambda t: t.teacher_id)}


class DistillLoss(NamedTuple):
    total: object
    per_teacher: dict


# --------------------------------------------------------------------------


def cls_from_patches(patch_tokens):
    """Global token: mean of the patch tokens."""
    return ad.mean(patch_tokens, axis=0)


def standardize_features(f: np.ndarray, stats_from: np.ndarray | None = None) -> np.ndarray:
    """Per-dimension zero mean / unit variance over tokens.

    Statistics come from ``stats_from`` when given (used to standardize a
    teacher's CLS vector with the statistics of its patch tokens).
    """
    ref = f if stats_from is None else stats_from
    mu = ref.mean(axis=0)
    std = np.maximum(ref.std(axis=0), STD_FLOOR)
    return (f - mu) / std


def _row_norm(a):
    return ad.sqrt(ad.maximum(ad.sum(ad.mul(a, a), axis=1, keepdims=True), NORM_FLOOR**2))


def cosine_loss(a, b):
    """Mean over rows of 1 - cos(a_i, b_i); lies in [0, 2]."""
    dots = ad.sum(ad.mul(a, b), axis=1, keepdims=True)
    cos = ad.div(dots, ad.mul(_row_norm(a), _row_norm(b)))
    return ad.sub(1.0, ad.mean(cos))


def align_to_grid(feature, grid_hw: tuple[int, int]):
    """Resample a (C, h, w) stage map to the token grid and flatten to (N, C)."""
    _, h, w = feature.shape
    gh, gw = grid_hw
    if h >= gh and w >= gw:
        resampled = ad.adaptive_avg_pool(feature, gh, gw)
    else:
        if gh % h or gw % w or gh // h != gw // w:
            raise AlignmentError(f"cannot map a {h}x{w} stage onto a {gh}x{gw} grid")
        resampled = ad.upsample_nearest(feature, gh // h)
    return ad.flatten_spatial(resampled)


def project(aligned: Sequence, head: ProjectionHead):
    """Ladder projection: (patches (N, d_t), cls (1, d_t))."""
    patches = head.patch_b
    cls = head.cls_b
    for tokens, pw, cw in zip(aligned, head.patch_w, head.cls_w):
        patches = ad.add(patches, ad.matmul(tokens, pw))
        pooled = ad.reshape(cls_from_patches(tokens), (1, tokens.shape[1]))
        cls = ad.add(cls, ad.matmul(pooled, cw))
    return patches, ad.reshape(cls, (1, head.cls_b.shape[0]))


def teacher_targets(teacher: TeacherFeatures) -> tuple[np.ndarray, np.ndarray]:
    patches = standardize_features(teacher.patch_tokens)
    cls = standardize_features(teacher.cls_token[None, :], stats_from=teacher.patch_tokens)
    return patches, cls


def default_grid(stage_features: Sequence) -> tuple[int, int]:
    """The stride-16 grid: third stage of a four-stage pyramid."""
    ref = stage_features[min(2, len(stage_features) - 1)]
    return int(ref.shape[1]), int(ref.shape[2])


def multi_teacher_loss(student_stage_features: Sequence, teachers: Sequence[TeacherFeatures],
                       heads: dict[str, ProjectionHead], grid_hw: tuple[int, int] | None = None) -> DistillLoss:
    """Mean over teachers of patch cosine loss + CLS cosine loss.

    Every teacher contributes on every call (no teacher dropout). Terms are
    summed in teacher-id order.
    """
    if not teachers:
        raise ConfigurationError("need at least one teacher")
    grid_hw = grid_hw or default_grid(student_stage_features)
    n_tokens = grid_hw[0] * grid_hw[1]
    aligned = [align_to_grid(f, grid_hw) for f in student_stage_features]

    per_teacher = {}
    total = 0.0
    ordered = sorted(teachers, key=lambda t: t.teacher_id)
    for t in ordered:
        if t.patch_tokens.shape[0] != n_tokens:
            raise AlignmentError(
                f"teacher {t.teacher_id} has {t.patch_tokens.shape[0]} tokens, student grid has {n_tokens}"
            )
        if t.teacher_id not in heads:
            raise KeyError(f"no projection head for teacher {t.teacher_id!r}")
        patches, cls = project(aligned, heads[t.teacher_id])
        target_p, target_c = teacher_targets(t)
        loss = ad.add(cosine_loss(patches, target_p), cosine_loss(cls, target_c))
        per_teacher[t.teacher_id] = loss
        total = ad.add(total, loss)
    return DistillLoss(ad.div(total, float(len(ordered))), per_teacher)
