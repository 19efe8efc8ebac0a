"""Weight initialisation helpers."""

from __future__ import annotations

import numpy as np
from scipy.stats import truncnorm

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std."""
    x = truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)
    return np.asarray(x, dtype=dtype).reshape(shape)


def zeros(shape, dtype=np.float32) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def ones(shape, dtype=np.float32) -> np.ndarray:
    return np.ones(shape, dtype=dtype)
