"""Separable bicubic resampling (Keys kernel, align-corners=false, clamp-to-edge)."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DimensionError

DEFAULT_A = -0.5


@dataclass(frozen=True)
class BicubicKernel:
    a: float = DEFAULT_A

    def __post_init__(self):
        if not self.a < 0:
            raise ConfigError("bicubic kernel parameter a must be negative")

    def __call__(self, t):
        return cubic_weight(t, self.a)


def cubic_weight(t, a: float = DEFAULT_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    out = np.where(t <= 1, near, np.where(t < 2, far, 0.0))
    return out if out.ndim else float(out)


@lru_cache(maxsize=64)
def _weights(n_in: int, n_out: int, a: float) -> np.ndarray:
    """Dense (n_out, n_in) matrix for one axis; rows sum to 1."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for j in range(n_out):
        src = (j + 0.5) * scale - 0.5
        base = int(np.floor(src))
        t = src - base
        for k in (-1, 0, 1, 2):
            m[j, min(max(base + k, 0), n_in - 1)] += cubic_weight(t - k, a)
    m.setflags(write=False)
    return m


def _resample(grid: np.ndarray, out_shape: tuple[int, int], a: float, clamp: bool) -> np.ndarray:
    wh = _weights(grid.shape[0], out_shape[0], a)
    ww = _weights(grid.shape[1], out_shape[1], a)
    out = wh @ grid @ ww.T
    if clamp:
        np.maximum(out, 0.0, out=out)
    return out


def bicubic_downsample(hr, factor: int = 2, a: float = DEFAULT_A, clamp: bool = True) -> np.ndarray:
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim != 2:
        raise DimensionError(f"expected a 2-D grid, got shape {hr.shape}")
    if factor < 1 or hr.shape[0] % factor or hr.shape[1] % factor:
        raise DimensionError(f"grid {hr.shape} is not divisible by factor {factor}")
    if factor == 1:
        return hr.copy()
    return _resample(hr, (hr.shape[0] // factor, hr.shape[1] // factor), a, clamp)


def bicubic_upsample(lr, factor: int = 2, a: float = DEFAULT_A, clamp: bool = True) -> np.ndarray:
    lr = np.asarray(lr, dtype=np.float64)
    if lr.ndim != 2 or lr.shape[0] < 1 or lr.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D grid, got shape {lr.shape}")
    if factor < 1:
        raise DimensionError("factor must be >= 1")
    return _resample(lr, (lr.shape[0] * factor, lr.shape[1] * factor), a, clamp)
