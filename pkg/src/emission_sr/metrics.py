"""NMSE (dB) and SSIM, per patch and pooled over a dataset."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DomainTag
from .errors import DataError, DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def nmse_db(reference, estimate) -> float:
    """10 log10(mean((ref - est)^2) / mean(ref^2)); -inf for an exact match."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise DimensionError(f"shape mismatch {ref.shape} vs {est.shape}")
    power = np.mean(ref * ref)
    if power == 0:
        raise DataError("NMSE undefined for an all-zero reference")
    err = np.mean((ref - est) ** 2)
    if err == 0:
        return -math.inf
    return 10.0 * math.log10(err / power)


def dataset_nmse_db(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    """Pooled NMSE: 10 log10(sum ||ref - est||^2 / sum ||ref||^2)."""
    err = power = 0.0
    n = 0
    for ref, est in pairs:
        ref = np.asarray(ref, dtype=np.float64)
        est = np.asarray(est, dtype=np.float64)
        if ref.shape != est.shape:
            raise DimensionError(f"shape mismatch {ref.shape} vs {est.shape}")
        err += float(np.sum((ref - est) ** 2))
        power += float(np.sum(ref * ref))
        n += 1
    if n == 0:
        raise DataError("no patches to evaluate")
    if power == 0:
        raise DataError("every reference patch is all-zero")
    if err == 0:
        return -math.inf
    return 10.0 * math.log10(err / power)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(reference, estimate, data_range: float) -> np.ndarray:
    """Local SSIM over every fully contained 11x11 window; leading batch axes allowed."""
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(estimate, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim < 2 or x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs grids of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    if not data_range > 0:
        raise DataError("data_range must be positive")
    w = gaussian_window()

    def blur(a):
        return np.einsum("...ijkl,kl->...ij", sliding_window_view(a, w.shape, axis=(-2, -1)), w)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(reference, estimate, data_range: float) -> float:
    return float(np.clip(ssim_map(reference, estimate, data_range).mean(), -1.0, 1.0))


def batch_ssim(references, estimates, data_range: float) -> np.ndarray:
    """Per-patch SSIM for stacked (N, H, W) arrays."""
    m = ssim_map(references, estimates, data_range)
    return np.clip(m.mean(axis=(-2, -1)), -1.0, 1.0)


@dataclass(frozen=True)
class MetricReport:
    nmse_db: float
    ssim: float
    n_patches: int
    domain: DomainTag
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_patches < 1:
            raise DataError("a report needs at least one patch")
        if not -1 <= self.ssim <= 1:
            raise DataError(f"SSIM {self.ssim} outside [-1, 1]")


def format_db(value: float) -> str:
    if value == -math.inf:
        return "-inf"
    return f"{value:.4f}"


def score(references: Sequence[np.ndarray], estimates: Sequence[np.ndarray]) -> tuple[float, float, float]:
    """Return (pooled NMSE dB, mean SSIM, data_range) with data_range = global reference range."""
    refs = np.stack([np.asarray(r, dtype=np.float64) for r in references])
    ests = np.stack([np.asarray(e, dtype=np.float64) for e in estimates])
    data_range = float(refs.max() - refs.min())
    if data_range <= 0:
        raise DataError("reference patches have zero dynamic range")
    return dataset_nmse_db(zip(refs, ests)), float(batch_ssim(refs, ests, data_range).mean()), data_range


def evaluate(checkpoint, transform, patches, config: dict | None = None) -> MetricReport:
    """Super-resolve every test patch through ``transform`` and score against its HR reference.

    Empty patches are included; the pooled NMSE is unaffected by them and
    SSIM uses the global range of all test references.
    """
    from .training import super_resolve

    if not patches:
        raise DataError("empty test set")
    estimates = super_resolve(checkpoint, transform, transform, [p.lr for p in patches])
    nmse, mean_ssim, data_range = score([p.hr for p in patches], estimates)
    echo = {"data_range": data_range, "nmse_aggregation": "pooled", **(config or {})}
    return MetricReport(nmse, mean_ssim, len(patches), patches[0].domain, echo)
