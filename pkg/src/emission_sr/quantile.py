"""Non-parametric quantile transform onto a uniform or standard-normal target.

A transform is fitted on a pool of emission values and applied pointwise, so
the same object serves the LR input stage and (through :func:`invert`) the HR
output stage of the super-resolution pipeline.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .core import DomainTag, PatchPair
from .errors import ConfigError, DataError, FormatError

DEFAULT_N_QUANTILES = 1000
DEFAULT_SUBSAMPLE_CAP = 100_000
CLIP_EPS = 1e-7

# Acklam's rational approximation to the normal quantile function.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _lower_half_quantile(p: np.ndarray) -> np.ndarray:
    """Normal quantile for 0 < p <= 0.5."""
    x = np.empty_like(p)
    tail = p < _P_LOW
    q = np.sqrt(-2 * np.log(p[tail]))
    x[tail] = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
        (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1
    )
    mid = ~tail
    q = p[mid] - 0.5
    r = q * q
    x[mid] = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1
    )
    # one Halley refinement against the exact CDF
    e = ndtr(x) - p
    u = e * math.sqrt(2 * math.pi) * np.exp(0.5 * x * x)
    x = x - u / (1 + 0.5 * x * u)
    x[p == 0.5] = 0.0
    return x


def gaussian_inverse_cdf(u):
    """Standard normal quantile function, accurate to well below 1e-9."""
    arr = np.asarray(u, dtype=np.float64)
    if np.any(~(arr > 0) | ~(arr < 1)):
        raise DataError("gaussian_inverse_cdf is defined on the open interval (0, 1)")
    flat = arr.reshape(-1)
    out = np.empty_like(flat)
    upper = flat > 0.5
    out[~upper] = _lower_half_quantile(flat[~upper])
    # 1 - u is exact for u >= 0.5, so the symmetry holds bit-for-bit
    out[upper] = -_lower_half_quantile(1.0 - flat[upper])
    out = out.reshape(arr.shape)
    return out if out.ndim else float(out)


class Target(enum.Enum):
    UNIFORM = "uniform"
    NORMAL = "normal"


@dataclass(frozen=True, eq=False)
class QuantileTransform:
    quantiles: np.ndarray
    target: Target = Target.NORMAL
    fitted_on: DomainTag = DomainTag.simulated()
    fit_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        q = np.array(self.quantiles, dtype=np.float64)
        if q.ndim != 1 or q.size < 2:
            raise ConfigError("a quantile transform needs at least 2 quantiles")
        if not np.all(np.isfinite(q)):
            raise DataError("quantiles must be finite")
        if np.any(np.diff(q) < 0):
            raise DataError("quantiles must be non-decreasing")
        if not 0 < self.fit_fraction <= 1:
            raise ConfigError("fit_fraction must lie in (0, 1]")
        q.setflags(write=False)
        object.__setattr__(self, "quantiles", q)

    @property
    def n_quantiles(self) -> int:
        return self.quantiles.size

    @property
    def references(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_quantiles)

    @property
    def degenerate(self) -> bool:
        return bool(self.quantiles[0] == self.quantiles[-1])

    def __eq__(self, other):
        if not isinstance(other, QuantileTransform):
            return NotImplemented
        return (
            np.array_equal(self.quantiles, other.quantiles)
            and self.target == other.target
            and self.fitted_on == other.fitted_on
            and self.fit_fraction == other.fit_fraction
            and self.seed == other.seed
        )

    def apply(self, x):
        return apply(self, x)

    def invert(self, z):
        return invert(self, z)


def fit(
    pool,
    n_quantiles: int = DEFAULT_N_QUANTILES,
    target: Target = Target.NORMAL,
    seed: int = 0,
    subsample_cap: int | None = DEFAULT_SUBSAMPLE_CAP,
    fitted_on: DomainTag = DomainTag.simulated(),
    fit_fraction: float = 1.0,
) -> QuantileTransform:
    """Fit empirical quantiles at ranks k/(n-1), interpolating linearly between order statistics."""
    values = np.asarray(pool, dtype=np.float64).reshape(-1)
    if n_quantiles < 2:
        raise ConfigError("n_quantiles must be >= 2")
    if not np.all(np.isfinite(values)):
        raise DataError("fit pool contains non-finite values")
    if subsample_cap is not None and values.size > subsample_cap:
        idx = np.random.default_rng(seed).choice(values.size, size=subsample_cap, replace=False)
        values = values[idx]
    if values.size < n_quantiles:
        raise DataError(f"fit pool has {values.size} values, fewer than n_quantiles={n_quantiles}")
    quantiles = np.quantile(values, np.linspace(0.0, 1.0, n_quantiles))
    # guard against round-off producing a tiny descent
    quantiles = np.maximum.accumulate(quantiles)
    return QuantileTransform(quantiles, Target(target), fitted_on, fit_fraction, seed)


def patch_pool(patches: Sequence[PatchPair], nonzero_only: bool = False) -> np.ndarray:
    values = np.concatenate([p.hr.reshape(-1) for p in patches]) if patches else np.empty(0)
    return values[values > 0] if nonzero_only else values


def fit_fraction(
    patches: Sequence[PatchPair],
    fraction: float,
    n_subsets: int = 3,
    seed: int = 0,
    n_quantiles: int = DEFAULT_N_QUANTILES,
    target: Target = Target.NORMAL,
    subsample_cap: int | None = DEFAULT_SUBSAMPLE_CAP,
    nonzero_only: bool = False,
) -> list[QuantileTransform]:
    """Fit ``n_subsets`` transforms, each on an independent random ``fraction`` of the patches."""
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    n = len(patches)
    if n == 0:
        raise DataError("empty patch pool")
    k = int(round(fraction * n))
    if k < 1:
        raise DataError(f"fraction {fraction} of {n} patches selects no patch")
    fitted_on = patches[0].domain
    transforms = []
    for i, sub_seed in enumerate(np.random.SeedSequence([seed, 0x5EED]).spawn(n_subsets)):
        rng = np.random.default_rng(sub_seed)
        chosen = rng.choice(n, size=k, replace=False)
        pool = patch_pool([patches[j] for j in sorted(chosen)], nonzero_only)
        transforms.append(
            fit(pool, n_quantiles, target, seed + i, subsample_cap, fitted_on, fraction)
        )
    return transforms


def _cdf(t: QuantileTransform, x: np.ndarray) -> np.ndarray:
    q, r = t.quantiles, t.references
    # average of forward and backward interpolation so repeated quantiles
    # (e.g. a block of zeros) map to the middle of their rank interval
    fwd = np.interp(x, q, r)
    bwd = -np.interp(-x, -q[::-1], -r[::-1])
    return np.clip(0.5 * (fwd + bwd), 0.0, 1.0)


def apply(t: QuantileTransform, x):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("cannot transform non-finite values")
    u = _cdf(t, arr)
    if t.target is Target.NORMAL:
        u = gaussian_inverse_cdf(np.clip(u, CLIP_EPS, 1 - CLIP_EPS))
    return u if np.ndim(u) else float(u)


def invert(t: QuantileTransform, z):
    arr = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("cannot invert non-finite values")
    u = ndtr(arr) if t.target is Target.NORMAL else np.clip(arr, 0.0, 1.0)
    out = np.clip(np.interp(u, t.references, t.quantiles), t.quantiles[0], t.quantiles[-1])
    return out if np.ndim(out) else float(out)


# --------------------------------------------------------------------------
# serialization

_CSV_HEADER = "n_quantiles,target,fitted_on,fit_fraction,seed"


def save_transform(t: QuantileTransform, path) -> None:
    lines = [_CSV_HEADER, f"{t.n_quantiles},{t.target.value},{t.fitted_on},{t.fit_fraction!r},{t.seed}"]
    lines += [repr(float(v)) for v in t.quantiles]
    Path(path).write_text("\n".join(lines) + "\n")


def load_transform(path) -> QuantileTransform:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read transform {path}: {exc}") from exc
    if len(lines) < 2 or lines[0].strip() != _CSV_HEADER:
        raise FormatError(f"{path}: not a quantile transform file")
    try:
        n, target, fitted_on, fraction, seed = lines[1].split(",")
        quantiles = np.array([float(v) for v in lines[2:] if v.strip()])
        n = int(n)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if quantiles.size != n:
        raise FormatError(f"{path}: header declares {n} quantiles, found {quantiles.size}")
    return QuantileTransform(quantiles, Target(target), DomainTag.parse(fitted_on), float(fraction), int(seed))
