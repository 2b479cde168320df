"""Seeded generator of paired simulated-like and observed-like emission datasets.

Simulated frames are sharp: anisotropic Gaussian emission hot spots with a
seasonal cycle, modulated by log-normal power-law texture that changes every
frame. Observed frames are derived from windows of simulated frames by
temporal averaging, spatial blur, multiplicative noise, a power-law change of
dynamic range and a coarser native grid.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import wasserstein_distance

from .core import (
    DatasetManifest,
    DomainTag,
    EmissionMap,
    manifest_for_maps,
    write_emg,
    write_manifest,
)
from .errors import ConfigError, DataError, DimensionError
from .resample import bicubic_downsample

log = logging.getLogger(__name__)

FINE_RESOLUTION = 0.25


@dataclass(frozen=True)
class FieldConfig:
    height: int = 128
    width: int = 128
    blob_count: int = 12
    spectral_slope: float = 2.5
    zero_fraction: float = 0.3
    amplitude: float = 1e-9
    seed: int = 42
    texture_strength: float = 0.6
    texture_persistence: float = 0.5  # share of texture variance that is static across frames
    coast_ramp: float = 0.5  # coastal taper width, in std units of the coastline field; 0 = hard edge
    bump_width: tuple[float, float] = (0.04, 0.18)  # log-uniform range of bump std, as a share of the grid side

    def __post_init__(self):
        if self.height < 32 or self.width < 32 or self.height % 32 or self.width % 32:
            raise ConfigError("grid dimensions must be >= 32 and divisible by 32")
        if not 0 <= self.zero_fraction < 1:
            raise ConfigError("zero_fraction must lie in [0, 1)")
        if self.blob_count < 1 or self.amplitude <= 0:
            raise ConfigError("need at least one blob and a positive amplitude")
        if not 0 <= self.texture_persistence <= 1:
            raise ConfigError("texture_persistence must lie in [0, 1]")
        if self.coast_ramp < 0:
            raise ConfigError("coast_ramp must be >= 0")
        lo, hi = self.bump_width
        if not 0 < lo <= hi:
            raise ConfigError("bump_width must satisfy 0 < low <= high")


@dataclass(frozen=True)
class DomainShiftConfig:
    aggregation_window: int = 6
    blur_sigma: float = 1.5
    noise_level: float = 0.2
    gain: float = 2.5
    gamma: float = 0.85
    native_downscale: int = 2

    def __post_init__(self):
        if self.aggregation_window < 1:
            raise ConfigError("aggregation_window must be >= 1")
        if self.blur_sigma < 0 or self.noise_level < 0:
            raise ConfigError("blur_sigma and noise_level must be >= 0")
        if self.gain <= 0 or self.gamma <= 0:
            raise ConfigError("gain and gamma must be positive")
        if self.native_downscale < 1:
            raise ConfigError("native_downscale must be >= 1")


NULL_SHIFT = DomainShiftConfig(1, 0.0, 0.0, 1.0, 1.0, 1)


def power_law_field(shape: tuple[int, int], slope: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian field with power spectrum ~ |k|^-slope."""
    h, w = shape
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.rfftfreq(w)[None, :]
    k = np.hypot(ky, kx)
    k[0, 0] = np.inf
    amp = k ** (-slope / 2)
    spec = (rng.standard_normal(amp.shape) + 1j * rng.standard_normal(amp.shape)) * amp
    field = np.fft.irfft2(spec, s=shape)
    field -= field.mean()
    return field / field.std()


def radial_power_spectrum(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Azimuthally averaged periodogram; returns (radial frequency, power) without the DC bin."""
    h, w = grid.shape
    p = np.abs(np.fft.fft2(grid - grid.mean())) ** 2
    k = np.hypot(np.fft.fftfreq(h)[:, None], np.fft.fftfreq(w)[None, :])
    step = 1.0 / max(h, w)
    bins = np.rint(k / step).astype(int)
    counts = np.bincount(bins.ravel())
    sums = np.bincount(bins.ravel(), weights=p.ravel())
    valid = np.nonzero(counts)[0]
    valid = valid[(valid > 0) & (valid <= min(h, w) // 2)]
    return valid * step, sums[valid] / counts[valid]


def spectral_slope_estimate(grid: np.ndarray) -> float:
    """Least-squares slope of log power vs log frequency (positive for decaying spectra)."""
    k, p = radial_power_spectrum(grid)
    return -float(np.polyfit(np.log(k), np.log(p), 1)[0])


def high_frequency_energy(grid: np.ndarray, cutoff: float = 0.25) -> float:
    k, p = radial_power_spectrum(grid)
    return float(p[k > cutoff].sum())


class _Static:
    """Per-seed spatial layout shared by every frame of a run."""

    def __init__(self, cfg: FieldConfig):
        rng = np.random.default_rng([cfg.seed, 0])
        h, w = cfg.height, cfg.width
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        self.bumps = []
        size = min(h, w)
        for _ in range(cfg.blob_count):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            lo, hi = np.log(cfg.bump_width)
            sa, sb = np.exp(rng.uniform(lo, hi, size=2)) * size
            theta = rng.uniform(0, np.pi)
            weight = rng.uniform(0.3, 1.0)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            self.bumps.append(weight * np.exp(-0.5 * ((u / sa) ** 2 + (v / sb) ** 2)))
        self.phases = rng.uniform(0, np.pi, size=cfg.blob_count)
        self.static_texture = power_law_field((h, w), cfg.spectral_slope, rng)
        coast = power_law_field((h, w), 4.0, rng)
        n_ocean = int(np.ceil(cfg.zero_fraction * h * w))
        land = np.ones(h * w, dtype=bool)
        order = np.argsort(coast, axis=None, kind="stable")
        land[order[:n_ocean]] = False
        self.land = land.reshape(h, w)
        # emissions fade to zero towards the coast instead of stepping
        if n_ocean and cfg.coast_ramp > 0:
            level = coast.ravel()[order[n_ocean - 1]]
            r = np.clip((coast - level) / cfg.coast_ramp, 0.0, 1.0)
            self.taper = r * r * (3 - 2 * r)
        else:
            self.taper = np.ones((h, w))
        self.taper[~self.land] = 0.0


_STATIC_CACHE: dict[FieldConfig, _Static] = {}


def _static(cfg: FieldConfig) -> _Static:
    if cfg not in _STATIC_CACHE:
        _STATIC_CACHE.clear()
        _STATIC_CACHE[cfg] = _Static(cfg)
    return _STATIC_CACHE[cfg]


def land_mask(cfg: FieldConfig) -> np.ndarray:
    return _static(cfg).land.copy()


def coarse_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Land mask on a grid coarsened by ``factor``: a cell is land when at least half its area is."""
    if factor == 1:
        return mask.copy()
    return bicubic_downsample(mask.astype(np.float64), factor, clamp=False) >= 0.5


def gen_simulated_frame(cfg: FieldConfig, t: int) -> EmissionMap:
    st = _static(cfg)
    rng = np.random.default_rng([cfg.seed, 1, t])
    season = np.sin(np.pi * t / 12 + st.phases) ** 2
    hot_spots = sum(s * b for s, b in zip(season, st.bumps))
    rho = cfg.texture_persistence
    g = np.sqrt(rho) * st.static_texture + np.sqrt(1 - rho) * power_law_field(
        (cfg.height, cfg.width), cfg.spectral_slope, rng
    )
    values = cfg.amplitude * hot_spots * np.exp(cfg.texture_strength * g) * st.taper
    values[~st.land] = 0.0
    return EmissionMap(values, FINE_RESOLUTION, DomainTag.simulated(), t)


def coarsen_frame(frame: EmissionMap, mask: np.ndarray, factor: int = 2) -> EmissionMap:
    """Simulated frame at a ``factor``-times coarser grid, sharing the coarse land mask."""
    values = bicubic_downsample(frame.values, factor)
    values[~coarse_mask(mask, factor)] = 0.0
    return EmissionMap(values, frame.resolution_deg * factor, frame.domain, frame.time_index, frame.species)


def derive_observed_frame(
    frames: Sequence[EmissionMap], shift: DomainShiftConfig, seed: int = 0, instrument: int = 1
) -> EmissionMap:
    """Aggregate, blur, perturb and re-grid a window of simulated frames into one observed frame."""
    if len(frames) != shift.aggregation_window:
        raise ConfigError(f"expected {shift.aggregation_window} frames, got {len(frames)}")
    shape = frames[0].values.shape
    if any(f.values.shape != shape for f in frames):
        raise DimensionError("frames in a window must share one shape")
    f = shift.native_downscale
    if shape[0] % f or shape[1] % f:
        raise DimensionError(f"frame shape {shape} not divisible by native_downscale {f}")
    stack = np.stack([fr.values for fr in frames])
    land = np.any(stack > 0, axis=0)
    v = stack.sum(axis=0) / len(frames)
    if shift.blur_sigma > 0:
        v = gaussian_filter(v, shift.blur_sigma, mode="nearest")
        # the instrument footprint also smears the coastline: fade to zero where
        # the blurred land fraction drops to one half
        v *= np.clip(2.0 * gaussian_filter(land.astype(np.float64), shift.blur_sigma, mode="nearest") - 1.0, 0.0, 1.0)
    if shift.noise_level > 0:
        rng = np.random.default_rng([seed, 2, frames[-1].time_index])
        v = v * np.exp(shift.noise_level * rng.standard_normal(shape))
    v = shift.gain * np.power(np.maximum(v, 0.0), shift.gamma)
    if f > 1:
        v = bicubic_downsample(v, f)
    v = np.maximum(v, 0.0)
    v[~coarse_mask(land, f)] = 0.0
    res = frames[0].resolution_deg * f
    return EmissionMap(v, res, DomainTag.observed(instrument), frames[-1].time_index, frames[0].species)


def shift_distance(s_values: np.ndarray, o_values: np.ndarray, n: int = 20000, seed: int = 0) -> float:
    """1-Wasserstein distance between sampled S and O values, in units of the mean S flux."""
    rng = np.random.default_rng(seed)
    s = rng.choice(np.ravel(s_values), size=min(n, np.size(s_values)), replace=False)
    o = rng.choice(np.ravel(o_values), size=min(n, np.size(o_values)), replace=False)
    scale = s.mean()
    if scale <= 0:
        raise DataError("simulated sample has no mass")
    return float(wasserstein_distance(s / scale, o / scale))


@dataclass(frozen=True)
class GeneratedDataset:
    root: Path
    s_fine: DatasetManifest
    s_coarse: DatasetManifest
    observed: DatasetManifest
    manifest_paths: tuple[Path, Path, Path]


def write_key_values(path, items: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in items.items()))


def gen_dataset(
    field: FieldConfig, shift: DomainShiftConfig, n_frames: int, out_dir, seed: int | None = None
) -> GeneratedDataset:
    """Write S (fine and coarse) and O grids plus one manifest per dataset under ``out_dir``.

    ``seed`` overrides ``field.seed``; observed-frame noise is seeded from it too.
    """
    if seed is not None:
        field = FieldConfig(**{**asdict(field), "seed": seed})
    if n_frames < shift.aggregation_window:
        raise ConfigError(f"n_frames={n_frames} is shorter than the aggregation window")
    out = Path(out_dir)
    dirs = {name: out / name for name in ("s_fine", "s_coarse", "observed")}
    try:
        for d in dirs.values():
            d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc

    mask = land_mask(field)
    fine, coarse, observed = [], [], []
    files = {k: [] for k in dirs}
    k = shift.aggregation_window
    for t in range(n_frames):
        frame = gen_simulated_frame(field, t)
        fine.append(frame)
        coarse.append(coarsen_frame(frame, mask, 2))
        if t >= k - 1:
            observed.append(derive_observed_frame(fine[t - k + 1 : t + 1], shift, field.seed))
    for name, maps in (("s_fine", fine), ("s_coarse", coarse), ("observed", observed)):
        for m in maps:
            rel = f"{name}/t{m.time_index:04d}.emg"
            try:
                write_emg(m, out / rel)
            except OSError as exc:
                raise DataError(f"cannot write {out / rel}: {exc}") from exc
            files[name].append(rel)

    manifests = {
        name: manifest_for_maps(files[name], maps)
        for name, maps in (("s_fine", fine), ("s_coarse", coarse), ("observed", observed))
    }
    paths = []
    for name, man in manifests.items():
        path = out / f"{name}.csv"
        write_manifest(man, path)
        paths.append(path)
    write_key_values(
        out / "scenario.txt",
        {**{f"field.{k}": v for k, v in asdict(field).items()},
         **{f"shift.{k}": v for k, v in asdict(shift).items()},
         "n_frames": n_frames,
         "s_fine.patches": len(manifests["s_fine"]),
         "s_coarse.patches": len(manifests["s_coarse"]),
         "observed.patches": len(manifests["observed"]),
         "observed.frames": len(observed)},
    )
    log.info("generated %d S frames and %d O frames under %s", n_frames, len(observed), out)
    return GeneratedDataset(out, manifests["s_fine"], manifests["s_coarse"], manifests["observed"], tuple(paths))
