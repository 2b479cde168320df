"""Emission grids, patches, dataset manifests and split assignment.

Grid files use the little-endian "EMG v1" layout::

    b"EMGR" | u32 version=1 | u32 height | u32 width | f64 resolution_deg
    | u32 domain code | u32 time_index | height*width f32 values (row-major)

Manifests are CSV files with header
``patch_id,file,offset,split,domain,time_index,empty`` where ``offset`` is the
byte offset of the patch's top-left value inside the grid file.
"""

from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, FormatError

SCALE = 2
PATCH_SIZE = 32

EMG_MAGIC = b"EMGR"
EMG_VERSION = 1
_EMG_HEADER = struct.Struct("<4sIIIdII")
EMG_HEADER_SIZE = _EMG_HEADER.size

MANIFEST_HEADER = ["patch_id", "file", "offset", "split", "domain", "time_index", "empty"]
SPLITS = ("train", "val", "test")


class DomainKind(enum.Enum):
    SIMULATED = "S"
    SIMULATED_TIME_LIMITED = "ST"
    OBSERVED = "O"


@dataclass(frozen=True)
class DomainTag:
    kind: DomainKind
    instrument: int = 0

    def __post_init__(self):
        if self.kind is DomainKind.OBSERVED:
            if self.instrument < 1:
                raise ConfigError("observed domain needs an instrument id >= 1")
        elif self.instrument != 0:
            raise ConfigError("only the observed domain carries an instrument id")

    @classmethod
    def simulated(cls) -> "DomainTag":
        return cls(DomainKind.SIMULATED)

    @classmethod
    def simulated_time_limited(cls) -> "DomainTag":
        return cls(DomainKind.SIMULATED_TIME_LIMITED)

    @classmethod
    def observed(cls, instrument: int = 1) -> "DomainTag":
        return cls(DomainKind.OBSERVED, instrument)

    @property
    def is_observed(self) -> bool:
        return self.kind is DomainKind.OBSERVED

    @property
    def code(self) -> int:
        """Integer code used in binary headers: 0=S, 1=ST, 1+i=O_i."""
        if self.kind is DomainKind.SIMULATED:
            return 0
        if self.kind is DomainKind.SIMULATED_TIME_LIMITED:
            return 1
        return 1 + self.instrument

    @classmethod
    def from_code(cls, code: int) -> "DomainTag":
        if code == 0:
            return cls.simulated()
        if code == 1:
            return cls.simulated_time_limited()
        return cls.observed(code - 1)

    def __str__(self) -> str:
        if self.kind is DomainKind.OBSERVED:
            return f"O{self.instrument}"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "DomainTag":
        text = text.strip()
        if text == "S":
            return cls.simulated()
        if text == "ST":
            return cls.simulated_time_limited()
        if text.startswith("O") and text[1:].isdigit():
            return cls.observed(int(text[1:]))
        raise DataError(f"unknown domain tag {text!r}")


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_flux(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise DataError(f"{what}: non-finite values")
    if values.size and values.min() < 0:
        raise DataError(f"{what}: negative flux values")


@dataclass(frozen=True, eq=False)
class EmissionMap:
    values: np.ndarray
    resolution_deg: float
    domain: DomainTag
    time_index: int = 0
    species: str = "isoprene"

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DimensionError(f"emission map must be a non-empty 2-D grid, got shape {values.shape}")
        _check_flux(values, "emission map")
        if not self.resolution_deg > 0:
            raise DataError("resolution_deg must be positive")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmissionMap):
            return NotImplemented
        return (
            np.array_equal(self.values, other.values)
            and self.resolution_deg == other.resolution_deg
            and self.domain == other.domain
            and self.time_index == other.time_index
            and self.species == other.species
        )


class HRPatch(NamedTuple):
    values: np.ndarray
    origin: tuple[int, int]
    empty: bool


def slice_into_patches(emission_map: EmissionMap, patch_size: int = PATCH_SIZE) -> list[HRPatch]:
    """Tile the top-left region of a map with non-overlapping square patches.

    Remainder rows/columns are dropped. All-zero patches are kept and flagged
    ``empty`` so callers can filter them.
    """
    if patch_size < 2:
        raise ConfigError("patch_size must be >= 2")
    h, w = emission_map.height, emission_map.width
    if h < patch_size or w < patch_size:
        raise DimensionError(f"map {h}x{w} is smaller than patch size {patch_size}")
    patches = []
    for r in range(0, (h // patch_size) * patch_size, patch_size):
        for c in range(0, (w // patch_size) * patch_size, patch_size):
            block = emission_map.values[r : r + patch_size, c : c + patch_size]
            patches.append(HRPatch(_frozen(block), (r, c), bool(block.max() == 0)))
    return patches


def assemble_patches(patches: Sequence[HRPatch], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape)
    for p in patches:
        r, c = p.origin
        ph, pw = p.values.shape
        out[r : r + ph, c : c + pw] = p.values
    return out


@dataclass(frozen=True, eq=False)
class PatchPair:
    hr: np.ndarray
    lr: np.ndarray
    source_map: str
    origin: tuple[int, int]
    domain: DomainTag
    time_index: int = 0
    patch_id: str = ""

    def __post_init__(self):
        hr, lr = _frozen(self.hr), _frozen(self.lr)
        if hr.ndim != 2 or lr.ndim != 2 or hr.shape != (lr.shape[0] * SCALE, lr.shape[1] * SCALE):
            raise DimensionError(f"HR {hr.shape} must be {SCALE}x LR {lr.shape}")
        if hr.shape[0] != hr.shape[1]:
            raise DimensionError("patches must be square")
        if self.origin[0] % hr.shape[0] or self.origin[1] % hr.shape[1]:
            raise DataError(f"origin {self.origin} is not aligned to the patch grid")
        _check_flux(hr, "HR patch")
        _check_flux(lr, "LR patch")
        object.__setattr__(self, "hr", hr)
        object.__setattr__(self, "lr", lr)

    @property
    def empty(self) -> bool:
        return bool(self.hr.max() == 0)


# --------------------------------------------------------------------------
# manifests and splits


@dataclass(frozen=True)
class ManifestRecord:
    patch_id: str
    file: str
    offset: int
    split: str | None
    domain: DomainTag
    time_index: int
    empty: bool = False


@dataclass(frozen=True)
class RandomFraction:
    fractions: tuple[float, float, float] = (0.70, 0.20, 0.10)

    def __post_init__(self):
        if any(f <= 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be positive and sum to 1, got {self.fractions}")


@dataclass(frozen=True)
class ByYear:
    train_range: tuple[int, int]  # inclusive
    val_index: int
    test_index: int
    period: int = 1

    def __post_init__(self):
        lo, hi = self.train_range
        if hi < lo:
            raise ConfigError("empty train range")
        if lo <= self.val_index <= hi or lo <= self.test_index <= hi or self.val_index == self.test_index:
            raise ConfigError("train range, validation and test years overlap")
        if self.period < 1:
            raise ConfigError("period must be >= 1")

    def year_of(self, time_index: int) -> int:
        return time_index // self.period

    def split_of(self, time_index: int) -> str | None:
        year = self.year_of(time_index)
        if self.train_range[0] <= year <= self.train_range[1]:
            return "train"
        if year == self.val_index:
            return "val"
        if year == self.test_index:
            return "test"
        return None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]
    seed: int = 0
    split_policy: RandomFraction | ByYear | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if isinstance(self.split_policy, ByYear):
            seen: dict[int, str] = {}
            for rec in self.records:
                if rec.split is None:
                    continue
                prev = seen.setdefault(rec.time_index, rec.split)
                if prev != rec.split:
                    raise DataError(f"time_index {rec.time_index} appears in splits {prev} and {rec.split}")

    def __len__(self):
        return len(self.records)

    def split(self, name: str, include_empty: bool = True) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name and (include_empty or not r.empty)]

    def split_sizes(self) -> tuple[int, int, int]:
        return tuple(sum(r.split == s for r in self.records) for s in SPLITS)


def split_random(
    manifest: DatasetManifest, fractions: Sequence[float] = (0.70, 0.20, 0.10), seed: int = 0
) -> DatasetManifest:
    """Shuffle under ``seed`` and cut into train/val/test.

    Train and val get ``round(f * N)`` records; test takes the remainder.
    """
    policy = RandomFraction(tuple(float(f) for f in fractions))
    n = len(manifest.records)
    if n == 0:
        raise DataError("cannot split an empty manifest")
    n_train = int(round(policy.fractions[0] * n))
    n_val = min(int(round(policy.fractions[1] * n)), n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train : n_train + n_val]] = "val"
    labels[order[n_train + n_val :]] = "test"
    records = tuple(replace(rec, split=labels[i]) for i, rec in enumerate(manifest.records))
    return DatasetManifest(records, seed=seed, split_policy=policy)


def split_by_year(
    manifest: DatasetManifest,
    train_range: tuple[int, int],
    val_index: int,
    test_index: int,
    period: int = 1,
) -> DatasetManifest:
    """Assign records by ``time_index // period``; years outside every range are dropped."""
    policy = ByYear(tuple(train_range), val_index, test_index, period)
    records = []
    for rec in manifest.records:
        split = policy.split_of(rec.time_index)
        if split is not None:
            records.append(replace(rec, split=split))
    return DatasetManifest(tuple(records), seed=manifest.seed, split_policy=policy)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow(
                [r.patch_id, r.file, r.offset, r.split or "", str(r.domain), r.time_index, int(r.empty)]
            )


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise FormatError(f"{path}: bad manifest header {header}")
            records = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(MANIFEST_HEADER):
                    raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
                pid, file, offset, split, domain, t, empty = row
                if split not in ("", *SPLITS):
                    raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
                try:
                    records.append(
                        ManifestRecord(pid, file, int(offset), split or None, DomainTag.parse(domain), int(t), empty == "1")
                    )
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return DatasetManifest(tuple(records))


# --------------------------------------------------------------------------
# EMG grid files


def write_emg(emission_map: EmissionMap, path) -> None:
    header = _EMG_HEADER.pack(
        EMG_MAGIC,
        EMG_VERSION,
        emission_map.height,
        emission_map.width,
        float(emission_map.resolution_deg),
        emission_map.domain.code,
        emission_map.time_index,
    )
    data = np.ascontiguousarray(emission_map.values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + data)


def read_emg_header(raw: bytes, path="<bytes>") -> tuple[int, int, float, DomainTag, int]:
    if len(raw) < EMG_HEADER_SIZE:
        raise FormatError(f"{path}: truncated EMG header")
    magic, version, h, w, res, code, t = _EMG_HEADER.unpack_from(raw)
    if magic != EMG_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != EMG_VERSION:
        raise FormatError(f"{path}: unsupported EMG version {version}")
    return h, w, res, DomainTag.from_code(code), t


def read_emg(path, species: str = "isoprene") -> EmissionMap:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read grid file {path}: {exc}") from exc
    h, w, res, domain, t = read_emg_header(raw, path)
    expected = EMG_HEADER_SIZE + 4 * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=EMG_HEADER_SIZE).reshape(h, w)
    return EmissionMap(values.astype(np.float64), res, domain, t, species)


def patch_offset(origin: tuple[int, int], width: int) -> int:
    return EMG_HEADER_SIZE + 4 * (origin[0] * width + origin[1])


def offset_origin(offset: int, width: int) -> tuple[int, int]:
    cell, rem = divmod(offset - EMG_HEADER_SIZE, 4)
    if rem or cell < 0:
        raise FormatError(f"offset {offset} is not a cell boundary")
    return divmod(cell, width)


def manifest_for_maps(
    files: Sequence[str], maps: Sequence[EmissionMap], patch_size: int = PATCH_SIZE
) -> DatasetManifest:
    """Build an unsplit manifest listing every patch of every map."""
    records = []
    for file, m in zip(files, maps):
        stem = Path(file).stem
        for p in slice_into_patches(m, patch_size):
            records.append(
                ManifestRecord(
                    f"{stem}_r{p.origin[0]}_c{p.origin[1]}",
                    str(file),
                    patch_offset(p.origin, m.width),
                    None,
                    m.domain,
                    m.time_index,
                    p.empty,
                )
            )
    return DatasetManifest(tuple(records))


@dataclass
class PatchLoader:
    """Reads patches named by manifest records, caching grids by file."""

    root: Path = field(default_factory=Path)
    patch_size: int = PATCH_SIZE
    _cache: dict = field(default_factory=dict, repr=False)

    def grid(self, file: str) -> EmissionMap:
        if file not in self._cache:
            self._cache[file] = read_emg(self.root / file)
        return self._cache[file]

    def load(self, records: Sequence[ManifestRecord]) -> list[PatchPair]:
        from .resample import bicubic_downsample

        pairs = []
        p = self.patch_size
        for rec in records:
            m = self.grid(rec.file)
            r, c = offset_origin(rec.offset, m.width)
            if r + p > m.height or c + p > m.width:
                raise DataError(f"patch {rec.patch_id} falls outside {rec.file}")
            hr = m.values[r : r + p, c : c + p]
            pairs.append(
                PatchPair(hr, bicubic_downsample(hr, SCALE), rec.file, (r, c), rec.domain, rec.time_index, rec.patch_id)
            )
        return pairs


def make_pairs(patches: Sequence[HRPatch], source: str, domain: DomainTag, time_index: int = 0) -> list[PatchPair]:
    from .resample import bicubic_downsample

    return [
        PatchPair(p.values, bicubic_downsample(p.values, SCALE), source, p.origin, domain, time_index)
        for p in patches
    ]
