"""Scenario runners: perfect knowledge, zero knowledge, transform adaptation, network adaptation.

Every runner reads and writes inside one run directory::

    data/         synthetic grids and raw manifests (synth)
    splits/       split manifests per dataset (patchify)
    transforms/   fitted quantile transforms
    checkpoints/  SRCK network checkpoints
    histories/    per-run training histories
    *.csv         scenario results; every row carries seed and config hash

Wall-clock figures live in dedicated ``*_time*`` columns so the remaining
columns are reproducible byte for byte under a fixed seed.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field as dc_field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    SPLITS,
    DatasetManifest,
    DomainKind,
    DomainTag,
    PatchLoader,
    PatchPair,
    read_manifest,
    split_by_year,
    split_random,
    write_manifest,
)
from .errors import ConfigError, DataError
from .metrics import format_db, score
from .network import (
    Checkpoint,
    NetworkConfig,
    Provenance,
    ProvenanceKind,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .quantile import QuantileTransform, Target, fit, fit_fraction, load_transform, patch_pool, save_transform
from .resample import bicubic_upsample
from .synthetic import DomainShiftConfig, FieldConfig, gen_dataset, write_key_values
from .training import (
    InjectionConfig,
    TrainConfig,
    build_injection_set,
    fine_tune,
    super_resolve,
    train,
    write_history,
)

log = logging.getLogger(__name__)

BUNDLED_CONFIG = "bundled.ini"
LOCK_NAME = ".lock"

REPORT_HEADER = ["scenario", "domain", "n_patches", "nmse_db", "ssim", "seed", "config_hash"]
PK_HEADER = [
    "dataset", "resolution", "n_patches", "n_train", "n_test", "nmse_db", "ssim",
    "bicubic_nmse_db", "bicubic_ssim", "best_epoch", "seed", "config_hash",
    "train_time_pct", "train_time_s",
]
ZK_HEADER = ["checkpoint", "transform", "domain", "n_patches", "nmse_db", "ssim", "seed", "config_hash"]
TS_HEADER = [
    "checkpoint", "fraction", "subset", "status", "n_fit_patches", "n_patches",
    "nmse_db", "ssim", "val_nmse_db", "seed", "config_hash",
]
INJ_HEADER = [
    "fraction", "n_target", "n_source", "n_patches", "nmse_db", "ssim", "delta_db",
    "best_epoch", "val_nmse_db", "seed", "config_hash",
]
EVAL_HEADER = ["checkpoint", "transform", "dataset", "split", "n_patches", "nmse_db", "ssim", "seed", "config_hash"]


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ScenarioSettings:
    seed: int = 42
    n_frames: int = 48
    s_split: tuple[float, float, float] = (0.70, 0.20, 0.10)
    period: int = 12  # frames per "year" for the by-year splits
    train_years: tuple[int, int] = (0, 1)
    val_year: int = 2
    test_year: int = 3
    equal_test_size: bool = True  # cap every test split at the observed test size

    def __post_init__(self):
        if self.n_frames < 1 or self.period < 1:
            raise ConfigError("n_frames and period must be positive")


@dataclass(frozen=True)
class EpochPlan:
    """Epoch budget per training run; 0 keeps the initial weights."""

    s_fine: int = 20
    s_coarse: int = 40
    st_fine: int = 30
    st_coarse: int = 40
    o: int = 100
    fine_tune: int = 20

    def __post_init__(self):
        if any(getattr(self, f.name) < 0 for f in fields(self)):
            raise ConfigError("epoch counts must be >= 0")


@dataclass(frozen=True)
class TransformSettings:
    n_quantiles: int = 1000
    target: str = "normal"
    subsample_cap: int = 100_000

    def __post_init__(self):
        try:
            Target(self.target)
        except ValueError:
            raise ConfigError(f"unknown transform target {self.target!r}") from None


@dataclass(frozen=True)
class SweepSettings:
    transform_fractions: tuple[float, ...] = (0.01, 0.02, 0.05, 0.10, 0.25, 0.50, 1.00)
    transform_subsets: int = 3
    injection_fractions: tuple[float, ...] = (0.0, 0.05, 0.10, 0.20, 0.40, 0.60, 0.80, 1.00)

    def __post_init__(self):
        if not all(0 < p <= 1 for p in self.transform_fractions):
            raise ConfigError("transform fractions must lie in (0, 1]")
        if not all(0 <= p <= 1 for p in self.injection_fractions):
            raise ConfigError("injection fractions must lie in [0, 1]")
        if self.transform_subsets < 1:
            raise ConfigError("transform_subsets must be >= 1")


_SECTIONS = {
    "scenario": ScenarioSettings,
    "field": FieldConfig,
    "shift": DomainShiftConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "epochs": EpochPlan,
    "transform": TransformSettings,
    "sweeps": SweepSettings,
}
# seeds are derived from [scenario] seed; epochs come from [epochs]
_EXCLUDED = {("field", "seed"), ("train", "seed"), ("train", "epochs")}


def _coerce(default, text: str, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(f"not a boolean: {text!r}")
            return lowered in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s for s in text.replace(",", " ").split() if s]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioSettings = dc_field(default_factory=ScenarioSettings)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    shift: DomainShiftConfig = dc_field(default_factory=DomainShiftConfig)
    network: NetworkConfig = dc_field(default_factory=NetworkConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    epochs: EpochPlan = dc_field(default_factory=EpochPlan)
    transform: TransformSettings = dc_field(default_factory=TransformSettings)
    sweeps: SweepSettings = dc_field(default_factory=SweepSettings)

    @property
    def seed(self) -> int:
        return self.scenario.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, scenario=replace(self.scenario, seed=int(seed)))

    def to_text(self) -> str:
        """Canonical key-value echo; the config hash is computed from it."""
        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            for f in fields(obj):
                if (name, f.name) not in _EXCLUDED:
                    lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def field_config(self) -> FieldConfig:
        return replace(self.field, seed=self.seed)

    def train_config(self, epochs: int) -> TrainConfig:
        return replace(self.train, epochs=epochs, seed=self.seed, patience=max(1, min(self.train.patience, epochs or 1)))


def parse_config(text: str = "", overrides: Sequence[str] = (), source: str = "<config>") -> ExperimentConfig:
    """Build a config from INI text plus ``section.key=value`` overrides (applied last)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)

    built = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
    for name, cls in _SECTIONS.items():
        defaults = cls()
        known = {f.name for f in fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known or (name, key) in _EXCLUDED:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                values[key] = _coerce(getattr(defaults, key), raw, f"{source} [{name}] {key}")
        try:
            built[name] = cls(**{**{f.name: getattr(defaults, f.name) for f in fields(cls)}, **values})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source} [{name}]: {exc}") from None
    return ExperimentConfig(**built)


def load_config(path=None, overrides: Sequence[str] = (), seed: int | None = None) -> ExperimentConfig:
    """Read ``path`` (the bundled scenario when None), then apply overrides and ``seed``."""
    if path is None:
        text = resources.files(__package__).joinpath(BUNDLED_CONFIG).read_text()
        source = BUNDLED_CONFIG
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        source = str(path)
    cfg = parse_config(text, overrides, source)
    return cfg if seed is None else cfg.with_seed(seed)


# --------------------------------------------------------------------------
# run directory


@dataclass(frozen=True)
class Dataset:
    name: str
    source: str  # raw manifest stem under data/
    domain: DomainTag
    resolution: str  # LR -> HR grid spacing in degrees
    by_year: bool


DATASETS = (
    Dataset("S-fine", "s_fine", DomainTag.simulated(), "0.50->0.25", False),
    Dataset("S-coarse", "s_coarse", DomainTag.simulated(), "1.00->0.50", False),
    Dataset("ST-fine", "s_fine", DomainTag.simulated_time_limited(), "0.50->0.25", True),
    Dataset("ST-coarse", "s_coarse", DomainTag.simulated_time_limited(), "1.00->0.50", True),
    Dataset("O", "observed", DomainTag.observed(1), "1.00->0.50", True),
)
_BY_NAME = {d.name: d for d in DATASETS}


def dataset(name: str) -> Dataset:
    if name not in _BY_NAME:
        raise ConfigError(f"unknown dataset {name!r}; choose from {', '.join(_BY_NAME)}")
    return _BY_NAME[name]


_PROVENANCE = {
    DomainKind.SIMULATED: ProvenanceKind.TRAINED_ON_S,
    DomainKind.SIMULATED_TIME_LIMITED: ProvenanceKind.TRAINED_ON_ST,
    DomainKind.OBSERVED: ProvenanceKind.TRAINED_ON_O,
}


class RunDir:
    def __init__(self, root, config: ExperimentConfig):
        self.root = Path(root)
        self.config = config
        self.loader = PatchLoader(self.root / "data")
        self._splits: dict[str, DatasetManifest] = {}

    # paths
    @property
    def data(self) -> Path:
        return self.root / "data"

    def split_path(self, name: str) -> Path:
        return self.root / "splits" / f"{name}.csv"

    def transform_path(self, name: str) -> Path:
        return self.root / "transforms" / f"T_{name}.csv"

    def checkpoint_path(self, name: str) -> Path:
        return self.root / "checkpoints" / f"N_{name}.srck"

    def history_path(self, name: str) -> Path:
        return self.root / "histories" / f"{name}.csv"

    def result_path(self, name: str) -> Path:
        return self.root / f"{name}.csv"

    # loading
    def _require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise DataError(f"missing {path}; run `{hint}` first")
        return path

    def manifest(self, name: str) -> DatasetManifest:
        if name not in self._splits:
            self._splits[name] = read_manifest(self._require(self.split_path(name), "patchify"))
        return self._splits[name]

    def patches(self, name: str, split: str, include_empty: bool = True) -> list[PatchPair]:
        return self.loader.load(self.manifest(name).split(split, include_empty))

    def transform(self, name: str) -> QuantileTransform:
        return load_transform(self._require(self.transform_path(name), "fit-transform"))

    def checkpoint(self, name: str) -> Checkpoint:
        return load_checkpoint(self._require(self.checkpoint_path(name), "train"))

    def echo_config(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "config.txt").write_text(
            f"# config_hash = {self.config.config_hash}\n" + self.config.to_text() + _CONVENTIONS
        )


# fixed conventions, echoed with every run so reports are reproducible
_CONVENTIONS = (
    "# bicubic = keys a=-0.5, align_corners=false, clamp_to_edge, negative outputs clamped to 0\n"
    "# nmse_aggregation = pooled over the evaluated patches\n"
    "# ssim = gaussian 11x11 sigma 1.5, valid windows, data_range = max - min of the evaluated references\n"
)


@contextmanager
def locked(root):
    """Hold an exclusive lock file on ``root`` for the duration of a command."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lock = root / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{root} is locked by another command (remove {lock} if stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield root
    finally:
        lock.unlink(missing_ok=True)


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path: Path) -> list[dict]:
    try:
        with Path(path).open(newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _f(value: float) -> str:
    return format_db(value) if math.isfinite(value) or value == -math.inf else "nan"


def _s(value: float) -> str:
    return f"{value:.6f}"


# --------------------------------------------------------------------------
# data preparation


def synth(run: RunDir):
    cfg = run.config
    return gen_dataset(cfg.field_config(), cfg.shift, cfg.scenario.n_frames, run.data, cfg.seed)


def patchify(run: RunDir) -> dict[str, tuple[int, int, int]]:
    """Write the split manifest of every dataset; return split sizes."""
    cfg = run.config.scenario
    raw = {}
    sizes = {}
    window = run.config.shift.aggregation_window
    for ds in DATASETS:
        path = run.data / f"{ds.source}.csv"
        if ds.source not in raw:
            if not path.exists():
                raise DataError(f"missing {path}; run `synth` first")
            raw[ds.source] = read_manifest(path)
        man = raw[ds.source]
        if ds.domain.kind is DomainKind.SIMULATED_TIME_LIMITED:
            # same acquisition times as the observed frames
            man = DatasetManifest(
                tuple(replace(r, domain=ds.domain) for r in man.records if r.time_index >= window - 1)
            )
        if ds.by_year:
            man = split_by_year(man, cfg.train_years, cfg.val_year, cfg.test_year, cfg.period)
        else:
            man = split_random(man, cfg.s_split, seed=cfg.seed)
        run._splits[ds.name] = man
        sizes[ds.name] = man.split_sizes()
    if cfg.equal_test_size:
        cap = sizes["O"][2]
        for ds in DATASETS:
            man = run._splits[ds.name]
            test = [i for i, r in enumerate(man.records) if r.split == "test"]
            if len(test) > cap:
                rng = np.random.default_rng([cfg.seed, 7])
                keep = set(rng.choice(test, size=cap, replace=False).tolist())
                records = tuple(
                    r if (r.split != "test" or i in keep) else replace(r, split=None)
                    for i, r in enumerate(man.records)
                )
                man = DatasetManifest(records, man.seed, man.split_policy)
                run._splits[ds.name] = man
                sizes[ds.name] = man.split_sizes()
    for ds in DATASETS:
        run.split_path(ds.name).parent.mkdir(parents=True, exist_ok=True)
        write_manifest(run._splits[ds.name], run.split_path(ds.name))
    for ds in DATASETS:
        if 0 in sizes[ds.name]:
            raise DataError(f"dataset {ds.name} has an empty split {sizes[ds.name]}")
    return sizes


def fit_dataset_transform(run: RunDir, name: str) -> QuantileTransform:
    ts = run.config.transform
    ds = dataset(name)
    train_set = run.patches(name, "train")
    t = fit(
        patch_pool(train_set), ts.n_quantiles, Target(ts.target), run.config.seed, ts.subsample_cap, ds.domain, 1.0
    )
    run.transform_path(name).parent.mkdir(parents=True, exist_ok=True)
    save_transform(t, run.transform_path(name))
    return t


# --------------------------------------------------------------------------
# scenarios


def _epochs_for(cfg: ExperimentConfig, name: str) -> int:
    return getattr(cfg.epochs, name.lower().replace("-", "_"))


def bicubic_score(patches: Sequence[PatchPair]) -> tuple[float, float]:
    nmse, ssim, _ = score([p.hr for p in patches], [bicubic_upsample(p.lr) for p in patches])
    return nmse, ssim


def evaluate_on(checkpoint: Checkpoint, transform: QuantileTransform, patches: Sequence[PatchPair]) -> tuple[float, float]:
    if not patches:
        raise DataError("empty evaluation set")
    est = super_resolve(checkpoint, transform, transform, [p.lr for p in patches])
    nmse, ssim, _ = score([p.hr for p in patches], est)
    return nmse, ssim


def perfect_knowledge(run: RunDir, names: Sequence[str] | None = None) -> list[dict]:
    """Train one network per dataset with its own transform and score it on its own test split."""
    cfg = run.config
    names = list(names or [d.name for d in DATASETS])
    results = {}
    path = run.result_path("perfect_knowledge")
    if path.exists():
        for row in _read_rows(path):
            if row.get("config_hash") == cfg.config_hash:
                results[row["dataset"]] = row
    for name in names:
        ds = dataset(name)
        train_set = run.patches(name, "train")
        val_set = run.patches(name, "val")
        test_set = run.patches(name, "test")
        transform = fit_dataset_transform(run, name)
        provenance = Provenance(_PROVENANCE[ds.domain.kind])
        init = init_parameters(cfg.network, cfg.seed, provenance)
        start = time.perf_counter()
        ckpt, history = train(cfg.train_config(_epochs_for(cfg, name)), train_set, val_set, transform, init, provenance)
        elapsed = time.perf_counter() - start
        run.checkpoint_path(name).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, run.checkpoint_path(name))
        run.history_path(name).parent.mkdir(parents=True, exist_ok=True)
        write_history(history, run.history_path(name))
        nmse, ssim = evaluate_on(ckpt, transform, test_set)
        b_nmse, b_ssim = bicubic_score(test_set)
        n_total = sum(run.manifest(name).split_sizes())
        log.info("%s: NMSE %.2f dB (bicubic %.2f) in %.1f s", name, nmse, b_nmse, elapsed)
        results[name] = {
            "dataset": name, "resolution": ds.resolution, "n_patches": str(n_total),
            "n_train": str(len(train_set)), "n_test": str(len(test_set)),
            "nmse_db": _f(nmse), "ssim": _s(ssim), "bicubic_nmse_db": _f(b_nmse), "bicubic_ssim": _s(b_ssim),
            "best_epoch": str(ckpt.epoch), "seed": str(cfg.seed), "config_hash": cfg.config_hash,
            "train_time_s": f"{elapsed:.3f}",
        }
    ordered = [results[d.name] for d in DATASETS if d.name in results]
    ref = float(ordered[0]["train_time_s"]) if ordered else 0.0
    for row in ordered:
        t = float(row["train_time_s"])
        row["train_time_pct"] = f"{100.0 * t / ref:.2f}" if ref > 0 else "nan"
    _write_rows(path, PK_HEADER, [[row[h] for h in PK_HEADER] for row in ordered])
    return ordered


def zero_knowledge(run: RunDir, checkpoints: Sequence[str] = ("S-fine", "S-coarse")) -> list[dict]:
    """Simulated-domain operators (network and transform) applied unchanged to observed test patches."""
    cfg = run.config
    test_set = run.patches("O", "test")
    rows = []
    for name in checkpoints:
        ckpt = run.checkpoint(name)
        transform = run.transform(name)
        if transform.fitted_on.is_observed:
            raise ConfigError("the zero-knowledge scenario cannot use an observed-domain transform")
        nmse, ssim = evaluate_on(ckpt, transform, test_set)
        rows.append({
            "checkpoint": name, "transform": f"T_{name}", "domain": "O",
            "n_patches": str(len(test_set)), "nmse_db": _f(nmse), "ssim": _s(ssim),
            "seed": str(cfg.seed), "config_hash": cfg.config_hash,
        })
    _write_rows(run.result_path("zero_knowledge"), ZK_HEADER, [[r[h] for h in ZK_HEADER] for r in rows])
    return rows


def _fraction_label(p: float) -> str:
    return f"{p:.4f}".rstrip("0").rstrip(".") if p else "0"


def transform_sweep(run: RunDir, checkpoints: Sequence[str] = ("S-fine", "S-coarse")) -> list[dict]:
    """Refit the transform on growing fractions of the observed training split, network fixed.

    Every fraction is fitted on ``transform_subsets`` independent random subsets.
    The transform with the best observed-validation NMSE under the first
    checkpoint is saved as ``T_DA``.
    """
    cfg = run.config
    sw = cfg.sweeps
    ts = cfg.transform
    o_train = run.patches("O", "train")
    o_val = run.patches("O", "val")
    o_test = run.patches("O", "test")
    nets = {name: run.checkpoint(name) for name in checkpoints}
    rows = []
    best = None
    for p in sw.transform_fractions:
        try:
            transforms = fit_fraction(
                o_train, p, sw.transform_subsets, cfg.seed, ts.n_quantiles, Target(ts.target), ts.subsample_cap
            )
        except DataError as exc:
            log.warning("fraction %s skipped: %s", p, exc)
            for name in checkpoints:
                rows.append({
                    "checkpoint": name, "fraction": _fraction_label(p), "subset": "mean", "status": "skipped",
                    "n_fit_patches": str(int(round(p * len(o_train)))), "n_patches": str(len(o_test)),
                    "nmse_db": "nan", "ssim": "nan", "val_nmse_db": "nan",
                    "seed": str(cfg.seed), "config_hash": cfg.config_hash,
                })
            continue
        k = int(round(p * len(o_train)))
        for name, ckpt in nets.items():
            scores = []
            for i, t in enumerate(transforms):
                nmse, ssim = evaluate_on(ckpt, t, o_test)
                val_nmse, _ = evaluate_on(ckpt, t, o_val)
                scores.append((nmse, ssim, val_nmse))
                rows.append({
                    "checkpoint": name, "fraction": _fraction_label(p), "subset": str(i), "status": "ok",
                    "n_fit_patches": str(k), "n_patches": str(len(o_test)),
                    "nmse_db": _f(nmse), "ssim": _s(ssim), "val_nmse_db": _f(val_nmse),
                    "seed": str(cfg.seed), "config_hash": cfg.config_hash,
                })
                if name == checkpoints[0] and (best is None or val_nmse < best[0]):
                    best = (val_nmse, p, i, t)
            mean = np.mean(np.array(scores), axis=0)
            rows.append({
                "checkpoint": name, "fraction": _fraction_label(p), "subset": "mean", "status": "ok",
                "n_fit_patches": str(k), "n_patches": str(len(o_test)),
                "nmse_db": _f(float(mean[0])), "ssim": _s(float(mean[1])), "val_nmse_db": _f(float(mean[2])),
                "seed": str(cfg.seed), "config_hash": cfg.config_hash,
            })
    if best is None:
        raise DataError("every transform fraction was skipped; the observed training split is too small")
    run.transform_path("DA").parent.mkdir(parents=True, exist_ok=True)
    save_transform(best[3], run.transform_path("DA"))
    write_key_values(
        run.root / "transforms" / "T_DA.txt",
        {"fraction": _fraction_label(best[1]), "subset": best[2], "val_nmse_db": _f(best[0]),
         "selected_with": checkpoints[0]},
    )
    _write_rows(run.result_path("transform_sweep"), TS_HEADER, [[r[h] for h in TS_HEADER] for r in rows])
    _write_plot(
        run.root / "plot_transform_sweep.txt",
        [(r["fraction"], r["nmse_db"], r["checkpoint"]) for r in rows if r["subset"] == "mean" and r["status"] == "ok"],
    )
    return rows


def injection_sweep(run: RunDir, base: str = "ST-fine") -> list[dict]:
    """Fine-tune the simulated-domain network on equal-size sets holding a growing observed share."""
    cfg = run.config
    transform = run.transform("DA")
    base_ckpt = run.checkpoint(base)
    o_test = run.patches("O", "test")
    pools = {
        split: (run.patches(base, split, include_empty=False), run.patches("O", split, include_empty=False))
        for split in ("train", "val")
    }
    train_cfg = cfg.train_config(cfg.epochs.fine_tune)
    rows = []
    ref = None
    for j, p in enumerate(cfg.sweeps.injection_fractions):
        sets = {}
        for split, (source, target) in pools.items():
            inj = InjectionConfig(p, len(target), source, target, seed=cfg.seed + 1000 * j + (split == "val"))
            sets[split] = (inj, build_injection_set(inj))
        ckpt, history = fine_tune(base_ckpt, sets["train"][1], sets["val"][1], transform, train_cfg, p)
        label = _fraction_label(p)
        save_checkpoint(ckpt, run.checkpoint_path(f"DA_p{label}"))
        write_history(history, run.history_path(f"DA_p{label}"))
        nmse, ssim = evaluate_on(ckpt, transform, o_test)
        if p == 0:
            ref = nmse
        inj = sets["train"][0]
        rows.append({
            "fraction": label, "n_target": str(inj.n_target), "n_source": str(inj.total_budget - inj.n_target),
            "n_patches": str(len(o_test)), "nmse_db": _f(nmse), "ssim": _s(ssim),
            "delta_db": _f(ref - nmse) if ref is not None else "nan",
            "best_epoch": str(ckpt.epoch), "val_nmse_db": _f(ckpt.val_nmse_db),
            "seed": str(cfg.seed), "config_hash": cfg.config_hash,
        })
        log.info("injection %s: NMSE %.2f dB", label, nmse)
    _write_rows(run.result_path("injection_sweep"), INJ_HEADER, [[r[h] for h in INJ_HEADER] for r in rows])
    _write_plot(run.root / "plot_injection_sweep.txt", [(r["fraction"], r["nmse_db"], "N_DA") for r in rows])
    return rows


def evaluate_checkpoint(run: RunDir, checkpoint: str, transform: str, name: str = "O", split: str = "test") -> dict:
    """Score ``checkpoints/N_<checkpoint>`` with ``transforms/T_<transform>`` on one dataset split."""
    cfg = run.config
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    ds = dataset(name)
    t = run.transform(transform)
    if ds.domain.is_observed is False and t.fitted_on.is_observed:
        raise ConfigError("an observed-domain transform cannot be evaluated on simulated data")
    patches = run.patches(name, split)
    nmse, ssim = evaluate_on(run.checkpoint(checkpoint), t, patches)
    row = {
        "checkpoint": checkpoint, "transform": transform, "dataset": name, "split": split,
        "n_patches": str(len(patches)), "nmse_db": _f(nmse), "ssim": _s(ssim),
        "seed": str(cfg.seed), "config_hash": cfg.config_hash,
    }
    path = run.result_path("eval")
    existing = [r for r in _read_rows(path)] if path.exists() else []
    key = (checkpoint, transform, name, split)
    existing = [r for r in existing if (r["checkpoint"], r["transform"], r["dataset"], r["split"]) != key]
    _write_rows(path, EVAL_HEADER, [[r[h] for h in EVAL_HEADER] for r in existing + [row]])
    return row


# --------------------------------------------------------------------------
# reporting


def _write_plot(path: Path, points: Sequence[tuple[str, str, str]]) -> None:
    path.write_text("x y series\n" + "".join(f"{x} {y} {s}\n" for x, y, s in points))


def _report_rows(run_root: Path) -> list[list[str]]:
    rows = []

    def add(scenario, domain, r):
        rows.append([scenario, domain, r["n_patches"], r["nmse_db"], r["ssim"], r["seed"], r["config_hash"]])

    sources = {
        "perfect_knowledge": lambda r: add("PerfectKnowledge", r["dataset"], {**r, "n_patches": r["n_test"]}),
        "zero_knowledge": lambda r: add(f"ZeroKnowledge[N_{r['checkpoint']}]", r["domain"], r),
        "transform_sweep": lambda r: r["subset"] == "mean" and r["status"] == "ok" and add(
            f"TransformAdaptation[N_{r['checkpoint']};p={r['fraction']}]", "O", r
        ),
        "injection_sweep": lambda r: add(f"NetworkAdaptation[p={r['fraction']}]", "O", r),
        "eval": lambda r: add(f"Eval[N_{r['checkpoint']};T_{r['transform']};{r['split']}]", r["dataset"], r),
    }
    for name, emit in sources.items():
        path = run_root / f"{name}.csv"
        if not path.exists():
            continue
        for i, r in enumerate(_read_rows(path), start=2):
            try:
                emit(r)
            except KeyError as exc:
                raise DataError(f"{path}:{i}: missing column {exc}") from None
    return rows


def report(run_roots: Sequence, out: Path) -> list[list[str]]:
    """Merge the scenario CSVs of one or more runs into ``out/report.csv``.

    Runs whose config hashes disagree are still merged, preceded by a warning row.
    """
    rows = []
    hashes = []
    for root in run_roots:
        root = Path(root)
        if not root.is_dir():
            raise DataError(f"run directory {root} does not exist")
        block = _report_rows(root)
        rows.extend(block)
        hashes.extend(r[6] for r in block)
    distinct = sorted(set(hashes))
    if len(distinct) > 1:
        rows.insert(0, ["WARNING", "config_hash mismatch", "", "", "", "", "|".join(distinct)])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "report.csv", REPORT_HEADER, rows)
    return rows


def run_suite(run: RunDir) -> dict:
    """Every scenario in order: synth, patchify, perfect knowledge, zero knowledge, both sweeps, report."""
    timings = {}

    def step(name, fn, *args):
        start = time.perf_counter()
        result = fn(*args)
        timings[name] = time.perf_counter() - start
        return result

    run.echo_config()
    step("synth", synth, run)
    step("patchify", patchify, run)
    step("perfect_knowledge", perfect_knowledge, run)
    step("zero_knowledge", zero_knowledge, run)
    step("transform_sweep", transform_sweep, run)
    step("injection_sweep", injection_sweep, run)
    step("report", report, [run.root], run.root)
    write_key_values(run.root / "timings.txt", {k: f"{v:.3f}" for k, v in timings.items()})
    return timings
