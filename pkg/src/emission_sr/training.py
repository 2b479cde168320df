"""Training, fine-tuning with target-domain injection, and the SR inference pipeline."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import PatchPair
from .errors import ConfigError, DataError, DimensionError, NumericError
from .metrics import batch_ssim, dataset_nmse_db, format_db
from .network import Checkpoint, Provenance, ProvenanceKind, SrNetwork
from .quantile import QuantileTransform

log = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "train_loss", "val_nmse_db", "val_ssim", "lr"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-4
    fine_tune_lr: float = 1e-5
    loss: str = "L1"
    patience: int = 10
    seed: int = 0
    drop_empty_patches: bool = True
    freeze: tuple[str, ...] = ()  # parameter-name prefixes left untouched

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1 or self.patience < 1:
            raise ConfigError("batch_size and patience must be positive")
        if not (self.learning_rate > 0 and self.fine_tune_lr > 0):
            raise ConfigError("learning rates must be positive")
        if self.epochs and self.patience > self.epochs:
            raise ConfigError("patience cannot exceed epochs")
        if self.loss not in ("L1", "L2"):
            raise ConfigError(f"unknown loss {self.loss!r}")


def loss_value(pred, target, kind: str = "L1") -> tuple[float, np.ndarray]:
    """Mean L1 or L2 loss and its gradient with respect to ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    if kind == "L1":
        return float(np.mean(np.abs(diff))), np.sign(diff) / n
    if kind == "L2":
        return float(np.mean(diff * diff)), 2.0 * diff / n
    raise ConfigError(f"unknown loss {kind!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "AdamState":
        if ckpt.adam_m is None:
            return cls()
        return cls({k: v.copy() for k, v in ckpt.adam_m.items()}, {k: v.copy() for k, v in ckpt.adam_v.items()}, ckpt.adam_step)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, frozen: Sequence[str] = ()) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, g in grads.items():
        if frozen and name.startswith(tuple(frozen)):
            continue
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_nmse_db: float
    val_ssim: float
    lr: float


def write_history(history: Sequence[EpochRecord], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in history:
            w.writerow([r.epoch, f"{r.train_loss:.8g}", format_db(r.val_nmse_db), f"{r.val_ssim:.6f}", f"{r.lr:g}"])


def _stack(patches: Sequence[PatchPair], attr: str) -> np.ndarray:
    return np.stack([getattr(p, attr) for p in patches])[:, None]


def super_resolve(
    checkpoint: Checkpoint,
    transform_in: QuantileTransform,
    transform_out: QuantileTransform,
    lr_patches,
    batch_size: int = 256,
) -> np.ndarray:
    """T^-1(N(T(lr))) for a stack of LR grids, clamped at zero; returns (N, 2H, 2W)."""
    if transform_in != transform_out:
        raise ConfigError("the pipeline applies a single transform at both ends")
    lr = np.asarray(lr_patches, dtype=np.float64)
    if lr.ndim == 2:
        lr = lr[None]
    if lr.ndim != 3:
        raise DimensionError(f"expected a stack of 2-D LR grids, got {lr.shape}")
    net = SrNetwork.from_checkpoint(checkpoint)
    z = transform_in.apply(lr)[:, None].astype(np.float32)
    out = np.empty((lr.shape[0], 2 * lr.shape[1], 2 * lr.shape[2]))
    for i in range(0, len(z), batch_size):
        pred = net.forward(z[i : i + batch_size], keep=False)[:, 0]
        out[i : i + batch_size] = transform_out.invert(pred.astype(np.float64))
    np.maximum(out, 0.0, out=out)
    return out


def _validate(net: SrNetwork, transform: QuantileTransform, val_lr_t, val_hr, data_range) -> tuple[float, float]:
    preds = []
    for i in range(0, len(val_lr_t), 256):
        preds.append(net.forward(val_lr_t[i : i + 256], keep=False)[:, 0])
    est = np.maximum(transform.invert(np.concatenate(preds).astype(np.float64)), 0.0)
    nmse = dataset_nmse_db(zip(val_hr, est))
    ssim = float(batch_ssim(val_hr, est, data_range).mean()) if data_range > 0 else 1.0
    return nmse, ssim


def train(
    config: TrainConfig,
    train_set: Sequence[PatchPair],
    val_set: Sequence[PatchPair],
    transform: QuantileTransform,
    init: Checkpoint,
    provenance: Provenance | None = None,
    learning_rate: float | None = None,
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Minimise the loss in transformed space; keep the checkpoint with the best validation NMSE.

    Validation NMSE is measured in the original flux space, after the inverse
    transform. Training stops after ``patience`` epochs without improvement.
    """
    lr = config.learning_rate if learning_rate is None else learning_rate
    if config.epochs == 0:
        return init.copy(), []
    if config.drop_empty_patches:
        train_set = [p for p in train_set if not p.empty]
    if not train_set or not val_set:
        raise DataError("training and validation sets must be non-empty")

    x_train = transform.apply(_stack(train_set, "lr")).astype(np.float32)
    y_train = transform.apply(_stack(train_set, "hr")).astype(np.float32)
    val_lr_t = transform.apply(_stack(val_set, "lr")).astype(np.float32)
    val_hr = np.stack([p.hr for p in val_set])
    data_range = float(val_hr.max() - val_hr.min())

    ckpt = init.copy(provenance=provenance or init.provenance)
    net = SrNetwork(ckpt.config, ckpt.params)
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    history: list[EpochRecord] = []
    best = None
    best_nmse = math.inf
    stale = 0
    n = len(x_train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            pred = net.forward(x_train[idx])
            loss, grad = loss_value(pred, y_train[idx], config.loss)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads, _ = net.backward(grad)
            adam_step(net.params, grads, state, lr, config.freeze)
            total += loss * len(idx)
        val_nmse, val_ssim = _validate(net, transform, val_lr_t, val_hr, data_range)
        history.append(EpochRecord(epoch, total / n, val_nmse, val_ssim, lr))
        log.debug("epoch %d loss %.5f val %.3f dB", epoch, total / n, val_nmse)
        if val_nmse < best_nmse:
            best_nmse = val_nmse
            best = ckpt.copy(
                epoch=epoch,
                val_nmse_db=val_nmse,
                adam_step=state.t,
                adam_m={k: v.copy() for k, v in state.m.items()},
                adam_v={k: v.copy() for k, v in state.v.items()},
            )
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best is None:
        # validation never produced a finite score; keep the final weights
        best = ckpt.copy(epoch=history[-1].epoch, val_nmse_db=history[-1].val_nmse_db)
    return best, history


# --------------------------------------------------------------------------
# network operator adaptation


@dataclass(frozen=True)
class InjectionConfig:
    fraction: float
    total_budget: int
    source_pool: Sequence[PatchPair]
    target_pool: Sequence[PatchPair]
    seed: int = 0

    @property
    def n_target(self) -> int:
        return int(round(self.fraction * self.total_budget))

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise ConfigError("injection fraction must lie in [0, 1]")
        if self.total_budget < 1:
            raise ConfigError("total budget must be positive")
        if self.n_target > len(self.target_pool):
            raise DataError(
                f"target pool has {len(self.target_pool)} patches, injection needs {self.n_target}"
            )
        if self.total_budget - self.n_target > len(self.source_pool):
            raise DataError(
                f"source pool has {len(self.source_pool)} patches, injection needs {self.total_budget - self.n_target}"
            )


def build_injection_set(cfg: InjectionConfig) -> list[PatchPair]:
    """Exactly round(p*N) target patches plus N - round(p*N) source patches, shuffled."""
    rng = np.random.default_rng(cfg.seed)
    k = cfg.n_target
    tgt = rng.choice(len(cfg.target_pool), size=k, replace=False)
    src = rng.choice(len(cfg.source_pool), size=cfg.total_budget - k, replace=False)
    chosen = [cfg.target_pool[i] for i in tgt] + [cfg.source_pool[i] for i in src]
    return [chosen[i] for i in rng.permutation(len(chosen))]


def fine_tune(
    base: Checkpoint,
    train_set: Sequence[PatchPair],
    val_set: Sequence[PatchPair],
    transform: QuantileTransform,
    config: TrainConfig,
    fraction: float,
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Continue training ``base`` on an injection set at ``config.fine_tune_lr``.

    ``transform`` (the observed-domain fit) is applied to every patch, source
    and target alike.
    """
    if base.provenance.kind not in (ProvenanceKind.TRAINED_ON_S, ProvenanceKind.TRAINED_ON_ST):
        raise ConfigError(f"fine-tuning starts from a simulated-domain network, got {base.provenance}")
    provenance = Provenance(ProvenanceKind.FINE_TUNED_DA, fraction)
    fresh = base.copy(adam_m=None, adam_v=None, adam_step=0)
    ckpt, history = train(config, train_set, val_set, transform, fresh, provenance, config.fine_tune_lr)
    if config.epochs == 0:
        ckpt = ckpt.copy(provenance=provenance)
    return ckpt, history
