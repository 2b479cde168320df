"""Residual channel-attention super-resolution network with exact backprop.

Architecture (scale 2)::

    head conv3x3 (1->C)
    B x [conv3x3 -> ReLU -> conv3x3 -> channel attention -> + input]
    + head output (long skip)
    conv3x3 (C->4C) -> pixel shuffle x2 -> conv3x3 (C->1)

Channel attention is global average pool -> 1x1 conv (C->C/r) -> ReLU ->
1x1 conv (C/r->C) -> sigmoid gate. With ``global_skip`` the bicubic x2
upsampling of the input is added to the tail output, so the layers learn a
residual over interpolation.

Public tensors are NCHW. Internally activations are kept NHWC so that the
im2col matrices are plain row-major reshapes.

Checkpoints use the little-endian "SRCK v1" layout::

    b"SRCK" | u32 version | u32 channels, blocks, reduction, scale, kernel,
    global_skip
    | u32 provenance code | f32 injection fraction | u64 seed | u32 epoch
    | f64 val_nmse_db | u32 adam step | u32 tensor count
    | per tensor: u32 name length, UTF-8 name, u32 ndim, u32 dims..., f32 data

Adam moments, when present, are stored as tensors named ``adam.m/<param>``
and ``adam.v/<param>``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError, FormatError, NumericError

SRCK_MAGIC = b"SRCK"
SRCK_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    channels: int = 32
    blocks: int = 4
    attention_reduction: int = 8
    scale: int = 2
    kernel: int = 3
    global_skip: bool = False

    def __post_init__(self):
        if self.scale != 2:
            raise ConfigError("only scale 2 is supported")
        if not self.channels >= self.attention_reduction >= 1:
            raise ConfigError("need channels >= attention_reduction >= 1")
        if self.blocks < 0:
            raise ConfigError("blocks must be >= 0")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel must be a positive odd integer")

    @property
    def squeeze(self) -> int:
        return max(1, self.channels // self.attention_reduction)

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        c, k, s = self.channels, self.kernel, self.squeeze
        shapes = {"head.w": (c, 1, k, k), "head.b": (c,)}
        for i in range(self.blocks):
            p = f"block{i}."
            shapes[p + "conv1.w"] = (c, c, k, k)
            shapes[p + "conv1.b"] = (c,)
            shapes[p + "conv2.w"] = (c, c, k, k)
            shapes[p + "conv2.b"] = (c,)
            shapes[p + "ca1.w"] = (s, c, 1, 1)
            shapes[p + "ca1.b"] = (s,)
            shapes[p + "ca2.w"] = (c, s, 1, 1)
            shapes[p + "ca2.b"] = (c,)
        shapes["up.w"] = (4 * c, c, k, k)
        shapes["up.b"] = (4 * c,)
        shapes["tail.w"] = (1, c, k, k)
        shapes["tail.b"] = (1,)
        return shapes


class ProvenanceKind(enum.Enum):
    TRAINED_ON_S = 0
    TRAINED_ON_ST = 1
    FINE_TUNED_DA = 2
    TRAINED_ON_O = 3
    UNTRAINED = 4


@dataclass(frozen=True)
class Provenance:
    kind: ProvenanceKind = ProvenanceKind.UNTRAINED
    fraction: float = 0.0

    def __post_init__(self):
        # stored as f32 on disk; normalise so round trips are exact
        object.__setattr__(self, "fraction", float(np.float32(self.fraction)))
        if self.kind is ProvenanceKind.FINE_TUNED_DA and not 0 <= self.fraction <= 1:
            raise ConfigError("injection fraction must lie in [0, 1]")

    def __str__(self) -> str:
        if self.kind is ProvenanceKind.FINE_TUNED_DA:
            return f"FineTunedDA({self.fraction:g})"
        return {
            ProvenanceKind.TRAINED_ON_S: "TrainedOnS",
            ProvenanceKind.TRAINED_ON_ST: "TrainedOnST",
            ProvenanceKind.TRAINED_ON_O: "TrainedOnO",
            ProvenanceKind.UNTRAINED: "Untrained",
        }[self.kind]


@dataclass(eq=False)
class Checkpoint:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    provenance: Provenance = field(default_factory=Provenance)
    seed: int = 0
    epoch: int = 0
    val_nmse_db: float = float("nan")
    adam_step: int = 0
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        shapes = self.config.parameter_shapes()
        if set(shapes) != set(self.params):
            missing = set(shapes) ^ set(self.params)
            raise DataError(f"parameter names do not match config: {sorted(missing)}")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise DataError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    def copy(self, **changes) -> "Checkpoint":
        def dup(d):
            return None if d is None else {k: v.copy() for k, v in d.items()}

        fields = dict(
            config=self.config,
            params=dup(self.params),
            provenance=self.provenance,
            seed=self.seed,
            epoch=self.epoch,
            val_nmse_db=self.val_nmse_db,
            adam_step=self.adam_step,
            adam_m=dup(self.adam_m),
            adam_v=dup(self.adam_v),
        )
        fields.update(changes)
        return Checkpoint(**fields)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.keys() == b.keys() and all(
                a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]) for k in a
            )

        nan_eq = self.val_nmse_db == other.val_nmse_db or (
            np.isnan(self.val_nmse_db) and np.isnan(other.val_nmse_db)
        )
        return (
            self.config == other.config
            and self.provenance == other.provenance
            and self.seed == other.seed
            and self.epoch == other.epoch
            and nan_eq
            and self.adam_step == other.adam_step
            and same(self.params, other.params)
            and same(self.adam_m, other.adam_m)
            and same(self.adam_v, other.adam_v)
        )


def init_parameters(config: NetworkConfig, seed: int = 0, provenance: Provenance | None = None) -> Checkpoint:
    """He-normal conv weights (std sqrt(2/fan_in)), zero biases, f32.

    With ``global_skip`` the tail conv starts at zero so the untrained network
    reproduces bicubic interpolation exactly.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.parameter_shapes().items():
        if name == "tail.w" and config.global_skip:
            params[name] = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return Checkpoint(config, params, provenance or Provenance(), seed=seed)


def dirac_checkpoint(config: NetworkConfig) -> Checkpoint:
    """Degenerate network whose output is the nearest-neighbour x2 upsampling of its input.

    Head copies half the input to channel 0 (the long skip doubles it back),
    residual branches are zero, the
    attention gate saturates open, the upsampling conv replicates channel c
    into its four sub-pixel slots and the tail reads channel 0 back out.
    """
    if config.global_skip:
        raise ConfigError("the nearest-neighbour network needs global_skip off")
    params = {name: np.zeros(shape, dtype=np.float32) for name, shape in config.parameter_shapes().items()}
    k = config.kernel // 2
    params["head.w"][0, 0, k, k] = 0.5
    for i in range(config.blocks):
        params[f"block{i}.ca2.b"][:] = 40.0
    for c in range(config.channels):
        params["up.w"][4 * c : 4 * c + 4, c, k, k] = 1.0
    params["tail.w"][0, 0, k, k] = 1.0
    return Checkpoint(config, params)


# --------------------------------------------------------------------------
# primitive layers (NHWC)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Rows are pixels, columns ordered (ki, kj, c) so every copy moves a contiguous channel run."""
    n, h, w, c = x.shape
    if k == 1:
        return x.reshape(n * h * w, c)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((n, h, w, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + h, j : j + w, :]
    return cols.reshape(n * h * w, k * k * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    n, h, w, c = shape
    if k == 1:
        return dcols.reshape(shape)
    p = k // 2
    d = dcols.reshape(n, h, w, k, k, c)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + h, j : j + w, :] += d[:, :, :, i, j, :]
    return dxp[:, p : p + h, p : p + w, :]


def _matrix(w: np.ndarray) -> np.ndarray:
    """(Cout, Cin, k, k) weights as a (Cout, k*k*Cin) matrix matching the im2col column order."""
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv_forward(x, w, b):
    n, h, wd, _ = x.shape
    cout, cin, k, _ = w.shape
    if x.shape[3] != cin:
        raise DimensionError(f"conv expects {cin} input channels, got {x.shape[3]}")
    cols = _im2col(x, k)
    out = cols @ _matrix(w).T
    out += b
    return out.reshape(n, h, wd, cout), cols


def _conv_backward(dy, cols, w, x_shape):
    cout, cin, k, _ = w.shape
    dy2 = dy.reshape(-1, cout)
    dw = (dy2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
    db = dy2.sum(axis=0)
    dx = _col2im(dy2 @ _matrix(w), x_shape, k)
    return dx, np.ascontiguousarray(dw), db


def _shuffle_nhwc(x: np.ndarray) -> np.ndarray:
    n, h, w, c4 = x.shape
    c = c4 // 4
    return x.reshape(n, h, w, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h, 2 * w, c)


def _unshuffle_nhwc(x: np.ndarray) -> np.ndarray:
    n, h2, w2, c = x.shape
    h, w = h2 // 2, w2 // 2
    return x.reshape(n, h, 2, w, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h, w, 4 * c)


def _interp_matrices(h: int, w: int, dtype):
    from .resample import DEFAULT_A, _weights

    return _weights(h, 2 * h, DEFAULT_A).astype(dtype), _weights(w, 2 * w, DEFAULT_A).astype(dtype)


def _interp_nhwc(x: np.ndarray) -> np.ndarray:
    """Unclamped bicubic x2 upsampling of a single-channel NHWC batch."""
    mh, mw = _interp_matrices(x.shape[1], x.shape[2], x.dtype)
    return np.einsum("ai,nijc,bj->nabc", mh, x, mw, optimize=True)


def _interp_nhwc_transpose(d: np.ndarray) -> np.ndarray:
    mh, mw = _interp_matrices(d.shape[1] // 2, d.shape[2] // 2, d.dtype)
    return np.einsum("ai,nabc,bj->nijc", mh, d, mw, optimize=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# public NCHW primitives


def conv2d(x, weights, bias=None) -> np.ndarray:
    """Same-padded (zero) cross-correlation on an NCHW tensor."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    if x.ndim != 4 or weights.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and (Cout, Cin, k, k) weights")
    if weights.shape[2] != weights.shape[3] or weights.shape[2] % 2 == 0:
        raise DimensionError("kernel must be square with odd size")
    if bias is None:
        bias = np.zeros(weights.shape[0], dtype=weights.dtype)
    out, _ = _conv_forward(x.transpose(0, 2, 3, 1), weights, np.asarray(bias))
    return out.transpose(0, 3, 1, 2)


def pixel_shuffle(x) -> np.ndarray:
    """(N, 4C, H, W) -> (N, C, 2H, 2W); channel 4c + 2dy + dx lands at (2y+dy, 2x+dx)."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] % 4:
        raise DimensionError(f"pixel_shuffle needs NCHW input with channels divisible by 4, got {x.shape}")
    n, c4, h, w = x.shape
    return x.reshape(n, c4 // 4, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c4 // 4, 2 * h, 2 * w)


def pixel_unshuffle(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"pixel_unshuffle needs even spatial dims, got {x.shape}")
    n, c, h2, w2 = x.shape
    h, w = h2 // 2, w2 // 2
    return x.reshape(n, c, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, 4 * c, h, w)


# --------------------------------------------------------------------------
# network


class SrNetwork:
    """Forward/backward over a parameter dict; intermediates from the last forward are retained."""

    def __init__(self, config: NetworkConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self._cache = None

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype=None) -> "SrNetwork":
        params = ckpt.params if dtype is None else {k: v.astype(dtype) for k, v in ckpt.params.items()}
        return cls(ckpt.config, params)

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    def _check(self, x, layer: str):
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite activation after layer {layer}")

    def forward(self, lr, keep: bool = True) -> np.ndarray:
        lr = np.asarray(lr)
        if lr.ndim != 4 or lr.shape[1] != 1:
            raise DimensionError(f"expected input of shape (N, 1, H, W), got {lr.shape}")
        if not np.isfinite(lr).all():
            raise DataError("network input contains non-finite values")
        p, cfg = self.params, self.config
        x = lr.astype(self.dtype, copy=False).transpose(0, 2, 3, 1)
        cache = {"x_shape": x.shape}

        h, cache["head"] = _conv_forward(x, p["head.w"], p["head.b"])
        self._check(h, "head")
        y = h
        for i in range(cfg.blocks):
            pre = f"block{i}."
            c1, cols1 = _conv_forward(y, p[pre + "conv1.w"], p[pre + "conv1.b"])
            r = np.maximum(c1, 0)
            c2, cols2 = _conv_forward(r, p[pre + "conv2.w"], p[pre + "conv2.b"])
            s = c2.mean(axis=(1, 2))
            z = s @ p[pre + "ca1.w"][:, :, 0, 0].T + p[pre + "ca1.b"]
            a = np.maximum(z, 0)
            g = _sigmoid(a @ p[pre + "ca2.w"][:, :, 0, 0].T + p[pre + "ca2.b"])
            out = y + c2 * g[:, None, None, :]
            self._check(out, f"block{i}")
            cache[pre] = (y.shape, c1, cols1, c2, cols2, s, z, a, g)
            y = out
        body = y + h
        u, cache["up"] = _conv_forward(body, p["up.w"], p["up.b"])
        cache["body_shape"] = body.shape
        self._check(u, "up")
        sh = _shuffle_nhwc(u)
        cache["shuffle_shape"] = sh.shape
        o, cache["tail"] = _conv_forward(sh, p["tail.w"], p["tail.b"])
        if cfg.global_skip:
            o = o + _interp_nhwc(x)
        self._check(o, "tail")
        self._cache = cache if keep else None
        return o.transpose(0, 3, 1, 2)

    __call__ = forward

    def relu_masks(self) -> list[np.ndarray]:
        """Active-unit masks of every ReLU in the last forward pass."""
        if self._cache is None:
            raise RuntimeError("no retained forward pass")
        masks = []
        for i in range(self.config.blocks):
            entry = self._cache[f"block{i}."]
            masks += [entry[1] > 0, entry[6] > 0]
        return masks

    def backward(self, grad_out):
        """Reverse-mode pass; returns (parameter gradients, input gradient)."""
        if self._cache is None:
            raise RuntimeError("backward called without a retained forward pass")
        cache, p, cfg = self._cache, self.params, self.config
        grads = {}
        d = np.asarray(grad_out, dtype=self.dtype).transpose(0, 2, 3, 1)
        d_skip = _interp_nhwc_transpose(d) if cfg.global_skip else None
        d, grads["tail.w"], grads["tail.b"] = _conv_backward(d, cache["tail"], p["tail.w"], cache["shuffle_shape"])
        d = _unshuffle_nhwc(d)
        d_body, grads["up.w"], grads["up.b"] = _conv_backward(d, cache["up"], p["up.w"], cache["body_shape"])
        d_head = d_body.copy()
        dy = d_body
        for i in reversed(range(cfg.blocks)):
            pre = f"block{i}."
            y_shape, c1, cols1, c2, cols2, s, z, a, g = cache[pre]
            w1 = p[pre + "ca1.w"][:, :, 0, 0]
            w2 = p[pre + "ca2.w"][:, :, 0, 0]
            # out = y + c2 * g
            dc2 = dy * g[:, None, None, :]
            dg = (dy * c2).sum(axis=(1, 2))
            dpre2 = dg * g * (1 - g)
            grads[pre + "ca2.w"] = (dpre2.T @ a)[:, :, None, None]
            grads[pre + "ca2.b"] = dpre2.sum(axis=0)
            dz = (dpre2 @ w2) * (z > 0)
            grads[pre + "ca1.w"] = (dz.T @ s)[:, :, None, None]
            grads[pre + "ca1.b"] = dz.sum(axis=0)
            ds = dz @ w1
            dc2 = dc2 + ds[:, None, None, :] / (c2.shape[1] * c2.shape[2])
            dr, grads[pre + "conv2.w"], grads[pre + "conv2.b"] = _conv_backward(
                dc2, cols2, p[pre + "conv2.w"], c1.shape
            )
            dc1 = dr * (c1 > 0)
            dyin, grads[pre + "conv1.w"], grads[pre + "conv1.b"] = _conv_backward(
                dc1, cols1, p[pre + "conv1.w"], y_shape
            )
            dy = dy + dyin
        d_head = d_head + dy
        dx, grads["head.w"], grads["head.b"] = _conv_backward(d_head, cache["head"], p["head.w"], cache["x_shape"])
        if d_skip is not None:
            dx = dx + d_skip
        return grads, dx.transpose(0, 3, 1, 2)


def forward(ckpt: Checkpoint, lr) -> np.ndarray:
    return SrNetwork.from_checkpoint(ckpt).forward(lr, keep=False)


def predict(ckpt: Checkpoint, lr, batch_size: int = 256) -> np.ndarray:
    net = SrNetwork.from_checkpoint(ckpt)
    lr = np.asarray(lr)
    outs = [net.forward(lr[i : i + batch_size], keep=False) for i in range(0, len(lr), batch_size)]
    return np.concatenate(outs, axis=0) if outs else np.empty((0, 1, 2 * lr.shape[2], 2 * lr.shape[3]))


# --------------------------------------------------------------------------
# checkpoint I/O

_HEAD = struct.Struct("<4sI6IIfQIdII")


def _tensor_items(ckpt: Checkpoint):
    yield from ckpt.params.items()
    if ckpt.adam_m is not None:
        for k, v in ckpt.adam_m.items():
            yield f"adam.m/{k}", v
        for k, v in ckpt.adam_v.items():
            yield f"adam.v/{k}", v


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    cfg = ckpt.config
    items = list(_tensor_items(ckpt))
    chunks = [
        _HEAD.pack(
            SRCK_MAGIC, SRCK_VERSION,
            cfg.channels, cfg.blocks, cfg.attention_reduction, cfg.scale, cfg.kernel, int(cfg.global_skip),
            ckpt.provenance.kind.value, ckpt.provenance.fraction,
            ckpt.seed, ckpt.epoch, ckpt.val_nmse_db, ckpt.adam_step, len(items),
        )
    ]
    for name, arr in items:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    (magic, version, ch, blocks, red, scale, kernel, skip, pkind, frac,
     seed, epoch, val, step, count) = _HEAD.unpack_from(raw)
    if magic != SRCK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SRCK_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        if skip not in (0, 1):
            raise ValueError(f"global_skip flag {skip}")
        config = NetworkConfig(ch, blocks, red, scale, kernel, bool(skip))
        provenance = Provenance(ProvenanceKind(pkind), frac)
    except (ConfigError, ValueError) as exc:
        raise FormatError(f"{path}: invalid header: {exc}") from exc
    pos = _HEAD.size
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(raw):
                raise FormatError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt tensor table") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    params = {k: v for k, v in tensors.items() if "/" not in k}
    adam_m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")} or None
    adam_v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")} or None
    try:
        return Checkpoint(config, params, provenance, seed, epoch, val, step, adam_m, adam_v)
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from exc
