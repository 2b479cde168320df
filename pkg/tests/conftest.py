import numpy as np
import pytest

from emission_sr.core import DomainTag, PatchPair
from emission_sr.resample import bicubic_downsample

# (criterion, passed, detail) lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_field(rng, shape=(32, 32), zero_fraction=0.0):
    """A positive, smooth-ish random grid with an optional block of zeros."""
    from scipy.ndimage import gaussian_filter

    g = np.exp(gaussian_filter(rng.standard_normal(shape), 2.0) * 3.0)
    if zero_fraction:
        g[: int(shape[0] * zero_fraction)] = 0.0
    return g


def make_patch(hr, domain=DomainTag.simulated(), t=0, origin=(0, 0), pid="p"):
    hr = np.asarray(hr, dtype=np.float64)
    return PatchPair(hr, bicubic_downsample(hr, 2), "mem", origin, domain, t, pid)


@pytest.fixture
def patches(rng):
    return [make_patch(smooth_field(rng), pid=f"p{i}") for i in range(12)]


# --------------------------------------------------------------------------
# network oracles shared by test_network.py and test_acceptance.py


def naive_conv(x, w, b):
    """Zero-padded same cross-correlation as explicit loops over (N, C, H, W)."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros((n, cout, h, wd))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                out[:, o, i, j] = np.sum(xp[:, :, i : i + k, j : j + k] * w[o], axis=(1, 2, 3)) + b[o]
    return out


def naive_forward(ckpt, lr):
    """Reference forward pass written layer by layer in NCHW float64."""
    from emission_sr.resample import bicubic_upsample

    p = {k: v.astype(np.float64) for k, v in ckpt.params.items()}
    cfg = ckpt.config
    x = np.asarray(lr, dtype=np.float64)
    h = naive_conv(x, p["head.w"], p["head.b"])
    y = h
    for i in range(cfg.blocks):
        pre = f"block{i}."
        r = np.maximum(naive_conv(y, p[pre + "conv1.w"], p[pre + "conv1.b"]), 0)
        c2 = naive_conv(r, p[pre + "conv2.w"], p[pre + "conv2.b"])
        gate = np.zeros(c2.shape[:2])
        for n in range(c2.shape[0]):
            s = c2[n].mean(axis=(1, 2))
            a = np.maximum(p[pre + "ca1.w"][:, :, 0, 0] @ s + p[pre + "ca1.b"], 0)
            gate[n] = 1 / (1 + np.exp(-(p[pre + "ca2.w"][:, :, 0, 0] @ a + p[pre + "ca2.b"])))
        y = y + c2 * gate[:, :, None, None]
    u = naive_conv(y + h, p["up.w"], p["up.b"])
    n, c4, hh, ww = u.shape
    sh = np.zeros((n, c4 // 4, 2 * hh, 2 * ww))
    for c in range(c4 // 4):
        for dy in range(2):
            for dx in range(2):
                sh[:, c, dy::2, dx::2] = u[:, 4 * c + 2 * dy + dx]
    out = naive_conv(sh, p["tail.w"], p["tail.b"])
    if cfg.global_skip:
        for n in range(x.shape[0]):
            out[n, 0] += bicubic_upsample(x[n, 0], clamp=False)
    return out


def gradient_check(config, seed, step=1e-3, batch=1, size=4):
    """Central differences vs. backprop in float64 on an L2 loss.

    Returns (worst relative error, skipped fraction). A coordinate whose
    +/- step flips any ReLU mask sits on a kink of the piecewise-smooth loss
    and is skipped. The error of a tensor is max|fd - grad| / max|grad|.
    """
    from emission_sr.network import SrNetwork, init_parameters

    ck = init_parameters(config, seed)
    rng = np.random.default_rng(seed + 1000)
    params = {k: v.astype(np.float64) for k, v in ck.params.items()}
    if config.global_skip:
        params["tail.w"] = rng.standard_normal(params["tail.w"].shape) * 0.3
    net = SrNetwork(config, params)
    x = rng.normal(size=(batch, 1, size, size))
    t = rng.normal(size=(batch, 1, 2 * size, 2 * size))
    out = net.forward(x)
    base = net.relu_masks()
    grads, _ = net.backward((out - t) / out.size)

    def loss():
        o = net.forward(x)
        same = all(np.array_equal(a, b) for a, b in zip(base, net.relu_masks()))
        return 0.5 * np.mean((o - t) ** 2), same

    worst, skipped, total = 0.0, 0, 0
    for name, v in params.items():
        fd = np.full(v.shape, np.nan)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + step
            lp, s1 = loss()
            v[idx] = old - step
            lm, s2 = loss()
            v[idx] = old
            total += 1
            if s1 and s2:
                fd[idx] = (lp - lm) / (2 * step)
            else:
                skipped += 1
        ok = ~np.isnan(fd)
        scale = np.abs(grads[name]).max()
        if ok.any() and scale > 0:
            worst = max(worst, float(np.abs(fd - grads[name])[ok].max() / scale))
    return worst, skipped / total


# --------------------------------------------------------------------------
# a scenario small enough to run every CLI command in a few seconds

TINY_INI = """
[scenario]
n_frames = 24
period = 6
[field]
height = 64
width = 64
blob_count = 8
[network]
channels = 4
blocks = 1
attention_reduction = 2
global_skip = true
[train]
batch_size = 8
patience = 2
[epochs]
s_fine = 1
s_coarse = 1
st_fine = 1
st_coarse = 1
o = 1
fine_tune = 1
[transform]
n_quantiles = 100
[sweeps]
transform_fractions = 0.5, 1.0
transform_subsets = 2
injection_fractions = 0.0, 0.5, 1.0
"""


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY_INI)
    return path
