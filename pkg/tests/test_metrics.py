import math

import numpy as np
import pytest

from emission_sr.errors import DataError, DimensionError
from emission_sr.metrics import dataset_nmse_db, format_db, gaussian_window, nmse_db, score, ssim


def naive_ssim(x, y, data_range):
    w = gaussian_window()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            a, b = x[i : i + 11, j : j + 11], y[i : i + 11, j : j + 11]
            ma, mb = np.sum(w * a), np.sum(w * b)
            va = np.sum(w * (a - ma) ** 2)
            vb = np.sum(w * (b - mb) ** 2)
            cov = np.sum(w * (a - ma) * (b - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_nmse_known_values(rng):
    ref = rng.random((8, 8)) + 0.1
    assert nmse_db(ref, np.zeros_like(ref)) == pytest.approx(0.0, abs=1e-12)
    assert nmse_db(ref, 0.9 * ref) == pytest.approx(-20.0)
    assert nmse_db(ref, ref) == -math.inf
    with pytest.raises(DataError):
        nmse_db(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(DimensionError):
        nmse_db(ref, ref[:4])


def test_pooled_nmse_weights_by_energy():
    a, b = np.ones((4, 4)), 3 * np.ones((4, 4))
    got = dataset_nmse_db([(a, 0.5 * a), (b, b)])
    assert got == pytest.approx(10 * math.log10(0.25 * 16 / (16 + 9 * 16)))
    # an all-zero reference contributes nothing when its estimate is zero too
    assert dataset_nmse_db([(a, 0.5 * a), (np.zeros((4, 4)), np.zeros((4, 4)))]) == pytest.approx(nmse_db(a, 0.5 * a))


def test_ssim_identity_and_oracle(rng):
    x = rng.random((32, 32))
    assert ssim(x, x, 1.0) == pytest.approx(1.0, abs=1e-9)
    y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, None)
    assert ssim(x, y, 1.0) == pytest.approx(naive_ssim(x, y, 1.0), abs=1e-6)
    assert ssim(x, y, 1.0) < 1


def test_ssim_errors(rng):
    with pytest.raises(DimensionError):
        ssim(np.ones((8, 8)), np.ones((8, 8)), 1.0)
    with pytest.raises(DataError):
        ssim(np.ones((16, 16)), np.ones((16, 16)), 0.0)


def test_score_and_format(rng):
    refs = [rng.random((16, 16)) for _ in range(3)]
    nmse, s, dr = score(refs, refs)
    assert nmse == -math.inf and s == pytest.approx(1.0) and dr == pytest.approx(np.ptp(np.stack(refs)))
    assert format_db(-math.inf) == "-inf" and format_db(-1.23456) == "-1.2346"
