import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emission_sr.core import DomainTag
from emission_sr.errors import ConfigError, DataError, FormatError
from emission_sr.quantile import (
    Target,
    fit,
    fit_fraction,
    gaussian_inverse_cdf,
    load_transform,
    save_transform,
)

from conftest import make_patch, smooth_field


def test_inverse_cdf_against_mpmath():
    u = np.concatenate([np.logspace(-12, -1, 40), np.linspace(0.05, 0.95, 41), 1 - np.logspace(-10, -1, 30)])
    got = gaussian_inverse_cdf(u)
    with mpmath.workdps(50):
        expect = np.array([float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(x) - 1)) for x in u])
    np.testing.assert_allclose(got, expect, rtol=1e-9, atol=1e-12)


def test_inverse_cdf_symmetry_and_domain():
    u = np.linspace(0.51, 0.99, 49)
    np.testing.assert_array_equal(gaussian_inverse_cdf(u), -gaussian_inverse_cdf(1 - u))
    assert gaussian_inverse_cdf(0.5) == 0.0
    for bad in (0.0, 1.0, np.nan):
        with pytest.raises(DataError):
            gaussian_inverse_cdf(bad)


@pytest.mark.parametrize("target", list(Target))
def test_round_trip_within_range(rng, target):
    pool = rng.lognormal(size=20_000)
    t = fit(pool, 1000, target)
    x = np.linspace(t.quantiles[0], t.quantiles[-1], 5000)
    back = t.invert(t.apply(x))
    assert np.max(np.abs(back - x)) < 1e-3 * (t.quantiles[-1] - t.quantiles[0])


def test_normal_target_is_gaussian(rng):
    pool = rng.gamma(2.0, size=50_000)
    z = fit(pool, 1000).apply(pool)
    assert abs(z.mean()) < 0.02 and abs(z.std() - 1) < 0.03


def test_ties_map_to_middle_rank():
    pool = np.concatenate([np.zeros(3000), np.linspace(1, 2, 7000)])
    t = fit(pool, 1000, Target.UNIFORM)
    assert t.apply(0.0) == pytest.approx(0.15, abs=2e-3)
    nt = fit(pool, 1000, Target.NORMAL)
    assert nt.apply(0.0) == pytest.approx(float(gaussian_inverse_cdf(0.15)), abs=1e-2)


def test_out_of_range_saturates(rng):
    t = fit(rng.random(5000), 100)
    assert t.invert(np.array([-50.0, 50.0])).tolist() == [t.quantiles[0], t.quantiles[-1]]
    assert np.all(np.isfinite(t.apply(np.array([-1e9, 1e9]))))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(list(Target)))
def test_monotone(seed, target):
    r = np.random.default_rng(seed)
    t = fit(r.exponential(size=3000) * (r.random(3000) > 0.3), 200, target)
    x = np.sort(r.exponential(size=1000) * 2)
    assert np.all(np.diff(t.apply(x)) >= 0)
    z = np.sort(r.normal(size=1000) * 2 if target is Target.NORMAL else r.random(1000))
    assert np.all(np.diff(t.invert(z)) >= 0)


def test_fit_errors(rng):
    with pytest.raises(DataError):
        fit(rng.random(10), 100)
    with pytest.raises(ConfigError):
        fit(rng.random(10), 1)
    with pytest.raises(DataError):
        fit(np.array([1.0, np.inf, 2.0]), 2)


def test_subsample_is_seeded(rng):
    pool = rng.random(20_000)
    a = fit(pool, 100, seed=5, subsample_cap=2000)
    assert a == fit(pool, 100, seed=5, subsample_cap=2000)
    assert a != fit(pool, 100, seed=6, subsample_cap=2000)


def test_fit_fraction(rng):
    patches = [make_patch(smooth_field(rng), DomainTag.observed(1), pid=str(i)) for i in range(20)]
    ts = fit_fraction(patches, 0.25, 3, seed=1, n_quantiles=100)
    assert len(ts) == 3 and all(t.fit_fraction == 0.25 and t.fitted_on == DomainTag.observed(1) for t in ts)
    assert ts[0] != ts[1]
    assert ts == fit_fraction(patches, 0.25, 3, seed=1, n_quantiles=100)
    with pytest.raises(DataError):
        fit_fraction(patches, 0.01, 3)
    with pytest.raises(ConfigError):
        fit_fraction(patches, 0.0, 3)


def test_save_load_bit_exact(rng, tmp_path):
    t = fit(rng.lognormal(size=5000), 500, Target.UNIFORM, seed=9, fitted_on=DomainTag.observed(1), fit_fraction=0.2)
    save_transform(t, tmp_path / "t.csv")
    back = load_transform(tmp_path / "t.csv")
    assert back == t
    assert back.quantiles.tobytes() == t.quantiles.tobytes()
    save_transform(back, tmp_path / "u.csv")
    assert (tmp_path / "t.csv").read_bytes() == (tmp_path / "u.csv").read_bytes()


def test_load_rejects_corruption(rng, tmp_path):
    path = tmp_path / "t.csv"
    save_transform(fit(rng.random(500), 50), path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(FormatError):
        load_transform(path)
    path.write_text("garbage\n1,2\n")
    with pytest.raises(FormatError):
        load_transform(path)
