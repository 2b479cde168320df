import numpy as np
import pytest

from emission_sr.core import DomainTag, read_emg, read_manifest
from emission_sr.errors import ConfigError
from emission_sr.synthetic import (
    NULL_SHIFT,
    DomainShiftConfig,
    FieldConfig,
    coarse_mask,
    derive_observed_frame,
    gen_dataset,
    gen_simulated_frame,
    high_frequency_energy,
    land_mask,
    power_law_field,
    shift_distance,
    spectral_slope_estimate,
)

CFG = FieldConfig(height=64, width=64, seed=5)


def test_zero_fraction_and_nonnegative():
    f = gen_simulated_frame(FieldConfig(height=128, width=128, zero_fraction=0.3, seed=1), 0)
    assert np.mean(f.values == 0) >= 0.29
    assert f.values.min() >= 0 and f.domain == DomainTag.simulated()


def test_frames_are_deterministic():
    a, b = gen_simulated_frame(CFG, 3), gen_simulated_frame(CFG, 3)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, gen_simulated_frame(CFG, 4).values)
    assert not np.array_equal(a.values, gen_simulated_frame(FieldConfig(height=64, width=64, seed=6), 3).values)


@pytest.mark.parametrize("slope", [2.0, 3.0])
def test_power_law_slope(slope):
    est = np.mean([spectral_slope_estimate(power_law_field((128, 128), slope, np.random.default_rng(s))) for s in range(4)])
    assert est == pytest.approx(slope, abs=0.5)


def test_null_shift_is_identity():
    frame = gen_simulated_frame(CFG, 2)
    o = derive_observed_frame([frame], NULL_SHIFT)
    np.testing.assert_allclose(o.values, frame.values)
    assert o.domain == DomainTag.observed(1) and o.resolution_deg == frame.resolution_deg


def test_blur_removes_high_frequencies():
    frames = [gen_simulated_frame(CFG, t) for t in range(3)]
    sharp = derive_observed_frame(frames, DomainShiftConfig(3, 0.0, 0.0, 1.0, 1.0, 1))
    blurred = derive_observed_frame(frames, DomainShiftConfig(3, 2.0, 0.0, 1.0, 1.0, 1))
    assert high_frequency_energy(blurred.values) < 0.2 * high_frequency_energy(sharp.values)


def test_gain_and_gamma():
    frame = gen_simulated_frame(CFG, 0)
    o = derive_observed_frame([frame], DomainShiftConfig(1, 0.0, 0.0, 3.0, 0.5, 1))
    np.testing.assert_allclose(o.values, 3.0 * np.sqrt(frame.values))
    assert shift_distance(frame.values, o.values) > 0
    assert shift_distance(frame.values, frame.values) == 0


def test_coarse_mask_half_area():
    m = np.zeros((4, 4), bool)
    m[:, :2] = True
    assert coarse_mask(m, 2).tolist() == [[True, False], [True, False]]
    assert land_mask(CFG).shape == (64, 64)


def test_config_validation():
    with pytest.raises(ConfigError):
        FieldConfig(height=48)
    with pytest.raises(ConfigError):
        FieldConfig(bump_width=(0.3, 0.1))
    with pytest.raises(ConfigError):
        DomainShiftConfig(gain=0)
    with pytest.raises(ConfigError):
        derive_observed_frame([gen_simulated_frame(CFG, 0)], DomainShiftConfig(aggregation_window=2))


def test_gen_dataset(tmp_path):
    shift = DomainShiftConfig(aggregation_window=6)
    ds = gen_dataset(CFG, shift, 24, tmp_path / "a")
    assert len(ds.observed) == 19  # 24 frames, window 6, one patch per O frame
    assert len(ds.s_fine) == 24 * 4 and len(ds.s_coarse) == 24
    assert read_manifest(ds.manifest_paths[2]).records == ds.observed.records
    o = read_emg(tmp_path / "a" / "observed" / "t0005.emg")
    assert o.resolution_deg == 0.5 and o.time_index == 5
    again = gen_dataset(CFG, shift, 24, tmp_path / "b")
    for name in ("s_fine/t0003.emg", "observed/t0020.emg", "scenario.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with pytest.raises(ConfigError):
        gen_dataset(CFG, shift, 5, tmp_path / "c")
