import numpy as np
import pytest

from core.errors import ConfigError, DataError
from core.simgen import (PHANTOM_KINDS, ScannerConfig, drive_field, grid_positions, induced_voltage, langevin,
                         make_phantom, simulate_measurement, simulate_system_matrix)
from core.volume import ConcentrationImage

SMALL = ScannerConfig(sample_points=128)


def test_langevin_values():
    assert langevin(1.0) == pytest.approx(0.3130352854993312, rel=1e-12)
    assert langevin(0.0) == 0.0
    np.testing.assert_allclose(langevin(np.array([-2.0, 2.0])), [-langevin(2.0), langevin(2.0)])
    assert langevin(1e-6) == pytest.approx(1e-6 / 3.0)
    assert langevin(500.0) == pytest.approx(1.0 - 1.0 / 500.0)


def test_scanner_defaults():
    sc = ScannerConfig()
    assert sc.base_frequency == 825.0
    np.testing.assert_allclose(np.asarray(sc.drive_frequencies) / 825.0, [32, 33, 31])
    assert sc.frequencies().size == 257
    assert sc.fov == pytest.approx((0.012, 0.012, 0.006))


def test_scanner_validation():
    with pytest.raises(ConfigError):
        ScannerConfig(drive_frequencies=(1000.0, 1000.0, 900.0))
    with pytest.raises(ConfigError):
        ScannerConfig(sample_points=63)
    with pytest.raises(ConfigError):
        ScannerConfig(gradient=(1.0, 0.0, 2.0))
    with pytest.raises(ConfigError):
        ScannerConfig(drive_frequencies=(1000.5, 1100.0, 900.0))


def test_drive_field_is_periodic_sine():
    d = drive_field(SMALL)
    assert d.shape == (128, 3)
    np.testing.assert_allclose(d[0], 0.0, atol=1e-15)
    assert np.abs(d).max() <= 12e-3 + 1e-12


def test_grid_positions_are_centred_row_major():
    pos, spacing = grid_positions(SMALL, (2, 3, 4))
    assert pos.shape == (24, 3)
    np.testing.assert_allclose(pos.mean(axis=0), 0.0, atol=1e-15)
    # x varies fastest
    assert pos[1, 0] > pos[0, 0] and pos[1, 1] == pos[0, 1]
    assert spacing == pytest.approx((0.006, 0.008, 0.006))


def test_induced_voltage_dc_and_nyquist_vanish():
    pos, _ = grid_positions(SMALL, (2, 2, 2))
    u = induced_voltage(SMALL, pos)
    assert u.shape == (8, 3, 65)
    np.testing.assert_array_equal(u[:, :, 0], 0)
    np.testing.assert_array_equal(u[:, :, -1], 0)


def test_system_matrix_normalized_and_point_symmetric():
    sm = simulate_system_matrix(SMALL, (4, 5, 6))
    assert len(sm) == 3 * 65
    assert np.abs(sm.data).max() == pytest.approx(1.0)
    np.testing.assert_allclose(sm.data[:, ::-1, ::-1, ::-1], np.conj(sm.data), atol=1e-12)
    assert sm.meta["channels"] == [c for c in range(3) for _ in range(65)]
    # noiseless zero-signal bins get SNR 0
    assert sm.snr[0] == 0.0 and np.isinf(sm.snr).any()


def test_capped_matrix_equals_rows_of_full_matrix():
    full = simulate_system_matrix(SMALL, (3, 3, 3), noise_rms=1e-3, seed=4)
    capped = simulate_system_matrix(SMALL, (3, 3, 3), noise_rms=1e-3, seed=4, max_components=10, jobs=2, chunk=5)
    assert len(capped) == 10
    bins = np.rint(capped.frequencies / SMALL.base_frequency).astype(int)
    rows = np.asarray(capped.meta["channels"]) * 65 + bins
    np.testing.assert_allclose(capped.data, full.data[rows], atol=1e-12)


def test_noise_is_reproducible_and_sets_snr():
    a = simulate_system_matrix(SMALL, (3, 3, 3), noise_rms=1e-2, seed=1)
    b = simulate_system_matrix(SMALL, (3, 3, 3), noise_rms=1e-2, seed=1)
    c = simulate_system_matrix(SMALL, (3, 3, 3), noise_rms=1e-2, seed=2)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    rms = np.sqrt(np.mean(np.abs(a.as_matrix()) ** 2, axis=1))
    np.testing.assert_allclose(a.snr, rms / 1e-2)


def test_simulate_validation():
    with pytest.raises(ConfigError):
        simulate_system_matrix(SMALL, (2, 2, 2), noise_rms=-1.0)
    with pytest.raises(ConfigError):
        simulate_system_matrix(SMALL, (2, 2, 2), max_components=0)


def test_single_voxel_phantom_selects_column():
    sm = simulate_system_matrix(SMALL, (4, 4, 4))
    values = np.zeros((4, 4, 4))
    values[1, 2, 3] = 1.0
    m = simulate_measurement(sm, ConcentrationImage(values, {"kind": "dot"}))
    n = np.ravel_multi_index((1, 2, 3), (4, 4, 4))
    np.testing.assert_allclose(m.u_hat, sm.as_matrix()[:, n])
    assert m.meta["phantom"] == "dot"
    np.testing.assert_array_equal(m.frequencies, sm.frequencies)


def test_measurement_is_linear():
    sm = simulate_system_matrix(SMALL, (4, 4, 4))
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(4, 4, 4)), rng.uniform(size=(4, 4, 4))
    ua = simulate_measurement(sm, ConcentrationImage(a)).u_hat
    ub = simulate_measurement(sm, ConcentrationImage(b)).u_hat
    uab = simulate_measurement(sm, ConcentrationImage(2 * a + b)).u_hat
    np.testing.assert_allclose(uab, 2 * ua + ub, atol=1e-10)


def test_measurement_dims_mismatch():
    sm = simulate_system_matrix(SMALL, (4, 4, 4))
    with pytest.raises(DataError):
        simulate_measurement(sm, ConcentrationImage(np.zeros((4, 4, 5))))


def test_shape_phantom_is_a_cone():
    img = make_phantom("shape", (16, 16, 16))
    area = (img.values > 0).sum(axis=(0, 1))
    nonzero = area[area > 0]
    assert nonzero.size > 4
    assert np.all(np.diff(nonzero) >= 0)
    assert nonzero[-1] > nonzero[0]


def test_resolution_phantom_pairs():
    img = make_phantom("resolution", (16, 16, 16))
    spacings = [p["spacing"] for p in img.meta["pairs"]]
    assert spacings == [4, 3, 2]
    for pair in img.meta["pairs"]:
        a, b = (tuple(v) for v in pair["voxels"])
        assert img.values[a] == 1.0 and img.values[b] == 1.0
        assert b[2] - a[2] == pair["spacing"]
    assert int(img.values.sum()) == 6


def test_concentration_phantom_ratios():
    img = make_phantom("concentration", (16, 16, 16))
    levels = [blk["value"] for blk in img.meta["blocks"]]
    assert levels == [1.0, 0.5, 0.25]
    sums = []
    for blk in img.meta["blocks"]:
        z, y, x = blk["origin"]
        e = blk["edge"]
        region = img.values[z:z + e, y:y + e, x:x + e]
        assert np.all(region == blk["value"])
        sums.append(region.sum())
    assert sums[0] / sums[1] == pytest.approx(2.0)
    assert sums[1] / sums[2] == pytest.approx(2.0)


def test_phantom_errors():
    with pytest.raises(ConfigError):
        make_phantom("star", (8, 8, 8))
    with pytest.raises(DataError):
        make_phantom("shape", (3, 8, 8))
    assert set(PHANTOM_KINDS) == {"shape", "resolution", "concentration"}
