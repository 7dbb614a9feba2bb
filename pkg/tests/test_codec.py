import numpy as np
import pytest

from core.codec import RgbVolume, decode, decode_array, encode, encode_array, export_png_slices
from core.errors import DataError
from core.volume import ComplexVolume


def _volume(values):
    return ComplexVolume(np.asarray(values, dtype=complex).reshape(1, 1, -1))


def test_phase_zero_is_pure_red():
    rgb = encode(_volume([1.0 + 0j]))
    np.testing.assert_allclose(rgb.data[:, 0, 0, 0], [1.0, 0.0, 0.0])


def test_zero_value_is_black():
    rgb = encode(_volume([0.0, 1.0]))
    np.testing.assert_allclose(rgb.data[:, 0, 0, 0], [0.0, 0.0, 0.0])


def test_positive_imaginary_unit_hue_90():
    rgb = encode(_volume([1j]))
    np.testing.assert_allclose(rgb.data[:, 0, 0, 0], [0.5, 1.0, 0.0], atol=1e-12)


def test_all_zero_volume_flags_unit_scale():
    rgb = encode(ComplexVolume(np.zeros((2, 2, 2))))
    assert rgb.amp_scale == 1.0
    assert rgb.zero_volume
    assert not rgb.data.any()


def test_decode_black_is_zero():
    assert decode(RgbVolume(np.zeros((3, 1, 1, 1)), 1.0)).data[0, 0, 0] == 0


def test_decode_red_with_scale():
    data = np.zeros((3, 1, 1, 1))
    data[0] = 1.0
    np.testing.assert_allclose(decode(RgbVolume(data, 2.5)).data[0, 0, 0], 2.5 + 0j)


def test_roundtrip_random_values():
    rng = np.random.default_rng(42)
    values = (rng.standard_normal(10_000) + 1j * rng.standard_normal(10_000)) * np.exp(rng.uniform(-3, 3, 10_000))
    v = ComplexVolume(values.reshape(10, 10, 100))
    back = decode(encode(v)).data
    err = np.abs(back - v.data)
    assert np.all(err <= 1e-6 * np.abs(v.data))


def test_phase_equivariance_rotates_hue():
    rng = np.random.default_rng(3)
    values = rng.standard_normal((2, 3, 4)) + 1j * rng.standard_normal((2, 3, 4))
    theta = 0.7
    rotated = decode(encode(ComplexVolume(values * np.exp(1j * theta)))).data
    np.testing.assert_allclose(rotated, values * np.exp(1j * theta), rtol=1e-9, atol=1e-12)
    base, turned = encode(ComplexVolume(values)), encode(ComplexVolume(values * np.exp(1j * theta)))
    np.testing.assert_allclose(base.data.max(axis=0), turned.data.max(axis=0), atol=1e-12)


def test_amplitude_linearity():
    rng = np.random.default_rng(4)
    values = rng.standard_normal((2, 2, 2)) + 1j * rng.standard_normal((2, 2, 2))
    a, b = encode(ComplexVolume(values)), encode(ComplexVolume(values * 3.5))
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)
    assert b.amp_scale == pytest.approx(3.5 * a.amp_scale)


def test_decode_is_total_on_out_of_range_channels():
    rng = np.random.default_rng(5)
    raw = rng.uniform(-2.0, 3.0, size=(3, 4, 4, 4))
    out = decode_array(raw, 2.0)
    assert np.all(np.isfinite(out))
    assert np.abs(out).max() <= 2.0 + 1e-12
    wrapped = RgbVolume.from_network(raw, 2.0)
    assert wrapped.data.min() >= 0.0 and wrapped.data.max() <= 1.0


def test_rgb_volume_rejects_out_of_range():
    with pytest.raises(DataError):
        RgbVolume(np.full((3, 1, 1, 1), 1.5), 1.0)
    with pytest.raises(DataError):
        RgbVolume(np.zeros((3, 1, 1, 1)), 0.0)


def test_encode_with_external_scale_keeps_values_unclamped():
    rgb = encode_array(np.array([2.0 + 0j]), 1.0)
    np.testing.assert_allclose(rgb[:, 0], [2.0, 0.0, 0.0])
    with pytest.raises(DataError):
        encode(_volume([2.0]), amp_scale=1.0)


def test_export_png_slices(tmp_path):
    rgb = encode(ComplexVolume(np.exp(1j * np.linspace(0, 6, 27)).reshape(3, 3, 3)))
    written = export_png_slices(rgb, tmp_path, stem="k7")
    assert [p.name for p in written] == ["k7_z000.png", "k7_z001.png", "k7_z002.png"]
    assert all(p.stat().st_size > 0 for p in written)
