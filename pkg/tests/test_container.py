import h5py
import numpy as np
import pytest

from core import container
from core.autodiff import AdamState
from core.errors import DataError
from core.smrnet import ModelConfig, SMRNet, build_model
from core.volume import ConcentrationImage, Measurement, SystemMatrix


def _sm(dtype=np.float32, spacing=(1e-3, 2e-3, 3e-3)):
    rng = np.random.default_rng(0)
    re = rng.standard_normal((4, 2, 3, 5)).astype(dtype)
    im = rng.standard_normal((4, 2, 3, 5)).astype(dtype)
    return SystemMatrix(re + 1j * im, [0.0, 825.0, 1650.0, 2475.0], [0.0, 3.5, np.inf, 12.0], spacing,
                        {"source": "test", "channels": [0, 0, 1, 1]})


def test_system_matrix_roundtrip_float32(tmp_path):
    sm = _sm()
    path = container.save_system_matrix(tmp_path / "sm.h5", sm)
    back = container.load_system_matrix(path)
    np.testing.assert_array_equal(back.data, sm.data)
    np.testing.assert_array_equal(back.frequencies, sm.frequencies)
    np.testing.assert_array_equal(back.snr, sm.snr)
    assert back.voxel_spacing == sm.voxel_spacing
    assert back.meta == sm.meta
    with h5py.File(path, "r") as f:
        assert f["systemmatrix/data"].dtype == np.float32
        assert f["meta"].attrs["axis_order"] == "zyx"


def test_system_matrix_roundtrip_float64(tmp_path):
    sm = _sm(np.float64, spacing=None)
    back = container.load_system_matrix(container.save_system_matrix(tmp_path / "sm.h5", sm, precision="float64"))
    np.testing.assert_array_equal(back.data, sm.data)
    assert back.voxel_spacing is None


def test_unknown_precision(tmp_path):
    with pytest.raises(DataError):
        container.save_system_matrix(tmp_path / "sm.h5", _sm(), precision="float16")


def test_foreign_axis_order_is_rejected(tmp_path):
    path = container.save_system_matrix(tmp_path / "sm.h5", _sm())
    with h5py.File(path, "a") as f:
        f["meta"].attrs["axis_order"] = "xyz"
    with pytest.raises(DataError):
        container.load_system_matrix(path)


def test_missing_file_and_datasets(tmp_path):
    with pytest.raises(DataError):
        container.load_system_matrix(tmp_path / "absent.h5")
    with h5py.File(tmp_path / "empty.h5", "w") as f:
        f.create_group("systemmatrix")
    with pytest.raises(DataError, match="systemmatrix/data"):
        container.load_system_matrix(tmp_path / "empty.h5")


def test_measurement_and_image_roundtrip(tmp_path):
    m = Measurement([1 + 2j, -0.5j, 3.0], [0.0, 1.0, 2.0], {"phantom": "shape"})
    back = container.load_measurement(container.save_measurement(tmp_path / "m.h5", m))
    np.testing.assert_array_equal(back.u_hat, m.u_hat)
    assert back.meta["phantom"] == "shape"

    img = ConcentrationImage(np.random.default_rng(1).uniform(size=(3, 4, 5)), {"variant": "cs"})
    back_img = container.load_image(container.save_image(tmp_path / "img.h5", img))
    np.testing.assert_array_equal(back_img.values, img.values)
    assert back_img.meta == img.meta


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(n_rrdb=1, n_upconv=1, up_factor=3, nf=4, gc=2, res_scale=0.5)
    model = build_model(cfg, seed=2)
    model.adam = AdamState(lr=5e-5, t=7, m={"head.weight": np.ones((4, 3, 3, 3, 3))},
                           v={"head.weight": np.full((4, 3, 3, 3, 3), 2.0)})
    model.iteration = 7
    model.meta = {"best_val_nrmse": 0.1}
    back = container.load_checkpoint(container.save_checkpoint(tmp_path / "model.h5", model))
    assert back.config == cfg
    assert back.iteration == 7
    assert back.codec_meta == model.codec_meta
    assert back.meta == {"best_val_nrmse": 0.1}
    assert back.adam.t == 7 and back.adam.lr == 5e-5
    np.testing.assert_array_equal(back.adam.v["head.weight"], 2.0)
    x = np.random.default_rng(0).uniform(size=(1, 3, 2, 2, 2))
    np.testing.assert_array_equal(SMRNet(back).predict(x), SMRNet(model).predict(x))


def test_checkpoint_needs_groups(tmp_path):
    with h5py.File(tmp_path / "bad.h5", "w") as f:
        f.create_group("config")
    with pytest.raises(DataError):
        container.load_checkpoint(tmp_path / "bad.h5")


# ---------------------------------------------------------------- MDF

BINS = 5


def _write_mdf(path, spectra, background, calibration=None, version="2.0.1", fourier=True):
    """spectra: (frames, channels, bins) complex; stored with one period."""
    with h5py.File(path, "w") as f:
        f.attrs["version"] = version
        data = spectra[:, None, :, :]
        if not fourier:
            data = np.fft.irfft(data, n=2 * (BINS - 1), axis=-1)
        f["measurement/data"] = data
        f["measurement/isFourierTransformed"] = int(fourier)
        f["measurement/isTransposed"] = 0
        f["measurement/isBackgroundFrame"] = background.astype(np.uint8)
        f["acquisition/receiver/bandwidth"] = 1.25e6
        f["acquisition/receiver/numSamplingPoints"] = 2 * (BINS - 1)
        for key, value in (calibration or {}).items():
            f[f"calibration/{key}"] = value


def test_ingest_mdf_system_matrix(tmp_path):
    size = (3, 2, 2)  # x, y, z
    n = int(np.prod(size))
    rng = np.random.default_rng(0)
    fg = rng.standard_normal((n, 2, BINS)) + 1j * rng.standard_normal((n, 2, BINS))
    bg = np.zeros((2, 2, BINS), dtype=complex)
    spectra = np.concatenate([bg[:1], fg, bg[1:]])
    background = np.array([True] + [False] * n + [True])
    _write_mdf(tmp_path / "sm.mdf", spectra, background, {
        "size": np.array(size), "order": "xyz", "fieldOfView": np.array([0.03, 0.02, 0.01]),
        "snr": np.full((1, 2, BINS), 4.0),
    })
    sm = container.ingest_mdf(tmp_path / "sm.mdf")
    assert isinstance(sm, SystemMatrix)
    assert len(sm) == 2 * BINS and sm.dims == (2, 2, 3)
    # frame 7 sits at x=1, y=0, z=1
    np.testing.assert_allclose(sm.data[BINS + 3, 1, 0, 1], fg[7, 1, 3])
    np.testing.assert_allclose(sm.frequencies[:BINS], np.arange(BINS) * 2 * 1.25e6 / 8)
    np.testing.assert_array_equal(sm.snr, 4.0)
    assert sm.voxel_spacing == pytest.approx((0.005, 0.01, 0.01))
    assert sm.meta["channels"] == [0] * BINS + [1] * BINS


def test_ingest_mdf_estimates_snr_without_calibration_snr(tmp_path):
    size = (2, 2, 2)
    rng = np.random.default_rng(1)
    fg = rng.standard_normal((8, 1, BINS)) + 0j
    bg = 0.01 * (rng.standard_normal((3, 1, BINS)) + 0j)
    _write_mdf(tmp_path / "sm.mdf", np.concatenate([fg, bg]), np.array([False] * 8 + [True] * 3),
               {"size": np.array(size)})
    sm = container.ingest_mdf(tmp_path / "sm.mdf")
    assert sm.meta["snr_source"] == "estimated"
    assert np.all(sm.snr > 10)


def test_ingest_mdf_measurement_subtracts_background(tmp_path):
    fg = np.full((3, 1, BINS), 2.0 + 1j)
    bg = np.full((2, 1, BINS), 0.5 + 0j)
    _write_mdf(tmp_path / "scan.mdf", np.concatenate([bg, fg]), np.array([True, True, False, False, False]))
    m = container.ingest_mdf(tmp_path / "scan.mdf")
    assert isinstance(m, Measurement)
    np.testing.assert_allclose(m.u_hat, 1.5 + 1j)


def test_ingest_mdf_time_domain(tmp_path):
    spectra = np.zeros((2, 1, BINS), dtype=complex)
    spectra[:, 0, 1] = 4.0
    _write_mdf(tmp_path / "scan.mdf", spectra, np.array([False, False]), fourier=False)
    m = container.ingest_mdf(tmp_path / "scan.mdf")
    np.testing.assert_allclose(m.u_hat, spectra[0, 0], atol=1e-12)


def test_ingest_mdf_rejects_version_one(tmp_path):
    _write_mdf(tmp_path / "old.mdf", np.ones((1, 1, BINS), dtype=complex), np.array([False]), version="1.0.5")
    with pytest.raises(DataError):
        container.ingest_mdf(tmp_path / "old.mdf")


def test_ingest_mdf_frame_count_mismatch(tmp_path):
    _write_mdf(tmp_path / "sm.mdf", np.ones((5, 1, BINS), dtype=complex), np.zeros(5, dtype=bool),
               {"size": np.array([2, 2, 2])})
    with pytest.raises(DataError):
        container.ingest_mdf(tmp_path / "sm.mdf")
