"""HDF5 files for matrices, measurements, images and checkpoints; MDF v2 ingest."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import h5py
import numpy as np

from core import __version__
from core.autodiff import AdamState
from core.errors import DataError
from core.logger import logger
from core.smrnet import ModelCheckpoint, ModelConfig
from core.volume import AXIS_ORDER, ConcentrationImage, Measurement, SystemMatrix, estimate_snr

PRECISIONS = {"float32": np.float32, "float64": np.float64}


def _open(path, mode: str) -> h5py.File:
    try:
        return h5py.File(path, mode)
    except OSError as e:
        logger.exception(f"HDF5 open failed | path={path} mode={mode}")
        raise DataError(f"cannot open {path}: {e}") from e


def _write_meta(f: h5py.File, meta: dict, **attrs) -> None:
    g = f.require_group("meta")
    g.attrs["axis_order"] = AXIS_ORDER
    g.attrs["writer_version"] = __version__
    g.attrs["meta_json"] = json.dumps(meta, sort_keys=True, default=str)
    for key, value in attrs.items():
        g.attrs[key] = value


def _read_meta(f: h5py.File) -> dict:
    if "meta" not in f:
        return {}
    g = f["meta"]
    order = g.attrs.get("axis_order", AXIS_ORDER)
    if isinstance(order, bytes):
        order = order.decode()
    if order != AXIS_ORDER:
        raise DataError(f"container axis order {order!r} is not {AXIS_ORDER!r}")
    raw = g.attrs.get("meta_json", "{}")
    return json.loads(raw.decode() if isinstance(raw, bytes) else raw)


def _split(data: np.ndarray, precision: str) -> np.ndarray:
    if precision not in PRECISIONS:
        raise DataError(f"unknown precision {precision!r}, expected one of {sorted(PRECISIONS)}")
    return np.stack([data.real, data.imag], axis=-1).astype(PRECISIONS[precision])


def _join(pairs: np.ndarray) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.float64)
    return pairs[..., 0] + 1j * pairs[..., 1]


def _require(f: h5py.File, path: str, names) -> None:
    missing = [n for n in names if f"{path}/{n}" not in f]
    if missing:
        raise DataError(f"{f.filename}: missing {', '.join(f'{path}/{n}' for n in missing)}")


# ---------------------------------------------------------------- system matrix

def save_system_matrix(path, sm: SystemMatrix, precision: str = "float32") -> Path:
    """(K, z, y, x, 2) real pairs; float32 on disk unless asked otherwise."""
    path = Path(path)
    with _open(path, "w") as f:
        g = f.create_group("systemmatrix")
        g.create_dataset("data", data=_split(sm.data, precision), compression="gzip", shuffle=True)
        g.create_dataset("frequencies", data=sm.frequencies)
        g.create_dataset("snr", data=sm.snr)
        g.create_dataset("dims", data=np.asarray(sm.dims, dtype=np.int64))
        g.create_dataset("spacing", data=np.asarray(sm.voxel_spacing or (np.nan,) * 3, dtype=np.float64))
        _write_meta(f, sm.meta, precision=precision)
    logger.info(f"Saved system matrix | path={path} K={len(sm)} dims={sm.dims} precision={precision}")
    return path


def load_system_matrix(path) -> SystemMatrix:
    with _open(path, "r") as f:
        _require(f, "systemmatrix", ("data", "frequencies", "snr", "dims"))
        g = f["systemmatrix"]
        data = _join(g["data"][()])
        dims = tuple(int(d) for d in g["dims"][()])
        if data.shape[1:] != dims:
            raise DataError(f"{path}: stored dims {dims} disagree with data shape {data.shape[1:]}")
        spacing = g["spacing"][()] if "spacing" in g else np.full(3, np.nan)
        spacing = None if np.any(np.isnan(spacing)) else tuple(float(s) for s in spacing)
        sm = SystemMatrix(data, g["frequencies"][()], g["snr"][()], spacing, _read_meta(f))
    logger.info(f"Loaded system matrix | path={path} K={len(sm)} dims={sm.dims}")
    return sm


# ---------------------------------------------------------------- measurement / image

def save_measurement(path, m: Measurement) -> Path:
    path = Path(path)
    with _open(path, "w") as f:
        g = f.create_group("measurement")
        g.create_dataset("u_hat", data=_split(m.u_hat, "float64"))
        g.create_dataset("frequencies", data=m.frequencies)
        _write_meta(f, m.meta)
    logger.info(f"Saved measurement | path={path} K={len(m)}")
    return path


def load_measurement(path) -> Measurement:
    with _open(path, "r") as f:
        _require(f, "measurement", ("u_hat", "frequencies"))
        g = f["measurement"]
        return Measurement(_join(g["u_hat"][()]), g["frequencies"][()], _read_meta(f))


def save_image(path, image: ConcentrationImage) -> Path:
    path = Path(path)
    with _open(path, "w") as f:
        f.create_group("image").create_dataset("values", data=image.values)
        _write_meta(f, image.meta)
    logger.info(f"Saved image | path={path} dims={image.dims}")
    return path


def load_image(path) -> ConcentrationImage:
    with _open(path, "r") as f:
        _require(f, "image", ("values",))
        return ConcentrationImage(f["image/values"][()], _read_meta(f))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: ModelCheckpoint) -> Path:
    """Config as attributes, parameters and Adam moments as float64 datasets."""
    path = Path(path)
    with _open(path, "w") as f:
        cfg = f.create_group("config")
        for key, value in asdict(model.config).items():
            cfg.attrs[key] = value
        params = f.create_group("params")
        for name, value in model.parameters.items():
            params.create_dataset(name, data=np.asarray(value, dtype=np.float64))
        if model.adam is not None:
            adam = f.create_group("adam")
            for key in ("lr", "beta1", "beta2", "eps", "t"):
                adam.attrs[key] = getattr(model.adam, key)
            for moment in ("m", "v"):
                grp = adam.create_group(moment)
                for name, value in getattr(model.adam, moment).items():
                    grp.create_dataset(name, data=value)
        _write_meta(f, model.meta, iteration=int(model.iteration), codec=model.codec_meta)
    logger.info(f"Saved checkpoint | path={path} iteration={model.iteration} params={len(model.parameters)}")
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    with _open(path, "r") as f:
        for group in ("config", "params", "meta"):
            if group not in f:
                raise DataError(f"{path}: missing /{group}, not a checkpoint file")
        fields = {k: (v.item() if hasattr(v, "item") else v) for k, v in f["config"].attrs.items()}
        config = ModelConfig(**fields)
        params = {name: np.array(ds[()], dtype=np.float64) for name, ds in f["params"].items()}
        adam = None
        if "adam" in f:
            a = f["adam"]
            adam = AdamState(
                lr=float(a.attrs["lr"]), beta1=float(a.attrs["beta1"]), beta2=float(a.attrs["beta2"]),
                eps=float(a.attrs["eps"]), t=int(a.attrs["t"]),
                m={n: np.array(ds[()]) for n, ds in a["m"].items()},
                v={n: np.array(ds[()]) for n, ds in a["v"].items()},
            )
        codec = f["meta"].attrs.get("codec", "")
        model = ModelCheckpoint(
            config, params, adam, int(f["meta"].attrs.get("iteration", 0)),
            codec.decode() if isinstance(codec, bytes) else str(codec), _read_meta(f),
        )
    logger.info(f"Loaded checkpoint | path={path} iteration={model.iteration}")
    return model


# ---------------------------------------------------------------- MDF v2 ingest

def _complex(ds) -> np.ndarray:
    data = ds[()]
    if data.dtype.names and {"r", "i"} <= set(data.dtype.names):
        return data["r"].astype(np.float64) + 1j * data["i"].astype(np.float64)
    return np.asarray(data)


def _scalar(f: h5py.File, name: str):
    value = f[name][()]
    return value.item() if hasattr(value, "item") else value


def _frames_first(f: h5py.File, data: np.ndarray) -> np.ndarray:
    """Measurement data as (frames, periods, channels, samples)."""
    if data.ndim != 4:
        raise DataError(f"{f.filename}: /measurement/data must be 4D, got shape {data.shape}")
    if "measurement/isTransposed" in f and int(_scalar(f, "measurement/isTransposed")):
        data = np.moveaxis(data, -1, 0)
    return data


def _frequency_axis(f: h5py.File, n_bins: int) -> np.ndarray:
    bandwidth = float(_scalar(f, "acquisition/receiver/bandwidth"))
    n_samples = int(_scalar(f, "acquisition/receiver/numSamplingPoints"))
    return np.arange(n_bins) * (2.0 * bandwidth / n_samples)


def _to_spectrum(f: h5py.File, data: np.ndarray) -> np.ndarray:
    fourier = "measurement/isFourierTransformed" in f and int(_scalar(f, "measurement/isFourierTransformed"))
    return data if fourier else np.fft.rfft(np.real(data), axis=-1)


def ingest_mdf(path) -> SystemMatrix | Measurement:
    """
    Map an MDF v2 file into the native types.

    Files with /calibration/size are system matrices: background frames are
    dropped, foreground frames reshaped onto the calibration grid, receive
    channels concatenated and periods averaged. Everything else is read as a
    phantom scan: spectra of foreground frames averaged, background mean
    subtracted.
    """
    path = Path(path)
    with _open(path, "r") as f:
        version = f.attrs.get("version", f["version"][()] if "version" in f else b"")
        version = version.decode() if isinstance(version, bytes) else str(version)
        if version and not version.startswith("2"):
            raise DataError(f"{path}: MDF version {version!r} not supported, need 2.x")
        _require(f, "measurement", ("data",))
        _require(f, "acquisition/receiver", ("bandwidth", "numSamplingPoints"))

        data = _to_spectrum(f, _frames_first(f, _complex(f["measurement/data"])))
        n_frames, _, n_channels, n_bins = data.shape
        background = np.zeros(n_frames, dtype=bool)
        if "measurement/isBackgroundFrame" in f:
            background = np.asarray(f["measurement/isBackgroundFrame"][()], dtype=bool).reshape(-1)
            if background.size != n_frames:
                raise DataError(f"{path}: isBackgroundFrame has {background.size} entries for {n_frames} frames")
        frequencies = np.tile(_frequency_axis(f, n_bins), n_channels)
        channels = [c for c in range(n_channels) for _ in range(n_bins)]
        # (frames, channels * bins), channel-major columns
        spectra = data.mean(axis=1).reshape(n_frames, n_channels * n_bins)
        meta = {"source": str(path), "mdf_version": version, "channels": channels}

        if "calibration/size" in f:
            size_xyz = [int(s) for s in f["calibration/size"][()]]
            order = _scalar(f, "calibration/order") if "calibration/order" in f else "xyz"
            order = order.decode() if isinstance(order, bytes) else str(order)
            fg = spectra[~background]
            if fg.shape[0] != int(np.prod(size_xyz)):
                raise DataError(f"{path}: {fg.shape[0]} foreground frames for a {size_xyz} grid")
            sizes = dict(zip("xyz", size_xyz))
            cube = fg.T.reshape((fg.shape[1],) + tuple(sizes[a] for a in reversed(order)))
            axes = [1 + list(reversed(order)).index(a) for a in "zyx"]
            cube = np.transpose(cube, [0] + axes)
            if "calibration/snr" in f:
                snr = np.asarray(f["calibration/snr"][()], dtype=np.float64)
                snr = snr.reshape(-1, n_channels * n_bins).mean(axis=0)
                meta["snr_source"] = "file"
            else:
                bg = spectra[background] if background.any() else None
                snr = estimate_snr(cube, bg)
                meta["snr_source"] = "estimated"
            spacing = None
            if "calibration/fieldOfView" in f:
                fov = np.asarray(f["calibration/fieldOfView"][()], dtype=np.float64)
                spacing = tuple(float(fov[i] / size_xyz[i]) for i in (2, 1, 0))
            sm = SystemMatrix(cube, frequencies, np.nan_to_num(snr, nan=0.0), spacing, meta)
            logger.info(f"Ingested MDF system matrix | path={path} K={len(sm)} dims={sm.dims} "
                        f"background={int(background.sum())} snr={meta['snr_source']}")
            return sm

        fg = spectra[~background]
        if fg.shape[0] == 0:
            raise DataError(f"{path}: no foreground frames")
        u_hat = fg.mean(axis=0)
        if background.any():
            u_hat = u_hat - spectra[background].mean(axis=0)
        logger.info(f"Ingested MDF measurement | path={path} K={u_hat.size} frames={fg.shape[0]}")
        return Measurement(u_hat, frequencies, meta)
