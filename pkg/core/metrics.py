"""Error metrics for recovered components and reconstructed images."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from core.errors import DataError
from core.logger import logger
from core.volume import ComplexVolume, ConcentrationImage, SystemMatrix

NORMALIZERS = ("max", "range", "rms")


@dataclass(frozen=True)
class MetricRow:
    subject: str
    metric: str
    value: float


def _array(x) -> np.ndarray:
    if isinstance(x, ComplexVolume):
        return x.data
    if isinstance(x, ConcentrationImage):
        return x.values
    return np.asarray(x)


def _pair(est, ref):
    e, r = _array(est), _array(ref)
    if e.shape != r.shape:
        raise DataError(f"metric inputs differ in shape: {e.shape} vs {r.shape}")
    return e, r


def nrmse(est, ref, normalizer: str = "max") -> float:
    """RMSE of est - ref over max|ref| (or the ref range / RMS)."""
    e, r = _pair(est, ref)
    mag = np.abs(r)
    if normalizer == "max":
        norm = mag.max()
    elif normalizer == "range":
        norm = (r.max() - r.min()) if np.isrealobj(r) else mag.max() - mag.min()
    elif normalizer == "rms":
        norm = np.sqrt(np.mean(mag ** 2))
    else:
        raise DataError(f"unknown NRMSE normalizer {normalizer!r}, expected one of {NORMALIZERS}")
    if not norm > 0:
        raise DataError("NRMSE undefined for an all-zero reference")
    return float(np.sqrt(np.mean(np.abs(e - r) ** 2)) / norm)


def psnr(est, ref) -> float:
    """10 log10(peak^2 / MSE) with peak = max|ref|; +inf for identical inputs."""
    e, r = _pair(est, ref)
    mse = float(np.mean(np.abs(e - r) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(np.abs(r).max())
    if peak == 0.0:
        raise DataError("PSNR undefined for an all-zero reference")
    return 10.0 * math.log10(peak * peak / mse)


def _ssim_block(e: np.ndarray, r: np.ndarray, win: int, k1: float, k2: float, data_range: float) -> float:
    ndim = e.ndim
    npix = win ** ndim
    cov_norm = npix / (npix - 1.0)
    ux = ndimage.uniform_filter(e, size=win)
    uy = ndimage.uniform_filter(r, size=win)
    uxx = ndimage.uniform_filter(e * e, size=win)
    uyy = ndimage.uniform_filter(r * r, size=win)
    uxy = ndimage.uniform_filter(e * r, size=win)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = (win - 1) // 2
    inner = tuple(slice(pad, n - pad) for n in s.shape)
    return float(s[inner].mean())


def ssim3d(est, ref, window: int = 7, k1: float = 0.01, k2: float = 0.03, mode: str = "volume") -> float:
    """Mean local SSIM with a uniform window; dynamic range is max|ref|.

    mode="volume" uses a cubic window, mode="slice" averages 2D SSIM over z.
    """
    e, r = _pair(est, ref)
    if np.iscomplexobj(e) or np.iscomplexobj(r):
        raise DataError("ssim3d needs real-valued images")
    e, r = e.astype(np.float64), r.astype(np.float64)
    data_range = float(np.abs(r).max()) or 1.0
    dims = r.shape if mode == "volume" else r.shape[1:]
    win = min(window, min(dims))
    if win % 2 == 0:
        win -= 1
    if win != window:
        logger.warning(f"SSIM window shrunk | requested={window} used={win} dims={r.shape}")
    if win < 2:
        raise DataError(f"image {r.shape} too small for SSIM")
    if mode == "volume":
        return _ssim_block(e, r, win, k1, k2, data_range)
    if mode == "slice":
        return float(np.mean([_ssim_block(e[z], r[z], win, k1, k2, data_range) for z in range(r.shape[0])]))
    raise DataError(f"unknown SSIM mode {mode!r}")


def component_report(recovered: SystemMatrix, truth: SystemMatrix, normalizer: str = "max") -> list[dict]:
    """One row (k, f_k, snr, nrmse) per component, then a summary row with the mean."""
    if len(recovered) != len(truth) or recovered.dims != truth.dims:
        raise DataError(
            f"recovered ({len(recovered)} x {recovered.dims}) and truth ({len(truth)} x {truth.dims}) do not match"
        )
    rows = []
    for k in range(len(truth)):
        rows.append({
            "k": k,
            "frequency": float(truth.frequencies[k]),
            "snr": float(truth.snr[k]),
            "nrmse": nrmse(recovered.data[k], truth.data[k], normalizer),
        })
    mean = float(np.mean([row["nrmse"] for row in rows])) if rows else math.nan
    rows.append({"k": "mean", "frequency": math.nan, "snr": math.nan, "nrmse": mean})
    logger.info(f"Component report | K={len(truth)} mean_nrmse={mean:.5f}")
    return rows


def image_metrics(subject: str, est, ref, ssim_mode: str = "volume", normalizer: str = "max") -> list[MetricRow]:
    return [
        MetricRow(subject, "nrmse", nrmse(est, ref, normalizer)),
        MetricRow(subject, "ssim", ssim3d(est, ref, mode=ssim_mode)),
        MetricRow(subject, "psnr", psnr(est, ref)),
    ]
