"""Complex <-> RGB conversion of frequency components.

Phase becomes the HSV hue (S = V = 1), amplitude scales the RGB triple.
Each volume is normalized by its own maximum amplitude (``amp_scale``).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
import numpy as np

from core.errors import DataError
from core.logger import logger
from core.volume import ComplexVolume

CODEC_TAG = "hsv-phase/amp-max-per-component"


@dataclass(frozen=True)
class RgbVolume:
    """Channels-first (3, z, y, x) RGB data in [0, 1] plus the amplitude of magnitude 1."""

    data: np.ndarray
    amp_scale: float
    zero_volume: bool = False

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[0] != 3:
            raise DataError(f"RgbVolume needs (3, z, y, x) data, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min(initial=0.0) < 0.0 or data.max(initial=0.0) > 1.0:
            raise DataError("RgbVolume channels must be finite and inside [0, 1]")
        if not (np.isfinite(self.amp_scale) and self.amp_scale > 0):
            raise DataError(f"amp_scale must be finite and > 0, got {self.amp_scale}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "amp_scale", float(self.amp_scale))

    @classmethod
    def from_network(cls, data, amp_scale: float) -> "RgbVolume":
        """Wrap raw network output, clamping channels into [0, 1]."""
        return cls(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0), amp_scale)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


def encode_array(values: np.ndarray, amp_scale: float) -> np.ndarray:
    """Encode a complex array to channels-first RGB scaled by |value| / amp_scale."""
    values = np.asarray(values, dtype=np.complex128)
    hue = np.mod(np.angle(values), 2.0 * np.pi) / (2.0 * np.pi)
    hsv = np.stack([hue, np.ones_like(hue), np.ones_like(hue)], axis=-1)
    rgb = hsv_to_rgb(hsv) * (np.abs(values) / amp_scale)[..., None]
    return np.moveaxis(rgb, -1, 0)


def decode_array(rgb: np.ndarray, amp_scale: float) -> np.ndarray:
    """Inverse of encode_array; channels are clamped to [0, 1] first."""
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    rgb = np.moveaxis(rgb, 0, -1)
    peak = rgb.max(axis=-1)
    nonzero = peak > 0
    out = np.zeros(peak.shape, dtype=np.complex128)
    if np.any(nonzero):
        unit = rgb[nonzero] / peak[nonzero][:, None]
        hue = rgb_to_hsv(np.clip(unit, 0.0, 1.0))[:, 0]
        phase = hue * 2.0 * np.pi
        phase = np.where(phase > np.pi, phase - 2.0 * np.pi, phase)
        out[nonzero] = peak[nonzero] * amp_scale * np.exp(1j * phase)
    return out


def encode(v: ComplexVolume, amp_scale: float | None = None) -> RgbVolume:
    """Encode one component; amp_scale defaults to the volume's max amplitude."""
    zero = False
    if amp_scale is None:
        amp_scale = float(np.abs(v.data).max())
        if amp_scale == 0.0:
            amp_scale, zero = 1.0, True
            logger.debug("Encode | all-zero volume, amp_scale set to 1")
    rgb = encode_array(v.data, amp_scale)
    if rgb.max(initial=0.0) > 1.0:
        raise DataError(f"amp_scale {amp_scale} below the volume's max amplitude; use encode_array for unclamped targets")
    return RgbVolume(rgb, amp_scale, zero)


def decode(r: RgbVolume, voxel_spacing=None) -> ComplexVolume:
    return ComplexVolume(decode_array(r.data, r.amp_scale), voxel_spacing)


def export_png_slices(r: RgbVolume, out_dir, stem: str = "component", slices=None) -> list[Path]:
    """Write one PNG per z-slice (or the selected z indices)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for z in (range(r.dims[0]) if slices is None else slices):
        path = out_dir / f"{stem}_z{int(z):03d}.png"
        plt.imsave(path, np.moveaxis(r.data[:, int(z)], 0, -1), origin="lower")
        written.append(path)
    logger.info(f"PNG export | {len(written)} slices -> {out_dir}")
    return written
