"""Containers for complex 3D volumes and the system matrix.

Spatial arrays are stored in row-major (z, y, x) order, x fastest; every
``dims`` tuple in this package uses that array order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from core.errors import DataError
from core.logger import logger

AXIS_ORDER = "zyx"


def _as_dims(values, name="dims") -> tuple[int, int, int]:
    dims = tuple(int(v) for v in values)
    if len(dims) != 3:
        raise DataError(f"{name} must have 3 entries, got {dims}")
    return dims


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ComplexVolume:
    """One frequency component sampled on a 3D grid."""

    data: np.ndarray
    voxel_spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.complex128)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"ComplexVolume needs a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("ComplexVolume contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        if self.voxel_spacing is not None:
            object.__setattr__(self, "voxel_spacing", tuple(float(s) for s in self.voxel_spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)


@dataclass(frozen=True)
class SystemMatrix:
    """K frequency components sharing one grid, stored as a (K, z, y, x) array."""

    data: np.ndarray
    frequencies: np.ndarray
    snr: np.ndarray
    voxel_spacing: tuple[float, float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.complex128)
        if data.ndim != 4:
            raise DataError(f"SystemMatrix data must be (K, z, y, x), got shape {data.shape}")
        freqs = np.array(self.frequencies, dtype=np.float64).reshape(-1)
        snr = np.array(self.snr, dtype=np.float64).reshape(-1)
        k = data.shape[0]
        if freqs.size != k or snr.size != k:
            raise DataError(
                f"SystemMatrix length mismatch | components={k} frequencies={freqs.size} snr={snr.size}"
            )
        if np.any(snr < 0) or np.any(np.isnan(snr)):
            raise DataError("SystemMatrix snr values must be >= 0")
        if not np.all(np.isfinite(data)):
            raise DataError("SystemMatrix contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "frequencies", _frozen(freqs))
        object.__setattr__(self, "snr", _frozen(snr))
        object.__setattr__(self, "meta", dict(self.meta))
        if self.voxel_spacing is not None:
            object.__setattr__(self, "voxel_spacing", tuple(float(s) for s in self.voxel_spacing))

    def __len__(self) -> int:
        return int(self.data.shape[0])

    def __iter__(self):
        for k in range(len(self)):
            yield self.component(k)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def component(self, k: int) -> ComplexVolume:
        return ComplexVolume(self.data[k], self.voxel_spacing)

    def as_matrix(self) -> np.ndarray:
        """K x N view, columns in row-major voxel order."""
        return self.data.reshape(len(self), -1)

    def select(self, indices) -> "SystemMatrix":
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        meta = dict(self.meta)
        if "channels" in meta:
            meta["channels"] = [int(c) for c in np.asarray(meta["channels"])[idx]]
        return SystemMatrix(self.data[idx], self.frequencies[idx], self.snr[idx], self.voxel_spacing, meta)

    def with_data(self, data, **meta) -> "SystemMatrix":
        """Same frequencies/SNR/provenance, new component volumes."""
        merged = dict(self.meta)
        merged.update(meta)
        return SystemMatrix(data, self.frequencies, self.snr, self.voxel_spacing, merged)

    @classmethod
    def from_components(cls, components, frequencies, snr, meta=None) -> "SystemMatrix":
        components = list(components)
        if not components:
            raise DataError("SystemMatrix needs at least one component")
        dims = {c.dims for c in components}
        if len(dims) != 1:
            raise DataError(f"components do not share dims: {sorted(dims)}")
        data = np.stack([c.data for c in components])
        return cls(data, frequencies, snr, components[0].voxel_spacing, meta or {})


@dataclass(frozen=True)
class Measurement:
    """Fourier coefficients of one phantom scan."""

    u_hat: np.ndarray
    frequencies: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        u_hat = np.array(self.u_hat, dtype=np.complex128).reshape(-1)
        freqs = np.array(self.frequencies, dtype=np.float64).reshape(-1)
        if u_hat.size != freqs.size:
            raise DataError(f"Measurement length mismatch | u_hat={u_hat.size} frequencies={freqs.size}")
        object.__setattr__(self, "u_hat", _frozen(u_hat))
        object.__setattr__(self, "frequencies", _frozen(freqs))
        object.__setattr__(self, "meta", dict(self.meta))

    def __len__(self) -> int:
        return int(self.u_hat.size)


@dataclass(frozen=True)
class ConcentrationImage:
    """Particle concentration per voxel (mmol/L or arbitrary units)."""

    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise DataError(f"ConcentrationImage needs a 3D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("ConcentrationImage contains non-finite values")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)


def zero_pad(v: ComplexVolume, before, after) -> ComplexVolume:
    before, after = _as_dims(before, "before"), _as_dims(after, "after")
    if min(before + after) < 0:
        raise DataError(f"padding must be non-negative, got before={before} after={after}")
    padded = np.pad(v.data, list(zip(before, after)), mode="constant", constant_values=0)
    return ComplexVolume(padded, v.voxel_spacing)


def crop(v: ComplexVolume, offset, dims) -> ComplexVolume:
    offset, dims = _as_dims(offset, "offset"), _as_dims(dims)
    if min(offset) < 0 or min(dims) < 1 or any(o + d > n for o, d, n in zip(offset, dims, v.dims)):
        raise DataError(f"crop out of bounds | volume={v.dims} offset={offset} dims={dims}")
    block = tuple(slice(o, o + d) for o, d in zip(offset, dims))
    return ComplexVolume(v.data[block], v.voxel_spacing)


def padding_for(dims, target) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Split the deficit target - dims per axis, larger half first (37 -> 40 gives 2 before, 1 after)."""
    dims, target = _as_dims(dims), _as_dims(target, "target")
    deficit = [t - d for d, t in zip(dims, target)]
    if min(deficit) < 0:
        raise DataError(f"target {target} smaller than dims {dims}")
    before = tuple(d - d // 2 for d in deficit)
    after = tuple(d // 2 for d in deficit)
    return before, after


def snr_filter(sm: SystemMatrix, threshold: float) -> SystemMatrix:
    if threshold < 0:
        raise DataError(f"SNR threshold must be >= 0, got {threshold}")
    keep = np.flatnonzero(sm.snr >= threshold)
    logger.info(f"SNR filter | threshold={threshold} kept={keep.size}/{len(sm)}")
    if keep.size == 0:
        logger.warning(f"SNR filter removed every component | threshold={threshold}")
    return sm.select(keep)


def strongest(sm: SystemMatrix, count: int) -> SystemMatrix:
    """Keep the `count` highest-SNR components, original order preserved."""
    if count >= len(sm):
        return sm
    order = np.argsort(-sm.snr, kind="stable")[:count]
    return sm.select(np.sort(order))


def estimate_snr(data: np.ndarray, background: np.ndarray | None = None) -> np.ndarray:
    """Per-component SNR of a (K, z, y, x) array.

    With background frames (B, K) the noise level is their standard deviation;
    without, the outermost voxel shell of the grid serves as the noise reference.
    """
    data = np.asarray(data)
    signal = np.sqrt(np.mean(np.abs(data.reshape(data.shape[0], -1)) ** 2, axis=1))
    if background is not None and np.asarray(background).shape[0] > 1:
        noise = np.std(np.asarray(background), axis=0)
    else:
        shell = np.ones(data.shape[1:], dtype=bool)
        shell[1:-1, 1:-1, 1:-1] = False
        noise = np.sqrt(np.mean(np.abs(data[:, shell]) ** 2, axis=1))
    noise = np.where(noise > 0, noise, np.finfo(float).tiny)
    return signal / noise
