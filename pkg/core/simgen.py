"""
Idealized MPI forward model for synthetic system matrices and phantom scans.

Field-free-point scanner with a static selection gradient and sinusoidal
Lissajous drive fields; particles follow the equilibrium Langevin model
without relaxation. The receive signal of each coil is the negative time
derivative of the mean magnetization along its axis, evaluated spectrally
over one repetition period.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import reduce

import numpy as np

from core.errors import ConfigError, DataError
from core.logger import logger
from core.volume import ConcentrationImage, Measurement, SystemMatrix, _as_dims

MU0 = 4e-7 * math.pi
KB = 1.380649e-23
PHANTOM_KINDS = ("shape", "resolution", "concentration")


@dataclass(frozen=True)
class ScannerConfig:
    """Scanner and particle parameters; vectors are given in (x, y, z) order."""

    gradient: tuple[float, float, float] = (1.0, 1.0, 2.0)            # T/m
    drive_amplitudes: tuple[float, float, float] = (12.0, 12.0, 12.0)  # mT
    drive_frequencies: tuple[float, float, float] = (26400.0, 27225.0, 25575.0)  # Hz
    sample_points: int = 512
    particle_diameter: float = 20.0    # nm
    temperature: float = 300.0         # K
    saturation_magnetization: float = 0.6  # T (mu0 * Ms)

    def __post_init__(self):
        for name in ("gradient", "drive_amplitudes", "drive_frequencies"):
            values = tuple(float(v) for v in getattr(self, name))
            if len(values) != 3 or min(values) <= 0:
                raise ConfigError(f"ScannerConfig.{name} needs 3 positive values, got {values}")
            object.__setattr__(self, name, values)
        if len(set(self.drive_frequencies)) != 3:
            raise ConfigError(f"drive frequencies must be distinct, got {self.drive_frequencies}")
        if any(f != int(f) for f in self.drive_frequencies):
            raise ConfigError("drive frequencies must be whole Hz so the trajectory repeats")
        for name in ("particle_diameter", "temperature", "saturation_magnetization"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"ScannerConfig.{name} must be positive, got {getattr(self, name)}")
        if self.sample_points < 8 or self.sample_points % 2:
            raise ConfigError(f"sample_points must be even and >= 8, got {self.sample_points}")

    @property
    def base_frequency(self) -> float:
        """Inverse repetition period of the Lissajous trajectory."""
        return float(reduce(math.gcd, (int(f) for f in self.drive_frequencies)))

    @property
    def beta(self) -> float:
        """Langevin argument per tesla: m / (kB T) with m = Ms * V."""
        volume = math.pi / 6.0 * (self.particle_diameter * 1e-9) ** 3
        moment = self.saturation_magnetization / MU0 * volume
        return moment / (KB * self.temperature)

    @property
    def fov(self) -> tuple[float, float, float]:
        """Half extent of the drive field of view per axis (x, y, z), metres."""
        return tuple(a * 1e-3 / g for a, g in zip(self.drive_amplitudes, self.gradient))

    def frequencies(self) -> np.ndarray:
        return np.arange(self.sample_points // 2 + 1) * self.base_frequency

    def time_axis(self) -> np.ndarray:
        return np.arange(self.sample_points) / (self.sample_points * self.base_frequency)


def langevin(xi):
    """coth(xi) - 1/xi, using xi/3 - xi^3/45 near zero."""
    x = np.asarray(xi, dtype=np.float64)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    out = np.where(small, x / 3.0 - x ** 3 / 45.0, 1.0 / np.tanh(safe) - 1.0 / safe)
    return float(out) if out.ndim == 0 else out


def grid_positions(sc: ScannerConfig, dims) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Voxel centres (N, 3) in (x, y, z) metres, row-major (z, y, x) voxel order, and the (z, y, x) spacing."""
    nz, ny, nx = _as_dims(dims)
    fx, fy, fz = sc.fov
    axes = [(np.arange(n) - (n - 1) / 2.0) * (2.0 * h / n) for n, h in ((nx, fx), (ny, fy), (nz, fz))]
    z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    positions = np.stack([x.reshape(-1), y.reshape(-1), z.reshape(-1)], axis=1)
    return positions, (2 * fz / nz, 2 * fy / ny, 2 * fx / nx)


def drive_field(sc: ScannerConfig) -> np.ndarray:
    """(T, 3) drive field in tesla over one repetition period."""
    t = sc.time_axis()
    amps = np.asarray(sc.drive_amplitudes) * 1e-3
    return amps[None, :] * np.sin(2 * np.pi * np.asarray(sc.drive_frequencies)[None, :] * t[:, None])


def induced_voltage(sc: ScannerConfig, positions: np.ndarray) -> np.ndarray:
    """
    Spectrum of the receive signal of a unit delta sample at each position.

    Returns (P, 3, K) complex: receive channel x, y, z; K = sample_points/2 + 1
    bins, Nyquist bin zeroed.
    """
    drive = drive_field(sc)
    gradient = np.asarray(sc.gradient)
    field = drive[None, :, :] - (positions * gradient[None, :])[:, None, :]
    magnitude = np.linalg.norm(field, axis=2)
    direction = np.where(magnitude[..., None] > 0, field / np.where(magnitude > 0, magnitude, 1.0)[..., None], 0.0)
    moment = langevin(sc.beta * magnitude)[..., None] * direction
    spectrum = np.fft.rfft(moment, axis=1)
    spectrum *= -2j * np.pi * sc.frequencies()[None, :, None]
    spectrum[:, -1, :] = 0.0
    return np.transpose(spectrum, (0, 2, 1))


def simulate_system_matrix(sc: ScannerConfig, dims, noise_rms: float = 0.0, seed: int = 0,
                           jobs: int = 1, max_components: int | None = None, chunk: int = 512) -> SystemMatrix:
    """
    One delta-sample response per grid position, normalized to max |S| = 1,
    plus complex white noise drawn per position from (seed, position).

    With `max_components` only the strongest components (by noise-free RMS)
    are kept; the kept rows equal the same rows of the uncapped matrix.
    """
    dims = _as_dims(dims)
    if noise_rms < 0:
        raise ConfigError(f"noise_rms must be >= 0, got {noise_rms}")
    if max_components is not None and max_components < 1:
        raise ConfigError(f"max_components must be >= 1, got {max_components}")
    positions, spacing = grid_positions(sc, dims)
    n = positions.shape[0]
    n_bins = sc.sample_points // 2 + 1
    starts = list(range(0, n, chunk))
    workers = max(1, int(jobs))
    logger.info(f"Simulate SM | dims={dims} noise_rms={noise_rms} seed={seed} beta={sc.beta:.4g}/T | {asdict(sc)}")

    def response(s):
        # (P, 3K), channel-major columns
        return induced_voltage(sc, positions[s:s + chunk]).reshape(-1, 3 * n_bins)

    def energy(s):
        v = response(s)
        return float(np.abs(v).max()), np.sum(np.abs(v) ** 2, axis=0)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        stats = list(pool.map(energy, starts))
    peak = max(p for p, _ in stats)
    clean_rms = np.sqrt(sum(e for _, e in stats) / n)
    keep = np.arange(3 * n_bins)
    if max_components is not None and max_components < keep.size:
        keep = np.sort(np.argsort(-clean_rms, kind="stable")[:max_components])
    scale = 1.0 / peak if peak > 0 else 1.0

    def block(s):
        v = response(s)[:, keep] * scale
        if noise_rms > 0:
            for row, idx in enumerate(range(s, s + v.shape[0])):
                re, im = np.random.default_rng([seed, idx]).standard_normal((2, 3 * n_bins))
                v[row] += ((re + 1j * im) * (noise_rms / math.sqrt(2.0)))[keep]
        return v

    with ThreadPoolExecutor(max_workers=workers) as pool:
        signal = np.concatenate(list(pool.map(block, starts)), axis=0)

    data = signal.T.reshape((keep.size,) + dims)
    frequencies = np.tile(sc.frequencies(), 3)[keep]
    rms = np.sqrt(np.mean(np.abs(data.reshape(keep.size, -1)) ** 2, axis=1))
    snr = rms / noise_rms if noise_rms > 0 else np.where(rms > 0, np.inf, 0.0)
    meta = {
        "source": "simgen",
        "channels": [int(c) for c in keep // n_bins],
        "particle_diameter_nm": sc.particle_diameter,
        "noise_rms": noise_rms,
        "seed": seed,
        "signal_peak": peak,
    }
    logger.info(f"Simulate SM done | K={keep.size}/{3 * n_bins} N={n} snr>=3: {int(np.sum(snr >= 3))}")
    return SystemMatrix(data, frequencies, snr, spacing, meta)


def simulate_measurement(sm: SystemMatrix, phantom: ConcentrationImage, noise_rms: float = 0.0,
                         seed: int = 0) -> Measurement:
    """u = S c + complex white noise."""
    if phantom.dims != sm.dims:
        raise DataError(f"phantom dims {phantom.dims} do not match system matrix dims {sm.dims}")
    u_hat = sm.as_matrix() @ phantom.values.reshape(-1).astype(np.complex128)
    if noise_rms > 0:
        rng = np.random.default_rng(seed)
        re, im = rng.standard_normal((2, u_hat.size))
        u_hat = u_hat + (re + 1j * im) * (noise_rms / math.sqrt(2.0))
    meta = {"phantom": phantom.meta.get("kind", ""), "noise_rms": noise_rms, "seed": seed}
    return Measurement(u_hat, sm.frequencies, meta)


def make_phantom(kind: str, dims) -> ConcentrationImage:
    """Synthetic shape (cone), resolution (point pairs) and concentration (ratioed blocks) phantoms."""
    dims = _as_dims(dims)
    if min(dims) < 4:
        raise DataError(f"phantom grid {dims} too small, need at least 4 voxels per axis")
    nz, ny, nx = dims
    values = np.zeros(dims)
    cz, cy, cx = nz // 2, ny // 2, nx // 2
    meta: dict = {"kind": kind}

    if kind == "shape":
        # cone along x: tip radius 0.5 voxel, opening to a quarter of the smaller transverse extent
        z, y, x = np.meshgrid(np.arange(nz) - (nz - 1) / 2, np.arange(ny) - (ny - 1) / 2, np.arange(nx), indexing="ij")
        x0, x1 = nx // 6, nx - 1 - nx // 6
        r_max = max(1.0, min(ny, nz) / 4.0)
        radius = 0.5 + (r_max - 0.5) * (x - x0) / max(x1 - x0, 1)
        values[(x >= x0) & (x <= x1) & (y ** 2 + z ** 2 <= radius ** 2)] = 1.0
    elif kind == "resolution":
        pairs = []
        rows = [max(0, ny // 4 - 1), cy, min(ny - 1, 3 * ny // 4)]
        for row, spacing in zip(rows, (4, 3, 2)):
            x0 = max(0, min(nx - 1 - spacing, cx - spacing // 2))
            pair = ((cz, row, x0), (cz, row, x0 + spacing))
            for voxel in pair:
                values[voxel] = 1.0
            pairs.append({"spacing": spacing, "voxels": [list(v) for v in pair]})
        meta["pairs"] = pairs
    elif kind == "concentration":
        edge = max(1, min(dims) // 8)
        gap = max(1, edge)
        span = 3 * edge + 2 * gap
        start = max(0, cx - span // 2)
        blocks = []
        for i, level in enumerate((1.0, 0.5, 0.25)):
            x0 = min(nx - edge, start + i * (edge + gap))
            z0, y0 = max(0, cz - edge // 2), max(0, cy - edge // 2)
            values[z0:z0 + edge, y0:y0 + edge, x0:x0 + edge] = level
            blocks.append({"value": level, "origin": [z0, y0, x0], "edge": edge})
        meta["blocks"] = blocks
    else:
        raise ConfigError(f"unknown phantom kind {kind!r}, expected one of {PHANTOM_KINDS}")
    logger.info(f"Phantom | kind={kind} dims={dims} support={int(np.count_nonzero(values))}")
    return ConcentrationImage(values, meta)
