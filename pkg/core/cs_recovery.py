"""Compressed-sensing recovery of system matrix components.

Solves  min ||dct3(s)||_1  subject to  P s = y  with Split Bregman: the
sparsity term is split off in DCT space (shrinkage step) and the equality
constraint is enforced by adding back the measurement residual.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import fft

from core.errors import ConfigError, DataError
from core.logger import logger
from core.metrics import nrmse
from core.sampling import SamplingPattern, apply_pattern, zero_filled
from core.volume import ComplexVolume, SystemMatrix


@dataclass(frozen=True)
class CsParams:
    mu: float = 10.0
    outer_iters: int = 30
    inner_iters: int = 5
    shrink_weight: float = 1.0
    tol: float = 1e-6

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ConfigError(f"CsParams.{name} must be positive, got {value}")


def dct3(v) -> ComplexVolume | np.ndarray:
    """Separable orthonormal DCT-II over all three axes, real and imaginary parts separately."""
    data = v.data if isinstance(v, ComplexVolume) else np.asarray(v)
    out = fft.dctn(data.real, type=2, norm="ortho") + 1j * fft.dctn(data.imag, type=2, norm="ortho")
    return ComplexVolume(out) if isinstance(v, ComplexVolume) else out


def idct3(c) -> ComplexVolume | np.ndarray:
    data = c.data if isinstance(c, ComplexVolume) else np.asarray(c)
    out = fft.idctn(data.real, type=2, norm="ortho") + 1j * fft.idctn(data.imag, type=2, norm="ortho")
    return ComplexVolume(out) if isinstance(c, ComplexVolume) else out


def shrink(x: np.ndarray, threshold: float) -> np.ndarray:
    """Complex soft-thresholding: shrink the magnitude, keep the phase."""
    mag = np.abs(x)
    factor = np.maximum(mag - threshold, 0.0) / np.where(mag > 0, mag, 1.0)
    return x * factor


def normalize_measurement(y) -> tuple[np.ndarray, float]:
    y = np.asarray(y, dtype=np.complex128)
    if y.size == 0:
        raise DataError("cannot normalize an empty measurement")
    peak = float(np.abs(y).max())
    if peak == 0.0:
        return y.copy(), 1.0
    return y / peak, peak


class SplitBregmanSolver:
    """
    Equality-constrained L1 recovery in the DCT domain.

    Inner loop (inner_iters):  s = argmin mu/2 ||P s - f||^2 + lam/2 ||d - dct3(s) - b||^2,
    which is diagonal in voxel space because P P^T = I; then d = shrink(dct3(s) + b, 1/lam)
    and b += dct3(s) - d. Outer loop: f += y - P s.
    """

    def __init__(self, pattern: SamplingPattern, cp: CsParams):
        self.pattern = pattern
        self.cp = cp
        self.mask = pattern.mask()
        self.residuals: list[float] = []
        self.outer_done = 0
        self.converged = False
        self.zero_input = False

    def solve(self, y) -> ComplexVolume:
        cp, mask = self.cp, self.mask
        y = np.asarray(y, dtype=np.complex128).reshape(-1)
        if y.size != self.pattern.count:
            raise DataError(f"{y.size} measured values for a pattern of {self.pattern.count} samples")
        self.residuals, self.outer_done, self.converged, self.zero_input = [], 0, False, False
        y_norm = float(np.linalg.norm(y))
        if y_norm == 0.0:
            self.zero_input, self.converged = True, True
            logger.debug("Split Bregman | zero measurement, returning zero volume")
            return ComplexVolume(np.zeros(self.pattern.hr_dims))
        if self.pattern.count == mask.size:
            # the constraint alone determines s
            self.residuals, self.outer_done, self.converged = [0.0], 1, True
            return zero_filled(y, self.pattern)

        lam = cp.shrink_weight
        f = zero_filled(y, self.pattern).data
        denom = cp.mu * mask + lam
        s = np.zeros(self.pattern.hr_dims, dtype=np.complex128)
        d = np.zeros_like(s)
        b = np.zeros_like(s)
        for outer in range(1, cp.outer_iters + 1):
            s_prev = s
            for _ in range(cp.inner_iters):
                s = (cp.mu * f + lam * idct3(d - b)) / denom
                coeff = dct3(s)
                d = shrink(coeff + b, 1.0 / lam)
                b = b + coeff - d
            resid = y - s.reshape(-1)[self.pattern.indices]
            rel = float(np.linalg.norm(resid)) / y_norm
            self.residuals.append(rel)
            self.outer_done = outer
            change = float(np.linalg.norm(s - s_prev)) / max(float(np.linalg.norm(s)), 1e-300)
            if rel <= cp.tol and change <= cp.tol:
                self.converged = True
                break
            f.reshape(-1)[self.pattern.indices] += resid
        if not self.converged:
            logger.debug(f"Split Bregman not converged | outer={self.outer_done} residual={self.residuals[-1]:.3g}")
        return ComplexVolume(s)


def split_bregman(y, p: SamplingPattern, cp: CsParams) -> ComplexVolume:
    return SplitBregmanSolver(p, cp).solve(y)


def recover_component(values, p: SamplingPattern, cp: CsParams) -> tuple[ComplexVolume, SplitBregmanSolver]:
    """Normalize, solve, rescale."""
    y, scale = normalize_measurement(values)
    solver = SplitBregmanSolver(p, cp)
    s = solver.solve(y)
    return ComplexVolume(s.data * scale), solver


def recover_system_matrix(hr_sm: SystemMatrix, p: SamplingPattern, cp: CsParams,
                          jobs: int = 1) -> tuple[SystemMatrix, list[dict]]:
    """CS recovery of every component from its pattern samples; also returns per-component timing."""

    def run(k):
        t0 = time.perf_counter()
        vol, solver = recover_component(apply_pattern(hr_sm.component(k), p), p, cp)
        return vol.data, {
            "k": k, "seconds": time.perf_counter() - t0, "outer_iters": solver.outer_done,
            "residual": solver.residuals[-1] if solver.residuals else math.nan,
            "converged": solver.converged,
        }

    logger.info(f"Recover (cs) | K={len(hr_sm)} samples={p.count} | {asdict(cp)} jobs={jobs}")
    with ThreadPoolExecutor(max_workers=max(1, int(jobs))) as pool:
        results = list(pool.map(run, range(len(hr_sm))))
    n_conv = sum(r[1]["converged"] for r in results)
    if n_conv < len(results):
        logger.warning(f"Split Bregman converged on {n_conv}/{len(results)} components")
    sm = hr_sm.with_data(np.stack([r[0] for r in results]), recovered_by="cs", samples=p.count)
    return sm, [r[1] for r in results]


def zero_filled_matrix(hr_sm: SystemMatrix, p: SamplingPattern) -> SystemMatrix:
    data = np.stack([zero_filled(apply_pattern(hr_sm.component(k), p), p).data for k in range(len(hr_sm))])
    return hr_sm.with_data(data, recovered_by="zero-filled", samples=p.count)


def cs_param_sweep(sm_subset: SystemMatrix, pattern: SamplingPattern, grid, jobs: int = 1) -> tuple[CsParams, list[dict]]:
    """Mean component NRMSE for every parameter point; fully converged points rank first."""
    grid = list(grid)
    if len(sm_subset) == 0 or not grid:
        raise DataError("parameter sweep needs a non-empty subset and grid")
    table = []
    for cp in grid:
        recovered, timing = recover_system_matrix(sm_subset, pattern, cp, jobs)
        errors = [nrmse(recovered.data[k], sm_subset.data[k]) for k in range(len(sm_subset))]
        row = {**asdict(cp), "mean_nrmse": float(np.mean(errors)),
               "converged_fraction": float(np.mean([t["converged"] for t in timing]))}
        table.append(row)
        logger.info(f"CS sweep | {row}")
    best = min(range(len(grid)), key=lambda i: (-table[i]["converged_fraction"], table[i]["mean_nrmse"]))
    logger.info(f"CS sweep best | {asdict(grid[best])}")
    return grid[best], table


def param_grid(base: CsParams, **axes) -> list[CsParams]:
    """Cartesian grid around `base`, e.g. param_grid(base, mu=[1, 5, 10, 50])."""
    points = [base]
    for name, values in axes.items():
        points = [replace(p, **{name: v}) for p in points for v in values]
    return points
