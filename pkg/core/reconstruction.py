"""System-matrix based image reconstruction with regularized Kaczmarz."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from core.errors import ConfigError, DataError
from core.logger import logger
from core.volume import ConcentrationImage, Measurement, SystemMatrix


@dataclass(frozen=True)
class ReconParams:
    lambda_rel: float = 0.01
    iterations: int = 3
    snr_threshold: float = 3.0
    enforce_real_nonneg: bool = True
    shuffle_seed: int | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"ReconParams.iterations must be >= 1, got {self.iterations}")
        if self.lambda_rel < 0 or self.snr_threshold < 0:
            raise ConfigError(f"lambda_rel and snr_threshold must be >= 0, got {self.lambda_rel}, {self.snr_threshold}")


def assemble(sm: SystemMatrix, m: Measurement, snr_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows of S passing the SNR threshold and the matching measurement entries."""
    if len(sm) != len(m) or not np.allclose(sm.frequencies, m.frequencies, rtol=1e-9, atol=1e-6):
        raise DataError(f"frequency axes differ | system matrix K={len(sm)} measurement K={len(m)}")
    rows = np.flatnonzero(sm.snr >= snr_threshold)
    logger.info(f"Assemble | rows={rows.size}/{len(sm)} N={sm.n_voxels} threshold={snr_threshold}")
    return sm.as_matrix()[rows], m.u_hat[rows]


def kaczmarz_solve(system: np.ndarray, rhs: np.ndarray, lambda_rel: float, iterations: int,
                   shuffle_seed: int | None = None) -> np.ndarray:
    """Regularized Kaczmarz with an auxiliary residual variable.

    Converges to the Tikhonov solution (S^H S + lam I)^-1 S^H u with
    lam = lambda_rel * mean squared row norm.
    """
    system = np.asarray(system, dtype=np.complex128)
    rhs = np.asarray(rhs, dtype=np.complex128)
    if system.ndim != 2 or system.shape[0] == 0:
        raise DataError(f"Kaczmarz needs a non-empty 2D system, got shape {system.shape}")
    if rhs.shape != (system.shape[0],):
        raise DataError(f"rhs length {rhs.shape} does not match {system.shape[0]} rows")
    m, n = system.shape
    energy = np.sum(np.abs(system) ** 2, axis=1)
    lam = lambda_rel * float(energy.sum()) / m
    sqrt_lam = np.sqrt(lam)
    zero_rows = np.flatnonzero(energy == 0)
    if zero_rows.size:
        logger.warning(f"Kaczmarz skips {zero_rows.size} zero-norm rows")

    order = np.arange(m)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(m)
    order = order[energy[order] > 0]
    conj_rows = system.conj()

    x = np.zeros(n, dtype=np.complex128)
    v = np.zeros(m, dtype=np.complex128)
    for sweep in range(iterations):
        for k in order:
            beta = (rhs[k] - system[k] @ x - sqrt_lam * v[k]) / (energy[k] + lam)
            x += beta * conj_rows[k]
            v[k] += sqrt_lam * beta
        logger.debug(f"Kaczmarz sweep {sweep + 1}/{iterations} | residual={np.linalg.norm(system @ x - rhs):.4g}")
    return x


def kaczmarz(system: np.ndarray, rhs: np.ndarray, rp: ReconParams, dims) -> ConcentrationImage:
    x = kaczmarz_solve(system, rhs, rp.lambda_rel, rp.iterations, rp.shuffle_seed)
    values = x.real
    if rp.enforce_real_nonneg:
        values = np.maximum(values, 0.0)
    return ConcentrationImage(values.reshape(dims), {"lambda_rel": rp.lambda_rel, "iterations": rp.iterations})


def reconstruct_phantom(sm: SystemMatrix, m: Measurement, rp: ReconParams, variant: str = "true") -> ConcentrationImage:
    system, rhs = assemble(sm, m, rp.snr_threshold)
    if system.shape[0] == 0:
        raise DataError(f"no component passes SNR threshold {rp.snr_threshold}")
    image = kaczmarz(system, rhs, rp, sm.dims)
    meta = {**image.meta, "variant": variant, "rows": int(system.shape[0]), "phantom": m.meta.get("phantom", "")}
    logger.info(f"Reconstruct | variant={variant} phantom={meta['phantom']} rows={meta['rows']}")
    return ConcentrationImage(image.values, meta)
