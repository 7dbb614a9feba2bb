"""Subsampling of the calibration grid.

Regular decimation feeds the network path, 3D Poisson-disc patterns feed the
compressed-sensing path; trilinear interpolation is the trivial baseline.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from core.errors import DataError
from core.logger import logger
from core.volume import ComplexVolume, _as_dims

REGULAR = "regular"
POISSON = "poisson"


@dataclass(frozen=True)
class SamplingPattern:
    hr_dims: tuple[int, int, int]
    indices: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = _as_dims(self.hr_dims, "hr_dims")
        idx = np.array(self.indices, dtype=np.int64).reshape(-1)
        n = int(np.prod(dims))
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= n):
            raise DataError(f"pattern indices must be strictly increasing and inside [0, {n})")
        if self.kind not in (REGULAR, POISSON):
            raise DataError(f"unknown pattern kind {self.kind!r}")
        if self.kind == REGULAR and idx.size != int(np.prod(self.params.get("lr_dims", (0,)))):
            raise DataError("regular pattern count does not match its per-axis sample counts")
        idx.setflags(write=False)
        object.__setattr__(self, "hr_dims", dims)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "params", dict(self.params))

    @property
    def count(self) -> int:
        return int(self.indices.size)

    @property
    def factor(self) -> float:
        return float(np.prod(self.hr_dims)) / max(1, self.count)

    def mask(self) -> np.ndarray:
        m = np.zeros(int(np.prod(self.hr_dims)), dtype=bool)
        m[self.indices] = True
        return m.reshape(self.hr_dims)

    def to_json(self, include_indices: bool = True) -> dict:
        doc = {"kind": self.kind, "hr_dims": list(self.hr_dims), "params": self.params}
        if include_indices:
            doc["indices"] = self.indices.tolist()
        return doc

    def save(self, path, include_indices: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_json(include_indices), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SamplingPattern":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if "indices" in doc:
            return cls(tuple(doc["hr_dims"]), doc["indices"], doc["kind"], doc["params"])
        # regenerate from parameters
        p = doc["params"]
        if doc["kind"] == REGULAR:
            return regular_pattern(doc["hr_dims"], p["stride"], p["offset"])
        return poisson_pattern(doc["hr_dims"], p["target_count"], p["seed"],
                               include_corners=p.get("include_corners", True))


def regular_pattern(hr_dims, stride: int, offset=(0, 0, 0)) -> SamplingPattern:
    hr_dims, offset = _as_dims(hr_dims, "hr_dims"), _as_dims(offset, "offset")
    stride = int(stride)
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    if stride > min(hr_dims):
        raise DataError(f"stride {stride} larger than grid axis {min(hr_dims)}")
    if any(o < 0 or o >= stride for o in offset):
        raise DataError(f"offsets must lie in [0, stride), got {offset}")
    axes = [np.arange(o, n, stride) for o, n in zip(offset, hr_dims)]
    grid = np.meshgrid(*axes, indexing="ij")
    indices = np.ravel_multi_index([g.ravel() for g in grid], hr_dims)
    lr_dims = tuple(int(a.size) for a in axes)
    logger.info(f"Regular pattern | hr={hr_dims} stride={stride} offset={offset} lr={lr_dims}")
    return SamplingPattern(hr_dims, indices, REGULAR,
                           {"stride": stride, "offset": list(offset), "lr_dims": list(lr_dims)})


def _ball_offsets(r2: int) -> np.ndarray:
    """Integer offsets with squared length below r2 (the exclusion ball)."""
    reach = int(np.ceil(np.sqrt(r2)))
    ax = np.arange(-reach, reach + 1)
    off = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    return off[np.sum(off * off, axis=1) < r2]


def _dart_throw(hr_dims, order: np.ndarray, coords: np.ndarray, r2: int) -> np.ndarray:
    """Greedy dart throwing on the lattice in a fixed visiting order.

    A voxel is accepted when no accepted voxel lies closer than sqrt(r2); the
    `blocked` grid is the lattice-exact acceleration structure.
    """
    if r2 <= 1:
        return np.sort(order)
    ball = _ball_offsets(r2)
    dims = np.asarray(hr_dims)
    blocked = np.zeros(int(np.prod(hr_dims)), dtype=bool)
    accepted = []
    for n in order:
        if blocked[n]:
            continue
        accepted.append(n)
        nb = coords[n] + ball
        nb = nb[np.all((nb >= 0) & (nb < dims), axis=1)]
        blocked[np.ravel_multi_index(nb.T, hr_dims)] = True
    return np.sort(np.asarray(accepted, dtype=np.int64))


def poisson_pattern(hr_dims, target_count: int, seed: int, include_corners: bool = True) -> SamplingPattern:
    """3D Poisson-disc pattern with exactly `target_count` samples.

    The radius is bisected over the lattice's distinct distances for the largest
    radius that still yields >= target_count darts; surplus darts are removed at
    random, so every remaining pair keeps the achieved minimum distance. Missing
    FOV corners replace the nearest non-corner sample.
    """
    hr_dims = _as_dims(hr_dims, "hr_dims")
    n = int(np.prod(hr_dims))
    target_count = int(target_count)
    if not 0 < target_count <= n:
        raise DataError(f"target_count {target_count} infeasible for {n} voxels")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    coords = np.stack(np.unravel_index(np.arange(n), hr_dims), axis=-1)

    # candidate squared radii: every squared distance realisable on the grid
    sq = [np.arange(d) ** 2 for d in hr_dims]
    radii2 = np.unique(sq[0][:, None, None] + sq[1][None, :, None] + sq[2][None, None, :])
    radii2 = radii2[radii2 >= 1]

    # invariant: radii2[lo] yields >= target_count darts, radii2[hi] (if evaluated) fewer
    lo, hi = 0, len(radii2)
    best = _dart_throw(hr_dims, order, coords, int(radii2[lo]))
    if target_count < n:
        while hi - lo > 1:
            mid = (lo + hi) // 2
            cand = _dart_throw(hr_dims, order, coords, int(radii2[mid]))
            logger.debug(f"Poisson bisection | r={np.sqrt(radii2[mid]):.3f} count={cand.size} target={target_count}")
            if cand.size >= target_count:
                lo, best = mid, cand
            else:
                hi = mid
    radius = float(np.sqrt(radii2[lo]))
    if best.size > 1.02 * target_count:
        logger.info(f"Poisson pattern | lattice radius step overshoots target by {best.size - target_count} darts")

    keep = np.sort(rng.choice(best, size=target_count, replace=False)) if best.size > target_count else best
    keep = set(int(i) for i in keep)

    adjusted = []
    if include_corners and target_count >= 8:
        corners = [int(np.ravel_multi_index(c, hr_dims))
                   for c in np.stack(np.meshgrid(*[[0, d - 1] for d in hr_dims], indexing="ij"), -1).reshape(-1, 3)]
        corner_set = set(corners)
        for c in corners:
            if c in keep:
                continue
            pool = np.array(sorted(keep - corner_set), dtype=np.int64)
            if pool.size == 0:
                break
            dist = np.sum((coords[pool] - coords[c]) ** 2, axis=1)
            keep.remove(int(pool[np.argmin(dist)]))
            keep.add(c)
            adjusted.append(c)

    indices = np.array(sorted(keep), dtype=np.int64)
    logger.info(f"Poisson pattern | hr={hr_dims} count={indices.size} radius={radius:.3f} "
                f"seed={seed} corners_added={len(adjusted)}")
    return SamplingPattern(hr_dims, indices, POISSON, {
        "target_count": target_count, "seed": int(seed), "radius": radius,
        "include_corners": bool(include_corners), "adjusted": adjusted,
    })


def apply_pattern(v: ComplexVolume, p: SamplingPattern) -> np.ndarray:
    if v.dims != p.hr_dims:
        raise DataError(f"volume dims {v.dims} do not match pattern dims {p.hr_dims}")
    return v.data.reshape(-1)[p.indices].copy()


def gather_lr_volume(v: ComplexVolume, p: SamplingPattern) -> ComplexVolume:
    if p.kind != REGULAR:
        raise DataError(f"gather_lr_volume needs a regular pattern, got {p.kind}")
    values = apply_pattern(v, p).reshape(p.params["lr_dims"])
    spacing = None if v.voxel_spacing is None else tuple(s * p.params["stride"] for s in v.voxel_spacing)
    return ComplexVolume(values, spacing)


def zero_filled(values, p: SamplingPattern) -> ComplexVolume:
    """Scatter measured values back onto the full grid; unmeasured voxels are zero."""
    values = np.asarray(values, dtype=np.complex128).reshape(-1)
    if values.size != p.count:
        raise DataError(f"{values.size} values for a pattern of {p.count} samples")
    full = np.zeros(int(np.prod(p.hr_dims)), dtype=np.complex128)
    full[p.indices] = values
    return ComplexVolume(full.reshape(p.hr_dims))


def trilinear_upsample(lr: ComplexVolume, hr_dims, stride: int | None = None, offset=(0, 0, 0)) -> ComplexVolume:
    """Trilinear interpolation with edge clamping, real and imaginary parts separately.

    Without `stride` the grid corners are aligned; with it, low-resolution sample
    j sits at high-resolution position offset + stride * j.
    """
    hr_dims = _as_dims(hr_dims, "hr_dims")
    if any(h < l for h, l in zip(hr_dims, lr.dims)):
        raise DataError(f"hr_dims {hr_dims} smaller than lr dims {lr.dims}")
    coords = []
    for h, l, o in zip(hr_dims, lr.dims, _as_dims(offset, "offset")):
        pos = np.arange(h, dtype=np.float64)
        if stride is None:
            c = pos * ((l - 1) / (h - 1)) if h > 1 else np.zeros(1)
        else:
            c = (pos - o) / float(stride)
        coords.append(np.clip(c, 0.0, l - 1))
    grid = np.meshgrid(*coords, indexing="ij")

    def interp(part):
        return ndimage.map_coordinates(part, grid, order=1, mode="nearest")

    return ComplexVolume(interp(lr.data.real) + 1j * interp(lr.data.imag))
