"""3D residual-in-residual dense network for system matrix recovery.

Feature branch: head conv, R RRDBs (three 5-conv dense blocks each), trunk conv
with a global skip. Reconstruction branch: U up-convolution blocks
(nearest-neighbour upsampling + conv), then two convs down to 3 channels.
"""
from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import permutations, product

import numpy as np

from core import autodiff as ad
from core.codec import CODEC_TAG, decode_array, encode_array
from core.errors import ConfigError, DataError
from core.logger import logger
from core.volume import ComplexVolume, SystemMatrix, crop


@dataclass(frozen=True)
class ModelConfig:
    n_rrdb: int = 9
    n_upconv: int = 1
    up_factor: int = 2
    nf: int = 64
    gc: int = 32
    res_scale: float = 0.2
    slope: float = 0.2
    kernel: int = 3
    in_channels: int = 3

    def __post_init__(self):
        if self.n_rrdb < 1 or self.n_upconv < 1:
            raise ConfigError(f"need R >= 1 and U >= 1, got R={self.n_rrdb} U={self.n_upconv}")
        if self.up_factor not in (2, 3) or self.total_factor not in (2, 3, 4):
            raise ConfigError(f"up_factor^U must be 2, 3 or 4, got {self.up_factor}^{self.n_upconv}")
        if self.nf < 1 or self.gc < 1:
            raise ConfigError(f"nf and gc must be >= 1, got nf={self.nf} gc={self.gc}")
        if not 0.0 < self.res_scale <= 1.0:
            raise ConfigError(f"res_scale must be in (0, 1], got {self.res_scale}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel}")

    @property
    def total_factor(self) -> int:
        return self.up_factor ** self.n_upconv


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    parameters: dict
    adam: ad.AdamState | None = None
    iteration: int = 0
    codec_meta: str = CODEC_TAG
    meta: dict = field(default_factory=dict)


def _conv_shapes(cfg: ModelConfig) -> dict:
    k, nf, gc = cfg.kernel, cfg.nf, cfg.gc
    shapes = {"head": (nf, cfg.in_channels)}
    for r in range(cfg.n_rrdb):
        for d in range(3):
            for layer in range(5):
                out_ch = nf if layer == 4 else gc
                shapes[f"rrdb{r}.db{d}.conv{layer}"] = (out_ch, nf + layer * gc)
    shapes["trunk"] = (nf, nf)
    for u in range(cfg.n_upconv):
        shapes[f"up{u}"] = (nf, nf)
    shapes["hr"] = (nf, nf)
    shapes["last"] = (cfg.in_channels, nf)
    return {name: (o, i, k, k, k) for name, (o, i) in shapes.items()}


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelCheckpoint:
    """Fresh checkpoint: Kaiming fan-in normal weights scaled by 0.1, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _conv_shapes(cfg).items():
        fan_in = int(np.prod(shape[1:]))
        params[f"{name}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape) * 0.1
        params[f"{name}.bias"] = np.zeros(shape[0])
    n_params = sum(p.size for p in params.values())
    logger.info(f"Model built | {asdict(cfg)} params={n_params} seed={seed}")
    return ModelCheckpoint(cfg, params)


class SMRNet:
    """Forward pass over the parameter arrays of a checkpoint."""

    def __init__(self, checkpoint: ModelCheckpoint, requires_grad: bool = False):
        self.cfg = checkpoint.config
        expected = _conv_shapes(self.cfg)
        for name, shape in expected.items():
            w = checkpoint.parameters.get(f"{name}.weight")
            if w is None or tuple(w.shape) != shape:
                raise DataError(f"checkpoint parameter {name}.weight missing or not {shape}")
        self.params = {n: ad.Tensor(v, requires_grad) for n, v in checkpoint.parameters.items()}

    def _conv(self, name: str, x: ad.Tensor) -> ad.Tensor:
        return ad.conv3d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _dense_block(self, prefix: str, x: ad.Tensor) -> ad.Tensor:
        feats = [x]
        for layer in range(4):
            h = self._conv(f"{prefix}.conv{layer}", ad.concat(feats) if len(feats) > 1 else x)
            feats.append(ad.leaky_relu(h, self.cfg.slope))
        x5 = self._conv(f"{prefix}.conv4", ad.concat(feats))
        return x + x5 * self.cfg.res_scale

    def _rrdb(self, r: int, x: ad.Tensor) -> ad.Tensor:
        out = x
        for d in range(3):
            out = self._dense_block(f"rrdb{r}.db{d}", out)
        return x + out * self.cfg.res_scale

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        fea = self._conv("head", x)
        trunk = fea
        for r in range(self.cfg.n_rrdb):
            trunk = self._rrdb(r, trunk)
        fea = fea + self._conv("trunk", trunk)
        for u in range(self.cfg.n_upconv):
            fea = ad.leaky_relu(self._conv(f"up{u}", ad.nn_upsample(fea, self.cfg.up_factor)), self.cfg.slope)
        fea = ad.leaky_relu(self._conv("hr", fea), self.cfg.slope)
        return self._conv("last", fea)

    __call__ = forward

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(ad.Tensor(batch)).data

    def parameter_arrays(self) -> dict:
        return {n: t.data for n, t in self.params.items()}

    def gradients(self) -> dict:
        return {n: t.grad for n, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


# the 48 rotations/reflections of the cube: axis permutation followed by flips
ORIENTATIONS = [(perm, flips) for perm in permutations(range(3)) for flips in product((False, True), repeat=3)]


def orient(volume: np.ndarray, index: int) -> np.ndarray:
    """Apply orientation `index` to the last three axes of `volume`."""
    perm, flips = ORIENTATIONS[index]
    lead = volume.ndim - 3
    out = np.transpose(volume, tuple(range(lead)) + tuple(lead + p for p in perm))
    for axis, flip in enumerate(flips):
        if flip:
            out = np.flip(out, axis=lead + axis)
    return np.ascontiguousarray(out)


def recover(model: ModelCheckpoint, lr_sm: SystemMatrix, hr_dims=None, crop_offset=None,
            jobs: int = 1, batch_size: int = 8) -> SystemMatrix:
    """Recover every component of a low-resolution matrix.

    Each component is encoded with its own max amplitude, upsampled by the
    network, clamped, decoded with that amplitude and cropped to `hr_dims`
    (default: the full network output). All-zero components stay zero.
    """
    factor = model.config.total_factor
    out_dims = tuple(d * factor for d in lr_sm.dims)
    hr_dims = out_dims if hr_dims is None else tuple(int(d) for d in hr_dims)
    if any(h > o for h, o in zip(hr_dims, out_dims)):
        raise DataError(f"LR dims {lr_sm.dims} x{factor} = {out_dims} cannot cover HR dims {hr_dims}")
    if crop_offset is None:
        crop_offset = tuple((o - h + 1) // 2 for o, h in zip(out_dims, hr_dims))
    net = SMRNet(model)

    amps = np.abs(lr_sm.data).reshape(len(lr_sm), -1).max(axis=1)
    live = np.flatnonzero(amps > 0)
    chunks = [live[s:s + batch_size] for s in range(0, live.size, batch_size)]

    def run(chunk):
        batch = np.stack([encode_array(lr_sm.data[k], amps[k]) for k in chunk])
        pred = net.predict(batch)
        return [crop(ComplexVolume(decode_array(p, amps[k])), crop_offset, hr_dims).data
                for k, p in zip(chunk, pred)]

    logger.info(f"Recover (net) | K={len(lr_sm)} zero={len(lr_sm) - live.size} lr={lr_sm.dims} out={out_dims} "
                f"crop={hr_dims}@{crop_offset} jobs={jobs}")
    data = np.zeros((len(lr_sm),) + hr_dims, dtype=np.complex128)
    with ThreadPoolExecutor(max_workers=max(1, int(jobs))) as pool:
        for chunk, part in zip(chunks, pool.map(run, chunks)):
            data[chunk] = part
    spacing = None if lr_sm.voxel_spacing is None else tuple(s / factor for s in lr_sm.voxel_spacing)
    return SystemMatrix(data, lr_sm.frequencies, lr_sm.snr, spacing,
                        {**lr_sm.meta, "recovered_by": "smrnet", "up_factor": factor})


def clone(model: ModelCheckpoint) -> ModelCheckpoint:
    return copy.deepcopy(model)
