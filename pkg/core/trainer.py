"""Training of the recovery network on (LR, HR) component pairs."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from core import autodiff as ad
from core.codec import decode_array, encode_array
from core.errors import ConfigError, DataError, NumericalError
from core.logger import logger
from core.metrics import nrmse
from core.sampling import REGULAR, SamplingPattern
from core.smrnet import ORIENTATIONS, ModelCheckpoint, SMRNet, orient
from core.volume import ComplexVolume, SystemMatrix, padding_for, zero_pad


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    minibatch: int = 4
    lr0: float = 1e-4
    lr_halve_every: int = 4000
    seed: int = 0
    augment: bool = True
    val_fraction: float = 0.1
    val_every: int = 500
    lr_min_halvings: int = 10

    def __post_init__(self):
        for name in ("iterations", "minibatch", "lr_halve_every", "val_every", "lr_min_halvings"):
            if getattr(self, name) < 1:
                raise ConfigError(f"TrainConfig.{name} must be positive, got {getattr(self, name)}")
        if not self.lr0 > 0:
            raise ConfigError(f"TrainConfig.lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"TrainConfig.val_fraction must be in [0, 1), got {self.val_fraction}")

    def lr_at(self, iteration: int) -> float:
        """Halve every lr_halve_every iterations, never below lr0 * 2**-lr_min_halvings."""
        halvings = min(iteration // self.lr_halve_every, self.lr_min_halvings)
        return self.lr0 * 0.5 ** halvings


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    train_mse: float
    val_mse: float = math.nan
    val_nrmse: float = math.nan


def target_offset(pattern: SamplingPattern, factor: int) -> tuple[int, int, int]:
    """HR offset of the network output block: LR sample j maps to output voxels factor*j onward."""
    lr_dims = pattern.params["lr_dims"]
    return tuple(int(min(o, h - l * factor)) for o, h, l in zip(pattern.params["offset"], pattern.hr_dims, lr_dims))


class Trainer:
    """
    Fits a checkpoint to map regular LR samples of each HR component onto the
    HR component, both RGB-encoded with the LR component's max amplitude.
    """

    def __init__(self, model: ModelCheckpoint, hr_sm: SystemMatrix, pattern: SamplingPattern, tc: TrainConfig):
        if pattern.kind != REGULAR:
            raise DataError("training needs a regular sampling pattern")
        self.model = model
        self.tc = tc
        self.factor = model.config.total_factor
        lr_dims = tuple(pattern.params["lr_dims"])
        out_dims = tuple(l * self.factor for l in lr_dims)
        if any(o > h for o, h in zip(out_dims, pattern.hr_dims)):
            raise DataError(f"network output {out_dims} exceeds the sampled grid {pattern.hr_dims}")

        before, after = padding_for(hr_sm.dims, pattern.hr_dims)
        toff = target_offset(pattern, self.factor)
        block = tuple(slice(o, o + d) for o, d in zip(toff, out_dims))
        # original-grid region inside the output block, for complex-domain validation
        eval_off = tuple(b - t for b, t in zip(before, toff))
        if min(eval_off) >= 0 and all(e + d <= o for e, d, o in zip(eval_off, hr_sm.dims, out_dims)):
            self.eval_block = tuple(slice(e, e + d) for e, d in zip(eval_off, hr_sm.dims))
        else:
            self.eval_block = (slice(None),) * 3

        k = len(hr_sm)
        self.inputs = np.empty((k, 3) + lr_dims)
        self.targets = np.empty((k, 3) + out_dims)
        self.truth = np.empty((k,) + out_dims, dtype=np.complex128)
        self.amps = np.empty(k)
        for i in range(k):
            padded = zero_pad(ComplexVolume(hr_sm.data[i]), before, after).data
            lr = padded.reshape(-1)[pattern.indices].reshape(lr_dims)
            amp = float(np.abs(lr).max()) or 1.0
            self.amps[i] = amp
            self.inputs[i] = encode_array(lr, amp)
            self.targets[i] = encode_array(padded[block], amp)
            self.truth[i] = padded[block]

        rng = np.random.default_rng(tc.seed)
        order = rng.permutation(k)
        n_val = 0
        if tc.val_fraction > 0 and k > 1:
            n_val = min(k - 1, max(1, int(round(tc.val_fraction * k))))
        self.val_idx = np.sort(order[:n_val])
        self.train_idx = np.sort(order[n_val:])
        self.rng = rng
        self.cubic = len(set(lr_dims)) == 1 and len(set(out_dims)) == 1

        logger.info(
            f"Trainer initialized | K={k} train={self.train_idx.size} val={self.val_idx.size} "
            f"lr_dims={lr_dims} out_dims={out_dims} target_offset={toff} | {asdict(tc)}"
        )

    def _augment(self, xs: np.ndarray, ys: np.ndarray):
        n_orient = len(ORIENTATIONS) if self.cubic else 8
        for i in range(xs.shape[0]):
            o = int(self.rng.integers(n_orient))
            xs[i] = orient(xs[i], o)
            ys[i] = orient(ys[i], o)
        return xs, ys

    def validate(self, net: SMRNet, chunk: int = 8) -> tuple[float, float]:
        sq_err, count, errors = 0.0, 0, []
        for s in range(0, self.val_idx.size, chunk):
            idx = self.val_idx[s:s + chunk]
            pred = net.predict(self.inputs[idx])
            sq_err += float(np.sum((pred - self.targets[idx]) ** 2))
            count += pred.size
            for p, k in zip(pred, idx):
                ref = self.truth[k][self.eval_block]
                if np.abs(ref).max() > 0:
                    errors.append(nrmse(decode_array(p, self.amps[k])[self.eval_block], ref))
        return sq_err / max(count, 1), float(np.mean(errors)) if errors else math.nan

    def run(self, on_progress=None) -> tuple[ModelCheckpoint, list[LossRecord]]:
        tc, model = self.tc, self.model
        if model.adam is None:
            model.adam = ad.AdamState(lr=tc.lr0)
        net = SMRNet(model, requires_grad=True)
        params = model.parameters
        replace = self.train_idx.size < tc.minibatch
        if replace:
            logger.warning(f"Fewer training components ({self.train_idx.size}) than minibatch "
                           f"({tc.minibatch}); sampling with replacement")

        curve: list[LossRecord] = []
        best, best_nrmse = None, math.inf
        start = model.iteration
        for it in range(start + 1, start + tc.iterations + 1):
            model.adam.lr = tc.lr_at(it - 1)
            batch = self.rng.choice(self.train_idx, size=tc.minibatch, replace=replace)
            xs, ys = self.inputs[batch].copy(), self.targets[batch].copy()
            if tc.augment:
                xs, ys = self._augment(xs, ys)

            net.zero_grad()
            loss = ad.mse_loss(net(ad.Tensor(xs)), ys)
            loss.backward()
            train_mse = float(loss.data)
            if not math.isfinite(train_mse):
                raise NumericalError(f"training loss became non-finite at iteration {it}")
            ad.adam_step(params, net.gradients(), model.adam)
            model.iteration = it

            record = LossRecord(it, train_mse)
            if self.val_idx.size and (it % tc.val_every == 0 or it == start + tc.iterations):
                val_mse, val_nrmse = self.validate(net)
                record = LossRecord(it, train_mse, val_mse, val_nrmse)
                logger.info(f"Train | it={it} lr={model.adam.lr:.3g} train_mse={train_mse:.4g} "
                            f"val_mse={val_mse:.4g} val_nrmse={val_nrmse:.4g}")
                if val_nrmse < best_nrmse:
                    best_nrmse = val_nrmse
                    best = copy.deepcopy(model)
            else:
                logger.debug(f"Train | it={it} lr={model.adam.lr:.3g} train_mse={train_mse:.4g}")
            curve.append(record)
            if on_progress:
                try:
                    on_progress(record)
                except Exception as e:
                    logger.exception(f"Progress callback error: {e}")

        result = best if best is not None else model
        result.meta = {**result.meta, "best_val_nrmse": best_nrmse, "final_iteration": model.iteration}
        logger.info(f"Training finished | iterations={tc.iterations} best_val_nrmse={best_nrmse:.4g} "
                    f"selected_iteration={result.iteration}")
        return result, curve


def train(model: ModelCheckpoint, hr_sm: SystemMatrix, pattern: SamplingPattern,
          tc: TrainConfig) -> tuple[ModelCheckpoint, list[LossRecord]]:
    return Trainer(model, hr_sm, pattern, tc).run()
