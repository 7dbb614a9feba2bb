"""
Experiment stages and the run directory they share.

Every stage reads and writes artifacts inside ``<out>/run-<hash>``; the
manifest records the configuration hash, seeds, library versions, host and
the wall-clock time of each finished stage. A finished stage whose outputs
still exist is skipped unless the pipeline runs with ``force``.
"""
from __future__ import annotations

import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import psutil

from core import __version__
from core import container
from core import report as rp
from core.codec import CODEC_TAG
from core.config_manager import ExperimentConfig
from core.cs_recovery import CsParams, cs_param_sweep, recover_system_matrix, zero_filled_matrix
from core.errors import ConfigError, DataError, SmrError
from core.logger import logger, run_log
from core.metrics import MetricRow, component_report, image_metrics, nrmse
from core.reconstruction import reconstruct_phantom
from core.sampling import SamplingPattern, gather_lr_volume, poisson_pattern, regular_pattern, trilinear_upsample
from core.simgen import make_phantom, simulate_measurement, simulate_system_matrix
from core.smrnet import build_model, recover
from core.trainer import Trainer, target_offset
from core.volume import ComplexVolume, Measurement, SystemMatrix, padding_for, snr_filter, zero_pad

STAGES = ("simulate", "ingest", "subsample", "train", "recover-net", "recover-cs", "sweep-cs",
          "reconstruct", "evaluate", "report")
SYNTHETIC_SEQUENCE = ("simulate", "subsample", "train", "recover-net", "recover-cs", "reconstruct",
                      "evaluate", "report")
VARIANT_FILES = {"true": "sm_true.h5", "smrnet": "sm_net.h5", "cs": "sm_cs.h5"}


def _versions() -> dict:
    out = {"smrecovery": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "h5py", "matplotlib", "psutil"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def _host() -> dict:
    return {
        "platform": platform.platform(),
        "physical_cores": psutil.cpu_count(logical=False),
        "logical_cores": psutil.cpu_count(),
        "memory_bytes": psutil.virtual_memory().total,
    }


def _pad_matrix(sm: SystemMatrix, hr_dims) -> tuple[SystemMatrix, tuple]:
    before, after = padding_for(sm.dims, hr_dims)
    if before == (0, 0, 0) and after == (0, 0, 0):
        return sm, before
    data = np.stack([zero_pad(c, before, after).data for c in sm])
    return SystemMatrix(data, sm.frequencies, sm.snr, sm.voxel_spacing, sm.meta), before


def _crop_data(data: np.ndarray, offset, dims) -> np.ndarray:
    block = tuple(slice(o, o + d) for o, d in zip(offset, dims))
    return data[(slice(None),) + block]


class Pipeline:
    def __init__(self, config: ExperimentConfig, force: bool = False, progress_callback=None):
        self.config = config
        self.force = force
        self.progress_callback = progress_callback
        self.run_dir = config.run_dir()
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.run_dir / "manifest.json"
        self.manifest = self._load_manifest()
        self.current_stage: str | None = None
        self._handlers = {
            "simulate": self._simulate, "ingest": self._ingest, "subsample": self._subsample,
            "train": self._train, "recover-net": self._recover_net, "recover-cs": self._recover_cs,
            "sweep-cs": self._sweep_cs, "reconstruct": self._reconstruct, "evaluate": self._evaluate,
            "report": self._report,
        }
        logger.info(f"Pipeline ready | run_dir={self.run_dir} force={force} jobs={self.jobs}")

    @property
    def seed(self) -> int:
        return int(self.config.get("seed"))

    @property
    def jobs(self) -> int:
        return int(self.config.get("jobs"))

    def path(self, name: str) -> Path:
        return self.run_dir / name

    # ------------------------------------------------------------ manifest

    def _load_manifest(self) -> dict:
        digest = self.config.config_hash()
        if self.manifest_path.exists():
            try:
                doc = json.loads(self.manifest_path.read_text(encoding="utf-8"))
                if doc.get("config_hash") == digest:
                    return doc
                logger.warning(f"Manifest hash mismatch, starting fresh | {self.manifest_path}")
            except json.JSONDecodeError:
                logger.exception(f"Unreadable manifest, starting fresh | {self.manifest_path}")
        return {"config_hash": digest, "seed": self.seed, "versions": _versions(), "host": _host(), "stages": {}}

    def _save_manifest(self) -> None:
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True), encoding="utf-8")

    def is_done(self, stage: str) -> bool:
        entry = self.manifest["stages"].get(stage)
        return bool(entry and entry.get("status") == "done"
                    and all(self.path(o).exists() for o in entry.get("outputs", [])))

    # ------------------------------------------------------------ running

    def run(self, stage: str) -> dict:
        if stage not in self._handlers:
            raise ConfigError(f"unknown stage {stage!r}, expected one of {STAGES}")
        if self.is_done(stage) and not self.force:
            logger.info(f"Stage skipped, already done | stage={stage} hash={self.manifest['config_hash'][:12]}")
            return self.manifest["stages"][stage]

        self.current_stage = stage
        self.config.save(self.path("config.json"))
        t0 = time.perf_counter()
        with run_log(self.run_dir):
            logger.info(f"Stage start | stage={stage} run_dir={self.run_dir}")
            try:
                outputs = self._handlers[stage]()
            except SmrError as e:
                e.stage = stage
                self._fail(stage, e.code, e)
                raise
            except Exception as e:
                logger.exception(f"Stage crashed | stage={stage}")
                self._fail(stage, type(e).__name__, e)
                raise
            wall = time.perf_counter() - t0
            entry = {
                "status": "done",
                "wall_seconds": wall,
                "finished_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                "outputs": sorted(str(Path(o).relative_to(self.run_dir)) for o in outputs),
            }
            self.manifest["stages"][stage] = entry
            self._save_manifest()
            logger.info(f"Stage done | stage={stage} wall={wall:.2f}s outputs={len(outputs)}")
        self.current_stage = None
        if self.progress_callback:
            try:
                self.progress_callback(stage, entry)
            except Exception as e:
                logger.exception(f"Progress callback error: {e}")
        return entry

    def run_all(self, stages=SYNTHETIC_SEQUENCE) -> None:
        for stage in stages:
            self.run(stage)

    def _fail(self, stage: str, code: str, error: Exception) -> None:
        self.manifest["stages"][stage] = {"status": "failed", "error": code, "message": str(error)}
        self._save_manifest()

    def _require(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DataError(f"{name} not found in {self.run_dir}; run the '{producer}' stage first")
        return p

    # ------------------------------------------------------------ loaders

    def _truth(self) -> SystemMatrix:
        return container.load_system_matrix(self._require("sm_true.h5", "simulate' or 'ingest"))

    def _pattern(self, kind: str) -> SamplingPattern:
        return SamplingPattern.load(self._require(f"pattern_{kind}.json", "subsample"))

    def _measurements(self) -> dict[str, Measurement]:
        found = sorted(self.run_dir.glob("meas_*.h5"))
        return {p.stem[len("meas_"):]: container.load_measurement(p) for p in found}

    # ------------------------------------------------------------ stages

    def _simulate(self) -> list[Path]:
        c = self.config.get("simulate")
        dims = tuple(c["dims"])
        outputs = []
        for name, sc, seed in (("sm_true.h5", self.config.scanner_config(), self.seed),
                               ("sm_train.h5", self.config.training_scanner_config(), self.seed + 1)):
            sm = simulate_system_matrix(sc, dims, c["noise_rms"], seed, self.jobs, c["max_components"])
            sm = snr_filter(sm, c["snr_threshold"])
            if len(sm) == 0:
                raise DataError(f"no simulated component reaches SNR {c['snr_threshold']}; lower simulate.noise_rms")
            outputs.append(container.save_system_matrix(self.path(name), sm))
            if name == "sm_true.h5":
                truth = sm
        for kind in c["phantoms"]:
            phantom = make_phantom(kind, dims)
            outputs.append(container.save_image(self.path(f"phantom_{kind}.h5"), phantom))
            m = simulate_measurement(truth, phantom, c["phantom_noise_rms"], self.seed)
            outputs.append(container.save_measurement(self.path(f"meas_{kind}.h5"), m))
        return outputs

    def _ingest(self) -> list[Path]:
        paths = self.config.get("paths")
        if not paths["mdf_system_matrix"]:
            raise ConfigError("ingest needs paths.mdf_system_matrix")
        threshold = self.config.get("simulate.snr_threshold")
        cap = self.config.get("simulate.max_components")

        def load_sm(path) -> tuple[SystemMatrix, np.ndarray, int]:
            sm = container.ingest_mdf(path)
            if not isinstance(sm, SystemMatrix):
                raise DataError(f"{path} holds a measurement, expected a system matrix")
            keep = np.flatnonzero(sm.snr >= threshold)
            if cap and keep.size > cap:
                keep = np.sort(keep[np.argsort(-sm.snr[keep], kind="stable")[:cap]])
            if keep.size == 0:
                raise DataError(f"{path}: no component reaches SNR {threshold}")
            logger.info(f"Ingest filter | path={path} kept={keep.size}/{len(sm)}")
            return sm.select(keep), keep, len(sm)

        truth, keep, full_k = load_sm(paths["mdf_system_matrix"])
        outputs = [container.save_system_matrix(self.path("sm_true.h5"), truth)]
        if paths["mdf_train_matrix"]:
            train, _, _ = load_sm(paths["mdf_train_matrix"])
        else:
            logger.warning("No training matrix configured; training on the evaluation matrix")
            train = truth
        outputs.append(container.save_system_matrix(self.path("sm_train.h5"), train))
        for mpath in paths["mdf_measurements"]:
            m = container.ingest_mdf(mpath)
            if not isinstance(m, Measurement):
                raise DataError(f"{mpath} holds a system matrix, expected a measurement")
            if len(m) != full_k:
                raise DataError(f"{mpath}: {len(m)} frequency components, system matrix has {full_k}")
            m = Measurement(m.u_hat[keep], m.frequencies[keep], {**m.meta, "phantom": Path(mpath).stem})
            outputs.append(container.save_measurement(self.path(f"meas_{Path(mpath).stem}.h5"), m))
        return outputs

    def _subsample(self) -> list[Path]:
        s = self.config.get("sampling")
        truth = self._truth()
        stride = int(s["stride"])
        hr_dims = tuple(s["hr_dims"]) or tuple(int(math.ceil(d / stride)) * stride for d in truth.dims)
        offset = tuple(s["offset"]) or ((stride // 2,) * 3 if stride % 2 else (0, 0, 0))
        reg = regular_pattern(hr_dims, stride, offset)
        poi = poisson_pattern(hr_dims, reg.count, self.seed, include_corners=s["include_corners"])
        reg.save(self.path("pattern_regular.json"))
        poi.save(self.path("pattern_poisson.json"))

        padded, _ = _pad_matrix(truth, hr_dims)
        lr = np.stack([gather_lr_volume(c, reg).data for c in padded])
        spacing = None if truth.voxel_spacing is None else tuple(v * stride for v in truth.voxel_spacing)
        lr_sm = SystemMatrix(lr, truth.frequencies, truth.snr, spacing, {**truth.meta, "stride": stride})
        container.save_system_matrix(self.path("sm_lr.h5"), lr_sm)
        logger.info(f"Subsample | hr={hr_dims} stride={stride} offset={offset} samples={reg.count} "
                    f"factor={reg.factor:.1f}")
        return [self.path("pattern_regular.json"), self.path("pattern_poisson.json"), self.path("sm_lr.h5")]

    def _train(self) -> list[Path]:
        train_sm = container.load_system_matrix(self._require("sm_train.h5", "simulate' or 'ingest"))
        reg = self._pattern("regular")
        ckpt = self.config.get("paths.checkpoint")
        model = container.load_checkpoint(ckpt) if ckpt else build_model(self.config.model_config(), self.seed)
        if model.config.total_factor != reg.params["stride"]:
            raise ConfigError(f"model upsampling x{model.config.total_factor} does not match "
                              f"sampling stride {reg.params['stride']}")
        best, curve = Trainer(model, train_sm, reg, self.config.train_config()).run()
        best.meta = {**best.meta, "stride": reg.params["stride"], "codec": CODEC_TAG}
        return [container.save_checkpoint(self.path("model.h5"), best),
                rp.write_loss_curve(self.path("loss_curve.csv"), curve)]

    def _recover_net(self) -> list[Path]:
        truth = self._truth()
        reg = self._pattern("regular")
        lr_sm = container.load_system_matrix(self._require("sm_lr.h5", "subsample"))
        model = container.load_checkpoint(self._require("model.h5", "train"))
        before, _ = padding_for(truth.dims, reg.hr_dims)
        toff = target_offset(reg, model.config.total_factor)
        crop_offset = tuple(b - t for b, t in zip(before, toff))
        t0 = time.perf_counter()
        sm_net = recover(model, lr_sm, hr_dims=truth.dims, crop_offset=crop_offset, jobs=self.jobs)
        seconds = time.perf_counter() - t0
        sm_net = SystemMatrix(sm_net.data, truth.frequencies, truth.snr, truth.voxel_spacing,
                              {**truth.meta, "recovered_by": "smrnet", "samples": reg.count})
        timing = self.path("net_timing.json")
        timing.write_text(json.dumps({"seconds": seconds, "components": len(sm_net)}), encoding="utf-8")
        return [container.save_system_matrix(self.path("sm_net.h5"), sm_net), timing]

    def _cs_params(self) -> CsParams:
        best = self.path("cs_best.json")
        if self.config.get("cs.use_sweep") and best.exists():
            logger.info(f"Using swept CS parameters | {best}")
            return CsParams(**json.loads(best.read_text(encoding="utf-8")))
        return self.config.cs_params()

    def _recover_cs(self) -> list[Path]:
        truth = self._truth()
        poi = self._pattern("poisson")
        padded, before = _pad_matrix(truth, poi.hr_dims)
        recovered, timing = recover_system_matrix(padded, poi, self._cs_params(), self.jobs)
        sm_cs = truth.with_data(_crop_data(recovered.data, before, truth.dims), recovered_by="cs", samples=poi.count)
        return [container.save_system_matrix(self.path("sm_cs.h5"), sm_cs),
                rp.write_csv(self.path("cs_timing.csv"), timing, ["k", "seconds", "outer_iters", "residual", "converged"])]

    def _sweep_cs(self) -> list[Path]:
        truth = self._truth()
        poi = self._pattern("poisson")
        n = int(self.config.get("cs.sweep_components"))
        subset = truth.select(np.sort(np.argsort(-truth.snr, kind="stable")[:n]))
        padded, _ = _pad_matrix(subset, poi.hr_dims)
        best, table = cs_param_sweep(padded, poi, self.config.cs_grid(), self.jobs)
        best_path = self.path("cs_best.json")
        best_path.write_text(json.dumps(asdict(best), indent=2), encoding="utf-8")
        return [rp.write_csv(self.path("cs_sweep.csv"), table), best_path]

    def _reconstruct(self) -> list[Path]:
        measurements = self._measurements()
        if not measurements:
            raise DataError(f"no meas_*.h5 in {self.run_dir}; run 'simulate' or 'ingest' first")
        matrices = {v: container.load_system_matrix(self.path(f)) for v, f in VARIANT_FILES.items()
                    if self.path(f).exists()}
        if "true" not in matrices:
            self._require("sm_true.h5", "simulate' or 'ingest")
        params = self.config.recon_params()
        jobs = [(v, kind) for v in matrices for kind in measurements]

        def run(job):
            variant, kind = job
            image = reconstruct_phantom(matrices[variant], measurements[kind], params, variant)
            return container.save_image(self.path(f"image_{variant}_{kind}.h5"), image)

        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(run, jobs))

    def _baselines(self, truth: SystemMatrix) -> dict[str, SystemMatrix]:
        """Trilinear upsampling of the regular samples and zero-filled Poisson samples, on the truth grid."""
        out = {}
        if self.path("pattern_regular.json").exists() and self.path("sm_lr.h5").exists():
            reg = self._pattern("regular")
            lr_sm = container.load_system_matrix(self.path("sm_lr.h5"))
            before, _ = padding_for(truth.dims, reg.hr_dims)
            up = np.stack([trilinear_upsample(ComplexVolume(c.data), reg.hr_dims, reg.params["stride"],
                                              reg.params["offset"]).data for c in lr_sm])
            out["trilinear"] = truth.with_data(_crop_data(up, before, truth.dims), recovered_by="trilinear")
        if self.path("pattern_poisson.json").exists():
            poi = self._pattern("poisson")
            padded, before = _pad_matrix(truth, poi.hr_dims)
            zf = zero_filled_matrix(padded, poi)
            out["zero-filled"] = truth.with_data(_crop_data(zf.data, before, truth.dims), recovered_by="zero-filled")
        return out

    def _factor_tag(self, variant: str) -> str:
        kind = "poisson" if variant == "cs" else "regular"
        p = self.path(f"pattern_{kind}.json")
        return f"{variant}-{round(SamplingPattern.load(p).factor)}x" if p.exists() else variant

    def _evaluate(self) -> list[Path]:
        ev = self.config.get("evaluate")
        truth = self._truth()
        recovered = {v: container.load_system_matrix(self.path(f)) for v, f in VARIANT_FILES.items()
                     if v != "true" and self.path(f).exists()}
        recovered.update(self._baselines(truth))
        if not recovered:
            raise DataError("nothing to evaluate; run a recovery stage first")

        outputs, rows, reports = [], [], {}
        for method, sm in recovered.items():
            report = component_report(sm, truth, ev["normalizer"])
            reports[method] = report
            outputs.append(rp.write_component_csv(self.path(f"components_{method}.csv"), report))
            rows.append(MetricRow(method, "mean_component_nrmse", report[-1]["nrmse"]))
        rows += rp.comparison_rows(reports)

        for kind in sorted(self._measurements()):
            ref_path = self.path(f"image_true_{kind}.h5")
            if not ref_path.exists():
                continue
            ref = container.load_image(ref_path)
            phantom_path = self.path(f"phantom_{kind}.h5")
            phantom = container.load_image(phantom_path) if phantom_path.exists() else None
            for variant in ("smrnet", "cs"):
                est_path = self.path(f"image_{variant}_{kind}.h5")
                if not est_path.exists():
                    continue
                subject = rp.subject_id(self._factor_tag(variant), kind)
                est = container.load_image(est_path)
                rows += image_metrics(subject, est, ref, ev["ssim_mode"], ev["normalizer"])
                if phantom is not None:
                    err = nrmse(est, phantom, ev["normalizer"])
                    true_err = nrmse(ref, phantom, ev["normalizer"])
                    rows += [MetricRow(subject, "phantom_nrmse", err),
                             MetricRow(subject, "phantom_nrmse_ratio", rp.safe_ratio(err, true_err))]
            if phantom is not None:
                rows += image_metrics(rp.subject_id("true", kind), ref, phantom, ev["ssim_mode"], ev["normalizer"])
        outputs.append(rp.write_metrics_csv(self.path("metrics.csv"), rows))
        return outputs

    def _report(self) -> list[Path]:
        out_dir = self.path("report")
        rows = rp.read_metrics_csv(self._require("metrics.csv", "evaluate"))
        outputs = list(rp.write_summary(out_dir, rows))
        outputs.append(rp.write_acceptance(out_dir / "acceptance.json", rows))

        reports = {p.stem[len("components_"):]: rp.read_csv(p) for p in sorted(self.run_dir.glob("components_*.csv"))}
        if reports:
            outputs.append(rp.snr_scatter_png(out_dir / "snr_vs_nrmse.png", reports))

        for kind in sorted(self._measurements()):
            images = {v: container.load_image(self.path(f"image_{v}_{kind}.h5")) for v in VARIANT_FILES
                      if self.path(f"image_{v}_{kind}.h5").exists()}
            if images:
                outputs.append(rp.image_slice_png(out_dir / f"slices_{kind}.png", images,
                                                  int(self.config.get("report.slice"))))

        stages = self.manifest["stages"]
        if all(stages.get(s, {}).get("status") == "done" for s in ("recover-cs", "recover-net")):
            timing = rp.timing_ratio(stages["recover-cs"]["wall_seconds"], stages["recover-net"]["wall_seconds"])
            path = out_dir / "timing.json"
            path.write_text(json.dumps(timing, indent=2), encoding="utf-8")
            outputs.append(path)
        return outputs
