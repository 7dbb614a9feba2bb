import copy
import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import fields
from pathlib import Path

import psutil

from core.cs_recovery import CsParams, param_grid
from core.errors import ConfigError
from core.logger import logger
from core.reconstruction import ReconParams
from core.simgen import PHANTOM_KINDS, ScannerConfig
from core.smrnet import ModelConfig
from core.trainer import TrainConfig

ENV_PREFIX = "SMR_"

# keys that never change results and stay out of the run hash
_UNHASHED = (("jobs",), ("paths", "out"))


def _default_jobs() -> int:
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


def _plain(value):
    return list(value) if isinstance(value, tuple) else value


def _defaults() -> dict:
    return {
        "seed": 0,
        "jobs": _default_jobs(),
        "paths": {
            "out": "runs",
            "mdf_system_matrix": "",
            "mdf_train_matrix": "",
            "mdf_measurements": [],
            "checkpoint": "",
        },
        "simulate": {
            "dims": [32, 32, 32],
            "noise_rms": 1e-3,
            "max_components": 256,
            "snr_threshold": 3.0,
            "training_particle_diameter": 25.0,
            "phantoms": list(PHANTOM_KINDS),
            "phantom_noise_rms": 0.0,
            **{f.name: _plain(getattr(ScannerConfig(), f.name)) for f in fields(ScannerConfig)},
        },
        "sampling": {"stride": 2, "offset": [], "hr_dims": [], "include_corners": True},
        "model": {"n_rrdb": 2, "n_upconv": 1, "up_factor": 2, "nf": 16, "gc": 8,
                  "res_scale": 0.2, "slope": 0.2, "kernel": 3},
        "train": {"iterations": 2000, "minibatch": 4, "lr0": 2e-4, "lr_halve_every": 4000,
                  "augment": True, "val_fraction": 0.1, "val_every": 500},
        "cs": {"mu": 10.0, "outer_iters": 30, "inner_iters": 5, "shrink_weight": 1.0, "tol": 1e-6,
               "sweep_components": 8, "sweep_mu": [1.0, 10.0, 100.0], "sweep_shrink_weight": [0.5, 1.0, 2.0],
               "use_sweep": False},
        "recon": {"lambda_rel": 0.01, "iterations": 3, "snr_threshold": 3.0,
                  "enforce_real_nonneg": True, "shuffle_seed": -1},
        "evaluate": {"normalizer": "max", "ssim_mode": "volume"},
        "report": {"slice": 19},
    }


def _parse_env_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def _merge(base: dict, incoming: dict, where: str = "") -> None:
    for key, value in incoming.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be a table")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


class ExperimentConfig:
    """
    Resolved experiment configuration: defaults, then the TOML file, then
    SMR_<SECTION>__<KEY> / SMR_SEED / SMR_JOBS environment overrides, then
    explicit overrides (CLI flags).
    """

    def __init__(self, config_path=None, overrides: dict | None = None, environ=None):
        self.config_path = Path(config_path) if config_path else None
        self.data = _defaults()
        self.load()
        self._apply_env(os.environ if environ is None else environ)
        if overrides:
            _merge(self.data, overrides)
        self.validate()
        logger.info(f"Config resolved | path={self.config_path} hash={self.config_hash()[:12]}")

    def load(self):
        if self.config_path is None:
            return
        if not self.config_path.exists():
            raise ConfigError(f"config file not found: {self.config_path}")
        try:
            with open(self.config_path, "rb") as f:
                incoming = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            logger.exception(f"Failed to read {self.config_path}: {e}")
            raise ConfigError(f"invalid TOML in {self.config_path}: {e}") from e
        _merge(self.data, incoming)
        logger.info(f"Config read OK | {self.config_path}")

    def _apply_env(self, environ):
        for name, raw in sorted(environ.items()):
            if not name.startswith(ENV_PREFIX):
                continue
            key = name[len(ENV_PREFIX):].lower()
            if key in ("seed", "jobs"):
                self.set(key, _parse_env_value(raw))
            elif "__" in key:
                section, sub = key.split("__", 1)
                if section not in self.data or not isinstance(self.data[section], dict):
                    raise ConfigError(f"{name}: unknown config section {section!r}")
                self.set(f"{section}.{sub}", _parse_env_value(raw))
            else:
                continue
            logger.info(f"Config env override | {name}={raw}")

    def save(self, path):
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=4, sort_keys=True)
        logger.info(f"Config saved | {path}")
        return path

    def get(self, key):
        node = self.data
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {key}")
            node = node[part]
        return node

    def set(self, key, value):
        *parents, last = key.split(".")
        node = self.data
        for part in parents:
            node = node.get(part) if isinstance(node, dict) else None
            if not isinstance(node, dict):
                raise ConfigError(f"unknown config key {key}")
        if last not in node:
            raise ConfigError(f"unknown config key {key}")
        node[last] = value
        logger.debug(f"Config set | {key}={value}")

    # ------------------------------------------------------------ validation

    def validate(self):
        if not isinstance(self.data["seed"], int) or self.data["seed"] < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.data['seed']!r}")
        if not isinstance(self.data["jobs"], int) or self.data["jobs"] < 1:
            raise ConfigError(f"jobs must be a positive integer, got {self.data['jobs']!r}")
        paths = self.data["paths"]
        inputs = [paths["mdf_system_matrix"], paths["mdf_train_matrix"], paths["checkpoint"],
                  *paths["mdf_measurements"]]
        for p in inputs:
            if p and not Path(p).exists():
                raise ConfigError(f"input path does not exist: {p}")
        s = self.data["sampling"]
        if (s["offset"] and len(s["offset"]) != 3) or (s["hr_dims"] and len(s["hr_dims"]) != 3):
            raise ConfigError("sampling.offset and sampling.hr_dims need 3 entries when given")
        if self.data["evaluate"]["normalizer"] not in ("max", "range", "rms"):
            raise ConfigError("evaluate.normalizer must be max, range or rms")
        if self.data["evaluate"]["ssim_mode"] not in ("volume", "slice"):
            raise ConfigError("evaluate.ssim_mode must be volume or slice")
        unknown = set(self.data["simulate"]["phantoms"]) - set(PHANTOM_KINDS)
        if unknown:
            raise ConfigError(f"unknown phantom kinds {sorted(unknown)}")
        # building every parameter object runs its own invariant checks
        self.model_config()
        self.train_config()
        self.cs_params()
        self.recon_params()
        self.scanner_config()
        self.training_scanner_config()

    # ------------------------------------------------------------ typed accessors

    def _build(self, cls, section: str, **extra):
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in self.data[section].items() if k in names}
        kwargs.update(extra)
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"[{section}] {e}") from e

    def model_config(self) -> ModelConfig:
        return self._build(ModelConfig, "model")

    def train_config(self) -> TrainConfig:
        return self._build(TrainConfig, "train", seed=self.data["seed"])

    def cs_params(self) -> CsParams:
        return self._build(CsParams, "cs")

    def cs_grid(self) -> list[CsParams]:
        c = self.data["cs"]
        return param_grid(self.cs_params(), mu=c["sweep_mu"], shrink_weight=c["sweep_shrink_weight"])

    def recon_params(self) -> ReconParams:
        seed = self.data["recon"]["shuffle_seed"]
        return self._build(ReconParams, "recon", shuffle_seed=None if seed is None or seed < 0 else seed)

    def scanner_config(self) -> ScannerConfig:
        return self._build(ScannerConfig, "simulate")

    def training_scanner_config(self) -> ScannerConfig:
        return self._build(ScannerConfig, "simulate",
                           particle_diameter=self.data["simulate"]["training_particle_diameter"])

    # ------------------------------------------------------------ identity

    def resolved(self) -> dict:
        return copy.deepcopy(self.data)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of everything that affects results."""
        doc = self.resolved()
        for path in _UNHASHED:
            node = doc
            for part in path[:-1]:
                node = node[part]
            node.pop(path[-1], None)
        canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def run_dir(self) -> Path:
        return Path(self.data["paths"]["out"]) / f"run-{self.config_hash()[:12]}"
