# src_python/config.py
# Central configuration for paths, defaults and experiment settings.
import os
import json
import copy
import hashlib
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from errors import ConfigError
from gait_data import SyntheticSpec
from logger import logger

# 1. BASIC SETTINGS AND PATHS
# ---------------------------------------------------
SRC_DIR = Path(__file__).resolve().parent
ROOT_DIR = SRC_DIR.parent
ENV_PATH = ROOT_DIR / ".env"
load_dotenv(dotenv_path=ENV_PATH)

SETTINGS_PATH = Path(os.getenv("SETTINGS_PATH", str(ROOT_DIR / "settings.json")))

LIBRARY_VERSION = "1.0.0"
EXPERIMENTS = ("leakage", "crossval", "ablation", "bench", "predict", "fit_lp", "ingest_check", "synth")


# 2. HELPERS
# ---------------------------------------------------
def load_json_config(path, default=None):
    if default is None:
        default = {}
    try:
        if path.exists():
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
    except Exception as e:
        logger.warning(f"Error loading config from {path}: {e}")
    return default


def deep_merge(base: Dict[str, Any], override: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    """Merge `override` into a copy of `base`; keys unknown to `base` are rejected."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"Unknown configuration key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key] = deep_merge(base[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def config_hash(document: Dict[str, Any]) -> str:
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# 3. DEFAULTS
# ---------------------------------------------------
def _train_defaults(batch_size, learning_rate, max_epochs, monitor):
    return {
        "batch_size": batch_size,
        "learning_rate": learning_rate,
        "label_smoothing": 0.1,
        "l2_lambda": 1e-4,
        "grad_clip_norm": 1.0,
        "plateau_patience": 5,
        "plateau_factor": 4.0,
        "plateau_min_delta": 1e-4,
        "min_lr": 1e-6,
        "max_epochs": max_epochs,
        "early_stop_patience": 15,
        "monitor": monitor,
        "seed": 0,
    }


DEFAULT_SETTINGS: Dict[str, Any] = {
    "data_dir": None,
    "synthetic": None,
    "output_dir": "runs",
    "seed": 0,
    "threads": 1,
    "lp_order": 11,
    "zero_mean_normalization": False,
    "holdout_fraction": 0.2,
    "val_fraction": 0.1,
    "folds": 10,
    "repeats": 1,
    "fit_lp_subjects": None,
    "windows": {
        "leakage_len": 100, "leakage_stride": 50,
        "lpgnet_len": 100, "lpgnet_stride": 50,
        "ablation_len": 200, "ablation_stride": 100,
    },
    "architecture": {
        "lpgnet": {
            "widths": [32, 40, 44], "kernel": 7, "pool": 2,
            "spatial_dropout": 0.1, "dropout": 0.3,
            "bn_momentum": 0.9, "bn_epsilon": 1e-3,
        },
        "baseline": {"widths": [32, 40, 48], "kernels": [7, 5, 3], "pool": 2},
    },
    "training": {
        "leakage": _train_defaults(800, 1e-3, 200, "val_accuracy"),
        "baseline": _train_defaults(800, 1e-3, 200, "val_accuracy"),
        "stage1": _train_defaults(128, 5e-4, 200, "val_loss"),
        "stage2": _train_defaults(64, 1e-3, 100, "val_loss"),
    },
    "bench": {"runs": 1000, "warmup": 10},
    "predict": {"rms_window": 25, "top_k": 5},
}


# 4. TYPED VIEWS
# ---------------------------------------------------
@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 5e-4
    label_smoothing: float = 0.1
    l2_lambda: float = 1e-4
    grad_clip_norm: float = 1.0
    plateau_patience: int = 5
    plateau_factor: float = 4.0
    plateau_min_delta: float = 1e-4
    min_lr: float = 1e-6
    max_epochs: int = 200
    early_stop_patience: int = 15
    monitor: str = "val_loss"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("batch_size, max_epochs and early_stop_patience must be positive")
        if self.learning_rate <= 0 or self.min_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ConfigError(f"label_smoothing must lie in [0, 0.5), got {self.label_smoothing}")
        if self.plateau_factor <= 1.0:
            raise ConfigError(f"plateau_factor must exceed 1, got {self.plateau_factor}")
        if self.l2_lambda < 0 or self.grad_clip_norm <= 0 or self.plateau_patience < 1:
            raise ConfigError("l2_lambda must be >= 0, grad_clip_norm > 0, plateau_patience >= 1")
        if self.monitor not in ("val_loss", "val_accuracy"):
            raise ConfigError(f"monitor must be val_loss or val_accuracy, got {self.monitor}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown training keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e


@dataclass
class ExperimentConfig:
    experiment: str
    data_dir: Optional[str]
    synthetic: Optional[SyntheticSpec]
    output_dir: str
    seed: int
    threads: int
    lp_order: int
    zero_mean_normalization: bool
    holdout_fraction: float
    val_fraction: float
    folds: int
    repeats: int
    fit_lp_subjects: Optional[List[str]]
    windows: Dict[str, int]
    architecture: Dict[str, Dict[str, Any]]
    training: Dict[str, TrainConfig]
    bench: Dict[str, int]
    predict: Dict[str, int]
    raw: Dict[str, Any] = field(repr=False, default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def train(self, stage: str, seed: Optional[int] = None) -> TrainConfig:
        cfg = self.training[stage]
        if seed is None:
            return cfg
        return TrainConfig(**{**asdict(cfg), "seed": int(seed)})

    def echo(self) -> Dict[str, Any]:
        return copy.deepcopy(self.raw)


def _validate(doc: Dict[str, Any]):
    if doc["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"Unknown experiment: {doc['experiment']}")
    if not 0 < doc["holdout_fraction"] < 1 or not 0 < doc["val_fraction"] < 1:
        raise ConfigError("holdout_fraction and val_fraction must lie in (0, 1)")
    if int(doc["folds"]) < 2:
        raise ConfigError(f"folds must be at least 2, got {doc['folds']}")
    if int(doc["lp_order"]) < 1:
        raise ConfigError("lp_order must be positive")
    if int(doc["threads"]) < 1 or int(doc["repeats"]) < 1:
        raise ConfigError("threads and repeats must be positive")
    for key, value in doc["windows"].items():
        if int(value) < 1:
            raise ConfigError(f"windows.{key} must be positive")


def build_experiment_config(document: Dict[str, Any]) -> ExperimentConfig:
    doc = copy.deepcopy(document)
    _validate(doc)
    synthetic = None
    if doc["synthetic"] is not None:
        try:
            synthetic = SyntheticSpec(**doc["synthetic"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid synthetic spec: {e}") from e
    training = {stage: TrainConfig.from_dict(values) for stage, values in doc["training"].items()}
    return ExperimentConfig(
        experiment=doc["experiment"],
        data_dir=doc["data_dir"],
        synthetic=synthetic,
        output_dir=doc["output_dir"],
        seed=int(doc["seed"]),
        threads=int(doc["threads"]),
        lp_order=int(doc["lp_order"]),
        zero_mean_normalization=bool(doc["zero_mean_normalization"]),
        holdout_fraction=float(doc["holdout_fraction"]),
        val_fraction=float(doc["val_fraction"]),
        folds=int(doc["folds"]),
        repeats=int(doc["repeats"]),
        fit_lp_subjects=doc["fit_lp_subjects"],
        windows={k: int(v) for k, v in doc["windows"].items()},
        architecture=doc["architecture"],
        training=training,
        bench={k: int(v) for k, v in doc["bench"].items()},
        predict={k: int(v) for k, v in doc["predict"].items()},
        raw=doc,
    )


def load_experiment_config(experiment: str, config_file: Optional[Path] = None,
                           overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Resolve the configuration for one run.

    Priority (lowest to highest): built-in defaults, settings.json, --config file,
    environment variables, explicit CLI overrides.
    """
    doc = copy.deepcopy(DEFAULT_SETTINGS)
    doc = deep_merge(doc, load_json_config(SETTINGS_PATH, {}))

    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        doc = deep_merge(doc, user)

    env = {}
    for var, key in (("GAIT_SEED", "seed"), ("GAIT_THREADS", "threads")):
        if os.getenv(var):
            try:
                env[key] = int(os.getenv(var))
            except ValueError:
                raise ConfigError(f"{var} must be an integer, got {os.getenv(var)!r}") from None
    if os.getenv("GAIT_OUTPUT_DIR"):
        env["output_dir"] = os.getenv("GAIT_OUTPUT_DIR")
    doc = deep_merge(doc, env)
    doc = deep_merge(doc, {k: v for k, v in (overrides or {}).items() if v is not None})

    doc["experiment"] = experiment
    return build_experiment_config(doc)
