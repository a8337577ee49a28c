"""Run configuration: defaults, INI config files, manifest echo.

The config file is a flat, typed key-value document with sections; CLI flags
override file values. A run's manifest embeds the resolved config so the run
can be re-executed exactly.
"""

import configparser
import dataclasses
import json
from dataclasses import dataclass
from typing import Dict

from .errors import ConfigError
from .models import FactoryMode, ModelConfig

SECTIONS = {
    "model": ("arch", "classes", "input_channels", "input_size", "mode",
              "delta", "dropout_rate"),
    "data": ("dataset", "data_dir", "train_limit", "eval_limit", "synth_n",
             "synth_eval_n", "synth_noise", "synth_separation"),
    "train": ("epochs", "batch_size", "lr", "optimizer", "kl_weight"),
    "eval": ("inference", "ensemble_samples"),
    "run": ("seed", "out_dir", "figures"),
}

DATASETS = ("blobs", "striped", "mnist", "fmnist", "cifar10", "cifar100")
INFERENCES = ("posterior_mean", "ensemble", "mcdrop")


@dataclass
class RunConfig:
    # model
    arch: str = "smallcnn"
    classes: int = 4
    input_channels: int = 1
    input_size: int = 8
    mode: str = "ksn"
    delta: float = 1.0
    dropout_rate: float = 0.1
    # data
    dataset: str = "blobs"
    data_dir: str = "data"
    train_limit: int = 0
    eval_limit: int = 0
    synth_n: int = 4096
    synth_eval_n: int = 512
    synth_noise: float = 1.0
    synth_separation: float = 10.0
    # train
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    kl_weight: str = "uniform"
    # eval
    inference: str = "posterior_mean"
    ensemble_samples: int = 10
    # run
    seed: int = 0
    out_dir: str = ""
    figures: bool = True

    def validate(self) -> "RunConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset: must be one of {DATASETS}, got {self.dataset!r}")
        if self.inference not in INFERENCES:
            raise ConfigError(f"inference: must be one of {INFERENCES}, got {self.inference!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr: must be > 0, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer: must be adam or sgd, got {self.optimizer!r}")
        if self.ensemble_samples < 1:
            raise ConfigError(f"ensemble_samples: must be >= 1, got {self.ensemble_samples}")
        if self.kl_weight != "uniform":
            try:
                v = float(self.kl_weight)
            except ValueError as exc:
                raise ConfigError(
                    f"kl_weight: expected 'uniform' or a number, got {self.kl_weight!r}") from exc
            if v < 0:
                raise ConfigError(f"kl_weight: must be >= 0, got {v}")
        self.model_config()  # surfaces model-field errors with their names
        return self

    def model_config(self) -> ModelConfig:
        try:
            factory = FactoryMode(kind=self.mode, delta=self.delta,
                                  rate=self.dropout_rate)
            return ModelConfig(arch=self.arch, num_classes=self.classes,
                               input_channels=self.input_channels,
                               factory=factory, input_size=self.input_size)
        except ConfigError:
            raise
        except Exception as exc:  # dataclass type errors
            raise ConfigError(str(exc)) from exc

    def kl_weight_value(self, minibatches_per_epoch: int, batch_size: int) -> float:
        """Resolve the KL coefficient applied once per training step.

        The uniform policy spreads one full KL evaluation per epoch across
        steps *per example*: with mean-reduced cross-entropy this reproduces
        the classic bayes-by-backprop objective scaled by 1/batch_size.
        """
        if self.kl_weight == "uniform":
            return 1.0 / max(minibatches_per_epoch * batch_size, 1)
        return float(self.kl_weight)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


def _type_name(kind) -> str:
    return kind if isinstance(kind, str) else kind.__name__


_FIELD_TYPES = {f.name: _type_name(f.type) for f in dataclasses.fields(RunConfig)}


def _coerce(field: str, raw: str):
    kind = _FIELD_TYPES[field]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    except ValueError as exc:
        raise ConfigError(f"{field}: {exc}") from exc


def load_ini(path: str) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _coerce(key, raw)
    return RunConfig(**values).validate()


def from_manifest(path: str) -> RunConfig:
    try:
        with open(path) as f:
            manifest = json.load(f)
        cfg_dict = manifest["config"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    known = set(_FIELD_TYPES)
    unknown = set(cfg_dict) - known
    if unknown:
        raise ConfigError(f"manifest config has unknown fields: {sorted(unknown)}")
    return RunConfig(**cfg_dict).validate()


def apply_overrides(cfg: RunConfig, overrides: Dict) -> RunConfig:
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    return cfg.validate()
