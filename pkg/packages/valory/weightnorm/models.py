# -*- coding: utf-8 -*-
# ------------------------------------------------------------------------------
#
#   Copyright 2024 Valory AG
#
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#
#       http://www.apache.org/licenses/LICENSE-2.0
#
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.
#
# ------------------------------------------------------------------------------

"""This module contains the experiment configuration."""

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, Union

from aea.exceptions import enforce
from aea.helpers.yaml_utils import yaml_load

from packages.valory.weightnorm.exceptions import BuildError, ConfigError
from packages.valory.weightnorm.network import ARCHITECTURES, LayerSpec, NormMode
from packages.valory.weightnorm.normalization import DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM, DEFAULT_INIT_EPS
from packages.valory.weightnorm.optim import OptimizerKind


DEFAULT_LR_GRID = (0.0003, 0.001, 0.003, 0.01)
ALL_MODES = tuple(NormMode)
_MISSING = object()


class DatasetKind(Enum):
    """Where the data comes from."""

    SYNTHETIC = "synthetic"
    IDX = "idx"


class Schedule(Enum):
    """Learning-rate schedules."""

    CONSTANT = "constant"
    TWO_PHASE = "two_phase"


def _ensure(key: str, kwargs: Dict[str, Any], type_: Union[Type, Tuple[Type, ...]], default: Any = _MISSING) -> Any:
    """Pop a key and check its type; missing keys take the default or raise."""
    if key not in kwargs:
        if default is _MISSING:
            raise ConfigError(f"Missing required configuration key {key!r}")
        return default
    value = kwargs.pop(key)
    if value is None and default is None:
        return None
    # bool is an int subclass; keep the two apart
    if isinstance(value, bool) and bool not in (type_ if isinstance(type_, tuple) else (type_,)):
        raise ConfigError(f"Configuration key {key!r} must be {type_}, got {value!r}")
    if not isinstance(value, type_):
        raise ConfigError(f"Configuration key {key!r} must be {type_}, got {value!r}")
    return value


def _enum(enum_cls: Type[Enum], key: str, value: Any) -> Any:
    """Parse an enum value by its string."""
    try:
        return enum_cls(value)
    except ValueError as e:
        choices = ", ".join(member.value for member in enum_cls)
        raise ConfigError(f"Configuration key {key!r} must be one of {choices}, got {value!r}") from e


def _check_unknown(scope: str, kwargs: Dict[str, Any]) -> None:
    """Reject keys nobody consumed."""
    if kwargs:
        raise ConfigError(f"Unknown {scope} configuration keys: {', '.join(sorted(kwargs))}")


@dataclass(frozen=True)
class DatasetSpec:
    """Synthetic blobs or an IDX (MNIST-style) train/test pair."""

    kind: DatasetKind = DatasetKind.SYNTHETIC
    n_train: int = 1000
    n_test: int = 1000
    dim: int = 20
    classes: int = 10
    separation: float = 3.0
    radial: bool = False
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_size: Optional[int] = 1000
    test_size: Optional[int] = 1000
    zca: bool = False
    zca_eps: float = 1e-2

    def __post_init__(self) -> None:
        """Validate the dataset description."""
        if self.kind is DatasetKind.SYNTHETIC:
            enforce(self.n_train >= self.classes >= 2, "Synthetic data needs n_train >= classes >= 2", ConfigError)
            enforce(self.n_test >= 1 and self.dim >= 1, "Synthetic data needs n_test >= 1 and dim >= 1", ConfigError)
            enforce(self.separation > 0, "separation must be positive", ConfigError)
        else:
            paths = (self.train_images, self.train_labels, self.test_images, self.test_labels)
            enforce(all(paths), "IDX datasets need train_images, train_labels, test_images and test_labels", ConfigError)
            for size in (self.train_size, self.test_size):
                enforce(size is None or size >= 2, "Subset sizes must be >= 2", ConfigError)
        enforce(self.zca_eps > 0, "zca_eps must be positive", ConfigError)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> "DatasetSpec":
        """Parse the 'dataset' section; relative IDX paths resolve against base_dir."""
        kwargs = dict(data)
        kind = _enum(DatasetKind, "dataset.kind", _ensure("kind", kwargs, str, DatasetKind.SYNTHETIC.value))
        values: Dict[str, Any] = {"kind": kind}
        if kind is DatasetKind.SYNTHETIC:
            values["n_train"] = _ensure("n_train", kwargs, int, cls.n_train)
            values["n_test"] = _ensure("n_test", kwargs, int, cls.n_test)
            values["dim"] = _ensure("dim", kwargs, int, cls.dim)
            values["classes"] = _ensure("classes", kwargs, int, cls.classes)
            values["separation"] = float(_ensure("separation", kwargs, (int, float), cls.separation))
            values["radial"] = _ensure("radial", kwargs, bool, cls.radial)
        else:
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                path = Path(_ensure(key, kwargs, str))
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                values[key] = str(path)
            for key in ("train_size", "test_size"):
                size = kwargs.pop(key, getattr(cls, key))
                enforce(size is None or (isinstance(size, int) and not isinstance(size, bool)), f"{key} must be an integer or null", ConfigError)
                values[key] = size
        values["zca"] = _ensure("zca", kwargs, bool, cls.zca)
        values["zca_eps"] = float(_ensure("zca_eps", kwargs, (int, float), cls.zca_eps))
        _check_unknown("dataset", kwargs)
        return cls(**values)


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment description."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    architecture: Optional[str] = "mlp-small"
    layers: Optional[Tuple[LayerSpec, ...]] = None
    norm_mode: NormMode = NormMode.WEIGHT_NORM
    modes: Tuple[NormMode, ...] = ALL_MODES
    log_scale: bool = False
    optimizer: OptimizerKind = OptimizerKind.ADAM
    lr_grid: Tuple[float, ...] = DEFAULT_LR_GRID
    schedule: Schedule = Schedule.CONSTANT
    epochs: int = 10
    batch_size: int = 100
    seed: int = 0
    init_batch_size: int = 100
    init_eps: float = DEFAULT_INIT_EPS
    bn_eps: float = DEFAULT_BN_EPS
    bn_momentum: float = DEFAULT_BN_MOMENTUM
    polyak: bool = False
    ema_decay: Optional[float] = None
    error_threshold: float = 0.05
    workers: int = 1
    out: str = "results/run.csv"

    def __post_init__(self) -> None:
        """Check cross-field invariants."""
        enforce((self.architecture is None) != (self.layers is None), "Give exactly one of architecture or layers", ConfigError)
        enforce(
            self.architecture is None or self.architecture in ARCHITECTURES,
            f"Unknown architecture {self.architecture!r}; expected one of {', '.join(ARCHITECTURES)}",
            ConfigError,
        )
        enforce(len(self.lr_grid) > 0, "lr_grid must not be empty", ConfigError)
        enforce(all(lr > 0 for lr in self.lr_grid), f"Learning rates must be positive: {self.lr_grid}", ConfigError)
        enforce(len(self.modes) > 0, "modes must not be empty", ConfigError)
        enforce(self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}", ConfigError)
        enforce(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}", ConfigError)
        uses_bn = NormMode.BATCH_NORM in self.modes or self.norm_mode is NormMode.BATCH_NORM
        enforce(not uses_bn or self.batch_size >= 2, "Batch normalization needs batch_size >= 2", ConfigError)
        enforce(self.init_batch_size >= 2, f"init_batch_size must be >= 2, got {self.init_batch_size}", ConfigError)
        enforce(self.init_eps >= 0 and self.bn_eps >= 0, "eps values must be non-negative", ConfigError)
        enforce(0 < self.bn_momentum < 1, f"bn_momentum must be in (0, 1), got {self.bn_momentum}", ConfigError)
        enforce(
            self.ema_decay is None or 0 < self.ema_decay < 1,
            f"ema_decay must be in (0, 1), got {self.ema_decay}",
            ConfigError,
        )
        enforce(0 <= self.error_threshold <= 1, "error_threshold must be in [0, 1]", ConfigError)
        enforce(self.workers >= 1, f"workers must be >= 1, got {self.workers}", ConfigError)
        enforce(self.seed >= 0, f"seed must be non-negative, got {self.seed}", ConfigError)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> "ExperimentConfig":
        """Parse a configuration mapping; unknown keys are an error."""
        enforce(isinstance(data, dict), "Configuration must be a mapping", ConfigError)
        kwargs = dict(data)
        values: Dict[str, Any] = {}
        values["dataset"] = DatasetSpec.from_dict(_ensure("dataset", kwargs, dict, {}), base_dir)
        layers = _ensure("layers", kwargs, list, None)
        if layers is not None:
            try:
                values["layers"] = tuple(LayerSpec.from_dict(layer) for layer in layers)
            except BuildError as e:
                raise ConfigError(str(e)) from e
            values["architecture"] = _ensure("architecture", kwargs, str, None)
        else:
            values["architecture"] = _ensure("architecture", kwargs, str, cls.architecture)
        values["norm_mode"] = _enum(NormMode, "norm_mode", _ensure("norm_mode", kwargs, str, cls.norm_mode.value))
        modes = _ensure("modes", kwargs, list, None)
        if modes is not None:
            values["modes"] = tuple(_enum(NormMode, "modes", mode) for mode in modes)
        values["log_scale"] = _ensure("log_scale", kwargs, bool, cls.log_scale)
        values["optimizer"] = _enum(OptimizerKind, "optimizer", _ensure("optimizer", kwargs, str, cls.optimizer.value))
        grid = _ensure("lr_grid", kwargs, list, list(cls.lr_grid))
        enforce(all(isinstance(lr, (int, float)) and not isinstance(lr, bool) for lr in grid), "lr_grid must hold numbers", ConfigError)
        values["lr_grid"] = tuple(float(lr) for lr in grid)
        values["schedule"] = _enum(Schedule, "schedule", _ensure("schedule", kwargs, str, cls.schedule.value))
        for key in ("epochs", "batch_size", "seed", "init_batch_size", "workers"):
            values[key] = _ensure(key, kwargs, int, getattr(cls, key))
        for key in ("init_eps", "bn_eps", "bn_momentum", "error_threshold"):
            values[key] = float(_ensure(key, kwargs, (int, float), getattr(cls, key)))
        values["polyak"] = _ensure("polyak", kwargs, bool, cls.polyak)
        ema_decay = _ensure("ema_decay", kwargs, (int, float), None)
        values["ema_decay"] = None if ema_decay is None else float(ema_decay)
        values["out"] = _ensure("out", kwargs, str, cls.out)
        _check_unknown("top-level", kwargs)
        return cls(**values)

    def override(self, **kwargs: Any) -> "ExperimentConfig":
        """
        Apply command-line overrides; None values are ignored.

        'lr' replaces the grid with a single rate and 'mode' sets norm_mode.
        """
        updates = {key: value for key, value in kwargs.items() if value is not None}
        if "lr" in updates:
            updates["lr_grid"] = (float(updates.pop("lr")),)
        if "mode" in updates:
            updates["norm_mode"] = _enum(NormMode, "mode", updates.pop("mode"))
        unknown = set(updates) - set(self.__dataclass_fields__)
        enforce(not unknown, f"Unknown overrides: {', '.join(sorted(unknown))}", ConfigError)
        return replace(self, **updates)

    @property
    def base_lr(self) -> float:
        """Learning rate of single runs."""
        return self.lr_grid[0]


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read a JSON (or YAML) configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Configuration file {path} does not exist")
    try:
        with open(path, "r", encoding="utf-8") as stream:
            if path.suffix in (".yaml", ".yml"):
                data = yaml_load(stream)
            else:
                data = json.load(stream)
    except Exception as e:  # pylint: disable=broad-except
        raise ConfigError(f"Cannot parse configuration {path}: {e}") from e
    return ExperimentConfig.from_dict(data or {}, base_dir=path.parent)
