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

"""Tests for the experiment configuration."""

import json
from pathlib import Path

import pytest

from packages.valory.weightnorm.exceptions import ConfigError
from packages.valory.weightnorm.models import (
    DEFAULT_LR_GRID,
    DatasetKind,
    DatasetSpec,
    ExperimentConfig,
    Schedule,
    load_config,
)
from packages.valory.weightnorm.network import LayerKind, NormMode
from packages.valory.weightnorm.optim import OptimizerKind


def test_defaults() -> None:
    """Test the desk-scale defaults."""
    cfg = ExperimentConfig.from_dict({})
    assert cfg.dataset.kind is DatasetKind.SYNTHETIC
    assert cfg.architecture == "mlp-small"
    assert cfg.lr_grid == DEFAULT_LR_GRID
    assert cfg.modes == tuple(NormMode)
    assert cfg.optimizer is OptimizerKind.ADAM
    assert cfg.batch_size == 100
    assert cfg.base_lr == 0.0003


def test_full_mapping(tmp_path: Path) -> None:
    """Test parsing of every section, with IDX paths resolved against the file."""
    data = {
        "dataset": {
            "kind": "idx",
            "train_images": "mnist/train-images",
            "train_labels": "mnist/train-labels",
            "test_images": "/abs/test-images",
            "test_labels": "/abs/test-labels",
            "train_size": None,
            "zca": True,
        },
        "layers": [
            {"kind": "dense", "fan_in": 784, "fan_out": 10, "norm_mode": "weightnorm"},
        ],
        "modes": ["standard", "weightnorm"],
        "optimizer": "adamax",
        "lr_grid": [0.002, 1],
        "schedule": "two_phase",
        "epochs": 3,
        "polyak": True,
        "ema_decay": 0.99,
        "seed": 4,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    cfg = load_config(path)
    assert cfg.architecture is None
    assert cfg.layers[0].kind is LayerKind.DENSE
    assert cfg.dataset.train_images == str(tmp_path / "mnist" / "train-images")
    assert cfg.dataset.test_images == "/abs/test-images"
    assert cfg.dataset.train_size is None
    assert cfg.dataset.test_size == 1000
    assert cfg.modes == (NormMode.STANDARD, NormMode.WEIGHT_NORM)
    assert cfg.lr_grid == (0.002, 1.0)
    assert cfg.schedule is Schedule.TWO_PHASE
    assert cfg.ema_decay == 0.99


def test_yaml(tmp_path: Path) -> None:
    """Test that YAML files are accepted."""
    path = tmp_path / "config.yaml"
    path.write_text("epochs: 2\nnorm_mode: meanonly\ndataset:\n  n_train: 50\n", encoding="utf-8")
    cfg = load_config(path)
    assert cfg.epochs == 2
    assert cfg.norm_mode is NormMode.MEAN_ONLY
    assert cfg.dataset.n_train == 50


@pytest.mark.parametrize(
    "data",
    [
        {"epochs": 0},
        {"epochs": "3"},
        {"epochs": True},
        {"lr_grid": []},
        {"lr_grid": [-0.1]},
        {"lr_grid": ["fast"]},
        {"norm_mode": "layernorm"},
        {"modes": []},
        {"architecture": "resnet"},
        {"layers": [{"kind": "lstm"}]},
        {"layers": [{"kind": "dense", "fan_in": 2, "fan_out": 1}], "architecture": "mlp"},
        {"batch_size": 1},
        {"ema_decay": 1.0},
        {"unknown": 1},
        {"dataset": {"kind": "idx"}},
        {"dataset": {"n_train": 1}},
        {"dataset": {"colour": "red"}},
    ],
)
def test_invalid(data: dict) -> None:
    """Test that invalid configurations are config errors."""
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_single_mode_batch_size() -> None:
    """Test that batch size 1 is fine when batch normalization is not run."""
    cfg = ExperimentConfig.from_dict({"batch_size": 1, "modes": ["weightnorm"], "norm_mode": "weightnorm"})
    assert cfg.batch_size == 1


def test_load_errors(tmp_path: Path) -> None:
    """Test missing and unparsable files."""
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(broken)


def test_override() -> None:
    """Test command-line overrides."""
    cfg = ExperimentConfig().override(lr=0.01, mode="batchnorm", epochs=None, seed=3)
    assert cfg.lr_grid == (0.01,)
    assert cfg.norm_mode is NormMode.BATCH_NORM
    assert cfg.epochs == 10
    assert cfg.seed == 3
    with pytest.raises(ConfigError):
        cfg.override(mode="groupnorm")
    with pytest.raises(ConfigError):
        cfg.override(colour="red")
    with pytest.raises(ConfigError):
        cfg.override(epochs=0)


def test_dataset_spec_validation() -> None:
    """Test direct construction checks."""
    with pytest.raises(ConfigError):
        DatasetSpec(kind=DatasetKind.IDX, train_images="a", train_labels="b", test_images="c", test_labels="d", train_size=1)
    with pytest.raises(ConfigError):
        DatasetSpec(zca_eps=0.0)
