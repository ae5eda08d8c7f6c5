"""Experiment configuration: one human-editable YAML tree per run.

Schema (config_version: 1)::

    config_version: 1
    model:
      input_shape: [1, 4, 4]
      init_seed: 7
      layers:
        - {id: c1, kind: conv2d, in_channels: 1, out_channels: 8, kernel: 3, padding: 1}
        - {id: a1, kind: relu}
        - {id: fl, kind: flatten}
        - {id: f1, kind: linear, in_features: 128, out_features: 4}
    noise:
      distribution: gaussian        # gaussian | uniform
      mode: multiplicative          # multiplicative | additive
      sigma: 0.05                   # r1: ... for uniform
      seed: 123
    noise_grid:                     # optional, for `compare`: one row each
      - {distribution: gaussian, mode: multiplicative, sigma: 0.05}
      - {distribution: uniform, mode: additive, r1: 0.01}
    train:
      epochs: 3
      learning_rate: 0.05
      batch_size: 64
      seed: 11
      optimizer: sgd                # sgd | sgd_momentum
    pretrain:                       # optional; defaults to the train section
      epochs: 5
      learning_rate: 0.05
    pretrained: path/to/model.saft  # optional; skips pretraining when set
    k: 3
    sensitivity_repeat: 1           # noise draws pooled per layer
    eval_seed: 99
    dataset:
      kind: blobs                   # blobs | idx
      num_classes: 4
      per_class: 500
      dim: 16
      spread: 1.0
      seed: 5
      reshape: [1, 4, 4]            # optional view of flat features
      # idx kind instead uses: train_images, train_labels, test_images, test_labels
    out_dir: runs/demo

Flags override file values; `--seed` replaces both the training and the
noise seed so one flag pins a whole run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import yaml

from .datasets import LabeledBatch, gen_blobs, load_idx
from .model import BuildError, LayerSpec
from .noise import NoiseSpec
from .trainer import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Configuration file is invalid; message names the offending key."""


@dataclass(frozen=True)
class DatasetConfig:
    kind: str
    num_classes: int = 4
    per_class: int = 500
    dim: int = 16
    spread: float = 1.0
    seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    reshape: Optional[tuple[int, ...]] = None

    def load(self) -> tuple[LabeledBatch, LabeledBatch]:
        if self.kind == "blobs":
            train, test = gen_blobs(
                self.num_classes, self.per_class, self.dim, self.spread, self.seed
            )
        else:
            train = load_idx(self.train_images, self.train_labels)
            test = load_idx(self.test_images, self.test_labels)
        if self.reshape is not None:
            train = train.reshaped(self.reshape)
            test = test.reshaped(self.reshape)
        return train, test


@dataclass(frozen=True)
class ExperimentConfig:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    init_seed: int
    noise: NoiseSpec
    noise_grid: tuple[NoiseSpec, ...]
    train: TrainConfig
    pretrain: TrainConfig
    pretrained: str
    k: int
    sensitivity_repeat: int
    eval_seed: int
    dataset: DatasetConfig
    out_dir: str


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return mapping[key]


def _reject_unknown(mapping: dict, allowed: set[str], where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


_LAYER_KEYS = {
    "id", "kind", "in_features", "out_features",
    "in_channels", "out_channels", "kernel", "stride", "padding",
}


def _parse_layer(entry: dict, index: int) -> LayerSpec:
    where = f"model.layers[{index}]"
    if not isinstance(entry, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(entry).__name__}")
    _reject_unknown(entry, _LAYER_KEYS, where)
    try:
        return LayerSpec(
            id=str(_require(entry, "id", where)),
            kind=str(_require(entry, "kind", where)),
            in_features=int(entry.get("in_features", 0)),
            out_features=int(entry.get("out_features", 0)),
            in_channels=int(entry.get("in_channels", 0)),
            out_channels=int(entry.get("out_channels", 0)),
            kernel=int(entry.get("kernel", 0)),
            stride=int(entry.get("stride", 1)),
            padding=int(entry.get("padding", 0)),
        )
    except BuildError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_noise(entry: dict, where: str, default_seed: int = 0) -> NoiseSpec:
    _reject_unknown(
        entry, {"distribution", "mode", "sigma", "r1", "scale", "seed", "perturb_bias"}, where
    )
    distribution = str(_require(entry, "distribution", where))
    scale_keys = [k for k in ("sigma", "r1", "scale") if k in entry]
    if len(scale_keys) != 1:
        raise ConfigError(f"{where}: give exactly one of sigma / r1 / scale, got {scale_keys}")
    if scale_keys[0] == "sigma" and distribution != "gaussian":
        raise ConfigError(f"{where}: sigma is the gaussian parameter, use r1 for uniform")
    if scale_keys[0] == "r1" and distribution != "uniform":
        raise ConfigError(f"{where}: r1 is the uniform parameter, use sigma for gaussian")
    try:
        return NoiseSpec(
            distribution=distribution,
            mode=str(_require(entry, "mode", where)),
            scale=float(entry[scale_keys[0]]),
            seed=int(entry.get("seed", default_seed)),
            perturb_bias=bool(entry.get("perturb_bias", False)),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_train(entry: dict, where: str) -> TrainConfig:
    _reject_unknown(
        entry,
        {"epochs", "learning_rate", "batch_size", "seed", "optimizer", "momentum"},
        where,
    )
    try:
        return TrainConfig(
            epochs=int(_require(entry, "epochs", where)),
            learning_rate=float(_require(entry, "learning_rate", where)),
            batch_size=int(_require(entry, "batch_size", where)),
            seed=int(entry.get("seed", 0)),
            optimizer=str(entry.get("optimizer", "sgd")),
            momentum=float(entry.get("momentum", 0.9)),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_dataset(entry: dict) -> DatasetConfig:
    where = "dataset"
    kind = str(_require(entry, "kind", where))
    if kind == "blobs":
        _reject_unknown(
            entry, {"kind", "num_classes", "per_class", "dim", "spread", "seed", "reshape"}, where
        )
        reshape = entry.get("reshape")
        return DatasetConfig(
            kind="blobs",
            num_classes=int(entry.get("num_classes", 4)),
            per_class=int(entry.get("per_class", 500)),
            dim=int(entry.get("dim", 16)),
            spread=float(entry.get("spread", 1.0)),
            seed=int(entry.get("seed", 0)),
            reshape=tuple(int(d) for d in reshape) if reshape else None,
        )
    if kind == "idx":
        _reject_unknown(
            entry,
            {"kind", "train_images", "train_labels", "test_images", "test_labels", "reshape"},
            where,
        )
        reshape = entry.get("reshape")
        return DatasetConfig(
            kind="idx",
            train_images=str(_require(entry, "train_images", where)),
            train_labels=str(_require(entry, "train_labels", where)),
            test_images=str(_require(entry, "test_images", where)),
            test_labels=str(_require(entry, "test_labels", where)),
            reshape=tuple(int(d) for d in reshape) if reshape else None,
        )
    raise ConfigError(f"{where}.kind must be 'blobs' or 'idx', got {kind!r}")


_TOP_KEYS = {
    "config_version", "model", "noise", "noise_grid", "train", "pretrain",
    "pretrained", "k", "sensitivity_repeat", "eval_seed", "dataset", "out_dir",
}


def parse_config(tree: dict) -> ExperimentConfig:
    if not isinstance(tree, dict):
        raise ConfigError(f"config root must be a mapping, got {type(tree).__name__}")
    _reject_unknown(tree, _TOP_KEYS, "config")
    version = _require(tree, "config_version", "config")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version must be {CONFIG_VERSION}, got {version!r}")

    model_tree = _require(tree, "model", "config")
    _reject_unknown(model_tree, {"input_shape", "init_seed", "layers"}, "model")
    raw_layers = _require(model_tree, "layers", "model")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ConfigError("model.layers must be a non-empty list")
    layers = tuple(_parse_layer(entry, i) for i, entry in enumerate(raw_layers))
    input_shape = tuple(int(d) for d in _require(model_tree, "input_shape", "model"))

    noise = _parse_noise(_require(tree, "noise", "config"), "noise")
    grid_entries = tree.get("noise_grid")
    if grid_entries is not None:
        if not isinstance(grid_entries, list) or not grid_entries:
            raise ConfigError("noise_grid must be a non-empty list")
        noise_grid = tuple(
            _parse_noise(e, f"noise_grid[{i}]", default_seed=noise.seed)
            for i, e in enumerate(grid_entries)
        )
    else:
        noise_grid = (noise,)

    train = _parse_train(_require(tree, "train", "config"), "train")
    pretrain_tree = tree.get("pretrain")
    if pretrain_tree is not None:
        base = {
            "epochs": train.epochs,
            "learning_rate": train.learning_rate,
            "batch_size": train.batch_size,
            "seed": train.seed,
            "optimizer": train.optimizer,
            "momentum": train.momentum,
        }
        base.update(pretrain_tree)
        pretrain = _parse_train(base, "pretrain")
    else:
        pretrain = train

    k = int(tree.get("k", 1))
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    repeat = int(tree.get("sensitivity_repeat", 1))
    if repeat < 1:
        raise ConfigError(f"sensitivity_repeat must be >= 1, got {repeat}")

    return ExperimentConfig(
        layers=layers,
        input_shape=input_shape,
        init_seed=int(model_tree.get("init_seed", 0)),
        noise=noise,
        noise_grid=noise_grid,
        train=train,
        pretrain=pretrain,
        pretrained=str(tree.get("pretrained", "")),
        k=k,
        sensitivity_repeat=repeat,
        eval_seed=int(tree.get("eval_seed", 0)),
        dataset=_parse_dataset(_require(tree, "dataset", "config")),
        out_dir=str(tree.get("out_dir", "runs")),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            tree = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return parse_config(tree)


def apply_overrides(
    cfg: ExperimentConfig,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
    k: Optional[int] = None,
) -> ExperimentConfig:
    """Flag-level overrides; --seed pins both noise and training streams."""
    if seed is not None:
        cfg = replace(
            cfg,
            noise=cfg.noise.with_seed(seed),
            noise_grid=tuple(s.with_seed(seed) for s in cfg.noise_grid),
            train=replace(cfg.train, seed=seed),
            pretrain=replace(cfg.pretrain, seed=seed),
        )
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    if k is not None:
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        cfg = replace(cfg, k=k)
    return cfg
