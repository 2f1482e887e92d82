"""Declarative experiment configuration.

A config is a YAML file with six blocks (dataset, projection, model, loss,
optimizer, runtime). Every key has a default, unknown keys are rejected,
and the fully resolved config is echoed into every checkpoint and metrics
record so results stay reproducible. ``DATASET_ROOT`` in the environment
overrides ``dataset.root``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .losses import LossConfig, class_weights_from_frequencies
from .network import ModelConfig
from .projection import KnnConfig, ProjectionConfig
from .scan_io import (ClassConfig, SplitSpec, kitti_default_split,
                      poss_default_split, semantic_kitti_classes,
                      semantic_poss_classes)
from .toy_data import load_toy_meta

DATASET_KINDS = ("kitti", "poss", "toy")
SCHEDULES = ("cosine", "cyclic")


@dataclass
class DatasetBlock:
    root: str = "."
    kind: str = "kitti"
    train_sequences: list[str] | None = None    # override the preset split
    val_sequences: list[str] | None = None
    test_sequences: list[str] | None = None
    unknown_raw_labels: str = "ignore"          # ignore | error
    compute_frequencies: bool = False           # count train labels for weights
    augment: bool = True                        # train-time augmentation
    augment_yaw_max: float = 3.141592653589793
    augment_drop_min: float = 0.0
    augment_drop_max: float = 0.1
    augment_jitter_sigma: float = 0.03
    augment_jitter_clip: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
        if self.unknown_raw_labels not in ("ignore", "error"):
            raise ConfigError("dataset.unknown_raw_labels must be ignore|error")


@dataclass
class ProjectionBlock:
    height: int = 64
    width: int = 512
    fov_up_deg: float = 3.0
    fov_down_deg: float = 25.0
    means: list[float] | None = None    # per input channel; computed when null
    stds: list[float] | None = None
    knn_k: int = 5
    knn_window: int = 5
    knn_cutoff: float = 1.0
    knn_sigma: float = 1.0

    def __post_init__(self) -> None:
        for name in ("means", "stds"):
            v = getattr(self, name)
            if v is not None and len(v) != 5:
                raise ConfigError(f"projection.{name} must list 5 values")


@dataclass
class ModelBlock:
    num_classes: int | None = None      # resolved from the dataset when null
    activation: str = "hardswish"
    input_kernel: int = 3
    stage_channels: list[int] = field(default_factory=lambda: [64, 128, 128, 128])
    stage_blocks: list[int] = field(default_factory=lambda: [3, 4, 6, 3])
    stage_strides: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    head_channels: list[int] = field(default_factory=lambda: [256, 128])
    aux_mode: str = "plan_b"
    aux_stages: list[int] = field(default_factory=lambda: [2, 3, 4])


@dataclass
class LossBlock:
    alpha: float = 1.0
    beta: float = 1.5
    gamma: float = 1.0
    lambda_aux: float = 1.0
    theta0: int = 3
    class_weighting: str = "inv_log"    # inv_log | uniform

    def __post_init__(self) -> None:
        if self.class_weighting not in ("inv_log", "uniform"):
            raise ConfigError("loss.class_weighting must be inv_log|uniform")


@dataclass
class OptimizerBlock:
    kind: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1.0e-4
    schedule: str = "cosine"
    lr: float = 1.0e-2          # initial rate (cosine) / cycle peak (cyclic)
    lr_min: float = 0.0
    epochs: int = 100           # per cycle when schedule is cyclic
    cycles: int = 1

    def __post_init__(self) -> None:
        if self.kind != "sgd":
            raise ConfigError("optimizer.kind supports only sgd")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"optimizer.schedule must be one of {SCHEDULES}")
        if self.epochs < 1 or self.cycles < 1:
            raise ConfigError("optimizer.epochs and cycles must be >= 1")
        if self.lr <= 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ConfigError("need 0 <= lr_min <= lr and lr > 0")

    @property
    def total_epochs(self) -> int:
        return self.epochs * (self.cycles if self.schedule == "cyclic" else 1)


@dataclass
class RuntimeBlock:
    seed: int = 42
    batch_size: int = 8
    workers: int = 0
    device: str = "cpu"
    checkpoint_dir: str = "runs/default"
    log_interval: int = 10
    early_stop_miou: float | None = None    # stop once val mIoU reaches this

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("runtime.batch_size must be >= 1")
        if self.workers < 0:
            raise ConfigError("runtime.workers must be >= 0")


_BLOCKS = {
    "dataset": DatasetBlock,
    "projection": ProjectionBlock,
    "model": ModelBlock,
    "loss": LossBlock,
    "optimizer": OptimizerBlock,
    "runtime": RuntimeBlock,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    projection: ProjectionBlock = field(default_factory=ProjectionBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    loss: LossBlock = field(default_factory=LossBlock)
    optimizer: OptimizerBlock = field(default_factory=OptimizerBlock)
    runtime: RuntimeBlock = field(default_factory=RuntimeBlock)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(data) - set(_BLOCKS)
        if unknown:
            raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
        blocks = {}
        for name, block_cls in _BLOCKS.items():
            entries = data.get(name, {}) or {}
            if not isinstance(entries, dict):
                raise ConfigError(f"config block {name!r} must be a mapping")
            known = {f.name for f in dataclasses.fields(block_cls)}
            bad = set(entries) - known
            if bad:
                raise ConfigError(
                    f"unknown keys in {name!r} block: {sorted(bad)}")
            try:
                blocks[name] = block_cls(**entries)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} block: {exc}") from exc
        return cls(**blocks)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name))
                for name in _BLOCKS}

    def replaced(self, overrides: dict[str, object]) -> "ExperimentConfig":
        """New config with dotted-key overrides (e.g. 'model.input_kernel')."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            parts = dotted.split(".")
            if len(parts) != 2:
                raise ConfigError(f"override key must be block.field: {dotted!r}")
            block, key = parts
            if block not in data:
                raise ConfigError(f"unknown config block in override: {block!r}")
            data[block][key] = value
        return ExperimentConfig.from_dict(data)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def apply_env_overrides(cfg: ExperimentConfig,
                        env: dict | None = None) -> ExperimentConfig:
    """DATASET_ROOT, when set, overrides dataset.root."""
    env = os.environ if env is None else env
    root = env.get("DATASET_ROOT")
    if root:
        return cfg.replaced({"dataset.root": root})
    return cfg


def config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Dotted keys whose values differ between two config echoes."""
    diffs = []
    for key in sorted(set(a) | set(b)):
        dotted = f"{prefix}{key}"
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            diffs += config_diff(va, vb, prefix=dotted + ".")
        elif va != vb:
            diffs.append(f"{dotted}: {va!r} != {vb!r}")
    return diffs


# ---------------------------------------------------------------------------
# Resolution into module-level configs
# ---------------------------------------------------------------------------


def class_config_for(cfg: ExperimentConfig) -> ClassConfig:
    kind = cfg.dataset.kind
    if kind == "kitti":
        return semantic_kitti_classes()
    if kind == "poss":
        return semantic_poss_classes()
    return load_toy_meta(cfg.dataset.root).class_config


def split_for(cfg: ExperimentConfig) -> SplitSpec:
    kind = cfg.dataset.kind
    if kind == "kitti":
        base = kitti_default_split()
    elif kind == "poss":
        base = poss_default_split()
    else:
        base = load_toy_meta(cfg.dataset.root).split
    d = cfg.dataset
    return SplitSpec(
        d.train_sequences if d.train_sequences is not None else base.train_sequences,
        d.val_sequences if d.val_sequences is not None else base.val_sequences,
        d.test_sequences if d.test_sequences is not None else base.test_sequences,
    )


def projection_config(cfg: ExperimentConfig) -> ProjectionConfig:
    p = cfg.projection
    return ProjectionConfig.from_degrees(p.height, p.width,
                                         p.fov_up_deg, p.fov_down_deg)


def knn_config(cfg: ExperimentConfig) -> KnnConfig:
    p = cfg.projection
    return KnnConfig(k=p.knn_k, window=p.knn_window,
                     range_cutoff=p.knn_cutoff, gaussian_sigma=p.knn_sigma)


def model_config(cfg: ExperimentConfig, num_classes: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        num_classes=m.num_classes if m.num_classes is not None else num_classes,
        activation=m.activation, input_kernel=m.input_kernel,
        stage_channels=tuple(m.stage_channels),
        stage_blocks=tuple(m.stage_blocks),
        stage_strides=tuple(m.stage_strides),
        head_channels=tuple(m.head_channels),
        aux_mode=m.aux_mode, aux_stages=tuple(m.aux_stages))


def loss_config(cfg: ExperimentConfig, class_cfg: ClassConfig) -> LossConfig:
    lb = cfg.loss
    if lb.class_weighting == "inv_log":
        weights = class_weights_from_frequencies(class_cfg.frequencies,
                                                 class_cfg.ignore_id)
    else:
        weights = tuple(np.ones(class_cfg.num_classes))
    return LossConfig(alpha=lb.alpha, beta=lb.beta, gamma=lb.gamma,
                      lambda_aux=lb.lambda_aux, theta0=lb.theta0,
                      class_weights=weights, ignore_id=class_cfg.ignore_id)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def preset(name: str, root: str = ".") -> ExperimentConfig:
    """Ready-to-edit configurations for the supported dataset kinds."""
    if name == "kitti":
        return ExperimentConfig.from_dict({
            "dataset": {"root": root, "kind": "kitti"},
            "optimizer": {"schedule": "cosine", "lr": 1.0e-2, "lr_min": 0.0,
                          "epochs": 100, "cycles": 1},
            "runtime": {"checkpoint_dir": "runs/kitti"},
        })
    if name == "poss":
        return ExperimentConfig.from_dict({
            "dataset": {"root": root, "kind": "poss"},
            "projection": {"width": 1024, "fov_up_deg": 7.0,
                           "fov_down_deg": 16.0},
            "optimizer": {"schedule": "cyclic", "lr": 1.0e-3,
                          "lr_min": 1.0e-5, "epochs": 45, "cycles": 3},
            "runtime": {"checkpoint_dir": "runs/poss"},
        })
    if name == "toy":
        return ExperimentConfig.from_dict({
            "dataset": {"root": root, "kind": "toy", "augment": False},
            "model": {"stage_channels": [8, 16, 16, 16],
                      "stage_blocks": [1, 1, 1, 1],
                      "head_channels": [32, 16],
                      "input_kernel": 1, "aux_mode": "plan_b"},
            "optimizer": {"schedule": "cosine", "lr": 0.1, "lr_min": 0.0,
                          "epochs": 30, "cycles": 1},
            "runtime": {"checkpoint_dir": "runs/toy", "batch_size": 8,
                        "early_stop_miou": 0.95},
        })
    raise ConfigError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# Reference page
# ---------------------------------------------------------------------------

_BLOCK_NOTES = {
    "dataset": "Where the scans live and how labels are interpreted.",
    "projection": "Range-image geometry, input normalization, KNN cleanup.",
    "model": "Network architecture.",
    "loss": "Composite loss weights.",
    "optimizer": "SGD and learning-rate schedule settings.",
    "runtime": "Seeding, batching, devices, checkpoints, logging.",
}

_FIELD_NOTES = {
    "dataset.root": "Dataset root containing sequences/<SS>/...; "
                    "DATASET_ROOT overrides it.",
    "dataset.kind": "kitti | poss | toy.",
    "dataset.train_sequences": "Override the preset train sequences.",
    "dataset.val_sequences": "Override the preset val sequences.",
    "dataset.test_sequences": "Override the preset test sequences.",
    "dataset.unknown_raw_labels": "ignore folds unknown raw ids into the "
                                  "ignore class; error fails loudly.",
    "dataset.compute_frequencies": "Count class frequencies from the train "
                                   "split for loss weighting.",
    "dataset.augment": "Enable training-time augmentation.",
    "dataset.augment_yaw_max": "Yaw rotations drawn from [-max, max] radians.",
    "dataset.augment_drop_min": "Lower bound of the per-scan dropout rate.",
    "dataset.augment_drop_max": "Upper bound of the per-scan dropout rate.",
    "dataset.augment_jitter_sigma": "Std of the xyz jitter in meters.",
    "dataset.augment_jitter_clip": "Absolute clip of the jitter in meters.",
    "projection.height": "Range-image rows.",
    "projection.width": "Range-image columns (512/1024/2048 typical).",
    "projection.fov_up_deg": "Vertical field of view above the horizon.",
    "projection.fov_down_deg": "Vertical field of view below the horizon "
                               "(positive magnitude).",
    "projection.means": "Per-channel normalization means; computed from the "
                        "train split when null and echoed into checkpoints.",
    "projection.stds": "Per-channel normalization stds; computed when null.",
    "projection.knn_k": "Neighbors in the point-label cleanup vote.",
    "projection.knn_window": "Odd pixel window searched per point.",
    "projection.knn_cutoff": "Max |range difference| of voting neighbors (m).",
    "projection.knn_sigma": "Gaussian falloff of vote weights (m).",
    "model.num_classes": "Logit count; resolved from the dataset when null.",
    "model.activation": "relu | silu | hardswish, applied globally.",
    "model.input_kernel": "1 or 3; kernel of the stem and head blocks.",
    "model.stage_channels": "Widths of the four residual stages.",
    "model.stage_blocks": "BasicBlock count per stage.",
    "model.stage_strides": "Cumulative output stride per stage.",
    "model.head_channels": "Widths of the two head blocks before the 1x1 "
                           "class projection.",
    "model.aux_mode": "none | plan_a (native-resolution heads) | plan_b "
                      "(full-resolution heads).",
    "model.aux_stages": "Stages carrying auxiliary heads (subset of 2,3,4).",
    "loss.alpha": "Weight of the weighted cross-entropy term.",
    "loss.beta": "Weight of the Lovász-Softmax term.",
    "loss.gamma": "Weight of the boundary term.",
    "loss.lambda_aux": "Weight of the summed auxiliary losses.",
    "loss.theta0": "Odd pooling window of the boundary extractor.",
    "loss.class_weighting": "inv_log (1/log(1.02+freq)) or uniform.",
    "optimizer.kind": "Only sgd is supported.",
    "optimizer.momentum": "SGD momentum.",
    "optimizer.weight_decay": "L2 weight decay.",
    "optimizer.schedule": "cosine (lr -> lr_min once) or cyclic "
                          "(lr_min <-> lr per cycle).",
    "optimizer.lr": "Initial (cosine) or per-cycle peak (cyclic) rate.",
    "optimizer.lr_min": "Floor of the schedule.",
    "optimizer.epochs": "Epochs (per cycle when cyclic).",
    "optimizer.cycles": "Cycle count for the cyclic schedule.",
    "runtime.seed": "Global seed; training is deterministic given it.",
    "runtime.batch_size": "Scans per optimization step.",
    "runtime.workers": "Data-loading workers (0 = in-process).",
    "runtime.device": "cpu or cuda[:N].",
    "runtime.checkpoint_dir": "Where checkpoints and metric logs are written.",
    "runtime.log_interval": "Steps between loss-breakdown log records.",
    "runtime.early_stop_miou": "Stop training once val mIoU reaches this.",
}


def config_reference() -> str:
    """Markdown reference of every config key with its default."""
    defaults = ExperimentConfig().to_dict()
    lines = ["# Configuration reference", "",
             "All keys are optional; the defaults below apply. Unknown keys "
             "are rejected.", ""]
    for block, note in _BLOCK_NOTES.items():
        lines += [f"## `{block}`", "", note, "",
                  "| key | default | description |",
                  "| --- | --- | --- |"]
        for key, value in defaults[block].items():
            doc = _FIELD_NOTES.get(f"{block}.{key}", "")
            lines.append(f"| `{key}` | `{value!r}` | {doc} |")
        lines.append("")
    return "\n".join(lines)
