"""Segmentation network: a small-kernel convolutional stem, four residual
BasicBlock stages, a parameter-free decoder that bilinearly upsamples and
concatenates every stage's features, and a convolutional classification
head. Optional auxiliary heads on stages 2-4 deepen supervision during
training and are skipped entirely in eval mode, so they never affect
inference outputs or inference parameter counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

CHECKPOINT_VERSION = 1

ACTIVATIONS = {"relu": nn.ReLU, "silu": nn.SiLU, "hardswish": nn.Hardswish}
AUX_MODES = ("none", "plan_a", "plan_b")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``stage_strides`` are cumulative output strides; consecutive ratios are
    the convolution strides of each stage's first block. ``input_kernel``
    switches the stem and the two head blocks between 1x1 and 3x3
    convolutions (the final class projection is always 1x1).
    """

    num_classes: int = 20
    in_channels: int = 5
    activation: str = "hardswish"
    input_kernel: int = 3
    stage_channels: tuple[int, ...] = (64, 128, 128, 128)
    stage_blocks: tuple[int, ...] = (3, 4, 6, 3)
    stage_strides: tuple[int, ...] = (1, 2, 4, 8)
    head_channels: tuple[int, int] = (256, 128)
    aux_mode: str = "none"
    aux_stages: tuple[int, ...] = (2, 3, 4)

    def __post_init__(self) -> None:
        self.stage_channels = tuple(self.stage_channels)
        self.stage_blocks = tuple(self.stage_blocks)
        self.stage_strides = tuple(self.stage_strides)
        self.head_channels = tuple(self.head_channels)
        self.aux_stages = tuple(self.aux_stages)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.input_kernel not in (1, 3):
            raise ConfigError("input_kernel must be 1 or 3")
        if not (len(self.stage_channels) == len(self.stage_blocks)
                == len(self.stage_strides) == 4):
            raise ConfigError("expected exactly four stages")
        if len(self.head_channels) != 2:
            raise ConfigError("head_channels must list the two head blocks")
        if any(s2 < s1 for s1, s2 in zip(self.stage_strides,
                                         self.stage_strides[1:])):
            raise ConfigError("stage_strides must be nondecreasing")
        prev = 1
        for s in self.stage_strides:
            if s % prev != 0:
                raise ConfigError("stage stride ratios must be integers")
            prev = s
        if self.aux_mode not in AUX_MODES:
            raise ConfigError(f"unknown aux_mode {self.aux_mode!r}")
        if not set(self.aux_stages) <= {2, 3, 4}:
            raise ConfigError("aux_stages must be a subset of {2, 3, 4}")

    @property
    def max_stride(self) -> int:
        return self.stage_strides[-1]


@dataclass
class SegmentationOutput:
    """Network outputs: main logits plus zero or more auxiliary logit maps
    with their cumulative strides. Indexing a batched output yields the
    per-image view used by the loss functions."""

    main_logits: torch.Tensor
    aux_logits: list[torch.Tensor] = field(default_factory=list)
    aux_strides: list[int] = field(default_factory=list)
    aux_mode: str = "none"

    def __getitem__(self, i: int) -> "SegmentationOutput":
        if self.main_logits.dim() != 4:
            raise IndexError("output is not batched")
        return SegmentationOutput(self.main_logits[i],
                                  [a[i] for a in self.aux_logits],
                                  list(self.aux_strides), self.aux_mode)


def bilinear_upsample(feat: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear interpolation to ``size`` (identity when already there).

    Accepts (F, h, w) or (B, F, h, w); the source must not exceed the target.
    """
    squeeze = feat.dim() == 3
    x = feat.unsqueeze(0) if squeeze else feat
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return feat
    if h > size[0] or w > size[1]:
        raise ValueError(f"source {h}x{w} exceeds target {size[0]}x{size[1]}")
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return out.squeeze(0) if squeeze else out


class ConvBlock(nn.Sequential):
    """conv(k) + batch norm + activation."""

    def __init__(self, cin: int, cout: int, kernel: int, activation: str,
                 stride: int = 1):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2,
                      bias=False),
            nn.BatchNorm2d(cout),
            ACTIVATIONS[activation](),
        )


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with a residual connection; the shortcut is a
    strided 1x1 projection whenever shape or stride changes."""

    def __init__(self, cin: int, cout: int, activation: str, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act = ACTIVATIONS[activation]()
        if stride != 1 or cin != cout:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.act(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.act(out + self.shortcut(x))


class AuxHead(nn.Module):
    """Training-only classifier: one 3x3 conv block plus a 1x1 projection."""

    def __init__(self, channels: int, num_classes: int, activation: str):
        super().__init__()
        self.block = ConvBlock(channels, channels, 3, activation)
        self.project = nn.Conv2d(channels, num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.block(x))


class RangeSegNet(nn.Module):
    """Encoder/decoder segmentation network over 5-channel range images."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.stage_channels[0]
        k = cfg.input_kernel
        self.stem = nn.Sequential(
            ConvBlock(cfg.in_channels, c0, k, cfg.activation),
            ConvBlock(c0, c0, k, cfg.activation),
            ConvBlock(c0, c0, k, cfg.activation),
        )
        stages = []
        cin = c0
        prev_stride = 1
        for cout, blocks, cum_stride in zip(cfg.stage_channels, cfg.stage_blocks,
                                            cfg.stage_strides):
            stride = cum_stride // prev_stride
            layers = [BasicBlock(cin, cout, cfg.activation, stride)]
            layers += [BasicBlock(cout, cout, cfg.activation)
                       for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            cin = cout
            prev_stride = cum_stride
        self.stages = nn.ModuleList(stages)

        fused = sum(cfg.stage_channels)
        h0, h1 = cfg.head_channels
        self.head = nn.Sequential(
            ConvBlock(fused, h0, k, cfg.activation),
            ConvBlock(h0, h1, k, cfg.activation),
            nn.Conv2d(h1, cfg.num_classes, 1),
        )

        self.aux_heads = nn.ModuleDict()
        if cfg.aux_mode != "none":
            for stage in cfg.aux_stages:
                self.aux_heads[str(stage)] = AuxHead(
                    cfg.stage_channels[stage - 1], cfg.num_classes,
                    cfg.activation)

    def forward(self, x: torch.Tensor) -> SegmentationOutput:
        if x.dim() == 3:
            return self(x.unsqueeze(0))[0]
        h, w = x.shape[-2:]
        stride = self.cfg.max_stride
        if h % stride or w % stride:
            raise ValueError(
                f"input {h}x{w} not divisible by the maximum stride {stride}")

        feats = []
        out = self.stem(x)
        for stage in self.stages:
            out = stage(out)
            feats.append(out)

        upsampled = [bilinear_upsample(f, (h, w)) for f in feats]
        main = self.head(torch.cat(upsampled, dim=1))

        aux_logits: list[torch.Tensor] = []
        aux_strides: list[int] = []
        if self.training and self.cfg.aux_mode != "none":
            for stage in self.cfg.aux_stages:
                head = self.aux_heads[str(stage)]
                feat = feats[stage - 1]
                if self.cfg.aux_mode == "plan_b":
                    feat = upsampled[stage - 1]
                aux_logits.append(head(feat))
                aux_strides.append(self.cfg.stage_strides[stage - 1])
        return SegmentationOutput(main, aux_logits, aux_strides,
                                  self.cfg.aux_mode if aux_logits else "none")


def build_model(cfg: ModelConfig) -> RangeSegNet:
    return RangeSegNet(cfg)


def count_parameters(model: RangeSegNet, scope: str = "inference") -> int:
    """Trainable parameter count; the inference scope excludes the
    training-only auxiliary heads."""
    if scope not in ("train", "inference"):
        raise ValueError(f"unknown scope {scope!r}")
    aux_param_ids = {id(p) for p in model.aux_heads.parameters()}
    total = 0
    for p in model.parameters():
        if not p.requires_grad:
            continue
        if scope == "inference" and id(p) in aux_param_ids:
            continue
        total += p.numel()
    return total


def aux_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of the auxiliary heads:
    per head, a 3x3 conv block (9c^2 weights + 2c batch-norm affine) and a
    biased 1x1 projection to C."""
    if cfg.aux_mode == "none":
        return 0
    total = 0
    for stage in cfg.aux_stages:
        c = cfg.stage_channels[stage - 1]
        total += 9 * c * c + 2 * c + c * cfg.num_classes + cfg.num_classes
    return total


def kernel_switch_pairs(cfg: ModelConfig) -> list[tuple[int, int]]:
    """(cin, cout) of every convolution whose kernel follows input_kernel:
    the three stem blocks and the two head blocks."""
    c0 = cfg.stage_channels[0]
    fused = sum(cfg.stage_channels)
    h0, h1 = cfg.head_channels
    return [(cfg.in_channels, c0), (c0, c0), (c0, c0), (fused, h0), (h0, h1)]


def kernel_parameter_delta(cfg: ModelConfig) -> int:
    """Analytic parameter difference between input_kernel 3 and 1:
    (9 - 1) * cin * cout summed over the switched convolutions."""
    return sum(8 * cin * cout for cin, cout in kernel_switch_pairs(cfg))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: RangeSegNet,
                    optimizer: torch.optim.Optimizer | None, epoch: int,
                    config_echo: dict, best_metric: float | None = None,
                    extra: dict | None = None) -> None:
    """Serialize model weights, optimizer state, epoch counter, and the full
    experiment-config echo behind a versioned header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config_echo,
        "model_state": model.state_dict(),
        "optimizer_state": None if optimizer is None else optimizer.state_dict(),
        "epoch": int(epoch),
        "best_metric": best_metric,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    """Load a checkpoint, rejecting unknown format versions."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint {path} has format version {version}, expected "
            f"{CHECKPOINT_VERSION}")
    return payload
