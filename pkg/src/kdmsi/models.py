"""Siamese backbones, feature combination and single-channel score heads."""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

COMBINE_MODES = ("subtract", "abs-subtract", "concat")
BACKBONES = ("tiny-cnn", "resnet50-shaped")
CHECKPOINT_FORMAT = "kdmsi-checkpoint"
CHECKPOINT_VERSION = 1


class TinyCNN(nn.Module):
    """Stack of (3x3 conv, norm, ReLU, 2x max-pool) blocks.

    With the default widths (16, 32, 64, 64) the output stride is 16.
    """

    kind = "tiny-cnn"

    def __init__(self, in_channels=3, channels=(16, 32, 64, 64), norm=True, bias=True):
        super().__init__()
        blocks = []
        prev = in_channels
        for ch in channels:
            layers = [nn.Conv2d(prev, ch, 3, padding=1, bias=bias)]
            if norm:
                layers.append(nn.BatchNorm2d(ch))
            layers += [nn.ReLU(inplace=False), nn.MaxPool2d(2)]
            blocks.append(nn.Sequential(*layers))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = prev
        self.low_channels = channels[0]
        self.output_stride = 2 ** len(channels)
        self.low_stride = 2

    def forward_levels(self, x):
        low = x = self.blocks[0](x)
        for block in self.blocks[1:]:
            x = block(x)
        return low, x

    def forward(self, x):
        return self.forward_levels(x)[1]


class ResNet50Backbone(nn.Module):
    """ResNet-50 trunk (randomly initialised) with stride 32, for real imagery."""

    kind = "resnet50-shaped"

    def __init__(self, in_channels=3):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4
        self.out_channels = 2048
        self.low_channels = 256
        self.output_stride = 32
        self.low_stride = 4

    def forward_levels(self, x):
        low = self.layer1(self.stem(x))
        return low, self.layer4(self.layer3(self.layer2(low)))

    def forward(self, x):
        return self.forward_levels(x)[1]


def build_backbone(kind="tiny-cnn", in_channels=3, channels=(16, 32, 64, 64), norm=True, bias=True):
    if kind == "tiny-cnn":
        return TinyCNN(in_channels, tuple(channels), norm=norm, bias=bias)
    if kind == "resnet50-shaped":
        return ResNet50Backbone(in_channels)
    raise ConfigError(f"unknown backbone kind {kind!r}; expected one of {BACKBONES}")


def check_divisible(x: torch.Tensor, stride: int):
    h, w = x.shape[-2:]
    if h % stride or w % stride:
        raise ShapeError(f"input {h}x{w} is not divisible by output stride {stride}")


def extract_features(backbone: nn.Module, image: torch.Tensor) -> torch.Tensor:
    """Run one image batch (N, C, H, W) through ``backbone``."""
    check_divisible(image, backbone.output_stride)
    return backbone(image)


def combine_features(f1: torch.Tensor, f2: torch.Tensor, mode: str) -> torch.Tensor:
    if f1.shape != f2.shape:
        raise ShapeError(f"cannot combine feature maps of shape {tuple(f1.shape)} and {tuple(f2.shape)}")
    if mode == "subtract":
        return f1 - f2
    if mode == "abs-subtract":
        return (f1 - f2).abs()
    if mode == "concat":
        return torch.cat([f1, f2], dim=1)
    raise ConfigError(f"unknown combine mode {mode!r}; expected one of {COMBINE_MODES}")


def combined_channels(channels: int, mode: str) -> int:
    return 2 * channels if mode == "concat" else channels


def head_project(features: torch.Tensor, head: nn.Conv2d) -> torch.Tensor:
    if features.shape[1] != head.in_channels:
        raise ShapeError(
            f"head expects {head.in_channels} channels, features have {features.shape[1]}"
        )
    return head(features)


class SiameseScoreNet(nn.Module):
    """Weight-shared backbone, feature combination, then a 1x1 conv to one channel.

    Used for both the teacher and the student; ``forward`` returns the
    pre-activation score map of shape (N, 1, H/d, W/d).
    """

    def __init__(self, backbone="tiny-cnn", combine="abs-subtract", in_channels=3,
                 channels=(16, 32, 64, 64), norm=True, bias=True):
        super().__init__()
        if combine not in COMBINE_MODES:
            raise ConfigError(f"unknown combine mode {combine!r}")
        self.config = dict(backbone=backbone, combine=combine, in_channels=in_channels,
                           channels=list(channels), norm=norm, bias=bias)
        self.backbone = build_backbone(backbone, in_channels, channels, norm, bias)
        self.combine = combine
        self.head = nn.Conv2d(combined_channels(self.backbone.out_channels, combine), 1, 1, bias=True)

    @property
    def output_stride(self) -> int:
        return self.backbone.output_stride

    def features(self, pre, post):
        check_divisible(pre, self.output_stride)
        if pre.shape != post.shape:
            raise ShapeError(f"pre {tuple(pre.shape)} and post {tuple(post.shape)} differ")
        both = self.backbone(torch.cat([pre, post], dim=0))
        return both[: pre.shape[0]], both[pre.shape[0]:]

    def forward(self, pre, post):
        f1, f2 = self.features(pre, post)
        return head_project(combine_features(f1, f2, self.combine), self.head)


def build_score_net(seed: int, **kwargs) -> SiameseScoreNet:
    """Construct a score net whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SiameseScoreNet(**kwargs)
    net.init_seed = seed
    return net


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(net: nn.Module, path, arch: str | None = None, **extra) -> Path:
    """Write a versioned checkpoint holding weights plus everything needed to rebuild."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    backbone = getattr(net, "backbone", None) or getattr(net, "encoder", None)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": arch or type(net).__name__,
        "config": dict(net.config),
        "backbone_kind": getattr(backbone, "kind", None),
        "output_stride": getattr(backbone, "output_stride", None),
        "out_channels": getattr(backbone, "out_channels", None),
        "seed": getattr(net, "init_seed", None),
        "state_dict": {k: v.detach().clone() for k, v in net.state_dict().items()},
        "extra": extra,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    """Rebuild the network stored at ``path``; returns ``(net, payload)``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: checkpoint version {payload['version']} is newer than supported")
    arch = payload["arch"]
    if arch == "SiameseScoreNet":
        net = SiameseScoreNet(**payload["config"])
    elif arch == "SegNet":
        from .segnet import SegNet

        net = SegNet(**payload["config"])
    else:
        raise ConfigError(f"{path}: unknown architecture {arch!r}")
    net.load_state_dict(payload["state_dict"])
    net.init_seed = payload.get("seed")
    net.eval()
    return net, payload


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
