"""Siamese encoder-decoder change segmentation trained on pseudo-labels.

The encoder runs both images with shared weights.  The high-level feature
difference goes through a multi-rate dilated context block; its output is
upsampled, concatenated with the projected low-level feature difference
and decoded to two-class logits at input resolution.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, TrainingError
from .kd import derive_seeds, make_optimizer, poly_lr, snap_to_stride
from .models import build_backbone, check_divisible, upsample_to

log = logging.getLogger(__name__)


def _conv_block(cin, cout, k, dilation=1, norm=True, bias=True):
    layers = [nn.Conv2d(cin, cout, k, padding=dilation * (k // 2), dilation=dilation, bias=bias)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=False))
    return nn.Sequential(*layers)


class ContextBlock(nn.Module):
    """Parallel dilated 3x3 branches plus an image-pooling branch, fused by 1x1 conv."""

    def __init__(self, cin, cout, rates=(1, 2, 4), norm=True, bias=True):
        super().__init__()
        self.branches = nn.ModuleList(_conv_block(cin, cout, 3, r, norm, bias) for r in rates)
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1, bias=bias),
                                  nn.ReLU(inplace=False))
        self.project = _conv_block(cout * (len(rates) + 1), cout, 1, norm=norm, bias=bias)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(outs, dim=1))


class SegNet(nn.Module):
    def __init__(self, backbone="tiny-cnn", in_channels=3, channels=(16, 32, 64, 64),
                 context_channels=32, low_channels=16, rates=(1, 2, 4), norm=True, bias=True):
        super().__init__()
        self.config = dict(backbone=backbone, in_channels=in_channels, channels=list(channels),
                           context_channels=context_channels, low_channels=low_channels,
                           rates=list(rates), norm=norm, bias=bias)
        self.encoder = build_backbone(backbone, in_channels, channels, norm, bias)
        self.context = ContextBlock(self.encoder.out_channels, context_channels, rates, norm, bias)
        self.low_project = _conv_block(self.encoder.low_channels, low_channels, 1, norm=norm, bias=bias)
        self.decoder = nn.Sequential(
            _conv_block(context_channels + low_channels, context_channels, 3, norm=norm, bias=bias),
            nn.Conv2d(context_channels, 2, 1, bias=bias),
        )

    @property
    def output_stride(self) -> int:
        return self.encoder.output_stride

    def forward(self, pre, post, return_features: bool = False):
        check_divisible(pre, self.output_stride)
        n = pre.shape[0]
        low, high = self.encoder.forward_levels(torch.cat([pre, post], dim=0))
        high_diff = high[:n] - high[n:]
        low_diff = low[:n] - low[n:]
        ctx = upsample_to(self.context(high_diff), low_diff.shape[-2:])
        logits = self.decoder(torch.cat([ctx, self.low_project(low_diff)], dim=1))
        logits = upsample_to(logits, pre.shape[-2:])
        if return_features:
            return logits, {"high_diff": high_diff, "low_diff": low_diff, "context": ctx}
        return logits


def build_segnet(seed: int, **kwargs) -> SegNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SegNet(**kwargs)
    net.init_seed = seed
    return net


def segnet_forward(net: SegNet, pre, post) -> torch.Tensor:
    return net(pre, post)


def logits_to_mask(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax over (background, change); ties go to background."""
    return (logits[:, 1] > logits[:, 0]).to(torch.uint8)


@torch.no_grad()
def predict_change_mask(net: SegNet, pre, post) -> torch.Tensor:
    was_training = net.training
    net.eval()
    size = pre.shape[-2:]
    s = net.output_stride
    logits = net(snap_to_stride(pre, s), snap_to_stride(post, s))
    net.train(was_training)
    return logits_to_mask(upsample_to(logits, size))


def _batch(samples):
    pre = np.stack([s.pair.pre for s in samples]).transpose(0, 3, 1, 2)
    post = np.stack([s.pair.post for s in samples]).transpose(0, 3, 1, 2)
    return (torch.from_numpy(np.ascontiguousarray(pre, dtype=np.float32)),
            torch.from_numpy(np.ascontiguousarray(post, dtype=np.float32)))


def predict_change_masks(net: SegNet, samples, batch_size: int = 16) -> list[np.ndarray]:
    out = []
    for i in range(0, len(samples), batch_size):
        pre, post = _batch(samples[i:i + batch_size])
        out.extend(predict_change_mask(net, pre, post).numpy())
    return out


@dataclass
class SegTrainConfig:
    batch_size: int = 16
    epochs: int = 50
    lr: float = 0.007
    poly_power: float = 0.9
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("invalid segmentation training config")


@dataclass
class SegTrainResult:
    final: SegNet
    best: SegNet
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def train_segnet(samples, config: SegTrainConfig = SegTrainConfig(), seed: int = 0,
                 model: dict | None = None, val_samples=None) -> SegTrainResult:
    """Fit a SegNet to ``(sample, pseudo_mask)`` pairs with per-pixel cross-entropy.

    ``samples`` is a list of ``(Sample, label_map)``; the label map replaces
    the sample's own mask as supervision.  ``val_samples`` (with true masks)
    select the best epoch by change IoU; without them the best model is the
    final one.
    """
    from .metrics import accumulate, class_iou, confusion

    if not samples:
        raise ConfigError("no samples to train the segmentation network on")
    init_seed, order_seed = derive_seeds(seed, 2)
    net = build_segnet(init_seed, **(model or {}))
    opt = make_optimizer(net.parameters(), config.optimizer, config.lr, config.weight_decay,
                         config.momentum)
    pre_all, post_all = _batch([s for s, _ in samples])
    target_all = torch.from_numpy(np.stack([np.asarray(m) for _, m in samples]).astype(np.int64))
    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    rng = np.random.default_rng(order_seed)

    result = SegTrainResult(net, net)
    best_iou, best_state = -1.0, None
    step = 0
    for epoch in range(1, config.epochs + 1):
        net.train()
        order = torch.from_numpy(rng.permutation(n))
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            if len(idx) < 2 and net.config["norm"]:
                continue  # batch norm needs more than one sample
            lr = poly_lr(config.lr, step, total, config.poly_power)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = F.cross_entropy(net(pre_all[idx], post_all[idx]), target_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite segmentation loss at epoch {epoch} step {step} (lr={lr})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            running += loss.item() * len(idx)
        row = {"epoch": epoch, "loss": running / n, "lr": lr}
        if val_samples:
            preds = predict_change_masks(net, val_samples)
            row["val_iou"] = class_iou(accumulate(confusion(p, s.mask) for p, s in zip(preds, val_samples)))
            if row["val_iou"] > best_iou:
                best_iou, best_state = row["val_iou"], copy.deepcopy(net.state_dict())
                result.best_epoch = epoch
        result.history.append(row)
        log.info("seg epoch %d: loss=%.4f %s", epoch, row["loss"],
                 f"val IoU={row['val_iou']:.4f}" if "val_iou" in row else "")

    net.eval()
    if best_state is not None:
        best = build_segnet(init_seed, **(model or {}))
        best.load_state_dict(best_state)
        best.eval()
        result.best = best
    else:
        result.best_epoch = config.epochs
    return result
