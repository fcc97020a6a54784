"""Test-time multiscale inference and pseudo-label generation.

Two ways of fusing a student network's score maps over scales and flips:

* :func:`multiscale_inference` sums the raw score maps at input resolution
  and max-normalises the sum once (the CAM-style baseline).
* :func:`multiscale_sigmoid_inference` applies the sigmoid to every scale's
  map first and averages the probabilities, so each scale carries equal
  weight regardless of its score magnitude.

``net`` is any callable ``net(pre, post) -> (N, 1, h, w)`` score map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError
from .kd import cam_normalize

DEFAULT_SCALES = (0.5, 1.0, 1.5, 2.0)


@dataclass(frozen=True)
class ScaleSet:
    scales: tuple[float, ...] = DEFAULT_SCALES
    flip: bool = True
    flip_axis: str = "width"

    def __post_init__(self):
        if not self.scales:
            raise ConfigError("scale set must not be empty")
        if any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        if self.flip_axis not in ("width", "height"):
            raise ConfigError("flip_axis must be 'width' or 'height'")

    @property
    def n_views(self) -> int:
        return len(self.scales) * (2 if self.flip else 1)


def scaled_size(h: int, w: int, scale: float, stride: int = 1) -> tuple[int, int]:
    """``round(scale * size)`` per axis, snapped up to a multiple of ``stride``."""
    def snap(n):
        n = max(1, round(scale * n))
        return max(stride, math.ceil(n / stride) * stride)
    return snap(h), snap(w)


def resize(x: torch.Tensor, size, mode: str = "bilinear") -> torch.Tensor:
    size = tuple(int(v) for v in size)
    if tuple(x.shape[-2:]) == size:
        return x
    if mode == "nearest":
        return F.interpolate(x, size=size, mode="nearest")
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def flip(x: torch.Tensor, axis: str = "width") -> torch.Tensor:
    return x.flip(-1 if axis == "width" else -2)


def _stride(net, stride):
    if stride is not None:
        return stride
    return int(getattr(net, "output_stride", 1))


def _views(net, pre, post, scales: ScaleSet, stride):
    """Yield ``(score_map, flipped)`` for every scale, in a fixed order."""
    h, w = pre.shape[-2:]
    for s in scales.scales:
        size = scaled_size(h, w, s, stride)
        pre_s, post_s = resize(pre, size), resize(post, size)
        yield net(pre_s, post_s), False
        if scales.flip:
            yield net(flip(pre_s, scales.flip_axis), flip(post_s, scales.flip_axis)), True


@torch.no_grad()
def multiscale_inference(net, pre, post, scales: ScaleSet = ScaleSet(), stride=None) -> torch.Tensor:
    """Summed raw score maps over all views, then min-max normalised.

    The ReLU inside the normalisation acts on the sum, not per view.
    Returns (N, 1, H, W) in [0, 1].
    """
    stride = _stride(net, stride)
    size = pre.shape[-2:]
    total = None
    for g, flipped in _views(net, pre, post, scales, stride):
        if flipped:
            g = flip(g, scales.flip_axis)
        g = resize(g, size)
        total = g.clone() if total is None else total + g
    return cam_normalize(total)


@torch.no_grad()
def multiscale_sigmoid_inference(net, pre, post, scales: ScaleSet = ScaleSet(), stride=None) -> torch.Tensor:
    """Average of per-view sigmoid probabilities at input resolution.

    Per view the order is sigmoid, flip back, resize.  Returns (N, 1, H, W)
    strictly inside (0, 1) for finite scores.
    """
    stride = _stride(net, stride)
    size = pre.shape[-2:]
    total = None
    for g, flipped in _views(net, pre, post, scales, stride):
        p = torch.sigmoid(g)
        if flipped:
            p = flip(p, scales.flip_axis)
        p = resize(p, size)
        total = p.clone() if total is None else total + p
    return total / scales.n_views


def pseudo_label(prob, bg_threshold: float = 0.3):
    """Argmax over a constant background channel and the change probability.

    A pixel is change only when its probability strictly exceeds the
    background level; ties go to background.
    """
    if not 0.0 < bg_threshold < 1.0:
        raise ConfigError(f"bg_threshold must lie in (0, 1), got {bg_threshold}")
    if isinstance(prob, torch.Tensor):
        return (prob > bg_threshold).to(torch.uint8)
    return (np.asarray(prob) > bg_threshold).astype(np.uint8)


def sweep_threshold(prob_maps, masks, thresholds=None):
    """Pick the background threshold with the best pooled change IoU.

    Returns ``(best_threshold, {threshold: iou})``; ties keep the lower threshold.
    """
    from .metrics import accumulate, class_iou, confusion

    if thresholds is None:
        thresholds = [round(0.1 * k, 1) for k in range(1, 10)]
    scores = {}
    for t in thresholds:
        cm = accumulate(confusion(pseudo_label(p, t), m) for p, m in zip(prob_maps, masks))
        scores[t] = class_iou(cm)
    best = max(thresholds, key=lambda t: (scores[t], -t))
    return best, scores


@torch.no_grad()
def infer_maps(net, samples, method: str = "msi", scales: ScaleSet = ScaleSet(),
               batch_size: int = 16) -> list[np.ndarray]:
    """Probability maps (H, W float32) for each sample.

    ``method`` is one of ``msi``, ``mi``, ``student`` (single-scale sigmoid)
    or ``cam`` (single-scale normalised score, used for the teacher).
    """
    from .kd import probability_maps

    if method in ("student", "cam"):
        return probability_maps(net, samples, kind="sigmoid" if method == "student" else "cam",
                                batch_size=batch_size)
    fn = {"msi": multiscale_sigmoid_inference, "mi": multiscale_inference}.get(method)
    if fn is None:
        raise ConfigError(f"unknown inference method {method!r}")
    was_training = getattr(net, "training", False)
    if hasattr(net, "eval"):
        net.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        pre = torch.from_numpy(np.stack([s.pair.pre for s in chunk]).transpose(0, 3, 1, 2).copy())
        post = torch.from_numpy(np.stack([s.pair.post for s in chunk]).transpose(0, 3, 1, 2).copy())
        maps = fn(net, pre, post, scales)
        out.extend(m[0].numpy().astype(np.float32) for m in maps)
    if was_training:
        net.train()
    return out


def save_probability_png(prob: np.ndarray, path) -> None:
    """Store a [0, 1] map as a 16-bit single-channel PNG (value = round(65535 p))."""
    q = np.round(np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_probability_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 65535.0


def save_maps(ids, maps, out_dir, png: bool = True) -> Path:
    """Write ``maps.npz`` (raw float32 keyed by id) plus optional 16-bit PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out_dir / "maps.npz", **{i: m.astype(np.float32) for i, m in zip(ids, maps)})
    if png:
        (out_dir / "png").mkdir(exist_ok=True)
        for i, m in zip(ids, maps):
            save_probability_png(m, out_dir / "png" / f"{i}.png")
    return out_dir


def load_maps(out_dir) -> dict[str, np.ndarray]:
    with np.load(Path(out_dir) / "maps.npz") as z:
        return {k: z[k] for k in z.files}
