"""Teacher CAM, distillation losses and the joint teacher/student trainer.

The teacher is a Siamese score network trained only through a
classification loss on the global average of its score map.  Its
max-normalised score map (the CAM) is the regression target for the
student's sigmoid map.  The target is detached, so the distillation term
never reaches the teacher.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, TrainingError
from .models import build_score_net, save_checkpoint, upsample_to

log = logging.getLogger(__name__)

CAM_EPS = 1e-6


def cam_normalize(g: torch.Tensor, eps: float = CAM_EPS) -> torch.Tensor:
    """ReLU then divide by the per-map maximum; maps with max <= eps become zero.

    Normalisation runs over the last two (spatial) axes independently for
    every leading index.
    """
    g = torch.as_tensor(g)
    r = F.relu(g)
    peak = r.amax(dim=(-2, -1), keepdim=True)
    scaled = r / peak.clamp_min(eps)
    return torch.where(peak > eps, scaled, torch.zeros_like(r))


def classification_logit(g: torch.Tensor) -> torch.Tensor:
    """Global average pool of a score map -> one logit per map."""
    g = torch.as_tensor(g)
    m = g.mean(dim=(-2, -1))
    # (N, 1, h, w) score maps -> (N,) logits
    return m.reshape(m.shape[0]) if g.dim() == 4 else m


def classification_loss(logit: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on logits (log-sum-exp form)."""
    logit = torch.as_tensor(logit)
    y = torch.as_tensor(y, dtype=logit.dtype)
    return F.binary_cross_entropy_with_logits(logit, y.expand_as(logit))


def kd_loss(cam: torch.Tensor, student_prob: torch.Tensor) -> torch.Tensor:
    """Mean squared error against a detached CAM target."""
    if cam.shape != student_prob.shape:
        raise ShapeError(f"cam {tuple(cam.shape)} vs student map {tuple(student_prob.shape)}")
    return ((cam.detach() - student_prob) ** 2).mean()


def total_loss(l_cls, l_kd, lam: float):
    if lam < 0:
        raise ConfigError(f"lambda must be nonnegative, got {lam}")
    return l_cls + lam * l_kd


class KDOutputs(NamedTuple):
    g_teacher: torch.Tensor
    cam: torch.Tensor
    g_student: torch.Tensor
    student_prob: torch.Tensor


def snap_to_stride(x: torch.Tensor, stride: int) -> torch.Tensor:
    """Bilinearly resize (N, C, H, W) up to the nearest multiple of ``stride``."""
    h, w = x.shape[-2:]
    size = (math.ceil(h / stride) * stride, math.ceil(w / stride) * stride)
    return upsample_to(x, size)


def kd_forward(teacher, student, pre, post) -> KDOutputs:
    stride = teacher.output_stride
    pre, post = snap_to_stride(pre, stride), snap_to_stride(post, stride)
    g_t = teacher(pre, post)
    g_s = student(pre, post)
    return KDOutputs(g_t, cam_normalize(g_t), g_s, torch.sigmoid(g_s))


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - step / max(total_steps, 1)) ** power


@dataclass
class KDTrainConfig:
    lam: float = 10.0
    batch_size: int = 8
    epochs: int = 20
    lr: float = 1e-3
    poly_power: float = 0.9
    patience: int = 20
    bg_threshold: float = 0.3
    eval_split: str = "train"
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    scale_aug: tuple[float, float] | None = None
    flip_aug: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("batch size, epochs and patience must be >= 1")
        if self.eval_split not in ("train", "val"):
            raise ConfigError("eval_split must be 'train' or 'val'")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def make_optimizer(params, name: str, lr: float, weight_decay: float = 0.0, momentum: float = 0.9):
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {name!r}")


def _augment(pre, post, config: KDTrainConfig, rng: np.random.Generator, stride: int):
    """Whole-batch random rescale and horizontal flip; image-level labels are unaffected."""
    if config.scale_aug is not None:
        lo, hi = config.scale_aug
        s = float(rng.uniform(lo, hi))
        h, w = pre.shape[-2:]
        size = tuple(max(stride, math.ceil(round(s * v) / stride) * stride) for v in (h, w))
        pre, post = upsample_to(pre, size), upsample_to(post, size)
    if config.flip_aug and rng.random() < 0.5:
        pre, post = pre.flip(-1), post.flip(-1)
    return pre, post


def _to_tensor(arrays):
    return torch.from_numpy(np.ascontiguousarray(arrays))


def _batch(samples):
    pre = np.stack([s.pair.pre for s in samples]).transpose(0, 3, 1, 2)
    post = np.stack([s.pair.post for s in samples]).transpose(0, 3, 1, 2)
    return _to_tensor(pre.astype(np.float32)), _to_tensor(post.astype(np.float32))


@torch.no_grad()
def probability_maps(net, samples, kind: str = "sigmoid", batch_size: int = 16) -> list[np.ndarray]:
    """Single-scale maps at input resolution: ``sigmoid`` (student) or ``cam`` (teacher)."""
    was_training = net.training
    net.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        pre, post = _batch(chunk)
        size = pre.shape[-2:]
        g = net(snap_to_stride(pre, net.output_stride), snap_to_stride(post, net.output_stride))
        p = torch.sigmoid(g) if kind == "sigmoid" else cam_normalize(g)
        out.extend(upsample_to(p, size)[:, 0].numpy().astype(np.float32))
    net.train(was_training)
    return out


def change_iou(maps, masks, threshold: float) -> float:
    from .metrics import accumulate, class_iou, confusion
    from .msi import pseudo_label

    return class_iou(accumulate(confusion(pseudo_label(m, threshold), g) for m, g in zip(maps, masks)))


@dataclass
class KDResult:
    teacher: torch.nn.Module
    student: torch.nn.Module
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_student_iou: float = float("nan")
    best_teacher_iou: float = float("nan")


HISTORY_FIELDS = ("epoch", "l_cls", "l_kd", "loss", "eval_iou", "teacher_iou", "lr")


def write_history(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()) if history else HISTORY_FIELDS)
        writer.writeheader()
        writer.writerows(history)


def derive_seeds(seed: int, n: int) -> list[int]:
    return [int(v) for v in np.random.SeedSequence(seed).generate_state(n) % (2**31)]


def train_kd(train_samples, eval_samples, config: KDTrainConfig = KDTrainConfig(), seed: int = 0,
             model: dict | None = None, out_dir=None) -> KDResult:
    """Jointly train teacher and student; keep the epoch with the best student IoU.

    ``train_samples`` supply images and image-level labels; ``eval_samples``
    supply pixel masks for the per-epoch change IoU that drives early
    stopping.  With ``out_dir`` set, a checkpoint pair is written at every
    improvement and the history goes to ``history.csv``.
    """
    if not train_samples:
        raise ConfigError("training set is empty")
    if not eval_samples:
        raise ConfigError("evaluation set is empty")
    model = dict(model or {})
    t_seed, s_seed, order_seed = derive_seeds(seed, 3)
    teacher = build_score_net(t_seed, **model)
    student = build_score_net(s_seed, **model)
    params = list(teacher.parameters()) + list(student.parameters())
    opt = make_optimizer(params, config.optimizer, config.lr, config.weight_decay, config.momentum)

    pre_all, post_all = _batch(train_samples)
    y_all = torch.tensor([float(s.label) for s in train_samples])
    eval_masks = [s.mask for s in eval_samples]
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    rng = np.random.default_rng(order_seed)

    result = KDResult(teacher, student)
    best_state = None
    stale = 0
    step = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(1, config.epochs + 1):
        teacher.train()
        student.train()
        order = torch.from_numpy(rng.permutation(n))
        sums = np.zeros(3)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            lr = poly_lr(config.lr, step, total_steps, config.poly_power)
            for group in opt.param_groups:
                group["lr"] = lr
            pre, post = _augment(pre_all[idx], post_all[idx], config, rng, teacher.output_stride)
            out = kd_forward(teacher, student, pre, post)
            l_cls = classification_loss(classification_logit(out.g_teacher), y_all[idx])
            l_kd = kd_loss(out.cam, out.student_prob)
            loss = total_loss(l_cls, l_kd, config.lam)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"l_cls={l_cls.item()} l_kd={l_kd.item()} lr={lr}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            sums += np.array([l_cls.item(), l_kd.item(), loss.item()]) * len(idx)

        teacher_iou = change_iou(probability_maps(teacher, eval_samples, "cam"), eval_masks,
                                 config.bg_threshold)
        student_iou = change_iou(probability_maps(student, eval_samples, "sigmoid"), eval_masks,
                                 config.bg_threshold)
        means = sums / n
        row = {"epoch": epoch, "l_cls": float(means[0]), "l_kd": float(means[1]),
               "loss": float(means[2]), "eval_iou": student_iou, "teacher_iou": teacher_iou, "lr": lr}
        result.history.append(row)
        log.info("kd epoch %d: L=%.4f cls=%.4f kd=%.4f student IoU=%.4f teacher IoU=%.4f",
                 epoch, row["loss"], row["l_cls"], row["l_kd"], student_iou, teacher_iou)

        if not result.best_teacher_iou >= teacher_iou:
            result.best_teacher_iou = teacher_iou
        if best_state is None or student_iou > result.best_student_iou:
            result.best_student_iou = student_iou
            result.best_epoch = epoch
            best_state = (copy.deepcopy(teacher.state_dict()), copy.deepcopy(student.state_dict()))
            stale = 0
            if out_dir is not None:
                save_checkpoint(teacher, out_dir / "checkpoints" / f"teacher_e{epoch:03d}.pt", epoch=epoch)
                save_checkpoint(student, out_dir / "checkpoints" / f"student_e{epoch:03d}.pt", epoch=epoch)
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop after %d epochs without improvement", stale)
                break

    teacher.load_state_dict(best_state[0])
    student.load_state_dict(best_state[1])
    teacher.eval()
    student.eval()
    if out_dir is not None:
        save_checkpoint(teacher, out_dir / "teacher.pt", epoch=result.best_epoch)
        save_checkpoint(student, out_dir / "student.pt", epoch=result.best_epoch)
        write_history(result.history, out_dir / "history.csv")
    return result
