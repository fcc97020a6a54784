"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import time
from pathlib import Path

import numpy as np
import pytest
import torch

import test_kd
import test_metrics
import test_msi
from kdmsi.cli import cmd_pipeline, resolve_config
from kdmsi.kd import cam_normalize
from kdmsi.metrics import (
    ConfusionMatrix,
    MetricReport,
    class_iou,
    confusion,
    error_rates,
    f1,
    mean_iou,
    overall_accuracy,
)
from kdmsi.models import build_score_net
from kdmsi.msi import ScaleSet, multiscale_inference, multiscale_sigmoid_inference, pseudo_label
from kdmsi.pipeline import Run, run_stage

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"


@pytest.fixture
def verdict(capsys):
    """Call with (criterion, ok, detail) once per test; prints and asserts."""
    t0 = time.time()

    def report(number, ok, detail, limit):
        elapsed = time.time() - t0
        ok = ok and elapsed < limit
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail} ({elapsed:.1f}s, limit {limit}s)")
        assert ok, detail

    return report


def test_criterion_1_gradients(verdict):
    try:
        test_kd.test_toy_network_is_small()
        test_kd.test_gradients_match_finite_differences()
        test_kd.test_gradient_isolation(8.0)
        test_kd.test_gradient_isolation(test_kd.LAM)
        ok, detail = True, "L_cls, L_kd, L match central differences (rtol 1e-3); isolation holds"
    except AssertionError as exc:
        ok, detail = False, f"gradient suite failed: {exc}"
    verdict(1, ok, detail, 30)


def test_criterion_2_cam_normalize(verdict):
    g = torch.Generator().manual_seed(2024)
    failures = []
    for k in range(1000):
        h, w = torch.randint(1, 17, (2,), generator=g).tolist()
        scale = 10 ** torch.empty(1).uniform_(-3, 3, generator=g).item()
        m = torch.randn(1, 1, h, w, generator=g, dtype=torch.float64) * scale
        if k % 10 == 0:
            m = -m.abs()  # no positive entries
        c = cam_normalize(m)
        positive = (m > 1e-6).any()
        if c.min() < 0 or c.max() > 1:
            failures.append((k, "range"))
        if positive and c.max() != 1.0:
            failures.append((k, "max"))
        if not (m > 0).any() and torch.count_nonzero(c):
            failures.append((k, "guard"))
        if not torch.allclose(cam_normalize(c), c, rtol=0, atol=1e-15):
            failures.append((k, "idempotence"))
    verdict(2, not failures, f"1000 random maps, failures={failures[:5]}", 10)


def test_criterion_3_msi(verdict):
    test_msi.test_msi_constant_zero()
    test_msi.test_msi_single_scale_reduces_to_sigmoid()
    test_msi.test_msi_range_and_bounds()
    net = build_score_net(21).eval()
    scales = ScaleSet()
    g = torch.Generator().manual_seed(3)
    pre = torch.rand(100, 3, 64, 64, generator=g)
    post = torch.rand(100, 3, 64, 64, generator=g)
    worst = 0.0
    for i in range(0, 100, 25):
        a, b = pre[i:i + 25], post[i:i + 25]
        flipped = multiscale_sigmoid_inference(net, a.flip(-1), b.flip(-1), scales)
        direct = multiscale_sigmoid_inference(net, a, b, scales).flip(-1)
        worst = max(worst, (flipped - direct).abs().max().item())
    verdict(3, worst <= 1e-5, f"stub, reduction and bounds pass; flip equivariance max err {worst:.2e} on 100 pairs", 60)


def test_criterion_4_metrics(verdict):
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(200):
        density = rng.uniform(0, 1, 2)
        pred = (rng.random((16, 16)) < density[0]).astype(np.uint8)
        gt = (rng.random((16, 16)) < density[1]).astype(np.uint8)
        tp, fp, fn, tn = test_metrics.loop_confusion(pred, gt)
        cm = confusion(pred, gt)
        if cm != ConfusionMatrix(tp, fp, fn, tn):
            bad += 1
            continue
        n = tp + fp + fn + tn
        iou_c = tp / (tp + fp + fn) if tp + fp + fn else 1.0
        iou_b = tn / (tn + fp + fn) if tn + fp + fn else 1.0
        f1_c = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
        f1_b = 2 * tn / (2 * tn + fp + fn) if tn + fp + fn else 1.0
        fdr = fp / (tp + fp) if tp + fp else 0.0
        miss = fn / (tp + fn) if tp + fn else 0.0
        expected = [(tp + tn) / n, iou_c, iou_b, (iou_c + iou_b) / 2, f1_c, (f1_c + f1_b) / 2, fdr, miss]
        got = [overall_accuracy(cm), class_iou(cm, "change"), class_iou(cm, "background"), mean_iou(cm),
               f1(cm, "change"), f1(cm, "macro"), *error_rates(cm)]
        if any(abs(a - b) > 1e-12 for a, b in zip(got, expected)):
            bad += 1
        rep = MetricReport.from_confusion(cm)
        if abs(rep.ciou - rep.f1_change / (2 - rep.f1_change)) > 1e-12:
            bad += 1
    # the identity also over arbitrary count matrices
    for _ in range(2000):
        cm = ConfusionMatrix(*rng.integers(0, 10_000, 4).tolist())
        if cm.total and abs(class_iou(cm) - f1(cm) / (2 - f1(cm))) > 1e-12:
            bad += 1
    verdict(4, bad == 0, f"200 random 16x16 pairs vs loop oracle plus 2000 matrices, mismatches={bad}", 30)


def _stage_table(seed, out):
    cfg = resolve_config(DESK, out=out, seed=seed)
    run = Run(out, cfg)
    for stage in ("synth", "train-kd", "infer"):
        run_stage(run, stage)
    split = {r["split"]: r for r in (run.manifest()["stages"]["infer"]["info"]["stage_table"])}
    return cfg, split["train"]


def test_criterion_5_ablation_ordering(verdict, tmp_path):
    lines, wins = [], 0
    for seed in (0, 1, 2):
        cfg, row = _stage_table(seed, tmp_path / f"seed{seed}")
        assert cfg.kd.epochs == 20 and cfg.dataset.synth.height == 64
        a = row["student"] >= row["teacher_cam"]
        b = row["student_msi"] >= row["student"] - 0.01
        wins += a and b
        lines.append(f"seed {seed}: cam {row['teacher_cam']:.3f} student {row['student']:.3f} "
                     f"mi {row['student_mi']:.3f} msi {row['student_msi']:.3f} -> {'ok' if a and b else 'no'}")
    verdict(5, wins >= 2, f"{wins}/3 seeds ordered; " + "; ".join(lines), 15 * 60)


def test_criterion_6_pipeline(verdict, tmp_path):
    cfg = resolve_config(DESK, out=tmp_path / "desk")
    result = cmd_pipeline(cfg)
    ciou = result["report"]["metrics"]["ciou"]
    report = tmp_path / "desk" / "eval" / "report.json"
    before = report.read_bytes()
    cmd_pipeline(resolve_config(out=tmp_path / "desk"), stage_from="eval")
    same = report.read_bytes() == before
    n_train = len(Run(tmp_path / "desk", cfg).load_data()["train"])
    verdict(6, ciou - 0.0 >= 0.2 and same,
            f"test cIoU {ciou:.3f} vs all-background 0.000 on {n_train} training pairs; rerun bit-exact={same}", 15 * 60)


def test_criterion_7_mi_msi_mismatch(verdict):
    net = test_msi.two_scale_stub()
    pre, post = test_msi.pair()
    scales = ScaleSet((1.0, 2.0), flip=False)
    mi = pseudo_label(multiscale_inference(net, pre, post, scales), 0.3)
    msi = pseudo_label(multiscale_sigmoid_inference(net, pre, post, scales), 0.3)
    differ = int((mi != msi).sum())
    verdict(7, differ > 0, f"binarized MI and MSI maps differ at {differ}/{mi.numel()} pixels", 5)
