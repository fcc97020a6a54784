"""Figures written next to a run's delimited outputs.

Panels are assembled pixel-exactly (one column per input size) and saved
through matplotlib's colormaps; history curves and the stage chart are
ordinary matplotlib figures.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib
import matplotlib.image as mimage
import numpy as np
from matplotlib.figure import Figure

from .data import SPLITS
from .msi import load_maps

log = logging.getLogger(__name__)

PANEL_METHODS = ("cam", "student", "msi")


def _rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    lo, hi = img.min(), img.max()
    if lo < 0 or hi > 1:  # standardized inputs
        img = (img - lo) / max(hi - lo, 1e-12)
    return img


def heatmap(prob: np.ndarray, cmap: str = "inferno") -> np.ndarray:
    return matplotlib.colormaps[cmap](np.clip(prob, 0, 1))[..., :3]


def panel_row(pre, post, gt, cam, student, msi, gutter: int = 4, cmap: str = "inferno") -> np.ndarray:
    """Six tiles side by side as an (H, 6W + 5*gutter, 3) float image."""
    tiles = [_rgb(pre), _rgb(post), _rgb(gt)] + [heatmap(m, cmap) for m in (cam, student, msi)]
    h, w = tiles[0].shape[:2]
    row = np.ones((h, 6 * w + 5 * gutter, 3))
    for k, tile in enumerate(tiles):
        x = k * (w + gutter)
        row[:, x:x + w] = tile
    return row


def panel_tile(row: np.ndarray, index: int, width: int, gutter: int = 4) -> np.ndarray:
    x = index * (width + gutter)
    return row[:, x:x + width]


def save_panel(row: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mimage.imsave(path, np.clip(row, 0, 1))
    return path


def _read_csv(path: Path) -> list[dict]:
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items() if v != ""} for row in csv.DictReader(fh)]


def plot_history(kd_csv, seg_csv, path) -> Path:
    fig = Figure(figsize=(10, 3.5))
    axes = fig.subplots(1, 2)
    if kd_csv and Path(kd_csv).exists():
        rows = _read_csv(Path(kd_csv))
        ep = [r["epoch"] for r in rows]
        ax = axes[0]
        ax.plot(ep, [r["l_cls"] for r in rows], label="L_cls")
        ax.plot(ep, [r["l_kd"] for r in rows], label="L_kd")
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        twin = ax.twinx()
        twin.plot(ep, [r["eval_iou"] for r in rows], "k--", label="student IoU")
        twin.plot(ep, [r["teacher_iou"] for r in rows], "k:", label="teacher IoU")
        twin.set_ylim(0, 1)
        ax.legend(loc="upper left", fontsize=8)
        twin.legend(loc="upper right", fontsize=8)
        ax.set_title("distillation")
    if seg_csv and Path(seg_csv).exists():
        rows = _read_csv(Path(seg_csv))
        axes[1].plot([r["epoch"] for r in rows], [r["loss"] for r in rows])
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("cross-entropy")
        axes[1].set_title("segmentation")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    return Path(path)


def plot_stage_table(rows: list[dict], path) -> Path:
    cols = ["teacher_cam", "student", "student_mi", "student_msi"]
    fig = Figure(figsize=(6, 3.5))
    ax = fig.subplots()
    width = 0.8 / max(len(rows), 1)
    x = np.arange(len(cols))
    for k, row in enumerate(rows):
        ax.bar(x + k * width, [row[c] for c in cols], width, label=row["split"])
    ax.set_xticks(x + width * (len(rows) - 1) / 2, cols)
    ax.set_ylabel(f"change IoU @ {rows[0]['threshold']:g}" if rows else "change IoU")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    return Path(path)


def _find_maps(infer_dir: Path) -> dict[str, dict[str, np.ndarray]]:
    """``{method: {id: map}}`` pooled over all splits present."""
    out = {m: {} for m in PANEL_METHODS}
    for split in SPLITS:
        for m in PANEL_METHODS:
            if (infer_dir / split / m / "maps.npz").exists():
                out[m].update(load_maps(infer_dir / split / m))
    return out


def render_panels(run, ids, out_dir=None) -> tuple[list[Path], list[str]]:
    """Write one six-panel PNG per known sample id; returns ``(written, missing)``."""
    from .pipeline import select_samples

    data = run.load_data()
    found, missing = select_samples(data, ids)
    maps = _find_maps(run.dir("infer"))
    out_dir = Path(out_dir or run.dir("figures") / "panels")
    written = []
    for s in found:
        if any(s.id not in maps[m] for m in PANEL_METHODS):
            missing.append(s.id)
            continue
        row = panel_row(s.pair.pre, s.pair.post, s.mask, *(maps[m][s.id] for m in PANEL_METHODS))
        written.append(save_panel(row, out_dir / f"{s.id}.png"))
    for sid in missing:
        log.warning("sample %s not found in run %s; skipped", sid, run.root)
    return written, missing


def render_run_figures(run) -> list[Path]:
    fig_dir = run.dir("figures")
    fig_dir.mkdir(parents=True, exist_ok=True)
    out = [plot_history(run.dir("kd") / "history.csv", run.dir("seg") / "history.csv",
                        fig_dir / "history.png")]
    table = run.dir("infer") / "stage_table.json"
    if table.exists():
        out.append(plot_stage_table(json.loads(table.read_text()), fig_dir / "stage_table.png"))
    data = run.load_data()
    ids = [s.id for s in data["test"][: run.cfg.figure_samples]]
    written, _ = render_panels(run, ids)
    return out + written
