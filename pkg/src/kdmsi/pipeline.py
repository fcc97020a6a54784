"""Stage orchestration: data -> train-kd -> infer -> pseudo -> train-seg -> eval.

Each stage reads its inputs from the run directory and writes its outputs
there, so a run can be resumed from any stage with ``stage_from``.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from pathlib import Path

import numpy as np

from .config import SWEEP, ExperimentConfig, write_config
from .data import (
    SPLITS,
    DatasetSplit,
    generate_synthetic_dataset,
    load_mask,
    load_split_dataset,
    save_mask,
    split_dataset,
    write_split_dataset,
)
from .errors import ConfigError
from .kd import change_iou, derive_seeds, train_kd
from .metrics import evaluate, write_report
from .models import load_checkpoint, save_checkpoint
from .msi import infer_maps, load_maps, pseudo_label, save_maps, sweep_threshold
from .segnet import train_segnet

log = logging.getLogger(__name__)

STAGES = ("synth", "train-kd", "infer", "pseudo", "train-seg", "eval")
EXIT_CODES = {"config": 2, "synth": 10, "train-kd": 11, "infer": 12, "pseudo": 13,
              "train-seg": 14, "eval": 15, "figure": 16}
STAGE_METHODS = ("cam", "student", "mi", "msi")
STAGE_COLUMNS = {"cam": "teacher_cam", "student": "student", "mi": "student_mi", "msi": "student_msi"}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = EXIT_CODES.get(stage, 1)


def stage_seeds(seed: int) -> dict[str, int]:
    data_seed, kd_seed, seg_seed = derive_seeds(seed, 3)
    return {"synth": data_seed, "train-kd": kd_seed, "train-seg": seg_seed}


class Run:
    """Paths and manifest of one run directory."""

    def __init__(self, root, cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg

    def dir(self, name: str) -> Path:
        return self.root / name

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"stages": {}}

    def record(self, stage: str, **info):
        m = self.manifest()
        m["stages"][stage] = info
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(m, indent=2, sort_keys=True))

    def load_data(self) -> dict:
        root = self.dir("data")
        if not (root / "meta.json").exists():
            raise ConfigError(f"no dataset at {root}; run the synth stage first")
        return load_split_dataset(root, standardize=self.cfg.dataset.standardize)


# --- stages -----------------------------------------------------------------

def stage_synth(run: Run) -> dict:
    cfg = run.cfg
    seed = stage_seeds(cfg.seed)["synth"]
    out = run.dir("data")
    if out.exists():
        shutil.rmtree(out)
    if cfg.dataset.synthetic:
        samples = generate_synthetic_dataset(cfg.dataset.synth, cfg.dataset.n, seed)
        split = split_dataset(samples, cfg.dataset.ratios, seed)
        write_split_dataset(samples, split, out, spec=cfg.dataset.synth)
    else:
        parts = load_split_dataset(cfg.dataset.source, tile=cfg.dataset.tile, ratios=cfg.dataset.ratios,
                                   seed=seed, min_fraction=cfg.dataset.min_fraction)
        samples = [s for name in SPLITS for s in parts[name]]
        split = DatasetSplit(*[[s.id for s in parts[name]] for name in SPLITS], seed=seed)
        write_split_dataset(samples, split, out, source=str(cfg.dataset.source))
    return {"split": dict(zip(SPLITS, split.sizes()))}


def _train_one(cfg: ExperimentConfig, data: dict, combine: str, seed: int, out_dir: Path):
    eval_samples = data["train"] if cfg.kd.eval_split == "train" else data["val"]
    return train_kd(data["train"], eval_samples, cfg.kd, seed=seed,
                    model=cfg.model.kwargs(combine), out_dir=out_dir)


def stage_train_kd(run: Run) -> dict:
    cfg = run.cfg
    data = run.load_data()
    seed = stage_seeds(cfg.seed)["train-kd"]
    out = run.dir("kd")
    if out.exists():
        shutil.rmtree(out)
    if cfg.model.combine != SWEEP:
        res = _train_one(cfg, data, cfg.model.combine, seed, out)
        return {"combine": cfg.model.combine, "best_epoch": res.best_epoch,
                "best_student_iou": res.best_student_iou}

    # pick the fusion mode by validation change-IoU of the plain student map
    threshold = _stage_threshold(cfg)
    scores = {}
    for mode in ("subtract", "abs-subtract", "concat"):
        res = _train_one(cfg, data, mode, seed, out / "sweep" / mode)
        maps = infer_maps(res.student, data["val"], "student")
        scores[mode] = change_iou(maps, [s.mask for s in data["val"]], threshold)
    best = max(scores, key=scores.get)
    for name in ("teacher.pt", "student.pt", "history.csv"):
        shutil.copy(out / "sweep" / best / name, out / name)
    (out / "combine_sweep.json").write_text(json.dumps({"scores": scores, "selected": best}, indent=2))
    return {"combine": best, "sweep": scores}


def stage_comparison(teacher, student, samples, scales, threshold: float):
    """Change-IoU of teacher CAM, plain student, student+MI and student+MSI maps.

    Returns ``(ious, maps)``, both keyed by method name.
    """
    masks = [s.mask for s in samples]
    maps = {
        "cam": infer_maps(teacher, samples, "cam"),
        "student": infer_maps(student, samples, "student"),
        "mi": infer_maps(student, samples, "mi", scales),
        "msi": infer_maps(student, samples, "msi", scales),
    }
    return {m: change_iou(maps[m], masks, threshold) for m in STAGE_METHODS}, maps


def write_stage_table(rows: list[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "stage_table.json").write_text(json.dumps(rows, indent=2))
    cols = ["split", "threshold"] + [STAGE_COLUMNS[m] for m in STAGE_METHODS]
    with open(out_dir / "stage_table.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in cols})


def _stage_threshold(cfg: ExperimentConfig) -> float:
    return 0.3 if cfg.msi.bg_threshold == SWEEP else cfg.msi.bg_threshold


def stage_infer(run: Run) -> dict:
    cfg = run.cfg
    data = run.load_data()
    teacher, _ = load_checkpoint(run.dir("kd") / "teacher.pt")
    student, _ = load_checkpoint(run.dir("kd") / "student.pt")
    out = run.dir("infer")
    if out.exists():
        shutil.rmtree(out)
    threshold = _stage_threshold(cfg)
    rows = []
    for name in SPLITS:
        if not data[name]:
            continue
        ious, maps = stage_comparison(teacher, student, data[name], cfg.msi.scale_set(), threshold)
        ids = [s.id for s in data[name]]
        for method in STAGE_METHODS:
            save_maps(ids, maps[method], out / name / method, png=method == "msi")
        rows.append({"split": name, "threshold": threshold,
                     **{STAGE_COLUMNS[m]: ious[m] for m in STAGE_METHODS}})
    write_stage_table(rows, out)
    return {"stage_table": rows}


def stage_pseudo(run: Run) -> dict:
    cfg = run.cfg
    data = run.load_data()
    out = run.dir("pseudo")
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    info = {}
    if cfg.msi.bg_threshold == SWEEP:
        if not data["val"]:
            raise ConfigError("bg_threshold = sweep needs a non-empty validation split")
        val_maps = load_maps(run.dir("infer") / "val" / "msi")
        best, scores = sweep_threshold([val_maps[s.id] for s in data["val"]], [s.mask for s in data["val"]])
        threshold = best
        info["sweep"] = {f"{k:.1f}": v for k, v in scores.items()}
    else:
        threshold = cfg.msi.bg_threshold
    info["threshold"] = threshold
    maps = load_maps(run.dir("infer") / "train" / "msi")
    labels = out / "train"
    labels.mkdir()
    fractions = []
    for s in data["train"]:
        lab = pseudo_label(maps[s.id], threshold)
        save_mask(lab, labels / f"{s.id}.png")
        fractions.append(float(lab.mean()))
    info["change_fraction"] = float(np.mean(fractions))
    (out / "threshold.json").write_text(json.dumps(info, indent=2))
    return info


def stage_train_seg(run: Run) -> dict:
    cfg = run.cfg
    data = run.load_data()
    labels = run.dir("pseudo") / "train"
    pairs = [(s, load_mask(labels / f"{s.id}.png")) for s in data["train"]]
    out = run.dir("seg")
    if out.exists():
        shutil.rmtree(out)
    res = train_segnet(pairs, cfg.seg, seed=stage_seeds(cfg.seed)["train-seg"], model=cfg.seg_kwargs())
    save_checkpoint(res.final, out / "segnet.pt", epoch=cfg.seg.epochs)
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "lr"])
        writer.writeheader()
        writer.writerows(res.history)
    return {"final_loss": res.history[-1]["loss"]}


def stage_eval(run: Run) -> dict:
    data = run.load_data()
    net, _ = load_checkpoint(run.dir("seg") / "segnet.pt")
    if not data["test"]:
        raise ConfigError("test split is empty")
    report, rows = evaluate(net, data["test"])
    payload = write_report(report, rows, run.dir("eval"))
    return payload["metrics"]


STAGE_FNS = {
    "synth": stage_synth,
    "train-kd": stage_train_kd,
    "infer": stage_infer,
    "pseudo": stage_pseudo,
    "train-seg": stage_train_seg,
    "eval": stage_eval,
}


def run_stage(run: Run, stage: str) -> dict:
    if stage not in STAGE_FNS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    t0 = time.time()
    log.info("stage %s: start", stage)
    try:
        info = STAGE_FNS[stage](run)
    except Exception as exc:
        run.record(stage, status="failed", error=f"{type(exc).__name__}: {exc}",
                   seconds=round(time.time() - t0, 2))
        raise StageError(stage, exc) from exc
    run.record(stage, status="ok", seconds=round(time.time() - t0, 2), info=info)
    log.info("stage %s: done in %.1fs", stage, time.time() - t0)
    return info


def run_pipeline(cfg: ExperimentConfig, out=None, stage_from: str = "synth", figures: bool = True) -> Run:
    run = Run(out or cfg.out, cfg)
    if stage_from not in STAGES:
        raise ConfigError(f"unknown stage {stage_from!r}; choose from {', '.join(STAGES)}")
    run.root.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run.root / "config.ini")
    (run.root / "seeds.json").write_text(json.dumps({"seed": cfg.seed, **stage_seeds(cfg.seed)}, indent=2))
    for stage in STAGES[STAGES.index(stage_from):]:
        run_stage(run, stage)
    if figures:
        from .plotting import render_run_figures

        try:
            render_run_figures(run)
        except Exception as exc:
            raise StageError("figure", exc) from exc
    return run


def select_samples(data: dict, ids) -> tuple[list, list[str]]:
    """Look up samples by id across splits; returns ``(found, missing_ids)``."""
    pool = {s.id: s for name in SPLITS for s in data[name]}
    found = [pool[i] for i in ids if i in pool]
    missing = [i for i in ids if i not in pool]
    return found, missing

