import hashlib
import json
import shutil

import numpy as np
import pytest
import torch
from PIL import Image

from kdmsi.cli import cmd_figure, cmd_synth, main, resolve_config
from kdmsi.data import generate_synthetic_dataset, split_dataset
from kdmsi.kd import derive_seeds
from kdmsi.models import build_score_net, load_checkpoint
from kdmsi.msi import save_maps
from kdmsi.pipeline import EXIT_CODES, Run, stage_seeds
from kdmsi.plotting import panel_tile

TINY = [
    "dataset.n=12", "dataset.height=32", "dataset.width=32", "dataset.min_size=6",
    "dataset.max_size=12", "dataset.ratios=0.5, 0.25, 0.25",
    "kd.epochs=1", "kd.batch_size=4", "seg.epochs=1", "seg.batch_size=4",
    "model.channels=8, 16", "seg.context_channels=8", "seg.low_channels=4",
    "msi.scales=1.0, 2.0", "run.figure_samples=1",
]


def tiny_args(out, *extra):
    args = ["--out", str(out)]
    for item in TINY + list(extra):
        args += ["--set", item]
    return args


def tree_hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_layout_and_determinism(tmp_path):
    assert main(["synth"] + tiny_args(tmp_path / "a")) == 0
    assert main(["synth"] + tiny_args(tmp_path / "b")) == 0
    meta = json.loads((tmp_path / "a" / "data" / "meta.json").read_text())
    assert meta["split"] == {"train": 6, "val": 3, "test": 3}
    for name, count in meta["split"].items():
        assert len(list((tmp_path / "a" / "data" / name / "A").glob("*.png"))) == count
    assert tree_hashes(tmp_path / "a" / "data") == tree_hashes(tmp_path / "b" / "data")


def test_synth_counts_match_split(tmp_path):
    cfg = resolve_config(out=tmp_path, overrides=TINY)
    cmd_synth(cfg)
    seed = stage_seeds(cfg.seed)["synth"]
    samples = generate_synthetic_dataset(cfg.dataset.synth, cfg.dataset.n, seed)
    split = split_dataset(samples, cfg.dataset.ratios, seed)
    data = Run(tmp_path, cfg).load_data()
    for name in ("train", "val", "test"):
        assert sorted(s.id for s in data[name]) == sorted(getattr(split, name))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["pipeline"] + tiny_args(out)) == 0
    return out


def test_pipeline_artifacts(tiny_run):
    for rel in ["config.ini", "manifest.json", "data/meta.json", "kd/teacher.pt", "kd/student.pt",
                "kd/history.csv", "infer/stage_table.csv", "infer/train/msi/maps.npz",
                "pseudo/threshold.json", "seg/segnet.pt", "seg/history.csv", "eval/report.json",
                "eval/report.csv", "eval/per_sample.csv", "figures/history.png",
                "figures/stage_table.png"]:
        assert (tiny_run / rel).exists(), rel
    report = json.loads((tiny_run / "eval" / "report.json").read_text())
    assert set(report["metrics"]) == {"f1", "oa", "ciou", "miou", "fp", "fn"}
    assert set(report["counts"]) == {"tp", "fp", "fn", "tn"}
    manifest = json.loads((tiny_run / "manifest.json").read_text())
    assert all(v["status"] == "ok" for v in manifest["stages"].values())
    header = (tiny_run / "infer" / "stage_table.csv").read_text().splitlines()[0]
    assert header == "split,threshold,teacher_cam,student,student_mi,student_msi"


def test_eval_rerun_is_bit_exact(tiny_run):
    before = (tiny_run / "eval" / "report.json").read_bytes()
    assert main(["pipeline", "--out", str(tiny_run), "--stage-from", "eval"]) == 0
    assert (tiny_run / "eval" / "report.json").read_bytes() == before


def test_full_rerun_is_deterministic(tiny_run, tmp_path):
    assert main(["pipeline"] + tiny_args(tmp_path)) == 0
    for rel in ("eval/report.json", "infer/stage_table.json"):
        assert (tmp_path / rel).read_bytes() == (tiny_run / rel).read_bytes()


def test_stage_failure_exit_code(tmp_path):
    # train-kd without data fails with its own code and records the failure
    assert main(["train-kd"] + tiny_args(tmp_path)) == EXIT_CODES["train-kd"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["stages"]["train-kd"]["status"] == "failed"
    assert main(["synth", "--out", str(tmp_path), "--set", "kd.lam=-2"]) == EXIT_CODES["config"]
    assert len(set(EXIT_CODES.values())) == len(EXIT_CODES)


def test_sweep_options(tmp_path):
    args = tiny_args(tmp_path, "model.combine=sweep", "msi.bg_threshold=sweep")
    assert main(["pipeline"] + args) == 0
    sweep = json.loads((tmp_path / "kd" / "combine_sweep.json").read_text())
    assert set(sweep["scores"]) == {"subtract", "abs-subtract", "concat"}
    info = json.loads((tmp_path / "pseudo" / "threshold.json").read_text())
    assert info["threshold"] in [round(0.1 * k, 1) for k in range(1, 10)]
    assert len(info["sweep"]) == 9


def test_figure_panels_and_missing_ids(tiny_run):
    ids = [line.split(",")[0] for line in (tiny_run / "eval" / "per_sample.csv").read_text().splitlines()[1:]]
    written, missing = cmd_figure(tiny_run, [ids[0], "nope"])
    assert missing == ["nope"] and len(written) == 1
    img = np.asarray(Image.open(written[0]))
    assert img.shape[:2] == (32, 6 * 32 + 5 * 4)
    assert main(["figure", "--out", str(tiny_run), ids[0], "nope"]) == 0
    assert main(["figure", "--out", str(tiny_run), "nope", "also-nope"]) == EXIT_CODES["figure"]


def test_figure_perfect_prediction(tiny_run, tmp_path):
    run_dir = shutil.copytree(tiny_run, tmp_path / "run")
    cfg = resolve_config(out=run_dir)
    data = Run(run_dir, cfg).load_data()
    sample = next(s for s in data["test"] + data["val"] + data["train"] if s.mask.any())
    # replace the saved MSI maps of the sample's split with the ground truth
    split = next(n for n in ("train", "val", "test") if sample.id in {s.id for s in data[n]})
    save_maps([s.id for s in data[split]], [s.mask.astype(np.float32) for s in data[split]],
              run_dir / "infer" / split / "msi", png=False)
    written, _ = cmd_figure(run_dir, [sample.id])
    img = np.asarray(Image.open(written[0]).convert("L"), dtype=np.float64) / 255
    msi_panel = panel_tile(img, 5, 32)
    pred = msi_panel > 0.5
    inter = np.logical_and(pred, sample.mask == 1).sum()
    union = np.logical_or(pred, sample.mask == 1).sum()
    assert inter / union > 0.99


def test_lambda_zero_ablation_leaves_student_untrained(tmp_path):
    assert main(["pipeline"] + tiny_args(tmp_path, "kd.lam=0", "kd.epochs=2")) == 0
    cfg = resolve_config(out=tmp_path)
    student, _ = load_checkpoint(tmp_path / "kd" / "student.pt")
    fresh = build_score_net(derive_seeds(stage_seeds(cfg.seed)["train-kd"], 3)[1], **cfg.model.kwargs())
    # batch-norm running statistics still track the data; learnable weights must not move
    for a, b in zip(student.parameters(), fresh.parameters()):
        assert torch.equal(a, b)
