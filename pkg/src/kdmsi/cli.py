"""Command-line entry point: ``kdmsi <command> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, from_sections, read_sections, write_config
from .errors import ConfigError
from .metrics import HEADLINE_METRICS
from .pipeline import EXIT_CODES, STAGES, Run, StageError, run_pipeline, run_stage

log = logging.getLogger("kdmsi")


def resolve_config(config=None, out=None, seed=None, overrides=None) -> ExperimentConfig:
    """Explicit ``--config`` wins; otherwise reuse ``<out>/config.ini`` when present."""
    if config is None and out is not None and (Path(out) / "config.ini").exists():
        config = Path(out) / "config.ini"
    sections = read_sections(config) if config else {}
    cfg = from_sections(apply_overrides(sections, overrides))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, out=str(out))
    return cfg


def cmd_stage(cfg: ExperimentConfig, stage: str) -> dict:
    run = Run(cfg.out, cfg)
    run.root.mkdir(parents=True, exist_ok=True)
    if not (run.root / "config.ini").exists():
        write_config(cfg, run.root / "config.ini")
    return run_stage(run, stage)


def cmd_synth(cfg: ExperimentConfig) -> dict:
    return cmd_stage(cfg, "synth")


def cmd_pipeline(cfg: ExperimentConfig, stage_from: str = "synth") -> dict:
    run = run_pipeline(cfg, stage_from=stage_from)
    return {"out": str(run.root), "report": json.loads((run.dir("eval") / "report.json").read_text())}


def cmd_figure(run_dir, ids) -> tuple[list[Path], list[str]]:
    from .plotting import render_panels

    cfg = resolve_config(out=run_dir)
    return render_panels(Run(run_dir, cfg), ids)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdmsi", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="INI experiment config")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", type=Path, help="run directory (overrides [run] out)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")
        return p

    for name in STAGES:
        common(sub.add_parser(name, help=f"run the {name} stage only"))
    p = common(sub.add_parser("pipeline", help="run every stage in order"))
    p.add_argument("--stage-from", choices=STAGES, default="synth",
                   help="resume from this stage using artifacts already in --out")
    p = sub.add_parser("figure", help="render six-panel probability-map rows")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("ids", nargs="+", help="sample ids")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "figure":
            written, missing = cmd_figure(args.out, args.ids)
            for path in written:
                print(path)
            if not written:
                log.error("none of the requested samples were found")
                return EXIT_CODES["figure"]
            return 0
        cfg = resolve_config(args.config, args.out, args.seed, args.set)
        if args.command == "pipeline":
            result = cmd_pipeline(cfg, args.stage_from)
            metrics = result["report"]["metrics"]
            print(",".join(HEADLINE_METRICS))
            print(",".join(repr(metrics[k]) for k in HEADLINE_METRICS))
        else:
            print(json.dumps(cmd_stage(cfg, args.command), indent=2))
    except StageError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CODES["config"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
