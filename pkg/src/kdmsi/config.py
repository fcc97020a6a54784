"""Experiment configuration as a sectioned INI file.

Every field has a default, so a minimal file can be empty or name only the
dataset.  ``combine = sweep`` and ``bg_threshold = sweep`` ask the pipeline
to pick the value by validation change-IoU.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SynthSpec
from .errors import ConfigError
from .kd import KDTrainConfig
from .msi import DEFAULT_SCALES, ScaleSet
from .segnet import SegTrainConfig

SWEEP = "sweep"
SECTIONS = ("dataset", "model", "kd", "msi", "seg", "run")


@dataclass
class DatasetConfig:
    source: str = "synthetic"  # or a directory holding A/, B/, label/
    n: int = 250
    synth: SynthSpec = field(default_factory=SynthSpec)
    tile: int | None = None
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    min_fraction: float = 0.0
    standardize: bool = False

    @property
    def synthetic(self) -> bool:
        return self.source == "synthetic"


@dataclass
class ModelConfig:
    backbone: str = "tiny-cnn"
    combine: str = "abs-subtract"
    channels: tuple[int, ...] = (16, 32, 64, 64)
    norm: bool = True

    def kwargs(self, combine: str | None = None) -> dict:
        return dict(backbone=self.backbone, combine=combine or self.combine,
                    channels=self.channels, norm=self.norm)


@dataclass
class MSIConfig:
    scales: tuple[float, ...] = DEFAULT_SCALES
    flip: bool = True
    flip_axis: str = "width"
    bg_threshold: float | str = 0.3

    def scale_set(self) -> ScaleSet:
        return ScaleSet(tuple(self.scales), self.flip, self.flip_axis)


@dataclass
class SegModelConfig:
    context_channels: int = 32
    low_channels: int = 16
    rates: tuple[int, ...] = (1, 2, 4)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    kd: KDTrainConfig = field(default_factory=KDTrainConfig)
    msi: MSIConfig = field(default_factory=MSIConfig)
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    seg_model: SegModelConfig = field(default_factory=SegModelConfig)
    seed: int = 0
    out: str = "runs/default"
    figure_samples: int = 4

    def seg_kwargs(self) -> dict:
        return dict(backbone=self.model.backbone, channels=self.model.channels, norm=self.model.norm,
                    **asdict(self.seg_model))


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_tuple(text: str, kind):
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(kind(p) for p in parts)


# value parsers for fields whose default does not reveal the type
_SPECIAL = {
    ("kd", "scale_aug"): lambda v: None if v.lower() == "none" else _parse_tuple(v, float),
    ("dataset", "tile"): lambda v: None if v.lower() == "none" else int(v),
    ("dataset", "kinds"): lambda v: _parse_tuple(v, str),
    ("dataset", "ratios"): lambda v: _parse_tuple(v, float),
    ("model", "channels"): lambda v: _parse_tuple(v, int),
    ("msi", "scales"): lambda v: _parse_tuple(v, float),
    ("msi", "bg_threshold"): lambda v: SWEEP if v.lower() == SWEEP else float(v),
    ("seg", "rates"): lambda v: _parse_tuple(v, int),
}


def _coerce(section: str, key: str, value: str, default):
    try:
        if (section, key) in _SPECIAL:
            return _SPECIAL[(section, key)](value.strip())
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return _parse_tuple(value, type(default[0]) if default else str)
        return value.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {value!r}: {exc}") from None


def _update(section: str, obj, values: dict):
    names = {f.name for f in fields(obj)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    changes = {k: _coerce(section, k, v, getattr(obj, k)) for k, v in values.items()}
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _split_keys(values: dict, names) -> tuple[dict, dict]:
    names = set(names)
    return ({k: v for k, v in values.items() if k in names},
            {k: v for k, v in values.items() if k not in names})


def from_sections(sections: dict[str, dict[str, str]]) -> ExperimentConfig:
    unknown = set(sections) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = ExperimentConfig()

    ds = dict(sections.get("dataset", {}))
    synth_keys, ds = _split_keys(ds, [f.name for f in fields(SynthSpec)])
    cfg.dataset = _update("dataset", cfg.dataset, ds)
    cfg.dataset.synth = _update("dataset", cfg.dataset.synth, synth_keys)

    cfg.model = _update("model", cfg.model, sections.get("model", {}))
    cfg.kd = _update("kd", cfg.kd, sections.get("kd", {}))
    cfg.msi = _update("msi", cfg.msi, sections.get("msi", {}))

    seg_model_keys, seg = _split_keys(sections.get("seg", {}), [f.name for f in fields(SegModelConfig)])
    cfg.seg = _update("seg", cfg.seg, seg)
    cfg.seg_model = _update("seg", cfg.seg_model, seg_model_keys)

    run = dict(sections.get("run", {}))
    for key in list(run):
        if key not in ("seed", "out", "figure_samples"):
            raise ConfigError(f"[run] unknown key {key!r}")
        setattr(cfg, key, _coerce("run", key, run[key], getattr(cfg, key)))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.dataset.synthetic:
        cfg.dataset.synth.validate()
        if cfg.dataset.n < 3:
            raise ConfigError("synthetic dataset needs at least 3 pairs")
    if len(cfg.dataset.ratios) != 3:
        raise ConfigError("dataset ratios need three values (train, val, test)")
    if cfg.model.combine != SWEEP and cfg.model.combine not in ("subtract", "abs-subtract", "concat"):
        raise ConfigError(f"unknown combine mode {cfg.model.combine!r}")
    t = cfg.msi.bg_threshold
    if t != SWEEP and not 0 < t < 1:
        raise ConfigError("bg_threshold must lie in (0, 1) or be 'sweep'")
    cfg.msi.scale_set()


def read_sections(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def apply_overrides(sections: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings on top of parsed sections."""
    sections = {k: dict(v) for k, v in sections.items()}
    for item in overrides or ():
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        sections.setdefault(section, {})[key] = value
    return sections


def load_config(path=None, overrides=None) -> ExperimentConfig:
    sections = read_sections(path) if path else {}
    return from_sections(apply_overrides(sections, overrides))


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def to_sections(cfg: ExperimentConfig) -> dict[str, dict[str, str]]:
    ds = {k: v for k, v in asdict(cfg.dataset).items() if k != "synth"}
    ds.update(asdict(cfg.dataset.synth))
    seg = asdict(cfg.seg)
    seg.update(asdict(cfg.seg_model))
    raw = {
        "dataset": ds,
        "model": asdict(cfg.model),
        "kd": asdict(cfg.kd),
        "msi": asdict(cfg.msi),
        "seg": seg,
        "run": {"seed": cfg.seed, "out": cfg.out, "figure_samples": cfg.figure_samples},
    }
    return {s: {k: _fmt(v) for k, v in vals.items()} for s, vals in raw.items()}


def write_config(cfg: ExperimentConfig, path) -> Path:
    parser = configparser.ConfigParser()
    parser.read_dict(to_sections(cfg))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)
    return path
