"""Bi-temporal change-pair datasets: synthetic generation, disk I/O, tiling and splits.

On disk a dataset uses the usual change-detection layout::

    root/A/<name>.png      pre-event image (8-bit RGB)
    root/B/<name>.png      post-event image
    root/label/<name>.png  change mask, 0 = no change, 255 = change

Synthetic datasets add a ``meta.json`` next to the split directories.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError

OBJECT_KINDS = ("rectangle", "ellipse", "l-shape")
SPLITS = ("train", "val", "test")


@dataclass
class ImagePair:
    pre: np.ndarray  # H x W x C float32
    post: np.ndarray
    id: str

    def __post_init__(self):
        if self.pre.shape != self.post.shape:
            raise ConfigError(
                f"pair {self.id}: pre {self.pre.shape} and post {self.post.shape} differ"
            )

    @property
    def shape(self):
        return self.pre.shape[:2]


@dataclass
class Sample:
    pair: ImagePair
    mask: np.ndarray  # H x W uint8 in {0, 1}
    label: int

    @property
    def id(self) -> str:
        return self.pair.id


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


@dataclass
class SynthSpec:
    """Parameters of the synthetic change-pair generator.

    Scenes are a smooth textured background with a few persistent objects.
    A change pair additionally inserts objects into, or removes them from,
    the post image; the mask marks exactly those object footprints.
    """

    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 3
    kinds: tuple[str, ...] = OBJECT_KINDS
    min_size: int = 12
    max_size: int = 26
    static_objects: int = 2
    texture: float = 0.08
    noise: float = 0.02
    no_change_fraction: float = 0.3
    jitter: float = 0.05
    stride: int = 16

    def validate(self):
        if self.height <= 0 or self.width <= 0:
            raise ConfigError("synthetic canvas must have positive size")
        if self.height % self.stride or self.width % self.stride:
            raise ConfigError(
                f"canvas {self.height}x{self.width} not divisible by stride {self.stride}"
            )
        if not self.kinds:
            raise ConfigError("at least one object kind is required")
        unknown = set(self.kinds) - set(OBJECT_KINDS)
        if unknown:
            raise ConfigError(f"unknown object kinds: {sorted(unknown)}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if not 2 <= self.min_size <= self.max_size <= min(self.height, self.width):
            raise ConfigError("object size range does not fit the canvas")
        if not 0.0 <= self.no_change_fraction <= 1.0:
            raise ConfigError("no_change_fraction must lie in [0, 1]")
        if self.texture < 0 or self.noise < 0 or self.jitter < 0:
            raise ConfigError("noise levels must be nonnegative")


def _shape_mask(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    if kind == "rectangle":
        mask[:] = True
    elif kind == "ellipse":
        yy, xx = np.mgrid[:h, :w]
        cy, cx = (h - 1) / 2, (w - 1) / 2
        mask = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    else:  # l-shape: full rectangle minus one corner quadrant
        mask[:] = True
        ch, cw = max(1, h // 2), max(1, w // 2)
        corner = rng.integers(4)
        rs = slice(0, ch) if corner < 2 else slice(h - ch, h)
        cs = slice(0, cw) if corner % 2 == 0 else slice(w - cw, w)
        mask[rs, cs] = False
    return mask


def _place_object(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    kind = spec.kinds[rng.integers(len(spec.kinds))]
    h = int(rng.integers(spec.min_size, spec.max_size + 1))
    w = int(rng.integers(spec.min_size, spec.max_size + 1))
    top = int(rng.integers(0, spec.height - h + 1))
    left = int(rng.integers(0, spec.width - w + 1))
    footprint = np.zeros((spec.height, spec.width), dtype=bool)
    footprint[top:top + h, left:left + w] = _shape_mask(kind, h, w, rng)
    return footprint


def _object_color(base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    sign = np.where(rng.random(3) < 0.5, -1.0, 1.0)
    if base.mean() > 0.6:
        sign[:] = -1.0
    elif base.mean() < 0.3:
        sign[:] = 1.0
    return np.clip(base + sign * rng.uniform(0.25, 0.5, size=3), 0.0, 1.0)


def _background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.25, 0.65, size=3)
    field_ = gaussian_filter(rng.normal(size=(spec.height, spec.width, 3)), sigma=(4, 4, 0))
    field_ /= field_.std() + 1e-12
    return base + spec.texture * field_, base


def _photometric(img: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    gain = 1.0 + rng.uniform(-spec.jitter, spec.jitter)
    offset = rng.uniform(-spec.jitter, spec.jitter)
    out = img * gain + offset + rng.normal(scale=spec.noise, size=img.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _generate_one(spec: SynthSpec, seed: int, index: int) -> Sample:
    rng = np.random.default_rng([seed, index])
    scene, base = _background(spec, rng)
    for _ in range(spec.static_objects):
        scene[_place_object(spec, rng)] = _object_color(base, rng)
    pre, post = scene.copy(), scene.copy()
    mask = np.zeros((spec.height, spec.width), dtype=np.uint8)

    changed = rng.random() >= spec.no_change_fraction
    if changed:
        count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        for _ in range(count):
            footprint = _place_object(spec, rng)
            color = _object_color(base, rng)
            # appear: drawn into post only; vanish: drawn into pre only
            target = post if rng.random() < 0.5 else pre
            target[footprint] = color
            mask[footprint] = 1

    pair = ImagePair(_photometric(pre, spec, rng), _photometric(post, spec, rng), f"syn{index:05d}")
    return Sample(pair, mask, derive_image_label(mask))


def generate_synthetic_dataset(spec: SynthSpec, n: int, seed: int) -> list[Sample]:
    """Render ``n`` deterministic change pairs.

    Each sample draws from its own generator keyed on ``(seed, index)`` so
    samples can be produced independently and in any order.
    """
    spec.validate()
    if n < 1:
        raise ConfigError("n must be >= 1")
    return [_generate_one(spec, seed, i) for i in range(n)]


def derive_image_label(mask: np.ndarray, min_fraction: float = 0.0) -> int:
    if not 0.0 <= min_fraction < 1.0:
        raise ConfigError("min_fraction must lie in [0, 1)")
    frac = np.count_nonzero(mask) / mask.size
    return int(frac > min_fraction)


def tile_scene(pair: ImagePair, mask: np.ndarray, tile: int, stride: int = 1):
    """Cut a scene into non-overlapping ``tile`` x ``tile`` patches, row-major.

    Partial tiles at the right and bottom edges are dropped.
    """
    if tile < stride or tile < 1:
        raise ConfigError(f"tile {tile} smaller than network stride {stride}")
    h, w = pair.shape
    out = []
    for r in range(h // tile):
        for c in range(w // tile):
            rs, cs = slice(r * tile, (r + 1) * tile), slice(c * tile, (c + 1) * tile)
            sub = ImagePair(pair.pre[rs, cs], pair.post[rs, cs], f"{pair.id}_r{r}_c{c}")
            out.append((sub, mask[rs, cs]))
    return out


def _sample_id(s) -> str:
    if isinstance(s, str):
        return s
    return s.id


def split_dataset(samples: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Shuffle ids under ``seed`` and cut them into train/val/test.

    Val and test sizes are ``floor(n * ratio)``; the remainder goes to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    ids = [_sample_id(s) for s in samples]
    n = len(ids)
    if n < 3:
        raise ConfigError(f"need at least 3 samples to split, got {n}")
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        seed=seed,
    )


# -- disk I/O -----------------------------------------------------------------

def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr > 127).astype(np.uint8)


def save_samples(samples: Sequence[Sample], root) -> None:
    root = Path(root)
    for sub in ("A", "B", "label"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        name = f"{s.id}.png"
        Image.fromarray(_to_uint8(s.pair.pre), mode="RGB").save(root / "A" / name)
        Image.fromarray(_to_uint8(s.pair.post), mode="RGB").save(root / "B" / name)
        save_mask(s.mask, root / "label" / name)


def _load_rgb(path, standardize: bool) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    if standardize:
        img = (img - img.mean(axis=(0, 1))) / (img.std(axis=(0, 1)) + 1e-6)
    return img


def load_samples(root, min_fraction: float = 0.0, standardize: bool = False) -> list[Sample]:
    """Read an ``A/``, ``B/``, ``label/`` directory into samples sorted by name."""
    root = Path(root)
    for sub in ("A", "B", "label"):
        if not (root / sub).is_dir():
            raise ConfigError(f"{root} has no {sub}/ directory")
    samples = []
    for a_path in sorted((root / "A").iterdir()):
        if a_path.name.startswith("."):
            continue
        b_path, l_path = root / "B" / a_path.name, root / "label" / a_path.name
        if not b_path.exists() or not l_path.exists():
            raise ConfigError(f"{a_path.name} is missing its B/ or label/ counterpart")
        pair = ImagePair(_load_rgb(a_path, standardize), _load_rgb(b_path, standardize), a_path.stem)
        mask = load_mask(l_path)
        if mask.shape != pair.shape:
            raise ConfigError(f"{a_path.name}: mask shape {mask.shape} != image {pair.shape}")
        samples.append(Sample(pair, mask, derive_image_label(mask, min_fraction)))
    return samples


def tile_samples(samples: Sequence[Sample], tile: int, stride: int = 1,
                 min_fraction: float = 0.0) -> list[Sample]:
    out = []
    for s in samples:
        if s.pair.shape == (tile, tile):
            out.append(s)
            continue
        for pair, mask in tile_scene(s.pair, s.mask, tile, stride):
            out.append(Sample(pair, mask, derive_image_label(mask, min_fraction)))
    return out


def select(samples: Sequence[Sample], ids: Sequence[str]) -> list[Sample]:
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in ids]


@dataclass
class DatasetMeta:
    source: str
    seed: int
    split: dict = field(default_factory=dict)
    spec: dict | None = None
    n: int | None = None


def write_split_dataset(samples: Sequence[Sample], split: DatasetSplit, root,
                        spec: SynthSpec | None = None, source: str = "synthetic") -> Path:
    root = Path(root)
    for name in SPLITS:
        save_samples(select(samples, getattr(split, name)), root / name)
    meta = DatasetMeta(
        source=source,
        seed=split.seed,
        split={name: len(getattr(split, name)) for name in SPLITS},
        spec=asdict(spec) if spec is not None else None,
        n=len(samples),
    )
    (root / "meta.json").write_text(json.dumps(asdict(meta), indent=2))
    return root


def load_split_dataset(root, tile: int | None = None, ratios=(0.8, 0.1, 0.1), seed: int = 0,
                       min_fraction: float = 0.0, stride: int = 1,
                       standardize: bool = False) -> dict[str, list[Sample]]:
    """Load a dataset as ``{"train": [...], "val": [...], "test": [...]}``.

    If ``root`` already holds ``train/``, ``val/`` and ``test/`` directories
    they are used as-is (after tiling); otherwise ``root`` is read as one pool,
    tiled and split under ``seed``.
    """
    root = Path(root)
    if all((root / name / "A").is_dir() for name in SPLITS):
        out = {}
        for name in SPLITS:
            samples = load_samples(root / name, min_fraction, standardize)
            out[name] = tile_samples(samples, tile, stride, min_fraction) if tile else samples
        return out
    pool = load_samples(root, min_fraction, standardize)
    if tile:
        pool = tile_samples(pool, tile, stride, min_fraction)
    split = split_dataset(pool, ratios, seed)
    return {name: select(pool, getattr(split, name)) for name in SPLITS}


def stack_samples(samples: Sequence[Sample]):
    """Stack samples into NCHW float arrays plus masks and labels."""
    pre = np.stack([s.pair.pre for s in samples]).transpose(0, 3, 1, 2)
    post = np.stack([s.pair.post for s in samples]).transpose(0, 3, 1, 2)
    masks = np.stack([s.mask for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.float32)
    return (np.ascontiguousarray(pre, dtype=np.float32),
            np.ascontiguousarray(post, dtype=np.float32), masks, labels)
