"""Deterministic synthetic bitemporal change-detection datasets.

Each dataset is a pure function of its :class:`DatasetSpec`. Scenes hold a
sinusoidal background texture and a handful of parametric objects (box,
disc, bar); between the two acquisition times objects persist, appear or
disappear. Datasets differ along two axes: image style (brightness, colour
gain, noise, texture frequency) and labelling (which object classes count
as interesting changes, fine or dilated masks).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .netpbm import NetpbmError, read_pgm, read_ppm, write_pgm, write_ppm

__all__ = [
    "CLASSES",
    "SPLITS",
    "StyleSpec",
    "DatasetSpec",
    "ObjectRecord",
    "SamplePair",
    "ChangeDataset",
    "DatasetFormatError",
    "generate_pair",
    "build_split",
    "coarsen_label",
    "disc_offsets",
    "make_dataset_family",
    "save_pair",
    "load_pair",
    "save_dataset",
    "load_dataset",
    "read_manifest",
]

CLASSES = ("box", "disc", "bar")
SPLITS = ("train", "val", "test")
GRANULARITIES = ("fine", "coarse")
_CLASS_COLORS = {
    "box": (0.85, 0.25, 0.20),
    "disc": (0.20, 0.35, 0.90),
    "bar": (0.90, 0.85, 0.20),
}
_BACKGROUND = (0.35, 0.42, 0.30)
_FRAME_JITTER = 0.03


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class StyleSpec:
    brightness: float = 0.0
    gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise: float = 0.02
    texture_freq: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "gain", tuple(float(g) for g in self.gain))
        if not -0.3 <= self.brightness <= 0.3:
            raise ValueError(f"brightness {self.brightness} outside [-0.3, 0.3]")
        if len(self.gain) != 3 or not all(0.7 <= g <= 1.3 for g in self.gain):
            raise ValueError(f"gain {self.gain} must be three values in [0.7, 1.3]")
        if not 0.0 <= self.noise <= 0.1:
            raise ValueError(f"noise {self.noise} outside [0, 0.1]")
        if self.texture_freq <= 0:
            raise ValueError("texture_freq must be positive")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    seed: int = 0
    n_train: int = 400
    n_val: int = 100
    n_test: int = 100
    image_size: Tuple[int, int] = (64, 64)
    style: StyleSpec = field(default_factory=StyleSpec)
    interest_classes: Tuple[str, ...] = ("box", "disc")
    label_granularity: str = "fine"
    coarse_radius: int = 2
    change_rate: float = 0.5
    size_multiple: int = 16

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "interest_classes", tuple(self.interest_classes))
        h, w = self.image_size
        if h % self.size_multiple or w % self.size_multiple or h <= 0 or w <= 0:
            raise ValueError(f"image_size {self.image_size} must be positive multiples of {self.size_multiple}")
        if not self.interest_classes:
            raise ValueError("interest_classes must not be empty")
        for c in self.interest_classes:
            if c not in CLASSES:
                raise ValueError(f"unknown object class {c!r}; expected a subset of {CLASSES}")
        if self.label_granularity not in GRANULARITIES:
            raise ValueError(f"label_granularity must be one of {GRANULARITIES}, got {self.label_granularity!r}")
        if self.coarse_radius < 0:
            raise ValueError("coarse_radius must be >= 0")
        if not 0.0 <= self.change_rate <= 1.0:
            raise ValueError("change_rate must lie in [0, 1]")
        for n in (self.n_train, self.n_val, self.n_test):
            if n < 0:
                raise ValueError("split sizes must be >= 0")

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def to_kv(self) -> Dict[str, str]:
        s = self.style
        return {
            "name": self.name,
            "seed": str(self.seed),
            "n_train": str(self.n_train),
            "n_val": str(self.n_val),
            "n_test": str(self.n_test),
            "image_size": f"{self.image_size[0]},{self.image_size[1]}",
            "brightness": repr(s.brightness),
            "gain": ",".join(repr(g) for g in s.gain),
            "noise": repr(s.noise),
            "texture_freq": repr(s.texture_freq),
            "interest_classes": ",".join(self.interest_classes),
            "label_granularity": self.label_granularity,
            "coarse_radius": str(self.coarse_radius),
            "change_rate": repr(self.change_rate),
        }

    @classmethod
    def from_kv(cls, kv: Dict[str, str]) -> "DatasetSpec":
        """Parse string key-values; unknown keys raise ``KeyError`` naming the key."""
        allowed = set(cls(name="x").to_kv())
        for key in kv:
            if key not in allowed:
                raise KeyError(key)
        style_kw = {}
        kw = {}
        for key, raw in kv.items():
            raw = raw.strip()
            try:
                if key in ("brightness", "noise", "texture_freq"):
                    style_kw[key] = float(raw)
                elif key == "gain":
                    style_kw[key] = tuple(float(v) for v in raw.split(","))
                elif key in ("seed", "n_train", "n_val", "n_test", "coarse_radius"):
                    kw[key] = int(raw)
                elif key == "image_size":
                    kw[key] = tuple(int(v) for v in raw.split(","))
                elif key == "interest_classes":
                    kw[key] = tuple(v.strip() for v in raw.split(",") if v.strip())
                elif key == "change_rate":
                    kw[key] = float(raw)
                else:
                    kw[key] = raw
            except ValueError:
                raise ValueError(f"{key}: cannot parse {raw!r}") from None
        if "name" not in kw:
            raise ValueError("name: missing")
        return cls(style=StyleSpec(**style_kw), **kw)


@dataclass
class ObjectRecord:
    cls: str
    center: Tuple[int, int]
    size: Tuple[int, int]
    color: Tuple[float, float, float]
    state: str  # "persist", "appear" or "disappear"

    @property
    def changed(self) -> bool:
        return self.state != "persist"

    @property
    def present(self) -> Tuple[bool, bool]:
        return self.state != "appear", self.state != "disappear"

    def footprint(self, h: int, w: int) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = self.center
        a, b = self.size
        if self.cls == "disc":
            return (yy - cy) ** 2 + (xx - cx) ** 2 <= a * a
        # box and bar are axis-aligned rectangles with half-extents (a, b)
        return (np.abs(yy - cy) <= a) & (np.abs(xx - cx) <= b)


@dataclass
class SamplePair:
    x1: np.ndarray
    x2: np.ndarray
    label: np.ndarray
    provenance: List[ObjectRecord] = field(default_factory=list)


def disc_offsets(radius: int) -> List[Tuple[int, int]]:
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def coarsen_label(fine: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a disc of the given radius."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    fine = np.asarray(fine).astype(bool)
    if radius == 0:
        return fine.astype(np.uint8)
    h, w = fine.shape
    padded = np.pad(fine, radius)
    out = np.zeros_like(fine)
    for dy, dx in disc_offsets(radius):
        out |= padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
    return out.astype(np.uint8)


def _split_code(split: str) -> int:
    try:
        return SPLITS.index(split)
    except ValueError:
        raise ValueError(f"unknown split {split!r}") from None


def _sample_object(rng: np.random.Generator, h: int, w: int, change_rate: float) -> ObjectRecord:
    cls = CLASSES[rng.integers(len(CLASSES))]
    scale = min(h, w) / 64.0
    if cls == "box":
        half = int(round(rng.uniform(4, 7) * scale))
        size = (max(half, 2), max(int(round(half * rng.uniform(0.8, 1.2))), 2))
    elif cls == "disc":
        r = max(int(round(rng.uniform(4, 7) * scale)), 2)
        size = (r, r)
    else:
        length = max(int(round(rng.uniform(8, 13) * scale)), 4)
        thick = max(int(round(rng.uniform(1, 2) * scale)), 1)
        size = (thick, length) if rng.random() < 0.5 else (length, thick)
    cy = int(rng.integers(size[0], h - size[0]))
    cx = int(rng.integers(size[1], w - size[1]))
    base = np.array(_CLASS_COLORS[cls])
    color = tuple(float(v) for v in np.clip(base + rng.uniform(-0.08, 0.08, 3), 0, 1))
    if rng.random() < change_rate:
        state = "appear" if rng.random() < 0.5 else "disappear"
    else:
        state = "persist"
    return ObjectRecord(cls, (cy, cx), size, color, state)


def _overlaps(a: ObjectRecord, b: ObjectRecord, margin: int = 2) -> bool:
    return abs(a.center[0] - b.center[0]) <= a.size[0] + b.size[0] + margin and abs(
        a.center[1] - b.center[1]
    ) <= a.size[1] + b.size[1] + margin


def _background(rng: np.random.Generator, h: int, w: int, freq: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros((h, w))
    for amp in (0.06, 0.04):
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        f = freq * rng.uniform(0.8, 1.25)
        tex += amp * np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    base = np.array(_BACKGROUND) + rng.uniform(-0.05, 0.05, 3)
    return base[:, None, None] + tex[None]


def _stylize(img: np.ndarray, style: StyleSpec, rng: np.random.Generator) -> np.ndarray:
    gain = np.array(style.gain) * (1 + rng.uniform(-_FRAME_JITTER, _FRAME_JITTER, 3))
    bright = style.brightness + rng.uniform(-_FRAME_JITTER, _FRAME_JITTER)
    out = img * gain[:, None, None] + bright
    if style.noise > 0:
        out = out + rng.normal(0.0, style.noise, img.shape)
    out = np.clip(out, 0.0, 1.0)
    # 8-bit quantization so in-memory samples equal their on-disk round trip
    return (np.round(out * 255) / 255).astype(np.float32)


def generate_pair(spec: DatasetSpec, index: int, split: str = "train") -> SamplePair:
    """Render sample ``index`` of ``split``; a pure function of (spec, split, index)."""
    size = spec.split_size(split)
    if not 0 <= index < size:
        raise IndexError(f"index {index} out of range for {split} split of size {size}")
    rng = np.random.default_rng([spec.seed, _split_code(split), index])
    h, w = spec.image_size
    objects: List[ObjectRecord] = []
    for _ in range(int(rng.integers(3, 9))):
        for _attempt in range(20):
            obj = _sample_object(rng, h, w, spec.change_rate)
            if not any(_overlaps(obj, o) for o in objects):
                objects.append(obj)
                break
    scene = _background(rng, h, w, spec.style.texture_freq)
    frames = [scene.copy(), scene.copy()]
    fine = np.zeros((h, w), dtype=bool)
    for obj in objects:
        mask = obj.footprint(h, w)
        for t, present in enumerate(obj.present):
            if present:
                frames[t][:, mask] = np.array(obj.color)[:, None]
        if obj.changed and obj.cls in spec.interest_classes:
            fine |= mask
    x1 = _stylize(frames[0], spec.style, rng)
    x2 = _stylize(frames[1], spec.style, rng)
    if spec.label_granularity == "coarse":
        label = coarsen_label(fine, spec.coarse_radius)
    else:
        label = fine.astype(np.uint8)
    return SamplePair(x1, x2, label, objects)


@dataclass
class ChangeDataset:
    """Stacked arrays for one split: x1, x2 (N, 3, H, W) float32 in [0, 1], label (N, H, W) uint8."""

    name: str
    x1: np.ndarray
    x2: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        if self.x1.shape != self.x2.shape:
            raise ValueError(f"x1 {self.x1.shape} and x2 {self.x2.shape} differ")
        if self.label.shape != (self.x1.shape[0],) + self.x1.shape[2:]:
            raise ValueError(f"label shape {self.label.shape} does not match images {self.x1.shape}")

    def __len__(self) -> int:
        return self.x1.shape[0]

    def subset(self, indices) -> "ChangeDataset":
        idx = np.asarray(indices)
        return ChangeDataset(self.name, self.x1[idx], self.x2[idx], self.label[idx])

    def fraction(self, frac: float) -> "ChangeDataset":
        """Leading ``frac`` of the samples (at least one)."""
        n = max(1, int(round(len(self) * frac)))
        return self.subset(np.arange(n))


def build_split(spec: DatasetSpec, split: str = "train", limit: Optional[int] = None) -> ChangeDataset:
    n = spec.split_size(split) if limit is None else min(limit, spec.split_size(split))
    h, w = spec.image_size
    x1 = np.empty((n, 3, h, w), np.float32)
    x2 = np.empty((n, 3, h, w), np.float32)
    label = np.empty((n, h, w), np.uint8)
    for i in range(n):
        pair = generate_pair(spec, i, split)
        x1[i], x2[i], label[i] = pair.x1, pair.x2, pair.label
    return ChangeDataset(spec.name, x1, x2, label)


def make_dataset_family(base_seed: int = 0, **overrides) -> Tuple[DatasetSpec, DatasetSpec, DatasetSpec, DatasetSpec]:
    """Historical, style-shifted, label-shifted and doubly shifted datasets.

    ``overrides`` (e.g. split sizes, image_size) apply to all four.
    """
    plain = StyleSpec()
    shifted = StyleSpec(brightness=0.15, gain=(1.25, 0.8, 1.1), noise=0.06, texture_freq=0.16)
    fine = dict(interest_classes=("box", "disc"), label_granularity="fine")
    coarse = dict(interest_classes=("box", "bar"), label_granularity="coarse")
    hist = DatasetSpec(name="hist", seed=base_seed * 4 + 0, style=plain, **fine, **overrides)
    style = DatasetSpec(name="style", seed=base_seed * 4 + 1, style=shifted, **fine, **overrides)
    label = DatasetSpec(name="label", seed=base_seed * 4 + 2, style=plain, **coarse, **overrides)
    both = DatasetSpec(name="both", seed=base_seed * 4 + 3, style=shifted, **coarse, **overrides)
    return hist, style, label, both


# -- on-disk layout -----------------------------------------------------------


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def save_pair(pair: SamplePair, directory, index: int) -> None:
    """Write A/<index>.ppm, B/<index>.ppm and label/<index>.pgm under ``directory``."""
    for sub in ("A", "B", "label"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    stem = f"{index:05d}"
    write_ppm(os.path.join(directory, "A", stem + ".ppm"), _to_u8(pair.x1).transpose(1, 2, 0))
    write_ppm(os.path.join(directory, "B", stem + ".ppm"), _to_u8(pair.x2).transpose(1, 2, 0))
    write_pgm(os.path.join(directory, "label", stem + ".pgm"), (pair.label > 0).astype(np.uint8) * 255)


def load_pair(directory, index: int) -> SamplePair:
    stem = f"{index:05d}"
    try:
        a = read_ppm(os.path.join(directory, "A", stem + ".ppm"))
        b = read_ppm(os.path.join(directory, "B", stem + ".ppm"))
        lab = read_pgm(os.path.join(directory, "label", stem + ".pgm"))
    except (OSError, NetpbmError) as exc:
        raise DatasetFormatError(f"sample {index}: {exc}") from None
    if a.shape != b.shape or a.shape[:2] != lab.shape:
        raise DatasetFormatError(f"sample {index}: dimension mismatch A{a.shape} B{b.shape} label{lab.shape}")
    to_float = lambda img: (img.transpose(2, 0, 1).astype(np.float32) / np.float32(255))  # noqa: E731
    return SamplePair(to_float(a), to_float(b), (lab > 127).astype(np.uint8))


def save_dataset(spec: DatasetSpec, root, splits: Iterable[str] = SPLITS) -> None:
    """Generate and write every split plus a ``spec.txt`` manifest."""
    os.makedirs(root, exist_ok=True)
    for split in splits:
        for i in range(spec.split_size(split)):
            save_pair(generate_pair(spec, i, split), os.path.join(root, split), i)
    with open(os.path.join(root, "spec.txt"), "w") as f:
        for key, value in spec.to_kv().items():
            f.write(f"{key} = {value}\n")


def read_manifest(root) -> Optional[DatasetSpec]:
    path = os.path.join(root, "spec.txt")
    if not os.path.exists(path):
        return None
    kv = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
    return DatasetSpec.from_kv(kv)


def load_dataset(root, split: str = "train", name: Optional[str] = None, limit: Optional[int] = None) -> ChangeDataset:
    """Load ``<root>/<split>/{A,B,label}``; works for any directory in that layout."""
    split_dir = os.path.join(root, split)
    label_dir = os.path.join(split_dir, "label")
    if not os.path.isdir(label_dir):
        raise DatasetFormatError(f"{split_dir}: missing A/B/label layout")
    indices = sorted(int(f[:-4]) for f in os.listdir(label_dir) if f.endswith(".pgm") and f[:-4].isdigit())
    if limit is not None:
        indices = indices[:limit]
    if not indices:
        raise DatasetFormatError(f"{split_dir}: no samples")
    if name is None:
        spec = read_manifest(root)
        name = spec.name if spec is not None else os.path.basename(os.path.normpath(root))
    pairs = [load_pair(split_dir, i) for i in indices]
    shapes = {p.x1.shape for p in pairs}
    if len(shapes) != 1:
        raise DatasetFormatError(f"{split_dir}: samples have differing sizes {sorted(shapes)}")
    return ChangeDataset(
        name,
        np.stack([p.x1 for p in pairs]),
        np.stack([p.x2 for p in pairs]),
        np.stack([p.label for p in pairs]),
    )
