"""Synthetic glyph datasets with injectable capture bias.

Each image is a flat background, one anti-aliased glyph whose shape encodes
the class, i.i.d. Gaussian pixel noise, and optionally a class-dependent
bias signal. Glyphs are never placed over the top-left probe region, so any
signal a classifier finds there was put there by the bias.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import Item, LabeledDataset, SPLITS, assign_splits, save_dataset
from .image_core import ImageTensor
from .rng import stable_hash

PROBE = 20  # side of the top-left region kept glyph-free
WATERMARK_SIDE = 6
WATERMARK_ORIGIN = 2
SUPERSAMPLE = 4


class SynthError(ValueError):
    pass


# --------------------------------------------------------------------------
# glyph geometry, in unit coordinates (u right, v down), all inside the unit disk


def _regular(n, radius=0.95, phase=-math.pi / 2):
    t = phase + 2 * math.pi * np.arange(n) / n
    return np.stack([radius * np.cos(t), radius * np.sin(t)], axis=1)


def _star(points=5, outer=0.95, inner=0.42):
    t = -math.pi / 2 + math.pi * np.arange(2 * points) / points
    r = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


POLYGONS = {
    "square": [(-0.7, -0.7), (0.7, -0.7), (0.7, 0.7), (-0.7, 0.7)],
    "triangle": [(0.0, -0.9), (0.85, 0.6), (-0.85, 0.6)],
    "triangle_down": [(0.0, 0.9), (0.85, -0.6), (-0.85, -0.6)],
    "diamond": [(0.0, -0.95), (0.95, 0.0), (0.0, 0.95), (-0.95, 0.0)],
    "cross": [(-0.25, -0.9), (0.25, -0.9), (0.25, -0.25), (0.9, -0.25), (0.9, 0.25), (0.25, 0.25),
              (0.25, 0.9), (-0.25, 0.9), (-0.25, 0.25), (-0.9, 0.25), (-0.9, -0.25), (-0.25, -0.25)],
    "l_shape": [(-0.6, -0.75), (-0.2, -0.75), (-0.2, 0.35), (0.6, 0.35), (0.6, 0.75), (-0.6, 0.75)],
    "t_shape": [(-0.7, -0.7), (0.7, -0.7), (0.7, -0.3), (0.2, -0.3), (0.2, 0.7), (-0.2, 0.7), (-0.2, -0.3), (-0.7, -0.3)],
    "hbar": [(-0.9, -0.3), (0.9, -0.3), (0.9, 0.3), (-0.9, 0.3)],
    "vbar": [(-0.3, -0.9), (0.3, -0.9), (0.3, 0.9), (-0.3, 0.9)],
    "arrow": [(0.0, -0.9), (0.7, -0.1), (0.25, -0.1), (0.25, 0.8), (-0.25, 0.8), (-0.25, -0.1), (-0.7, -0.1)],
    "chevron": [(-0.8, -0.5), (0.0, 0.2), (0.8, -0.5), (0.8, 0.1), (0.0, 0.8), (-0.8, 0.1)],
}
POLYGONS["pentagon"] = _regular(5)
POLYGONS["hexagon"] = _regular(6)
POLYGONS["octagon"] = _regular(8)
POLYGONS["star"] = _star()
POLYGONS["x"] = [(0.707 * (u - v), 0.707 * (u + v)) for u, v in POLYGONS["cross"]]


def _in_polygon(u, v, verts):
    verts = np.asarray(verts, dtype=np.float64)
    inside = np.zeros(u.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > v) != (y2 > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (v - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (u < xint)
    return inside


def _inside(shape: str, u, v):
    r2 = u * u + v * v
    if shape == "circle":
        return r2 <= 0.95 ** 2
    if shape == "ring":
        return (r2 <= 0.95 ** 2) & (r2 >= 0.55 ** 2)
    if shape == "crescent":
        return (r2 <= 0.95 ** 2) & ((u - 0.4) ** 2 + v * v >= 0.7 ** 2)
    if shape == "half_top":
        return (r2 <= 0.95 ** 2) & (v <= 0.1)
    if shape == "frame":
        return (np.maximum(abs(u), abs(v)) <= 0.7) & (np.maximum(abs(u), abs(v)) >= 0.4)
    if shape in POLYGONS:
        return _in_polygon(u, v, POLYGONS[shape])
    raise SynthError(f"unknown glyph shape {shape!r}")


SHAPES = (
    "circle", "square", "triangle", "cross", "ring", "diamond", "pentagon", "hexagon", "star", "x",
    "hbar", "vbar", "half_top", "frame", "l_shape", "t_shape", "arrow", "chevron", "crescent", "triangle_down",
)


def glyph_coverage(shape, radius, cx, cy, angle, height, width, stroke=0.0, ss=SUPERSAMPLE):
    """Fractional pixel coverage of a glyph, returned with its pixel bounding box.

    Coverage is estimated by ss x ss supersampling. With ``stroke > 0`` only an
    outline ``stroke`` pixels wide is drawn.
    """
    y0 = max(int(math.floor(cy - radius)) - 1, 0)
    y1 = min(int(math.ceil(cy + radius)) + 1, height)
    x0 = max(int(math.floor(cx - radius)) - 1, 0)
    x1 = min(int(math.ceil(cx + radius)) + 1, width)
    sub = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(y0, y1)[:, None] + sub[None, :]).ravel()
    xs = (np.arange(x0, x1)[:, None] + sub[None, :]).ravel()
    X, Y = np.meshgrid(xs, ys)
    dx, dy = (X - cx) / radius, (Y - cy) / radius
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    mask = _inside(shape, u, v)
    if stroke > 0:
        steps = max(int(round(stroke * ss)), 1)
        padded = np.pad(mask, steps)
        eroded = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(2, 1), iterations=steps)
        mask = mask & ~eroded[steps:-steps, steps:-steps]
    cov = mask.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    return cov, (y0, y1, x0, x1)


# --------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 5
    per_class: int = 100
    image_size: tuple = (64, 64)
    shapes: tuple | None = None
    glyph_size: float = 12.0  # nominal glyph radius in pixels
    stroke: float = 0.0  # 0 draws filled glyphs; otherwise outline width in pixels
    scale_jitter: tuple = (0.85, 1.15)
    rotation_jitter: float = 10.0  # degrees, symmetric
    # True: anywhere outside the probe corner; False: fixed; a number: max offset (px)
    # around the fixed centre
    position_jitter: bool | float = True
    background_level: float = 0.45
    foreground_level: float = 0.65
    noise_std: float = 0.02
    equal_area: bool = True
    splits: tuple = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "scale_jitter", tuple(float(v) for v in self.scale_jitter))
        object.__setattr__(self, "splits", tuple(float(v) for v in self.splits))
        if self.shapes is not None:
            object.__setattr__(self, "shapes", tuple(self.shapes))
        if not 2 <= self.num_classes <= 20:
            raise SynthError(f"num_classes must lie in [2, 20], got {self.num_classes}")
        if self.per_class < 10:
            raise SynthError(f"per_class must be >= 10, got {self.per_class}")
        if len(self.class_shapes) < self.num_classes:
            raise SynthError(f"need {self.num_classes} shapes, shape set has {len(self.class_shapes)}")
        unknown = [s for s in self.class_shapes if s not in SHAPES]
        if unknown:
            raise SynthError(f"unknown shape(s) {unknown}; available: {list(SHAPES)}")
        if len(set(self.class_shapes[: self.num_classes])) != self.num_classes:
            raise SynthError("class shapes must be distinct")
        h, w = self.image_size
        if h < 1 or w < 1:
            raise SynthError(f"image_size must be positive, got {self.image_size}")
        lo, hi = self.scale_jitter
        if not 0 < lo <= hi:
            raise SynthError(f"scale_jitter must satisfy 0 < lo <= hi, got {self.scale_jitter}")
        if self.glyph_size <= 0:
            raise SynthError("glyph_size must be positive")
        if 2 * self.glyph_size * hi > min(h, w):
            raise SynthError(
                f"glyph diameter up to {2 * self.glyph_size * hi:g}px exceeds image size {h}x{w}"
            )
        for name in ("background_level", "foreground_level"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SynthError(f"{name} must lie in [0, 1]")
        if not isinstance(self.position_jitter, bool):
            off = float(self.position_jitter)
            reach = off + self.glyph_size * hi * 1.5
            cx, cy = w - w / 3.0, h - h / 3.0
            if off < 0 or cx + reach > w or cy + reach > h:
                raise SynthError(f"position offset {off:g}px pushes glyphs outside the image")
        if self.noise_std < 0 or self.stroke < 0:
            raise SynthError("noise_std and stroke must be non-negative")

    @property
    def class_shapes(self) -> tuple:
        return tuple(self.shapes) if self.shapes is not None else SHAPES[: self.num_classes]

    def to_json(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["scale_jitter"] = list(self.scale_jitter)
        d["splits"] = list(self.splits)
        d["shapes"] = list(self.class_shapes[: self.num_classes])
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise SynthError(f"unknown synth spec field(s) {sorted(unknown)}")
        return cls(**obj)


BIAS_KINDS = ("none", "corner_watermark", "noise_signature", "dc_offset")
DEFAULT_AMPLITUDE = {"none": 0.0, "corner_watermark": 0.4, "noise_signature": 0.08, "dc_offset": 0.2}


@dataclass(frozen=True)
class BiasSpec:
    """Class-correlated capture bias.

    corner_watermark: a 6x6 block at the top-left darkened by
        strength * amplitude * (k + 1) / C for class k. Darkening keeps the
        mark out of the intensity range of the (brighter) glyphs.
    noise_signature: a fixed per-class pattern of uniform [-1, 1] texture,
        seeded by class, scaled by strength * amplitude.
    dc_offset: background shifted by strength * amplitude * k / (C - 1).
    """

    kind: str = "none"
    strength: float = 0.0
    amplitude: float | None = None

    def __post_init__(self):
        if self.kind not in BIAS_KINDS:
            raise SynthError(f"unknown bias kind {self.kind!r}; expected one of {list(BIAS_KINDS)}")
        if isinstance(self.strength, bool) or not isinstance(self.strength, (int, float)):
            raise SynthError(f"strength must be a number, got {self.strength!r}")
        if not 0.0 <= self.strength <= 1.0:
            raise SynthError(f"strength must lie in [0, 1], got {self.strength}")
        if self.amplitude is not None and self.amplitude < 0:
            raise SynthError("amplitude must be non-negative")

    @property
    def effective_amplitude(self) -> float:
        return DEFAULT_AMPLITUDE[self.kind] if self.amplitude is None else float(self.amplitude)

    def to_json(self) -> dict:
        return {"kind": self.kind, "strength": self.strength, "amplitude": self.effective_amplitude}

    @classmethod
    def from_json(cls, obj: dict) -> "BiasSpec":
        unknown = set(obj) - {"kind", "strength", "amplitude"}
        if unknown:
            raise SynthError(f"unknown bias spec field(s) {sorted(unknown)}")
        return cls(**obj)


def dc_offsets(bias: BiasSpec, num_classes: int) -> np.ndarray:
    if bias.kind != "dc_offset":
        return np.zeros(num_classes)
    return bias.strength * bias.effective_amplitude * np.arange(num_classes) / (num_classes - 1)


def watermark_deltas(bias: BiasSpec, num_classes: int) -> np.ndarray:
    if bias.kind != "corner_watermark":
        return np.zeros(num_classes)
    return -bias.strength * bias.effective_amplitude * (np.arange(num_classes) + 1) / num_classes


def class_texture(seed: int, label: int, shape) -> np.ndarray:
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, stable_hash("texture"), label])
    return rng.uniform(-1.0, 1.0, size=shape)


# --------------------------------------------------------------------------
# generation


def _area_factors(spec: SynthSpec) -> dict:
    """Per-shape radius multipliers equalizing ink area across classes."""
    shapes = spec.class_shapes[: spec.num_classes]
    if not spec.equal_area:
        return {s: 1.0 for s in shapes}
    r = spec.glyph_size
    size = int(2 * r + 4)
    areas = {}
    for s in shapes:
        cov, _ = glyph_coverage(s, r, size / 2, size / 2, 0.0, size, size, spec.stroke, ss=8)
        areas[s] = cov.sum()
    target = min(areas.values())
    # filled area grows with radius squared, a fixed-width outline roughly linearly
    power = 1.0 if spec.stroke > 0 else 0.5
    return {s: (target / a) ** power for s, a in areas.items()}


def _place(rng, radius, h, w):
    for _ in range(1000):
        cx = rng.uniform(radius, w - radius)
        cy = rng.uniform(radius, h - radius)
        if cx - radius >= PROBE or cy - radius >= PROBE:
            return cx, cy
    raise SynthError(f"cannot place a glyph of radius {radius:.1f} outside the {PROBE}x{PROBE} probe corner")


def render(spec: SynthSpec, bias: BiasSpec, label: int, index: int, factors: dict | None = None):
    """Render one image. Returns (pixels before clamping, clamped ImageTensor)."""
    h, w = spec.image_size
    shape = spec.class_shapes[label]
    factors = factors or _area_factors(spec)
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFFFFFFFFFF, label, index])
    scale = rng.uniform(*spec.scale_jitter)
    angle = math.radians(rng.uniform(-spec.rotation_jitter, spec.rotation_jitter))
    radius = spec.glyph_size * scale * factors[shape]
    cx, cy = w - w / 3.0, h - h / 3.0
    if spec.position_jitter is True:
        cx, cy = _place(rng, radius, h, w)
    elif spec.position_jitter:
        off = float(spec.position_jitter)
        cx, cy = cx + rng.uniform(-off, off), cy + rng.uniform(-off, off)
    noise = rng.normal(0.0, spec.noise_std, size=(h, w)) if spec.noise_std > 0 else np.zeros((h, w))

    background = spec.background_level + dc_offsets(bias, spec.num_classes)[label]
    img = np.full((h, w), background, dtype=np.float64)
    cov, (y0, y1, x0, x1) = glyph_coverage(shape, radius, cx, cy, angle, h, w, spec.stroke)
    img[y0:y1, x0:x1] = background * (1 - cov) + spec.foreground_level * cov
    img += noise
    if bias.kind == "corner_watermark":
        a, b = WATERMARK_ORIGIN, WATERMARK_ORIGIN + WATERMARK_SIDE
        img[a:min(b, h), a:min(b, w)] += watermark_deltas(bias, spec.num_classes)[label]
    elif bias.kind == "noise_signature":
        img += bias.strength * bias.effective_amplitude * class_texture(spec.seed, label, (h, w))
    return img, ImageTensor(np.clip(img, 0.0, 1.0))


def generate(spec: SynthSpec, bias: BiasSpec | None = None, out_dir=None) -> LabeledDataset:
    """Render the whole dataset; optionally write it (plus manifest.json) to ``out_dir``."""
    bias = bias or BiasSpec()
    factors = _area_factors(spec)
    items, labels, clamped = [], [], {}
    for label in range(spec.num_classes):
        name = spec.class_shapes[label]
        clamped[name] = 0
        for index in range(spec.per_class):
            raw, img = render(spec, bias, label, index, factors)
            clamped[name] += int(np.count_nonzero((raw < 0.0) | (raw > 1.0)))
            items.append((f"{name}/{name}_{index:04d}.png", img, label))
            labels.append(label)
    splits = assign_splits(labels, spec.splits, seed=spec.seed)
    ds = LabeledDataset(
        [spec.class_shapes[k] for k in range(spec.num_classes)],
        [Item(p, im, lab, s) for (p, im, lab), s in zip(items, splits)],
    )
    manifest = {
        "generator": "bgaudit.synthbias",
        "synth_spec": spec.to_json(),
        "bias_spec": bias.to_json(),
        "seed": spec.seed,
        "clamped_pixels": clamped,
        "clamped_fraction": sum(clamped.values()) / float(len(items) * spec.image_size[0] * spec.image_size[1]),
    }
    ds.meta["manifest"] = manifest
    if out_dir is not None:
        save_dataset(ds, out_dir, manifest)
    return ds


def describe(ds: LabeledDataset) -> dict:
    """Per-class and per-split counts, image-size histogram, intensity stats."""
    per_class = {name: 0 for name in ds.class_names}
    per_split = {s: 0 for s in SPLITS}
    sizes = {}
    sums = {name: [] for name in ds.class_names}
    for it in ds.items:
        name = ds.class_names[it.label]
        per_class[name] += 1
        per_split[it.split] = per_split.get(it.split, 0) + 1
        key = f"{it.image.height}x{it.image.width}"
        sizes[key] = sizes.get(key, 0) + 1
        sums[name].append(it.image.data.mean())
    summary = {
        "total": len(ds),
        "class_counts": per_class,
        "split_counts": per_split,
        "image_sizes": sizes,
        "class_mean": {k: float(np.mean(v)) if v else float("nan") for k, v in sums.items()},
        "class_std": {k: float(np.std(v)) if v else float("nan") for k, v in sums.items()},
    }
    manifest = ds.meta.get("manifest")
    if manifest and "clamped_pixels" in manifest:
        summary["clamped_pixels"] = manifest["clamped_pixels"]
    return summary


def load_specs(synth_path, bias_path=None):
    with open(synth_path, encoding="utf-8") as fh:
        synth = SynthSpec.from_json(json.load(fh))
    bias = BiasSpec()
    if bias_path is not None:
        with open(bias_path, encoding="utf-8") as fh:
            bias = BiasSpec.from_json(json.load(fh))
    return synth, bias
