"""
Deterministic synthetic two-class image corpora.

The positive class is an oriented stroke field (diagonal, with a
characteristic autocorrelation); each comparative "genre" is a different base
pattern (horizontal strokes, vertical strokes, rings, blob noise). A shared
noise floor keeps per-image entropy well above zero, and a contrast knob
blends the class pattern in: at contrast 1.0 the classes are separable by
construction, as contrast approaches 0 they become indistinguishable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import ManifestEntry, save_manifest
from .imaging import CanvasImage, save_png

DEFAULT_DENSITY = 25.0  # synthetic canvases are sized so density is exact

POSITIVE_GENRE_PATTERN = "diagonal"
COMPARATIVE_GENRE_PATTERNS = {
    "portrait": "horizontal",
    "single_figure": "vertical",
    "madonna_and_child": "rings",
    "religious_scene": "blobs",
}

NOISE_SIGMA = 14.0
PATTERN_AMPLITUDE = 55.0
STROKE_PERIOD = 12.0


@dataclass(frozen=True)
class SynthConfig:
    n_positive: int
    n_comparative: int
    image_side_px: int
    seed: int
    contrast: float = 1.0
    genre_mix: Dict[str, float] = None
    n_positive_test: int = 0
    n_comparative_test: int = 0
    intended_tile_side: int = 100

    def __post_init__(self):
        if self.n_positive < 1 or self.n_comparative < 1:
            raise ValueError("class counts must be >= 1")
        if not (0.0 < self.contrast <= 1.0):
            raise ValueError("contrast must be in (0, 1]")
        if self.image_side_px < 2 * self.intended_tile_side:
            raise ValueError("image side must be at least twice the intended "
                             "tile side")
        if self.genre_mix is None:
            mix = {g: 1.0 / len(COMPARATIVE_GENRE_PATTERNS)
                   for g in COMPARATIVE_GENRE_PATTERNS}
            object.__setattr__(self, "genre_mix", mix)
        else:
            unknown = set(self.genre_mix) - set(COMPARATIVE_GENRE_PATTERNS)
            if unknown:
                raise ValueError(f"unknown synthetic genres {sorted(unknown)}")


def _pattern(kind: str, side: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean unit-amplitude base pattern of a given family."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    phase = rng.uniform(0, 2 * math.pi)
    jitter = rng.normal(0, 1.2, size=(side, side))
    if kind == "diagonal":
        return np.sin(2 * math.pi * (xx + yy) / (STROKE_PERIOD * math.sqrt(2))
                      + phase + 0.25 * jitter)
    if kind == "horizontal":
        return np.sin(2 * math.pi * yy / STROKE_PERIOD + phase + 0.25 * jitter)
    if kind == "vertical":
        return np.sin(2 * math.pi * xx / STROKE_PERIOD + phase + 0.25 * jitter)
    if kind == "rings":
        cx = rng.uniform(0.3, 0.7) * side
        cy = rng.uniform(0.3, 0.7) * side
        r = np.hypot(xx - cx, yy - cy)
        return np.sin(2 * math.pi * r / STROKE_PERIOD + phase + 0.25 * jitter)
    if kind == "blobs":
        # band-limited isotropic noise: low-resolution field blown up smoothly
        coarse = rng.normal(0, 1, size=(side // 8 + 2, side // 8 + 2))
        from PIL import Image
        big = np.asarray(Image.fromarray(coarse.astype(np.float32)).resize(
            (side, side), resample=Image.Resampling.BILINEAR), dtype=np.float64)
        scale = big.std()
        return big / scale if scale > 0 else big
    raise ValueError(f"unknown pattern kind {kind!r}")


def render_texture(kind: str, side: int, contrast: float,
                   rng: np.random.Generator) -> np.ndarray:
    """uint8 texture: mid-gray + contrast-scaled pattern + shared noise floor."""
    pattern = _pattern(kind, side, rng)
    noise = rng.normal(0, NOISE_SIGMA, size=(side, side))
    values = 128.0 + contrast * PATTERN_AMPLITUDE * pattern + noise
    return np.clip(np.round(values), 0, 255).astype(np.uint8)


def _genre_for(index: int, mix: Dict[str, float], rng: np.random.Generator) -> str:
    genres = sorted(mix)
    weights = np.asarray([mix[g] for g in genres], dtype=np.float64)
    weights = weights / weights.sum()
    return genres[rng.choice(len(genres), p=weights)]


def generate_corpus(config: SynthConfig, out_dir: Union[str, Path]) -> Path:
    """Write the PNG images and a ready-to-use manifest; returns its path.

    Deterministic per seed: each image draws from a generator seeded by
    (config.seed, image index), so per-image work can run in any order.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    side = config.image_side_px
    canvas_cm = side / DEFAULT_DENSITY

    plan: List[Tuple[str, str, str]] = []  # (id prefix, class, role)
    for i in range(config.n_positive):
        plan.append((f"pos_train_{i:03d}", "positive", "train"))
    for i in range(config.n_comparative):
        plan.append((f"cmp_train_{i:03d}", "comparative", "train"))
    for i in range(config.n_positive_test):
        plan.append((f"pos_test_{i:03d}", "positive", "test"))
    for i in range(config.n_comparative_test):
        plan.append((f"cmp_test_{i:03d}", "comparative", "test"))

    entries: List[ManifestEntry] = []
    for index, (image_id, klass, role) in enumerate(plan):
        rng = np.random.default_rng([config.seed, index])
        if klass == "positive":
            genre = _genre_for(index, config.genre_mix, rng)
            kind = POSITIVE_GENRE_PATTERN
        else:
            genre = _genre_for(index, config.genre_mix, rng)
            kind = COMPARATIVE_GENRE_PATTERNS[genre]
        pixels = render_texture(kind, side, config.contrast, rng)
        rel_path = f"images/{image_id}.png"
        save_png(CanvasImage(pixels=pixels, density_px_per_cm=DEFAULT_DENSITY,
                             source_id=image_id), out_dir / rel_path)
        entries.append(ManifestEntry(
            id=image_id, title=f"synthetic {kind} #{index}", klass=klass,
            role=role, genre=genre, attribution_status="synthetic",
            image_path=rel_path, canvas_width_cm=canvas_cm, quality_flag="ok"))
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(entries, manifest_path)
    return manifest_path


@dataclass(frozen=True)
class Region:
    x: int
    y: int
    w: int
    h: int
    label: str  # positive or comparative

    def overlaps(self, other: "Region") -> bool:
        return not (self.x + self.w <= other.x or other.x + other.w <= self.x
                    or self.y + self.h <= other.y or other.y + other.h <= self.y)


@dataclass(frozen=True)
class CompositeLayout:
    """A base field of one class with labeled rectangular islands inside it."""

    base_label: str
    islands: Tuple[Region, ...] = ()

    def __post_init__(self):
        if self.base_label not in ("positive", "comparative"):
            raise ValueError(f"unknown label {self.base_label!r}")
        for r in self.islands:
            if r.label not in ("positive", "comparative"):
                raise ValueError(f"unknown label {r.label!r}")
        for i, a in enumerate(self.islands):
            for b in self.islands[i + 1:]:
                if a.overlaps(b):
                    raise ValueError(f"overlapping regions: {a} and {b}")


def generate_composite(config: SynthConfig, layout: CompositeLayout,
                       source_id: str = "composite") -> Tuple[CanvasImage, np.ndarray]:
    """One image whose regions carry different class textures, plus the
    ground-truth mask (255 where positive, 0 where comparative)."""
    side = config.image_side_px
    rng = np.random.default_rng([config.seed, 0x517E])

    def texture_for(label: str) -> np.ndarray:
        kind = POSITIVE_GENRE_PATTERN if label == "positive" \
            else COMPARATIVE_GENRE_PATTERNS["portrait"]
        return render_texture(kind, side, config.contrast, rng)

    pixels = texture_for(layout.base_label).copy()
    mask = np.full((side, side), 255 if layout.base_label == "positive" else 0,
                   dtype=np.uint8)
    for region in layout.islands:
        if region.x < 0 or region.y < 0 or region.x + region.w > side \
                or region.y + region.h > side:
            raise ValueError(f"region {region} outside the {side}px canvas")
        tex = texture_for(region.label)
        pixels[region.y:region.y + region.h, region.x:region.x + region.w] = \
            tex[region.y:region.y + region.h, region.x:region.x + region.w]
        mask[region.y:region.y + region.h, region.x:region.x + region.w] = \
            255 if region.label == "positive" else 0
    img = CanvasImage(pixels=pixels, density_px_per_cm=DEFAULT_DENSITY,
                      source_id=source_id)
    return img, mask
