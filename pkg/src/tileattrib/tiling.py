"""
Overlapping square tile generation gated by Shannon entropy.

A tile is kept ("salient") when its 256-bin luminance histogram entropy is at
least the entropy of the whole image it came from. The grid is anchored at
(0, 0) with a fixed stride; right/bottom remainders are simply not covered,
which keeps the count formula exact and the sampling spatially uniform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image

from .imaging import CanvasImage

TILE_LABELS = ("positive", "comparative", "unlabeled")


@dataclass(frozen=True)
class TileSpec:
    """Square tile geometry: side length and fractional overlap between neighbors."""

    side_px: int
    overlap_fraction: float

    def __post_init__(self):
        if self.side_px < 2:
            raise ValueError("side_px must be >= 2")
        if not (0.0 <= self.overlap_fraction < 1.0):
            raise ValueError("overlap_fraction must be in [0, 1)")

    @property
    def stride(self) -> int:
        # round-to-nearest (half up), floored at 1
        return max(1, int(math.floor(self.side_px * (1.0 - self.overlap_fraction) + 0.5)))


@dataclass(frozen=True)
class Tile:
    x: int
    y: int
    side: int
    entropy_bits: float
    source_id: str
    label: str = "unlabeled"

    def __post_init__(self):
        if self.label not in TILE_LABELS:
            raise ValueError(f"unknown tile label {self.label!r}")
        if self.entropy_bits < 0:
            raise ValueError("entropy_bits must be >= 0")


def shannon_entropy(region: np.ndarray) -> float:
    """Shannon entropy in bits of an 8-bit single-channel pixel region."""
    if region.size == 0:
        raise ValueError("cannot compute entropy of an empty region")
    if region.dtype != np.uint8:
        raise ValueError("entropy is defined over 8-bit pixel values")
    counts = np.bincount(region.ravel(), minlength=256)
    p = counts[counts > 0] / region.size
    return float(-(p * np.log2(p)).sum())


def tile_positions(width: int, height: int, spec: TileSpec) -> List[Tuple[int, int]]:
    """Grid origins in row-major order; empty when the image is smaller than a tile."""
    side, stride = spec.side_px, spec.stride
    if width < side or height < side:
        return []
    xs = range(0, (width - side) // stride * stride + 1, stride)
    ys = range(0, (height - side) // stride * stride + 1, stride)
    return [(x, y) for y in ys for x in xs]


def grid_count(width: int, height: int, spec: TileSpec) -> int:
    """Closed-form tile count: (floor((dim - side) / stride) + 1) per axis."""
    side, stride = spec.side_px, spec.stride
    if width < side or height < side:
        return 0
    return ((width - side) // stride + 1) * ((height - side) // stride + 1)


def salient_tiles(img: CanvasImage, spec: TileSpec, label: str = "unlabeled") -> List[Tile]:
    """All grid tiles whose entropy at least matches the whole-image entropy.

    The gate is >= (not >): a constant image keeps every tile. Input must be
    single-channel; run to_luminance first.
    """
    if img.channels != 1:
        raise ValueError("salient_tiles expects a single-channel image")
    px = img.pixels
    image_entropy = shannon_entropy(px)
    side = spec.side_px
    kept = []
    for x, y in tile_positions(img.width_px, img.height_px, spec):
        h = shannon_entropy(px[y:y + side, x:x + side])
        if h >= image_entropy:
            kept.append(Tile(x=x, y=y, side=side, entropy_bits=h,
                             source_id=img.source_id, label=label))
    return kept


def crop(img: CanvasImage, tile: Tile) -> np.ndarray:
    """Pixel window of a tile within its source image."""
    if tile.x < 0 or tile.y < 0 or tile.x + tile.side > img.width_px \
            or tile.y + tile.side > img.height_px:
        raise ValueError(f"tile at ({tile.x}, {tile.y}) side {tile.side} "
                         f"falls outside image '{img.source_id}'")
    return img.pixels[tile.y:tile.y + tile.side, tile.x:tile.x + tile.side]


def save_tileset(directory: Union[str, Path], tiles: List[Tile],
                 images: dict = None) -> Path:
    """Write a tile index (one JSON record per line) and optional PNG crops.

    images maps source_id -> CanvasImage; when given, each tile's crop is
    written as {source_id}_{x}_{y}.png alongside the index.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = directory / "index.jsonl"
    with open(index, "w", encoding="utf-8") as f:
        for t in tiles:
            f.write(json.dumps(asdict(t), sort_keys=True) + "\n")
    if images is not None:
        for t in tiles:
            img = images[t.source_id]
            Image.fromarray(crop(img, t)).save(
                directory / f"{t.source_id}_{t.x}_{t.y}.png", format="PNG")
    return index


def load_tileset(directory: Union[str, Path]) -> List[Tile]:
    index = Path(directory) / "index.jsonl"
    tiles = []
    with open(index, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                tiles.append(Tile(**json.loads(line)))
    return tiles
