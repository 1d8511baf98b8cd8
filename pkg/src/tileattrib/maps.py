"""
Aggregation of tile probabilities into image-level scores and per-pixel
probability maps, plus the four-color likelihood overlay.

Each pixel's value is the mean probability over every salient tile covering
it; pixels covered only by gated-out tiles (or not at all) are no-data.
Accumulation runs in row-major tile order so maps are bit-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image

from .cnn import Network, preprocess_tiles
from .imaging import CanvasImage, to_luminance
from .tiling import Tile, TileSpec, crop, salient_tiles

# likelihood bins (Leonardo-ward probability): boundaries are exact
RED = (220, 30, 30)       # p >= 0.65, high likelihood
GOLD = (230, 180, 40)     # 0.5 <= p < 0.65
GREEN = (60, 160, 60)     # 0.35 < p < 0.5
BLUE = (40, 60, 200)      # p <= 0.35, high likelihood of the negative class
OVERLAY_ALPHA = 140

INFERENCE_BATCH = 64

MAP_MAGIC = "TILEMAP1"


class NotAnalyzableError(ValueError):
    """No salient tiles: the image cannot be scored at this tile size."""


@dataclass
class ProbabilityMap:
    mean_prob: np.ndarray  # (H, W) float64, finite wherever coverage > 0
    coverage: np.ndarray   # (H, W) int32 tile counts; 0 = no-data

    def __post_init__(self):
        if self.mean_prob.shape != self.coverage.shape:
            raise ValueError("mean_prob and coverage shapes differ")
        covered = self.coverage > 0
        if not np.all(np.isfinite(self.mean_prob[covered])):
            raise ValueError("mean_prob must be finite wherever coverage > 0")

    @property
    def width_px(self) -> int:
        return self.mean_prob.shape[1]

    @property
    def height_px(self) -> int:
        return self.mean_prob.shape[0]


def tile_probabilities(network: Network, img: CanvasImage,
                       tile_spec: TileSpec) -> Tuple[List[Tile], np.ndarray]:
    """Salient tiles of an image and the network's probability for each."""
    gray = to_luminance(img)
    tiles = salient_tiles(gray, tile_spec)
    if not tiles:
        raise NotAnalyzableError(
            f"image '{img.source_id}' not analyzable at tile size "
            f"{tile_spec.side_px}: no salient tiles")
    probs = np.empty(len(tiles), dtype=np.float64)
    for start in range(0, len(tiles), INFERENCE_BATCH):
        chunk = tiles[start:start + INFERENCE_BATCH]
        batch = preprocess_tiles([crop(gray, t) for t in chunk],
                                 network.spec.input_side)
        probs[start:start + len(chunk)] = network.forward(batch)
    return tiles, probs


def image_probability(network: Network, img: CanvasImage,
                      tile_spec: TileSpec) -> float:
    """Arithmetic mean of the salient-tile probabilities."""
    _, probs = tile_probabilities(network, img, tile_spec)
    return float(probs.mean())


def positive_tile_fraction(network: Network, img: CanvasImage,
                           tile_spec: TileSpec) -> float:
    """Alternative image score: fraction of salient tiles with p > 0.5."""
    _, probs = tile_probabilities(network, img, tile_spec)
    return float((probs > 0.5).mean())


def probability_map(network: Network, img: CanvasImage,
                    tile_spec: TileSpec) -> ProbabilityMap:
    tiles, probs = tile_probabilities(network, img, tile_spec)
    return accumulate_map(img.height_px, img.width_px, tiles, probs)


def accumulate_map(height: int, width: int, tiles: List[Tile],
                   probs: np.ndarray) -> ProbabilityMap:
    """Per-pixel mean of tile probabilities, accumulated in tile order."""
    total = np.zeros((height, width), dtype=np.float64)
    count = np.zeros((height, width), dtype=np.int32)
    for t, p in zip(tiles, probs):
        total[t.y:t.y + t.side, t.x:t.x + t.side] += p
        count[t.y:t.y + t.side, t.x:t.x + t.side] += 1
    mean = np.zeros_like(total)
    covered = count > 0
    mean[covered] = total[covered] / count[covered]
    return ProbabilityMap(mean_prob=mean, coverage=count)


def render_map(pmap: ProbabilityMap) -> np.ndarray:
    """RGBA overlay: red >= 0.65 > gold >= 0.5 > green > 0.35 >= blue, with
    no-data pixels fully transparent."""
    p = pmap.mean_prob
    rgba = np.zeros((pmap.height_px, pmap.width_px, 4), dtype=np.uint8)
    for color, mask in (
            (RED, p >= 0.65),
            (GOLD, (p >= 0.5) & (p < 0.65)),
            (GREEN, (p > 0.35) & (p < 0.5)),
            (BLUE, p <= 0.35)):
        rgba[mask, 0] = color[0]
        rgba[mask, 1] = color[1]
        rgba[mask, 2] = color[2]
        rgba[mask, 3] = OVERLAY_ALPHA
    rgba[pmap.coverage == 0] = 0
    return rgba


def composite_overlay(pmap: ProbabilityMap, base: CanvasImage) -> np.ndarray:
    """Alpha-blend the overlay onto an image, nearest-neighbor upsampled so
    bin boundaries stay crisp at the display resolution."""
    rgba = render_map(pmap)
    if (base.height_px, base.width_px) != rgba.shape[:2]:
        rgba = np.asarray(Image.fromarray(rgba).resize(
            (base.width_px, base.height_px), resample=Image.Resampling.NEAREST))
    bg = base.pixels if base.channels == 3 else np.repeat(
        base.pixels[:, :, None], 3, axis=2)
    alpha = rgba[:, :, 3:4].astype(np.float64) / 255.0
    out = (1 - alpha) * bg + alpha * rgba[:, :, :3]
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def classify_image(overall_prob: float, threshold: float = 0.5) -> str:
    """Positive iff the score exceeds the threshold; exactly at threshold is
    comparative (conservative toward non-attribution)."""
    if not (0.0 <= overall_prob <= 1.0):
        raise ValueError(f"probability {overall_prob} outside [0, 1]")
    return "positive" if overall_prob > threshold else "comparative"


def save_map(pmap: ProbabilityMap, path: Union[str, Path], meta: dict = None) -> None:
    """Numeric dump: one-line JSON text header, then the flat float32 mean
    grid followed by the int32 coverage grid (little-endian, row-major)."""
    header = {"magic": MAP_MAGIC, "height": pmap.height_px,
              "width": pmap.width_px, "meta": meta or {}}
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        f.write(pmap.mean_prob.astype("<f4").tobytes())
        f.write(pmap.coverage.astype("<i4").tobytes())


def load_map(path: Union[str, Path]) -> Tuple[ProbabilityMap, dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("magic") != MAP_MAGIC:
            raise ValueError(f"not a probability map dump: {path}")
        h, w = header["height"], header["width"]
        mean = np.frombuffer(f.read(h * w * 4), dtype="<f4").reshape(h, w)
        cov = np.frombuffer(f.read(h * w * 4), dtype="<i4").reshape(h, w)
    return ProbabilityMap(mean_prob=mean.astype(np.float64),
                          coverage=cov.astype(np.int32)), header["meta"]
