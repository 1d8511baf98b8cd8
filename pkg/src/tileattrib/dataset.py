"""
Corpus manifests, balanced tile sets, and train/test splits.

A manifest is a UTF-8 file with one JSON record per line and fixed field
names: id, title, class, role, genre, attribution_status, image_path,
canvas_width_cm, quality_flag. Pixel density is derived from the image width
and the canvas width in cm, never from file metadata.

Class balance is achieved geometrically: the scarcer positive class is tiled
with a higher overlap than the comparative class, which multiplies its tile
count without touching the pixels.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Union

import numpy as np

from .imaging import CanvasImage, load_image, resample_to_density, to_luminance
from .tiling import Tile, TileSpec, salient_tiles

log = logging.getLogger(__name__)

CLASSES = ("positive", "comparative")
ROLES = ("train", "test", "external")
GENRES = ("portrait", "madonna_and_child", "religious_scene", "single_figure", "other")
QUALITY_FLAGS = ("ok", "degraded")

MANIFEST_FIELDS = ("id", "title", "class", "role", "genre", "attribution_status",
                   "image_path", "canvas_width_cm", "quality_flag")

# "substantially similar" class balance, as a multiplicative band
BALANCE_BAND = (0.8, 1.25)
BALANCE_GRID_STEP = 0.005
BALANCE_OVERLAP_CAP = 0.98
BALANCE_MIN_RATIO = 0.9

TILE_SIDE_SWEEP = (100, 650)


class ManifestError(ValueError):
    """Manifest parse or validation failure, with the offending row when known."""


class BalanceError(ValueError):
    """Raised when no overlap on the search grid balances the classes."""


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    title: str
    klass: str  # "class" in the file; positive or comparative
    role: str
    genre: str
    attribution_status: str
    image_path: str
    canvas_width_cm: Optional[float]
    quality_flag: str = "ok"

    def __post_init__(self):
        if self.klass not in CLASSES:
            raise ManifestError(f"entry {self.id!r}: unknown class {self.klass!r}")
        if self.role not in ROLES:
            raise ManifestError(f"entry {self.id!r}: unknown role {self.role!r}")
        if self.genre not in GENRES:
            raise ManifestError(f"entry {self.id!r}: unknown genre {self.genre!r}")
        if self.quality_flag not in QUALITY_FLAGS:
            raise ManifestError(f"entry {self.id!r}: unknown quality_flag "
                                f"{self.quality_flag!r}")

    def to_record(self) -> dict:
        return {
            "id": self.id, "title": self.title, "class": self.klass,
            "role": self.role, "genre": self.genre,
            "attribution_status": self.attribution_status,
            "image_path": self.image_path,
            "canvas_width_cm": self.canvas_width_cm,
            "quality_flag": self.quality_flag,
        }


@dataclass(frozen=True)
class SplitPlan:
    """A train/test assignment. Positive test ids are recorded explicitly;
    they are pinned by configuration and never shuffled."""

    train_ids: frozenset
    test_ids: frozenset
    seed: Optional[int]
    kind: str  # curated or random
    positive_test_ids: frozenset = frozenset()

    def __post_init__(self):
        if self.kind not in ("curated", "random"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.train_ids & self.test_ids:
            raise ValueError("train and test sets overlap: "
                             f"{sorted(self.train_ids & self.test_ids)}")


def load_manifest(path: Union[str, Path], check_images: bool = True) -> List[ManifestEntry]:
    """Parse and validate a manifest; violations are reported with row numbers."""
    path = Path(path)
    entries: List[ManifestEntry] = []
    seen: Dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for row, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{row}: invalid JSON: {e}") from e
            missing = [k for k in MANIFEST_FIELDS if k not in rec]
            if missing:
                raise ManifestError(f"{path}:{row}: missing fields {missing}")
            try:
                entry = ManifestEntry(
                    id=rec["id"], title=rec["title"], klass=rec["class"],
                    role=rec["role"], genre=rec["genre"],
                    attribution_status=rec["attribution_status"],
                    image_path=rec["image_path"],
                    canvas_width_cm=rec["canvas_width_cm"],
                    quality_flag=rec["quality_flag"])
            except ManifestError as e:
                raise ManifestError(f"{path}:{row}: {e}") from e
            if entry.id in seen:
                raise ManifestError(f"{path}:{row}: duplicate id {entry.id!r} "
                                    f"(first seen at row {seen[entry.id]})")
            seen[entry.id] = row
            if entry.role in ("train", "test"):
                if entry.canvas_width_cm is None or entry.canvas_width_cm <= 0:
                    raise ManifestError(f"{path}:{row}: entry {entry.id!r} has "
                                        f"role {entry.role} but no positive "
                                        f"canvas_width_cm")
                img = (path.parent / entry.image_path)
                if check_images and not img.is_file():
                    raise ManifestError(f"{path}:{row}: entry {entry.id!r} image "
                                        f"not readable: {img}")
            entries.append(entry)
    return entries


def save_manifest(entries: Sequence[ManifestEntry], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e.to_record(), sort_keys=True) + "\n")


def load_entry_image(entry: ManifestEntry, density: float,
                     manifest_dir: Union[str, Path] = ".") -> CanvasImage:
    """Load an entry's image, derive its density from the canvas width, and
    resample to the target density."""
    if entry.canvas_width_cm is None or entry.canvas_width_cm <= 0:
        raise ManifestError(f"entry {entry.id!r}: canvas_width_cm required to "
                            f"derive density")
    img = load_image(Path(manifest_dir) / entry.image_path, source_id=entry.id)
    src_density = img.width_px / entry.canvas_width_cm
    img = CanvasImage(pixels=img.pixels, density_px_per_cm=src_density,
                      source_id=entry.id)
    return resample_to_density(img, density)


@dataclass
class TileSetResult:
    train_tiles: List[Tile]
    test_tiles: List[Tile]
    counts: Dict[str, Dict[str, int]]  # role -> class -> tile count


def _salient_for_entry(entry: ManifestEntry, spec: TileSpec, density: float,
                       manifest_dir: Union[str, Path]) -> List[Tile]:
    img = to_luminance(load_entry_image(entry, density, manifest_dir))
    return salient_tiles(img, spec, label=entry.klass)


def build_tilesets(entries: Sequence[ManifestEntry], side: int,
                   pos_overlap: float, neg_overlap: float, density: float,
                   manifest_dir: Union[str, Path] = ".") -> TileSetResult:
    """Tile every train/test entry, positives at pos_overlap and comparatives
    at neg_overlap, entropy-gate, and report per-class counts.

    Degraded-quality images are excluded from training (they may still be
    scored externally). Images smaller than the tile side are an error.
    """
    if not (TILE_SIDE_SWEEP[0] <= side <= TILE_SIDE_SWEEP[1]):
        warnings.warn(f"tile side {side} is outside the studied range "
                      f"{TILE_SIDE_SWEEP}", stacklevel=2)
    specs = {"positive": TileSpec(side, pos_overlap),
             "comparative": TileSpec(side, neg_overlap)}
    result = TileSetResult(train_tiles=[], test_tiles=[],
                           counts={"train": {c: 0 for c in CLASSES},
                                   "test": {c: 0 for c in CLASSES}})
    too_small: List[str] = []
    for entry in entries:
        if entry.role not in ("train", "test"):
            continue
        if entry.role == "train" and entry.quality_flag == "degraded":
            log.info("excluding degraded image %s from training", entry.id)
            continue
        spec = specs[entry.klass]
        img = to_luminance(load_entry_image(entry, density, manifest_dir))
        if img.width_px < side or img.height_px < side:
            too_small.append(f"{entry.id} ({img.width_px}x{img.height_px})")
            continue
        tiles = salient_tiles(img, spec, label=entry.klass)
        target = result.train_tiles if entry.role == "train" else result.test_tiles
        target.extend(tiles)
        result.counts[entry.role][entry.klass] += len(tiles)
    if too_small:
        raise ValueError(f"images smaller than tile side {side}: "
                         f"{', '.join(too_small)}")
    pos, neg = result.counts["train"]["positive"], result.counts["train"]["comparative"]
    if pos and neg:
        ratio = pos / neg
        if not (BALANCE_BAND[0] <= ratio <= BALANCE_BAND[1]):
            warnings.warn(f"train tile class ratio {ratio:.3f} outside balance "
                          f"band {BALANCE_BAND} (positive {pos}, comparative {neg})",
                          stacklevel=2)
    return result


def balance_overlaps(entries: Sequence[ManifestEntry], side: int,
                     base_neg_overlap: float, density: float,
                     manifest_dir: Union[str, Path] = ".") -> float:
    """Smallest positive-class overlap on a 0.5%-step grid making the salient
    positive tile count at least 90% of the comparative count.

    The grid starts at base_neg_overlap and is capped at 0.98; hitting the cap
    without balance raises BalanceError with the best achievable ratio.
    """
    if not (0.0 <= base_neg_overlap < 1.0):
        raise ValueError("base_neg_overlap must be in [0, 1)")
    train = [e for e in entries if e.role == "train" and e.quality_flag != "degraded"]
    pos_entries = [e for e in train if e.klass == "positive"]
    neg_entries = [e for e in train if e.klass == "comparative"]
    if not neg_entries:
        raise BalanceError("no comparative training images: nothing to balance against")
    if not pos_entries:
        raise BalanceError("no positive training images to balance")

    neg_count = sum(len(_salient_for_entry(e, TileSpec(side, base_neg_overlap),
                                           density, manifest_dir))
                    for e in neg_entries)
    pos_images = [to_luminance(load_entry_image(e, density, manifest_dir))
                  for e in pos_entries]

    best_ratio = 0.0
    step = 0
    while True:
        overlap = round(base_neg_overlap + step * BALANCE_GRID_STEP, 10)
        if overlap > BALANCE_OVERLAP_CAP + 1e-9:
            break
        spec = TileSpec(side, overlap)
        pos_count = sum(len(salient_tiles(img, spec)) for img in pos_images)
        ratio = pos_count / neg_count if neg_count else float("inf")
        best_ratio = max(best_ratio, ratio)
        if pos_count >= BALANCE_MIN_RATIO * neg_count:
            return overlap
        step += 1
    raise BalanceError(f"overlap cap {BALANCE_OVERLAP_CAP} reached without "
                       f"balance; best positive/comparative ratio {best_ratio:.3f}")


def random_split(pool: Sequence[ManifestEntry], n_train: int, n_test: int,
                 seed: Optional[int]) -> SplitPlan:
    """Shuffle comparative images into train/test; positives keep their fixed
    manifest roles. Deterministic for a given seed."""
    comparatives = [e.id for e in pool
                    if e.klass == "comparative" and e.role in ("train", "test")]
    if n_train + n_test > len(comparatives):
        raise ValueError(f"pool has {len(comparatives)} comparative images; "
                         f"cannot draw {n_train} + {n_test}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(comparatives)))
    picked = [comparatives[i] for i in order]
    train_ids = set(picked[:n_train])
    test_ids = set(picked[n_train:n_train + n_test])
    pos_test = {e.id for e in pool if e.klass == "positive" and e.role == "test"}
    train_ids |= {e.id for e in pool if e.klass == "positive" and e.role == "train"}
    test_ids |= pos_test
    return SplitPlan(train_ids=frozenset(train_ids), test_ids=frozenset(test_ids),
                     seed=seed, kind="random",
                     positive_test_ids=frozenset(pos_test))


def curated_split(entries: Sequence[ManifestEntry]) -> SplitPlan:
    """The manifest's hand-assigned roles, as a SplitPlan."""
    train_ids = {e.id for e in entries if e.role == "train"}
    test_ids = {e.id for e in entries if e.role == "test"}
    pos_test = {e.id for e in entries if e.klass == "positive" and e.role == "test"}
    return SplitPlan(train_ids=frozenset(train_ids), test_ids=frozenset(test_ids),
                     seed=None, kind="curated",
                     positive_test_ids=frozenset(pos_test))


def apply_split(entries: Sequence[ManifestEntry], plan: SplitPlan) -> List[ManifestEntry]:
    """Re-role entries according to a split plan; ids absent from the plan keep
    their manifest role if external, otherwise they are dropped."""
    out = []
    for e in entries:
        if e.id in plan.train_ids:
            out.append(ManifestEntry(**{**e.__dict__, "role": "train"}))
        elif e.id in plan.test_ids:
            out.append(ManifestEntry(**{**e.__dict__, "role": "test"}))
        elif e.role == "external":
            out.append(e)
    return out
