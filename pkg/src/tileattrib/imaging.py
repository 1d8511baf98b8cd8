"""
Image loading and density-normalized resampling.

Source images arrive at wildly different resolutions; everything downstream
assumes a uniform physical pixel density (pixels per canvas cm), so images
are resampled once on load. Density always comes from external metadata
(the manifest), never from file headers, which are unreliable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

# ITU-R 601 luma coefficients, fixed for cross-run determinism.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class DensityError(ValueError):
    """Raised when an operation needs a pixel density that is not known."""


@dataclass(frozen=True)
class CanvasImage:
    """A pixel raster with physical density and provenance metadata.

    pixels is uint8, shape (H, W) for single-channel or (H, W, 3) for RGB.
    density_px_per_cm may be None for images whose physical size is unknown;
    such images cannot be resampled.
    """

    pixels: np.ndarray
    density_px_per_cm: Optional[float]
    source_id: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.dtype != np.uint8:
            raise ValueError(f"pixel buffer must be uint8, got {px.dtype}")
        if px.ndim == 2:
            pass
        elif px.ndim == 3 and px.shape[2] == 3:
            pass
        else:
            raise ValueError(f"expected (H, W) or (H, W, 3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if self.density_px_per_cm is not None and self.density_px_per_cm <= 0:
            raise ValueError("density_px_per_cm must be positive")

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3


def load_image(path: Union[str, Path], density_px_per_cm: Optional[float] = None,
               source_id: str = "") -> CanvasImage:
    """Load a PNG/JPEG raster. Density must be supplied by the caller."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16"):
            im = im.convert("L")
        else:
            im = im.convert("RGB")
        pixels = np.asarray(im, dtype=np.uint8)
    if not source_id:
        source_id = Path(path).stem
    return CanvasImage(pixels=pixels, density_px_per_cm=density_px_per_cm,
                       source_id=source_id)


def save_png(img: CanvasImage, path: Union[str, Path]) -> None:
    Image.fromarray(img.pixels).save(path, format="PNG")


def resample_to_density(img: CanvasImage, target_density: float) -> CanvasImage:
    """Rescale an image so its pixel density equals target_density.

    Dimensions scale by target/source, rounded to nearest and clamped to >= 1.
    Area averaging is used when shrinking (avoids aliasing that would corrupt
    entropy statistics), bilinear when enlarging.
    """
    if img.density_px_per_cm is None:
        raise DensityError(f"density required to resample image '{img.source_id}'")
    if target_density <= 0:
        raise ValueError("target_density must be positive")
    if target_density == img.density_px_per_cm:
        return img

    scale = target_density / img.density_px_per_cm
    new_w = max(1, int(round(img.width_px * scale)))
    new_h = max(1, int(round(img.height_px * scale)))
    resample = Image.Resampling.BOX if scale < 1.0 else Image.Resampling.BILINEAR
    pil = Image.fromarray(img.pixels).resize((new_w, new_h), resample=resample)
    return CanvasImage(pixels=np.asarray(pil, dtype=np.uint8),
                       density_px_per_cm=target_density,
                       source_id=img.source_id)


def to_luminance(img: CanvasImage) -> CanvasImage:
    """Collapse RGB to a single luma channel; single-channel input passes through."""
    if img.channels == 1:
        return img
    r, g, b = LUMA_WEIGHTS
    luma = (r * img.pixels[:, :, 0].astype(np.float64)
            + g * img.pixels[:, :, 1]
            + b * img.pixels[:, :, 2])
    gray = np.clip(np.round(luma), 0, 255).astype(np.uint8)
    return replace(img, pixels=gray)
