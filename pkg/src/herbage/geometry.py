"""Altitude-adjusted crop planning and bicubic upscaling of drone crops.

The crop edge shrinks proportionally with altitude so that every crop covers
the same land area: edge = base_edge * reference_altitude / altitude. Crops
are then bicubically upscaled to a fixed square resolution for translation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError

MIN_EDGE_PX = 8


@dataclass
class CropConfig:
    base_edge_px: int = 256
    reference_altitude_m: float = 6.0
    target_edge_px: int = 2048
    n_random_crops: int = 50
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.base_edge_px <= 0:
            raise DataError("base_edge_px must be positive")
        if self.target_edge_px <= 0 or self.target_edge_px % 8 != 0:
            raise DataError("target_edge_px must be a positive multiple of 8")


@dataclass(frozen=True)
class CropWindow:
    x0: int
    y0: int
    edge: int


def crop_edge_for_altitude(altitude_m: float, config: CropConfig | None = None) -> int:
    """Pixel edge of a square crop at the given altitude.

    Round-half-to-even on fractional edges, floored at 8 px.
    """
    if config is None:
        config = CropConfig()
    if altitude_m <= 0:
        raise DataError(f"altitude must be positive, got {altitude_m}")
    edge = config.base_edge_px * config.reference_altitude_m / altitude_m
    return max(MIN_EDGE_PX, int(round(edge)))


def _check_edge(image_size: tuple[int, int], edge: int) -> None:
    w, h = image_size
    if edge > min(w, h):
        raise DataError(f"crop edge {edge} exceeds image dimensions {w}x{h}")


def plan_random_crops(
    image_size: tuple[int, int], altitude_m: float, config: CropConfig
) -> list[CropWindow]:
    """Uniformly positioned in-bounds square windows; deterministic per seed."""
    edge = crop_edge_for_altitude(altitude_m, config)
    _check_edge(image_size, edge)
    w, h = image_size
    rng = np.random.default_rng(config.rng_seed)
    xs = rng.integers(0, w - edge + 1, size=config.n_random_crops)
    ys = rng.integers(0, h - edge + 1, size=config.n_random_crops)
    return [CropWindow(int(x), int(y), edge) for x, y in zip(xs, ys)]


def plan_checkerboard_crops(
    image_size: tuple[int, int], altitude_m: float, config: CropConfig
) -> list[CropWindow]:
    """Non-overlapping grid of edge-sized windows, row-major; partial tiles dropped."""
    edge = crop_edge_for_altitude(altitude_m, config)
    _check_edge(image_size, edge)
    w, h = image_size
    return [
        CropWindow(cx * edge, cy * edge, edge)
        for cy in range(h // edge)
        for cx in range(w // edge)
    ]


def extract_crop(image: np.ndarray, window: CropWindow) -> np.ndarray:
    h, w = image.shape[:2]
    if (
        window.x0 < 0
        or window.y0 < 0
        or window.x0 + window.edge > w
        or window.y0 + window.edge > h
    ):
        raise DataError(f"crop window {window} outside {w}x{h} image")
    return image[window.y0 : window.y0 + window.edge, window.x0 : window.x0 + window.edge]


def upscale_crop(image: np.ndarray, window: CropWindow, target_edge_px: int) -> np.ndarray:
    """Extract the window and bicubically upscale it to a square target size.

    Pillow's bicubic filter is Catmull-Rom (a = -0.5); uint8 output is
    inherently clamped to [0, 255].
    """
    crop = extract_crop(image, window)
    pil = Image.fromarray(crop)
    out = pil.resize((target_edge_px, target_edge_px), Image.Resampling.BICUBIC)
    return np.asarray(out)
