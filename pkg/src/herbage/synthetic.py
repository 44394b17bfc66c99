"""Deterministic synthetic canopy dataset with analytically recoverable labels.

Every generated ground-level pixel is exactly one of ``n_classes * 3``
reference colors: a per-class base color at one of three brightness tiers.
The stored label is computed from the rendered pixels themselves, so an
independent oracle (:func:`recover_label_from_pixels`) can reproduce it
exactly:

  * composition fraction per class = fraction of pixels in that class;
  * herbage mass  = affine in the fraction of bright-tier pixels;
  * herbage height = affine in the mid-tier share of the non-bright pixels.

Drone images are rendered by the same process at a larger size, labeled from
the clean rendering, then Gaussian-blurred and color-shifted with a fixed
per-channel affine transform to simulate the drone camera domain.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .data_model import (
    BiomassLabel,
    ImageRecord,
    Manifest,
    TaskSchema,
    save_manifest,
    schema_by_name,
)
from .errors import DataError

# Base colors are well separated so the three brightness tiers stay distinct
# after uint8 rounding.
_PALETTES: dict[str, dict[str, tuple[int, int, int]]] = {
    "irish": {
        "grass": (60, 200, 60),
        "clover": (230, 230, 230),
        "weeds": (200, 70, 40),
    },
    "grassclover": {
        "grass": (60, 200, 60),
        "white_clover": (240, 240, 240),
        "red_clover": (230, 120, 160),
        "weeds": (150, 80, 30),
    },
}

_TIERS = (1.0, 0.6, 0.35)

MASS_RANGE = (500.0, 3500.0)
HEIGHT_RANGE = (2.0, 18.0)

# Fixed per-channel affine simulating the drone camera's color response.
_DRONE_COLOR_SHIFT = ((0.92, 18.0), (0.85, 8.0), (1.30, 25.0))


@dataclass
class SyntheticConfig:
    out_dir: str | Path = "synthetic"
    schema: str = "irish"
    ground_size: int = 512
    drone_size: int = 2048
    blob_frac: float = 0.04  # class-blob smoothing sigma as a fraction of image size
    drone_blur_sigma: float = 4.0
    altitude_range: tuple[float, float] = (6.0, 12.0)


def reference_colors(schema: TaskSchema) -> dict[tuple[int, int, int], tuple[str, int]]:
    """Map each exact reference color to its (class, tier index)."""
    table: dict[tuple[int, int, int], tuple[str, int]] = {}
    palette = _PALETTES[schema.name]
    for cls in schema.composition_classes:
        base = palette[cls]
        for t, factor in enumerate(_TIERS):
            color = tuple(int(round(factor * c)) for c in base)
            if color in table:
                raise AssertionError(f"reference color collision: {color}")
            table[color] = (cls, t)
    return table


def _render_canopy(
    rng: np.random.Generator,
    schema: TaskSchema,
    size: int,
    blob_frac: float,
    dirichlet_alpha: np.ndarray,
    mass_target: float,
    height_target: float,
) -> np.ndarray:
    """Render one clean canopy image; label is recoverable from its pixels."""
    n_classes = len(schema.composition_classes)
    weights = rng.dirichlet(dirichlet_alpha)
    sigma = max(1.0, blob_frac * size)
    fields = np.stack(
        [gaussian_filter(rng.standard_normal((size, size)), sigma) for _ in range(n_classes)]
    )
    # Per-field std after smoothing is ~1/(2*sigma*sqrt(pi)); rescale before biasing.
    fields /= fields.std(axis=(1, 2), keepdims=True) + 1e-12
    fields += np.log(weights)[:, None, None]
    class_map = fields.argmax(axis=0)

    mlo, mhi = MASS_RANGE
    hlo, hhi = HEIGHT_RANGE
    p_bright = (mass_target - mlo) / (mhi - mlo)
    q_mid = (height_target - hlo) / (hhi - hlo)
    u = rng.random((size, size))
    tier_map = np.full((size, size), 2, dtype=np.int64)
    tier_map[u < p_bright + (1.0 - p_bright) * q_mid] = 1
    tier_map[u < p_bright] = 0

    palette = _PALETTES[schema.name]
    lut = np.zeros((n_classes, len(_TIERS), 3), dtype=np.uint8)
    for c, cls in enumerate(schema.composition_classes):
        for t, factor in enumerate(_TIERS):
            lut[c, t] = [int(round(factor * v)) for v in palette[cls]]
    return lut[class_map, tier_map]


def recover_label_from_pixels(img: np.ndarray, schema: TaskSchema) -> BiomassLabel:
    """Independent oracle: recompute the label of a clean rendering.

    Fails loudly on any pixel that is not an exact reference color (e.g. a
    blurred drone image).
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError("expected an HxWx3 RGB image")
    table = reference_colors(schema)
    keys = (
        img[..., 0].astype(np.int64) << 16
        | img[..., 1].astype(np.int64) << 8
        | img[..., 2].astype(np.int64)
    )
    class_index = {cls: i for i, cls in enumerate(schema.composition_classes)}
    lut_cls = {}
    lut_tier = {}
    for color, (cls, tier) in table.items():
        k = color[0] << 16 | color[1] << 8 | color[2]
        lut_cls[k] = class_index[cls]
        lut_tier[k] = tier
    flat = keys.ravel()
    uniq, counts = np.unique(flat, return_counts=True)
    n_total = flat.size
    class_counts = np.zeros(len(class_index), dtype=np.int64)
    tier_counts = np.zeros(len(_TIERS), dtype=np.int64)
    for k, n in zip(uniq.tolist(), counts.tolist()):
        if k not in lut_cls:
            raise DataError(f"pixel color {(k >> 16, (k >> 8) & 255, k & 255)} is not a reference color")
        class_counts[lut_cls[k]] += n
        tier_counts[lut_tier[k]] += n

    composition = {
        cls: float(class_counts[i] / n_total) for cls, i in class_index.items()
    }
    label = BiomassLabel(composition=composition)
    if schema.has_mass_head:
        mlo, mhi = MASS_RANGE
        label.herbage_mass = float(mlo + (mhi - mlo) * (tier_counts[0] / n_total))
    if schema.has_height_head:
        hlo, hhi = HEIGHT_RANGE
        non_bright = tier_counts[1] + tier_counts[2]
        q = tier_counts[1] / non_bright if non_bright > 0 else 0.0
        label.height = float(HEIGHT_RANGE[0] + (HEIGHT_RANGE[1] - HEIGHT_RANGE[0]) * q)
    return label


def drone_color_shift(img: np.ndarray) -> np.ndarray:
    """Fixed per-channel affine contrast/hue shift for the drone domain."""
    out = img.astype(np.float64)
    for c, (scale, offset) in enumerate(_DRONE_COLOR_SHIFT):
        out[..., c] = out[..., c] * scale + offset
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def _degrade_to_drone(img: np.ndarray, blur_sigma: float) -> np.ndarray:
    blurred = np.stack(
        [gaussian_filter(img[..., c].astype(np.float64), blur_sigma) for c in range(3)],
        axis=-1,
    )
    return drone_color_shift(np.clip(np.round(blurred), 0, 255).astype(np.uint8))


def _dirichlet_alpha(schema: TaskSchema) -> np.ndarray:
    if schema.name == "irish":
        return np.array([4.0, 2.0, 1.0])
    return np.array([4.0, 1.5, 1.5, 1.0])


def generate_synthetic_dataset(
    seed: int,
    n_ground: int,
    n_drone: int,
    config: SyntheticConfig,
) -> Manifest:
    """Write ground and drone PNGs plus a manifest; deterministic per seed."""
    if n_ground <= 0 or n_drone <= 0:
        raise DataError("n_ground and n_drone must be positive")
    schema = schema_by_name(config.schema)
    out_dir = Path(config.out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_ground + n_drone)
    alpha = _dirichlet_alpha(schema)
    records: list[ImageRecord] = []

    for i in range(n_ground):
        rng = np.random.default_rng(children[i])
        mass = rng.uniform(MASS_RANGE[0] + 100, MASS_RANGE[1] - 100)
        height = rng.uniform(HEIGHT_RANGE[0] + 1, HEIGHT_RANGE[1] - 1)
        img = _render_canopy(rng, schema, config.ground_size, config.blob_frac, alpha, mass, height)
        label = recover_label_from_pixels(img, schema)
        rel = f"images/g{i:04d}.png"
        Image.fromarray(img).save(out_dir / rel)
        records.append(ImageRecord(id=f"g{i:04d}", path=rel, domain="ground", label=label))

    for i in range(n_drone):
        rng = np.random.default_rng(children[n_ground + i])
        mass = rng.uniform(MASS_RANGE[0] + 100, MASS_RANGE[1] - 100)
        height = rng.uniform(HEIGHT_RANGE[0] + 1, HEIGHT_RANGE[1] - 1)
        clean = _render_canopy(rng, schema, config.drone_size, config.blob_frac, alpha, mass, height)
        clean_label = recover_label_from_pixels(clean, schema)
        img = _degrade_to_drone(clean, config.drone_blur_sigma)
        altitude = float(rng.uniform(*config.altitude_range))
        rel = f"images/d{i:04d}.png"
        Image.fromarray(img).save(out_dir / rel)
        # Drone ground truth mirrors field collection: mass only.
        label = BiomassLabel(herbage_mass=clean_label.herbage_mass) if schema.has_mass_head else None
        records.append(
            ImageRecord(
                id=f"d{i:04d}",
                path=rel,
                domain="drone",
                altitude_m=round(altitude, 2),
                label=label,
            )
        )

    manifest = Manifest(schema=schema, records=records, root=out_dir)
    manifest.validate()
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
