"""Glue between manifests, tensors, checkpoints, and predictors.

These helpers are what the CLI subcommands are built from; tests use them to
exercise the pipeline without shelling out.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data_model import BiomassLabel, Manifest, TaskSchema, schema_by_name
from .errors import DataError
from .geometry import CropConfig, CropWindow, extract_crop, plan_checkerboard_crops, plan_random_crops, upscale_crop
from .imgio import load_image, resize_image, save_image, to_tensor
from .regressor import LabelCodec, RegressorModel, decode_prediction, encode_label
from .translation import CUTModel, apply_translation


def load_labeled_tensors(
    manifest: Manifest,
    codec: LabelCodec,
    resolution: int,
    domain: str = "ground",
) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Images and encoded targets for all fully labeled records of a domain."""
    images, targets, ids = [], [], []
    for rec in manifest.by_domain(domain):
        if rec.label is None or rec.label.composition is None:
            continue
        img = resize_image(load_image(manifest.image_path(rec)), resolution)
        images.append(to_tensor(img))
        targets.append(encode_label(rec.label, codec, manifest.schema))
        ids.append(rec.id)
    if not images:
        raise DataError(f"manifest has no fully labeled {domain} records")
    return torch.cat(images), torch.tensor(np.stack(targets), dtype=torch.float32), ids


def load_images_from_dir(directory: str | Path, resolution: Optional[int] = None) -> torch.Tensor:
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG images in {directory}")
    images = []
    for p in paths:
        img = load_image(p)
        if resolution:
            img = resize_image(img, resolution)
        images.append(to_tensor(img))
    return torch.cat(images)


def save_regressor_checkpoint(model: RegressorModel, path: str | Path, config: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "regressor",
            "schema": model.schema.name,
            "backbone": model.backbone_name,
            "codec": asdict(model.codec),
            "config": config or {},
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_regressor_checkpoint(path: str | Path) -> RegressorModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "regressor":
        raise DataError(f"{path} is not a regressor checkpoint")
    codec_dict = dict(blob["codec"])
    codec_dict["clamp"] = tuple(codec_dict["clamp"])
    model = RegressorModel(
        schema_by_name(blob["schema"]), LabelCodec(**codec_dict), backbone=blob["backbone"]
    )
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def make_predictor(model: RegressorModel, resolution: int, batch_size: int = 64):
    """Wrap a regressor into a list-of-images -> list-of-labels callable."""

    def predict(images: list[np.ndarray]) -> list[BiomassLabel]:
        model.eval()
        out: list[BiomassLabel] = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                batch = torch.cat(
                    [to_tensor(resize_image(im, resolution)) for im in images[i : i + batch_size]]
                )
                raw = model(batch).double().numpy()
                out.extend(decode_prediction(r, model.codec, model.schema) for r in raw)
        return out

    return predict


def emit_crops(
    manifest: Manifest,
    out_dir: str | Path,
    crop_config: CropConfig,
    mode: str = "random",
    upscale_to: int = 0,
) -> dict:
    """Write per-drone-record crops (optionally upscaled) plus a crops manifest.

    Returns the crops-manifest dict: crop id -> {source, window, altitude}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    crops_manifest: dict[str, dict] = {}
    for rec in manifest.by_domain("drone"):
        img = load_image(manifest.image_path(rec))
        size = (img.shape[1], img.shape[0])
        if mode == "random":
            windows = plan_random_crops(size, rec.altitude_m, crop_config)
        elif mode == "checkerboard":
            windows = plan_checkerboard_crops(size, rec.altitude_m, crop_config)
        else:
            raise DataError(f"unknown crop mode {mode!r}")
        for i, win in enumerate(windows):
            crop_id = f"{rec.id}_c{i:04d}"
            if upscale_to:
                crop = upscale_crop(img, win, upscale_to)
            else:
                crop = extract_crop(img, win)
            save_image(crop, out_dir / f"{crop_id}.png")
            crops_manifest[crop_id] = {
                "source": rec.id,
                "window": [win.x0, win.y0, win.edge],
                "altitude_m": rec.altitude_m,
            }
    with open(out_dir / "crops.json", "w") as fh:
        json.dump(crops_manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return crops_manifest


def translate_directory(model: CUTModel, in_dir: str | Path, out_dir: str | Path) -> int:
    """Translate every PNG in in_dir; returns the number of images written."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    paths = sorted(p for p in in_dir.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG images in {in_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in paths:
        translated = apply_translation(model, [load_image(p)])[0]
        save_image(translated, out_dir / p.name)
    return len(paths)
