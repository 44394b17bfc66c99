"""Small helpers for moving images between PNG files, numpy, and torch."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(img: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    with Image.fromarray(img) as im:
        return np.asarray(im.resize((size, size), Image.Resampling.BICUBIC))


def to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 HWC [0,255] -> float CHW in [-1, 1], with batch dim."""
    t = torch.tensor(np.asarray(img), dtype=dtype) / 127.5 - 1.0
    return t.permute(2, 0, 1).unsqueeze(0)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """float (1,C,H,W) or (C,H,W) in [-1, 1] -> uint8 HWC."""
    if t.dim() == 4:
        t = t.squeeze(0)
    arr = ((t.detach().clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()
