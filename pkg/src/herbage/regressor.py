"""Regression network: pluggable backbone plus task-dependent heads.

Targets live in encoded space: composition fractions pass through unchanged
(softmax head), herbage mass and height are scaled by fixed constants,
offset by +0.2, and clamped into the sigmoid's reachable range.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F_t

from .data_model import BiomassLabel, TaskSchema
from .errors import DataError


@dataclass(frozen=True)
class LabelCodec:
    mass_scale: float = 4000.0
    height_scale: float = 20.0
    offset: float = 0.2
    clamp: tuple[float, float] = (0.01, 0.99)


def target_dim(schema: TaskSchema) -> int:
    return (
        len(schema.composition_classes)
        + (1 if schema.has_mass_head else 0)
        + (1 if schema.has_height_head else 0)
    )


def encode_label(label: BiomassLabel, codec: LabelCodec, schema: TaskSchema) -> np.ndarray:
    """Label -> target vector: [composition..., mass?, height?]."""
    if label.composition is None:
        raise DataError("cannot encode a label without composition")
    out = [label.composition[c] for c in schema.composition_classes]
    lo, hi = codec.clamp
    if schema.has_mass_head:
        if label.herbage_mass is None:
            raise DataError("schema requires herbage_mass but label has none")
        if label.herbage_mass < 0:
            raise DataError(f"negative herbage_mass {label.herbage_mass}")
        out.append(float(np.clip(label.herbage_mass / codec.mass_scale + codec.offset, lo, hi)))
    if schema.has_height_head:
        if label.height is None:
            raise DataError("schema requires height but label has none")
        if label.height < 0:
            raise DataError(f"negative height {label.height}")
        out.append(float(np.clip(label.height / codec.height_scale + codec.offset, lo, hi)))
    return np.asarray(out, dtype=np.float64)


def decode_prediction(raw: np.ndarray, codec: LabelCodec, schema: TaskSchema) -> BiomassLabel:
    """Raw head outputs -> physical label; never emits negative quantities."""
    raw = np.asarray(raw, dtype=np.float64)
    n_comp = len(schema.composition_classes)
    label = BiomassLabel(
        composition={c: float(raw[i]) for i, c in enumerate(schema.composition_classes)}
    )
    k = n_comp
    if schema.has_mass_head:
        label.herbage_mass = max(0.0, (float(raw[k]) - codec.offset) * codec.mass_scale)
        k += 1
    if schema.has_height_head:
        label.height = max(0.0, (float(raw[k]) - codec.offset) * codec.height_scale)
    return label


def derived_total_clover(label: BiomassLabel) -> float:
    """GrassClover reports total clover as white + red at metric time."""
    if label.composition is None or "white_clover" not in label.composition:
        raise DataError("total clover is only derived for grassclover labels")
    return label.composition["white_clover"] + label.composition["red_clover"]


class SmallCNN(nn.Module):
    """Desk-scale default backbone: 4 blocks of strided convs + pooling."""

    feature_dim = 64

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(64, 64, 3, stride=1, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x):
        return self.net(x)


class TinyCNN(nn.Module):
    """Minimal backbone for gradient-check tests."""

    feature_dim = 8

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 8, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x):
        return self.net(x)


def _make_backbone(name: str) -> tuple[nn.Module, int]:
    if name == "small_cnn":
        return SmallCNN(), SmallCNN.feature_dim
    if name == "tiny_cnn":
        return TinyCNN(), TinyCNN.feature_dim
    if name == "resnet18":
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        dim = net.fc.in_features
        net.fc = nn.Identity()
        return net, dim
    raise DataError(f"unknown backbone {name!r}")


class RegressorModel(nn.Module):
    """Backbone + composition softmax head and optional mass/height sigmoid heads."""

    def __init__(self, schema: TaskSchema, codec: LabelCodec | None = None, backbone: str = "small_cnn"):
        super().__init__()
        self.schema = schema
        self.codec = codec or LabelCodec()
        self.backbone_name = backbone
        self.backbone, feat_dim = _make_backbone(backbone)
        self.composition_head = nn.Linear(feat_dim, len(schema.composition_classes))
        self.mass_head = nn.Linear(feat_dim, 1) if schema.has_mass_head else None
        self.height_head = nn.Linear(feat_dim, 1) if schema.has_height_head else None

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        feat = self.backbone(images)
        parts = [F_t.softmax(self.composition_head(feat), dim=-1)]
        if self.mass_head is not None:
            parts.append(torch.sigmoid(self.mass_head(feat)))
        if self.height_head is not None:
            parts.append(torch.sigmoid(self.height_head(feat)))
        return torch.cat(parts, dim=-1)


def build_regressor(
    schema: TaskSchema,
    codec: LabelCodec | None = None,
    backbone: str = "small_cnn",
    seed: int = 0,
) -> RegressorModel:
    torch.manual_seed(seed)
    return RegressorModel(schema, codec, backbone)


def supervised_loss(raw_outputs: torch.Tensor, encoded_targets: torch.Tensor) -> torch.Tensor:
    """Per-sample RMSE over all target dimensions jointly, averaged over batch."""
    if raw_outputs.shape != encoded_targets.shape:
        raise DataError(
            f"shape mismatch: {tuple(raw_outputs.shape)} vs {tuple(encoded_targets.shape)}"
        )
    sq = (raw_outputs - encoded_targets) ** 2
    # clamp keeps the gradient finite when a sample matches its target exactly
    # (sqrt has an infinite slope at 0); it is a no-op otherwise.
    return torch.sqrt(sq.mean(dim=-1).clamp_min(1e-16)).mean()
