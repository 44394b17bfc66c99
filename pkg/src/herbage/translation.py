"""Unpaired contrastive translation of upscaled drone crops to the ground domain.

A generator maps drone-looking crops toward the ground-level visual style
(joint deblurring and color shift), trained adversarially against a patch
discriminator and regularized by an InfoNCE-style patch contrastive loss
between matched spatial locations of the input and its translation.

Images are float tensors in [-1, 1]; the generator is globally residual
(output = input + learned residual), so zeroing the final convolution makes
it an exact identity, which the tests exploit.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F_t

from .errors import DataError, TrainingError
from .imgio import from_tensor, to_tensor


@dataclass
class CUTConfig:
    n_patches: int = 64
    tau: float = 0.07
    lambda_u: float = 0.5  # weight of the patch loss on translated drone crops
    lambda_l: float = 0.5  # weight of the identity patch loss on ground images
    generator_blocks: int = 2
    ngf: int = 32
    ndf: int = 32
    proj_dim: int = 64
    train_resolution: int = 64
    feature_tap: Optional[int] = None  # defaults to ceil(generator_blocks / 2)
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    checkpoint_every: int = 100

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise DataError("tau must be positive")
        if self.lambda_u < 0 or self.lambda_l < 0:
            raise DataError("patch loss weights must be non-negative")
        if self.n_patches < 2:
            raise DataError("n_patches must be at least 2")

    @property
    def tap(self) -> int:
        if self.feature_tap is not None:
            return self.feature_tap
        return math.ceil(self.generator_blocks / 2)


class InstanceNorm(nn.Module):
    """Per-channel spatial normalization, composed from primitive ops.

    Built-in F.instance_norm produces incorrect analytic gradients on this
    torch build when the upstream gradient is spatially sparse (as with
    sampled patch locations); composing mean/var keeps autograd exact.
    """

    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = InstanceNorm()
        self.norm2 = InstanceNorm()

    def forward(self, x):
        h = F_t.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class Generator(nn.Module):
    """Fully convolutional, size preserving, globally residual generator."""

    def __init__(self, ngf: int = 32, n_blocks: int = 2):
        super().__init__()
        self.stem = nn.Conv2d(3, ngf, 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(ngf) for _ in range(n_blocks))
        self.head = nn.Conv2d(ngf, 3, 3, padding=1)

    def encode(self, x: torch.Tensor, tap: int) -> torch.Tensor:
        h = F_t.relu(self.stem(x))
        for block in self.blocks[:tap]:
            h = block(h)
        return h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F_t.relu(self.stem(x))
        for block in self.blocks:
            h = block(h)
        return x + self.head(h)


class Discriminator(nn.Module):
    """Three-layer patch discriminator; outputs a logit map."""

    def __init__(self, ndf: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, ndf, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ndf, ndf * 2, 4, stride=2, padding=1),
            InstanceNorm(),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ndf * 2, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ProjectionHead(nn.Module):
    """Two-layer perceptron projecting tapped features to unit vectors."""

    def __init__(self, in_dim: int, out_dim: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F_t.relu(self.fc1(x))
        h = self.fc2(h)
        return F_t.normalize(h, dim=-1)


@dataclass
class PatchBatch:
    """P pairs of L2-normalized feature vectors at matched spatial locations."""

    p: torch.Tensor  # (P, D), from the source image
    p_prime: torch.Tensor  # (P, D), from the translated image

    def validate(self, tol: float = 1e-5) -> None:
        with torch.no_grad():
            for name, t in (("p", self.p), ("p_prime", self.p_prime)):
                norms = t.norm(dim=-1)
                if (norms - 1.0).abs().max().item() > tol:
                    raise DataError(f"PatchBatch.{name} vectors are not unit-norm")


class CUTModel:
    def __init__(self, config: CUTConfig, dtype: torch.dtype = torch.float32):
        self.config = config
        self.generator = Generator(config.ngf, config.generator_blocks).to(dtype)
        self.discriminator = Discriminator(config.ndf).to(dtype)
        self.projection = ProjectionHead(config.ngf, config.proj_dim).to(dtype)
        self.step = 0
        self.opt_g = torch.optim.Adam(
            list(self.generator.parameters()) + list(self.projection.parameters()),
            lr=config.lr,
            betas=config.betas,
        )
        self.opt_d = torch.optim.Adam(
            self.discriminator.parameters(), lr=config.lr, betas=config.betas
        )

    def init_identity(self) -> None:
        """Zero the residual head so the generator is an exact identity."""
        with torch.no_grad():
            self.generator.head.weight.zero_()
            self.generator.head.bias.zero_()


def build_cut_model(config: CUTConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> CUTModel:
    torch.manual_seed(seed)
    return CUTModel(config, dtype=dtype)


def adversarial_loss(d_scores_real, d_scores_fake) -> float:
    """The printed adversarial objective over discriminator probabilities.

    mean(log D(x_l)) + mean(1 - log D(G(x_u))). Pure function over scores in
    (0, 1); training itself uses the standard non-saturating variant (see
    :func:`total_cut_loss`).
    """
    real = torch.as_tensor(d_scores_real, dtype=torch.float64)
    fake = torch.as_tensor(d_scores_fake, dtype=torch.float64)
    for name, t in (("real", real), ("fake", fake)):
        if t.numel() == 0 or (t <= 0).any() or (t >= 1).any():
            raise DataError(f"{name} scores must lie strictly inside (0, 1)")
    return float(torch.log(real).mean() + (1.0 - torch.log(fake)).mean())


def patch_contrastive_loss(batch: PatchBatch, tau: float, validate: bool = True) -> torch.Tensor:
    """InfoNCE over patch pairs: positives on the diagonal, negatives from
    the same image; numerically stable via cross-entropy's log-sum-exp."""
    if tau <= 0:
        raise DataError("tau must be positive")
    if validate:
        batch.validate()
    logits = batch.p_prime @ batch.p.T / tau  # row i: ip(p_k, p_i') over k
    targets = torch.arange(logits.shape[0], device=logits.device)
    return F_t.cross_entropy(logits, targets)


def sample_patch_pairs(
    source: torch.Tensor,
    translated: torch.Tensor,
    model: CUTModel,
    rng: np.random.Generator,
) -> PatchBatch:
    """Sample P spatial locations once, tap generator features at both images
    there, project, and L2-normalize."""
    if source.shape != translated.shape:
        raise DataError(f"shape mismatch: {tuple(source.shape)} vs {tuple(translated.shape)}")
    cfg = model.config
    tap = cfg.tap
    feat_s = model.generator.encode(source, tap)
    feat_t = model.generator.encode(translated, tap)
    n, c, h, w = feat_s.shape
    n_locs = n * h * w
    if cfg.n_patches > n_locs:
        raise DataError(f"cannot sample {cfg.n_patches} patches from {n_locs} locations")
    idx = rng.choice(n_locs, size=cfg.n_patches, replace=False)
    idx_t = torch.from_numpy(np.ascontiguousarray(idx))
    flat_s = feat_s.permute(0, 2, 3, 1).reshape(-1, c)
    flat_t = feat_t.permute(0, 2, 3, 1).reshape(-1, c)
    p = model.projection(flat_s[idx_t])
    p_prime = model.projection(flat_t[idx_t])
    return PatchBatch(p=p, p_prime=p_prime)


def _bce_logits(logits: torch.Tensor, target_value: float) -> torch.Tensor:
    target = torch.full_like(logits, target_value)
    return F_t.binary_cross_entropy_with_logits(logits, target)


def total_cut_loss(
    model: CUTModel,
    x_l: torch.Tensor,
    x_u: torch.Tensor,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, dict[str, float]]:
    """Generator-side and discriminator-side losses plus a parts breakdown.

    Generator: non-saturating fooling term + weighted patch losses on the
    drone translation and the ground identity mapping. Discriminator: binary
    real/fake classification with the generator frozen.
    """
    cfg = model.config
    fake = model.generator(x_u)
    idt = model.generator(x_l)

    d_real = model.discriminator(x_l)
    d_fake_detached = model.discriminator(fake.detach())
    loss_d = 0.5 * (_bce_logits(d_real, 1.0) + _bce_logits(d_fake_detached, 0.0))

    g_adv = _bce_logits(model.discriminator(fake), 1.0)
    zero = fake.new_zeros(())
    patch_u = (
        patch_contrastive_loss(sample_patch_pairs(x_u, fake, model, rng), cfg.tau, validate=False)
        if cfg.lambda_u > 0
        else zero
    )
    patch_l = (
        patch_contrastive_loss(sample_patch_pairs(x_l, idt, model, rng), cfg.tau, validate=False)
        if cfg.lambda_l > 0
        else zero
    )
    loss_g = g_adv + cfg.lambda_u * patch_u + cfg.lambda_l * patch_l
    parts = {
        "g_adv": float(g_adv.detach()),
        "patch_u": float(patch_u.detach()),
        "patch_l": float(patch_l.detach()),
        "d": float(loss_d.detach()),
    }
    return loss_g, loss_d, parts


def save_cut_checkpoint(model: CUTModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "cut",
            "config": asdict(model.config),
            "step": model.step,
            "generator": model.generator.state_dict(),
            "discriminator": model.discriminator.state_dict(),
            "projection": model.projection.state_dict(),
        },
        path,
    )


def load_cut_checkpoint(path: str | Path) -> CUTModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "cut":
        raise DataError(f"{path} is not a translation checkpoint")
    cfg_dict = dict(blob["config"])
    cfg_dict["betas"] = tuple(cfg_dict["betas"])
    model = CUTModel(CUTConfig(**cfg_dict))
    model.generator.load_state_dict(blob["generator"])
    model.discriminator.load_state_dict(blob["discriminator"])
    model.projection.load_state_dict(blob["projection"])
    model.step = int(blob["step"])
    return model


def train_cut(
    model: CUTModel,
    ground_set: list[np.ndarray],
    drone_set: list[np.ndarray],
    steps: int,
    rng: np.random.Generator,
    checkpoint_path: str | Path | None = None,
    history_path: str | Path | None = None,
) -> list[dict[str, float]]:
    """Alternate discriminator and generator/projection updates.

    ``ground_set`` and ``drone_set`` are uint8 HWC images at the training
    resolution. Aborts on non-finite loss, keeping the last finite checkpoint.
    """
    if not ground_set or not drone_set:
        raise DataError("both image sets must be non-empty")
    ground = [to_tensor(im) for im in ground_set]
    drone = [to_tensor(im) for im in drone_set]
    history: list[dict[str, float]] = []

    for _ in range(steps):
        x_l = ground[rng.integers(len(ground))]
        x_u = drone[rng.integers(len(drone))]

        # Discriminator update with the generator frozen.
        patch_state = rng.bit_generator.state
        _, loss_d, _ = total_cut_loss(model, x_l, x_u, rng)
        model.opt_d.zero_grad()
        loss_d.backward()
        model.opt_d.step()

        # Generator/projection update; reuse the same patch locations.
        rng.bit_generator.state = patch_state
        loss_g, _, parts = total_cut_loss(model, x_l, x_u, rng)
        model.opt_g.zero_grad()
        loss_g.backward()
        model.opt_g.step()
        model.step += 1

        entry = {
            "step": model.step,
            "loss_g": float(loss_g.detach()),
            "loss_d": float(loss_d.detach()),
            **parts,
        }
        history.append(entry)
        if not (math.isfinite(entry["loss_g"]) and math.isfinite(entry["loss_d"])):
            raise TrainingError(f"non-finite loss at step {model.step}: {entry}")
        if checkpoint_path is not None and model.step % model.config.checkpoint_every == 0:
            save_cut_checkpoint(model, checkpoint_path)

    if checkpoint_path is not None:
        save_cut_checkpoint(model, checkpoint_path)
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        with open(history_path, "w") as fh:
            json.dump(history, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return history


def apply_translation(model: CUTModel, crops: list[np.ndarray]) -> list[np.ndarray]:
    """Run the generator on each crop; deterministic, clamped to uint8 range."""
    model.generator.eval()
    out = []
    with torch.no_grad():
        for crop in crops:
            out.append(from_tensor(model.generator(to_tensor(crop))))
    model.generator.train()
    return out
