"""Semi-supervised training loop: mixed labeled/unlabeled batches, EMA
teacher, two-view label guessing with uniform mixing, distribution alignment,
and composition renormalization."""
from __future__ import annotations

import copy
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .data_model import TaskSchema
from .errors import DataError, TrainingError
from .regressor import LabelCodec, RegressorModel, build_regressor, supervised_loss

log = logging.getLogger(__name__)


@dataclass
class SSLConfig:
    batch_size: int = 32
    labeled_per_batch: int = 4
    lr: float = 0.03
    momentum: float = 0.9
    ema_decay: float = 0.99
    alignment_window: int = 50
    train_resolution: int = 512
    steps: int = 300
    warmup_frac: float = 0.2
    seed: int = 0
    ssl_enabled: bool = True
    backbone: str = "small_cnn"

    def __post_init__(self) -> None:
        if not (0 < self.labeled_per_batch < self.batch_size):
            raise DataError("labeled_per_batch must be in (0, batch_size)")
        if not (0.0 < self.ema_decay < 1.0):
            raise DataError("ema_decay must be in (0, 1)")
        if self.alignment_window < 1:
            raise DataError("alignment_window must be >= 1")


def ema_blend(shadow: torch.Tensor, value: torch.Tensor, decay: float) -> torch.Tensor:
    """shadow <- decay * shadow + (1 - decay) * value, in place."""
    if shadow.shape != value.shape:
        raise DataError(f"shape mismatch: {tuple(shadow.shape)} vs {tuple(value.shape)}")
    return shadow.mul_(decay).add_(value, alpha=1.0 - decay)


class EMAState:
    """Shadow copy of the student, updated by exponential moving average."""

    def __init__(self, student: RegressorModel, decay: float):
        self.decay = decay
        self.model = copy.deepcopy(student)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, student: RegressorModel) -> None:
        for shadow, param in zip(self.model.parameters(), student.parameters()):
            ema_blend(shadow, param, self.decay)
        for shadow, buf in zip(self.model.buffers(), student.buffers()):
            if shadow.dtype.is_floating_point:
                ema_blend(shadow, buf, self.decay)
            else:
                shadow.copy_(buf)


def ema_update(state: EMAState, student: RegressorModel) -> EMAState:
    state.update(student)
    return state


class AlignmentState:
    """Sliding mean of guessed labels vs the fixed labeled-target mean."""

    def __init__(self, labeled_mean: np.ndarray, window: int = 50):
        self.labeled_mean = np.asarray(labeled_mean, dtype=np.float64)
        self.buffer: deque[np.ndarray] = deque(maxlen=window)

    def push(self, batch_mean: np.ndarray) -> None:
        self.buffer.append(np.asarray(batch_mean, dtype=np.float64))

    def sliding_mean(self) -> Optional[np.ndarray]:
        if not self.buffer:
            return None
        return np.mean(np.stack(self.buffer), axis=0)

    def factor(self) -> np.ndarray:
        """labeled_mean / sliding_mean; identity while the buffer is empty."""
        sliding = self.sliding_mean()
        if sliding is None:
            return np.ones_like(self.labeled_mean)
        return self.labeled_mean / np.maximum(sliding, 1e-8)


@dataclass
class GuessedLabel:
    y_prime: torch.Tensor  # teacher prediction on the first view (B, dim)
    y_double_prime: torch.Tensor  # teacher prediction on the second view
    lam: torch.Tensor  # (B,) mixing weights drawn from Uniform(0, 1)
    factor: np.ndarray  # alignment factor applied
    y_tilde: torch.Tensor  # mixed, aligned, renormalized pseudo-label


def _random_flip_view(images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    out = images
    if rng.random() < 0.5:
        out = torch.flip(out, dims=[-1])
    if rng.random() < 0.5:
        out = torch.flip(out, dims=[-2])
    return out


def _postprocess_guess(
    mixed: torch.Tensor,
    factor: np.ndarray,
    codec: LabelCodec,
    schema: TaskSchema,
) -> torch.Tensor:
    aligned = mixed * torch.as_tensor(factor, dtype=mixed.dtype)
    n_comp = len(schema.composition_classes)
    comp = aligned[:, :n_comp]
    comp = comp / comp.sum(dim=-1, keepdim=True).clamp_min(1e-12)
    rest = aligned[:, n_comp:].clamp(codec.clamp[0], codec.clamp[1])
    return torch.cat([comp, rest], dim=-1)


@torch.no_grad()
def guess_labels(
    teacher: EMAState,
    images: torch.Tensor,
    rng: np.random.Generator,
    alignment: AlignmentState,
    codec: LabelCodec,
    schema: TaskSchema,
    lam: Optional[float] = None,
) -> GuessedLabel:
    """Pseudo-label a batch of unlabeled images in encoded target space.

    Two flip-augmented views are predicted by the EMA teacher, mixed with a
    uniform random weight, rescaled toward the labeled label distribution,
    and the composition renormalized to sum to 1. No gradient flows.
    """
    teacher.model.eval()
    view1 = _random_flip_view(images, rng)
    view2 = _random_flip_view(images, rng)
    y1 = teacher.model(view1)
    y2 = teacher.model(view2)
    if lam is None:
        lam_t = torch.as_tensor(rng.random(images.shape[0]), dtype=y1.dtype)
    else:
        lam_t = torch.full((images.shape[0],), float(lam), dtype=y1.dtype)
    mixed = lam_t[:, None] * y1 + (1.0 - lam_t[:, None]) * y2
    factor = alignment.factor()
    y_tilde = _postprocess_guess(mixed, factor, codec, schema)
    return GuessedLabel(y_prime=y1, y_double_prime=y2, lam=lam_t, factor=factor, y_tilde=y_tilde)


class EpochSampler:
    """Without-replacement index sampling, reshuffled per epoch; falls back
    to with-replacement (with a warning) when the pool is too small."""

    def __init__(self, n: int, rng: np.random.Generator, name: str = "pool"):
        if n <= 0:
            raise DataError(f"{name} is empty")
        self.n = n
        self.rng = rng
        self.name = name
        self._order: list[int] = []
        self._warned = False

    def take(self, k: int) -> np.ndarray:
        if k > self.n:
            if not self._warned:
                log.warning(
                    "%s has %d items but %d requested per batch; sampling with replacement",
                    self.name, self.n, k,
                )
                self._warned = True
            return self.rng.integers(0, self.n, size=k)
        out: list[int] = []
        while len(out) < k:
            if not self._order:
                self._order = list(self.rng.permutation(self.n))
            out.append(self._order.pop())
        return np.asarray(out)


def build_mixed_batch(
    labeled_sampler: EpochSampler,
    unlabeled_sampler: EpochSampler,
    config: SSLConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Indices for one mini-batch: labeled_per_batch labeled + the rest unlabeled."""
    lab = labeled_sampler.take(config.labeled_per_batch)
    unlab = unlabeled_sampler.take(config.batch_size - config.labeled_per_batch)
    return lab, unlab


def _augment_batch(images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    return _random_flip_view(images, rng)


def ssl_step(
    student: RegressorModel,
    teacher: EMAState,
    images: torch.Tensor,
    labeled_targets: torch.Tensor,
    n_labeled: int,
    alignment: AlignmentState,
    config: SSLConfig,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
) -> float:
    """One optimization step on a mixed batch; then EMA and alignment updates."""
    unlabeled = images[n_labeled:]
    if unlabeled.shape[0] > 0:
        guess = guess_labels(teacher, unlabeled, rng, alignment, student.codec, student.schema)
        targets = torch.cat([labeled_targets, guess.y_tilde], dim=0)
    else:
        guess = None
        targets = labeled_targets

    student.train()
    out = student(_augment_batch(images, rng))
    loss = supervised_loss(out, targets)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite SSL loss: {float(loss)}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    teacher.update(student)
    if guess is not None:
        alignment.push(guess.y_tilde.mean(dim=0).double().numpy())
    return float(loss.detach())


@torch.no_grad()
def validation_rmse(model: RegressorModel, images: torch.Tensor, targets: torch.Tensor) -> float:
    model.eval()
    out = model(images)
    return float(supervised_loss(out, targets))


def train_ssl(
    config: SSLConfig,
    schema: TaskSchema,
    labeled_images: torch.Tensor,
    labeled_targets: torch.Tensor,
    unlabeled_images: Optional[torch.Tensor],
    val_images: Optional[torch.Tensor] = None,
    val_targets: Optional[torch.Tensor] = None,
    codec: Optional[LabelCodec] = None,
) -> tuple[RegressorModel, dict]:
    """Two-phase training: supervised warmup on the labeled pool, then mixed
    semi-supervised steps with the EMA teacher initialized at the boundary.

    With ``ssl_enabled`` False (or no unlabeled images) every step is
    supervised, giving the labeled-only baseline under identical seeds.
    """
    codec = codec or LabelCodec()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    student = RegressorModel(schema, codec, backbone=config.backbone)
    optimizer = torch.optim.SGD(student.parameters(), lr=config.lr, momentum=config.momentum)

    use_ssl = config.ssl_enabled and unlabeled_images is not None and unlabeled_images.shape[0] > 0
    warmup_steps = int(round(config.warmup_frac * config.steps)) if use_ssl else config.steps
    warnings: list[str] = []
    if use_ssl and warmup_steps == 0:
        warnings.append("warmup is 0: the teacher starts untrained; pseudo-label quality may suffer")

    labeled_sampler = EpochSampler(labeled_images.shape[0], rng, "labeled pool")
    unlabeled_sampler = (
        EpochSampler(unlabeled_images.shape[0], rng, "unlabeled pool") if use_ssl else None
    )
    losses: list[float] = []
    val_curve: list[dict] = []

    def supervised_batch_step() -> float:
        idx = labeled_sampler.take(min(config.batch_size, max(labeled_images.shape[0], config.labeled_per_batch)))
        images = _augment_batch(labeled_images[idx], rng)
        targets = labeled_targets[idx]
        student.train()
        loss = supervised_loss(student(images), targets)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite supervised loss: {float(loss)}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        return float(loss.detach())

    for _ in range(warmup_steps):
        losses.append(supervised_batch_step())

    teacher = EMAState(student, config.ema_decay)
    alignment = AlignmentState(
        labeled_targets.double().mean(dim=0).numpy(), window=config.alignment_window
    )

    ssl_steps = config.steps - warmup_steps
    for step in range(ssl_steps):
        if use_ssl:
            lab_idx, unlab_idx = build_mixed_batch(labeled_sampler, unlabeled_sampler, config)
            images = torch.cat([labeled_images[lab_idx], unlabeled_images[unlab_idx]], dim=0)
            loss = ssl_step(
                student,
                teacher,
                images,
                labeled_targets[lab_idx],
                len(lab_idx),
                alignment,
                config,
                optimizer,
                rng,
            )
        else:
            loss = supervised_batch_step()
            teacher.update(student)
        losses.append(loss)

    report: dict = {
        "losses": losses,
        "warnings": warnings,
        "warmup_steps": warmup_steps,
        "ssl_steps": ssl_steps if use_ssl else 0,
        "ssl_enabled": bool(use_ssl),
    }
    if val_images is not None and val_targets is not None:
        report["val_rmse_student"] = validation_rmse(student, val_images, val_targets)
        report["val_rmse_teacher"] = validation_rmse(teacher.model, val_images, val_targets)
        val_curve.append({"step": config.steps, "val_rmse": report["val_rmse_student"]})
        report["val_curve"] = val_curve
    return student, report
