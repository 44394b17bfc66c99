"""Evaluation metrics: herbage mass RMSE (per species and total), relative
error, height error, composition RMSE, Laplacian-variance sharpness, and
paddock-level aggregation of per-crop predictions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import convolve

from .data_model import BiomassLabel, Manifest, TaskSchema
from .errors import DataError
from .geometry import CropConfig, extract_crop, plan_random_crops
from .imgio import load_image, resize_image

LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
_LUMA = (0.299, 0.587, 0.114)


def per_species_mass(label: BiomassLabel) -> dict[str, float]:
    """Split total herbage mass by composition fraction; 'total' is the mass itself."""
    if label.herbage_mass is None:
        raise DataError("label has no herbage_mass")
    if label.composition is None:
        raise DataError("label has no composition")
    out = {cls: label.herbage_mass * frac for cls, frac in label.composition.items()}
    out["total"] = label.herbage_mass
    return out


def _rmse(diffs: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(diffs))))


def hrmse(preds: list[BiomassLabel], gts: list[BiomassLabel]) -> dict[str, float]:
    """RMSE of per-species and total herbage mass; 'avg' is the mean over the
    species components only, so it is not skewed by the larger total column."""
    if len(preds) != len(gts) or not preds:
        raise DataError("prediction and ground-truth lists must have equal nonzero length")
    pred_masses = [per_species_mass(p) for p in preds]
    gt_masses = [per_species_mass(g) for g in gts]
    components = list(gt_masses[0].keys())
    out = {
        comp: _rmse(np.array([p[comp] - g[comp] for p, g in zip(pred_masses, gt_masses)]))
        for comp in components
    }
    species = [c for c in components if c != "total"]
    out["avg"] = float(np.mean([out[c] for c in species]))
    return out


def hre(pred_mass: float, gt_mass: float) -> float:
    """Ratio of predicted to ground-truth total herbage mass; 1.0 is perfect."""
    if gt_mass <= 0:
        raise DataError(f"ground-truth mass must be positive, got {gt_mass}")
    return pred_mass / gt_mass


def hre_batch(preds: list[BiomassLabel], gts: list[BiomassLabel]) -> float:
    """Mean of per-sample ratios."""
    ratios = [hre(p.herbage_mass, g.herbage_mass) for p, g in zip(preds, gts)]
    if not ratios:
        raise DataError("empty batch")
    return float(np.mean(ratios))


def height_error(preds: list[BiomassLabel], gts: list[BiomassLabel]) -> float:
    diffs = np.array([p.height - g.height for p, g in zip(preds, gts)])
    if diffs.size == 0:
        raise DataError("empty batch")
    return _rmse(diffs)


def composition_rmse(preds: list[BiomassLabel], gts: list[BiomassLabel]) -> dict[str, float]:
    """Per-class RMSE of composition percentages (0-100 points) plus their mean."""
    if len(preds) != len(gts) or not preds:
        raise DataError("prediction and ground-truth lists must have equal nonzero length")
    classes = list(gts[0].composition.keys())
    out = {
        cls: _rmse(
            100.0 * np.array([p.composition[cls] - g.composition[cls] for p, g in zip(preds, gts)])
        )
        for cls in classes
    }
    out["avg"] = float(np.mean([out[c] for c in classes]))
    return out


def sharpness(image: np.ndarray) -> float:
    """Population variance of the 3x3 Laplacian of the ITU-R 601 luma."""
    img = np.asarray(image)
    if img.size == 0:
        raise DataError("empty image")
    if img.ndim == 3:
        gray = (
            _LUMA[0] * img[..., 0].astype(np.float64)
            + _LUMA[1] * img[..., 1].astype(np.float64)
            + _LUMA[2] * img[..., 2].astype(np.float64)
        )
    else:
        gray = img.astype(np.float64)
    lap = convolve(gray, LAPLACIAN_KERNEL, mode="reflect")
    return float(lap.var())


def aggregate_crop_predictions(
    per_crop: list[float], mode: str = "mean", n_bins: int = 10
) -> dict:
    """Paddock-level mass from per-crop predictions, with spread summaries."""
    if not per_crop:
        raise DataError("no crop predictions to aggregate")
    if mode != "mean":
        raise DataError(f"unknown aggregation mode {mode!r}")
    values = np.asarray(per_crop, dtype=np.float64)
    counts, edges = np.histogram(values, bins=n_bins)
    return {
        "mode": mode,
        "mass": float(values.mean()),
        "std": float(values.std()),
        "n_crops": int(values.size),
        "histogram": {"counts": counts.tolist(), "bin_edges": edges.tolist()},
    }


@dataclass
class MetricReport:
    n_samples: int
    hrmse: Optional[dict[str, float]] = None
    hre: Optional[float] = None
    composition_rmse: Optional[dict[str, float]] = None
    height_error: Optional[float] = None
    drone_aggregation: dict[str, dict] = field(default_factory=dict)
    per_record: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "hrmse": self.hrmse,
            "hre": self.hre,
            "composition_rmse": self.composition_rmse,
            "height_error": self.height_error,
            "drone_aggregation": self.drone_aggregation,
            "per_record": self.per_record,
        }


Predictor = Callable[[list[np.ndarray]], list[BiomassLabel]]


def evaluate(
    predictor: Predictor,
    manifest: Manifest,
    schema: TaskSchema,
    crop_config: Optional[CropConfig] = None,
    resolution: Optional[int] = None,
    translate: Optional[Callable[[list[np.ndarray]], list[np.ndarray]]] = None,
) -> MetricReport:
    """Run a predictor over all labeled records and assemble a MetricReport.

    Ground records are predicted directly. Drone records are predicted per
    random crop (optionally translated first) and aggregated by the mean;
    drone labels are mass-only so they contribute to the mass metrics via
    the total component.
    """
    labeled = manifest.labeled()
    if not labeled:
        raise DataError("manifest has no labeled records")
    crop_config = crop_config or CropConfig()

    mass_preds: list[float] = []
    mass_gts: list[float] = []
    full_preds: list[BiomassLabel] = []
    full_gts: list[BiomassLabel] = []
    aggregation: dict[str, dict] = {}
    per_record: list[dict] = []

    for rec in labeled:
        img = load_image(manifest.image_path(rec))
        if rec.domain == "ground":
            view = resize_image(img, resolution) if resolution else img
            pred = predictor([view])[0]
            if rec.label.composition is not None:
                full_preds.append(pred)
                full_gts.append(rec.label)
            if rec.label.herbage_mass is not None and pred.herbage_mass is not None:
                mass_preds.append(pred.herbage_mass)
                mass_gts.append(rec.label.herbage_mass)
                per_record.append(
                    {
                        "id": rec.id,
                        "domain": rec.domain,
                        "gt_mass": rec.label.herbage_mass,
                        "pred_mass": pred.herbage_mass,
                    }
                )
        else:
            windows = plan_random_crops(
                (img.shape[1], img.shape[0]), rec.altitude_m, crop_config
            )
            crops = [extract_crop(img, w) for w in windows]
            if resolution:
                crops = [resize_image(c, resolution) for c in crops]
            if translate is not None:
                crops = translate(crops)
            crop_preds = predictor(crops)
            masses = [p.herbage_mass for p in crop_preds if p.herbage_mass is not None]
            if not masses:
                continue
            agg = aggregate_crop_predictions(masses)
            aggregation[rec.id] = agg
            if rec.label.herbage_mass is not None:
                mass_preds.append(agg["mass"])
                mass_gts.append(rec.label.herbage_mass)
                per_record.append(
                    {
                        "id": rec.id,
                        "domain": rec.domain,
                        "gt_mass": rec.label.herbage_mass,
                        "pred_mass": agg["mass"],
                    }
                )

    report = MetricReport(
        n_samples=len(labeled), drone_aggregation=aggregation, per_record=per_record
    )
    if full_preds:
        report.composition_rmse = composition_rmse(full_preds, full_gts)
        with_mass = [
            (p, g) for p, g in zip(full_preds, full_gts) if g.herbage_mass is not None
        ]
        if with_mass:
            report.hrmse = hrmse([p for p, _ in with_mass], [g for _, g in with_mass])
        with_height = [(p, g) for p, g in zip(full_preds, full_gts) if g.height is not None]
        if with_height:
            report.height_error = height_error(
                [p for p, _ in with_height], [g for _, g in with_height]
            )
    if mass_preds:
        report.hre = float(np.mean([hre(p, g) for p, g in zip(mass_preds, mass_gts)]))
        if report.hrmse is None:
            report.hrmse = {"total": _rmse(np.array(mass_preds) - np.array(mass_gts))}
    return report
