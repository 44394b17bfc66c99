"""Command-line entry point wiring all pipeline stages.

Subcommands: synth-data, annotate-altitude, crop, translate-train,
translate-apply, ssl-train, evaluate, sharpness, report.

Every subcommand accepts ``--config FILE`` pointing at a JSON object mapping
subcommand name -> {flag: value}; explicit flags win over config values.
Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 runtime/training error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data_model import load_manifest, schema_by_name
from .elevation import ElevationSource, annotate_altitude, load_fixture_table
from .errors import DataError, PipelineError, TrainingError
from .geometry import CropConfig
from .imgio import load_image
from .metrics import evaluate, sharpness
from .pipeline import (
    emit_crops,
    load_images_from_dir,
    load_labeled_tensors,
    load_regressor_checkpoint,
    make_predictor,
    save_regressor_checkpoint,
    translate_directory,
)
from .regressor import LabelCodec
from .ssl_train import SSLConfig, train_ssl
from .synthetic import SyntheticConfig, generate_synthetic_dataset
from .translation import (
    CUTConfig,
    build_cut_model,
    load_cut_checkpoint,
    train_cut,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(message)


def _write_json(obj: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _provenance(args: argparse.Namespace) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _cmd_synth_data(args) -> int:
    cfg = SyntheticConfig(
        out_dir=args.out,
        schema=args.schema,
        ground_size=args.ground_size,
        drone_size=args.drone_size,
        drone_blur_sigma=args.blur_sigma,
    )
    manifest = generate_synthetic_dataset(args.seed, args.n_ground, args.n_drone, cfg)
    print(f"wrote {len(manifest.records)} records to {args.out}/manifest.json")
    return 0


def _cmd_annotate_altitude(args) -> int:
    if args.source == "fixture":
        if not args.fixture_file:
            raise UsageError("--fixture-file is required with --source fixture")
        source = ElevationSource(
            mode="fixture",
            fixture=load_fixture_table(args.fixture_file),
            cache_file=args.cache_file,
        )
    else:
        source = ElevationSource(
            mode="http",
            endpoint=args.endpoint,
            dataset=args.dataset,
            cache_file=args.cache_file,
        )
    n = annotate_altitude(args.manifest_in, args.manifest_out, source)
    print(f"annotated {n} drone records -> {args.manifest_out}")
    return 0


def _cmd_crop(args) -> int:
    manifest = load_manifest(args.manifest)
    crop_config = CropConfig(
        base_edge_px=args.base_edge,
        reference_altitude_m=args.reference_altitude,
        target_edge_px=args.upscale_to or 2048,
        n_random_crops=args.n_crops,
        rng_seed=args.seed,
    )
    crops = emit_crops(manifest, args.out, crop_config, mode=args.mode, upscale_to=args.upscale_to)
    print(f"wrote {len(crops)} crops to {args.out}")
    return 0


def _cmd_translate_train(args) -> int:
    manifest = load_manifest(args.ground_manifest)
    from .imgio import resize_image

    ground = [
        resize_image(load_image(manifest.image_path(r)), args.resolution)
        for r in manifest.by_domain("ground")
    ]
    drone_dir = Path(args.drone_crops)
    drone = [
        resize_image(load_image(p), args.resolution) for p in sorted(drone_dir.glob("*.png"))
    ]
    if not drone:
        raise DataError(f"no PNG crops in {drone_dir}")
    cut_config = CUTConfig(
        n_patches=args.n_patches,
        generator_blocks=args.blocks,
        train_resolution=args.resolution,
        lr=args.lr,
    )
    model = build_cut_model(cut_config, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    history = train_cut(
        model,
        ground,
        drone,
        args.steps,
        rng,
        checkpoint_path=args.out,
        history_path=args.history,
    )
    print(f"trained {args.steps} steps; final loss_g={history[-1]['loss_g']:.4f}; checkpoint -> {args.out}")
    return 0


def _cmd_translate_apply(args) -> int:
    model = load_cut_checkpoint(args.checkpoint)
    n = translate_directory(model, args.in_dir, args.out_dir)
    print(f"translated {n} images -> {args.out_dir}")
    return 0


def _cmd_ssl_train(args) -> int:
    manifest = load_manifest(args.labeled_manifest)
    codec = LabelCodec()
    images, targets, ids = load_labeled_tensors(manifest, codec, args.resolution)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(ids))
    n_val = max(1, int(round(args.val_fraction * len(ids))))
    if len(ids) - n_val < 1:
        raise DataError("not enough labeled records to split train/validation")
    val_idx, train_idx = order[:n_val], order[n_val:]

    unlabeled = None
    if args.unlabeled_dir and not args.labeled_only:
        unlabeled = load_images_from_dir(args.unlabeled_dir, args.resolution)

    config = SSLConfig(
        batch_size=args.batch_size,
        labeled_per_batch=args.labeled_per_batch,
        lr=args.lr,
        ema_decay=args.ema_decay,
        alignment_window=args.alignment_window,
        train_resolution=args.resolution,
        steps=args.steps,
        warmup_frac=args.warmup_frac,
        seed=args.seed,
        ssl_enabled=not args.labeled_only,
        backbone=args.backbone,
    )
    model, report = train_ssl(
        config,
        manifest.schema,
        images[train_idx],
        targets[train_idx],
        unlabeled,
        val_images=images[val_idx],
        val_targets=targets[val_idx],
        codec=codec,
    )
    save_regressor_checkpoint(model, args.out_checkpoint, config=_provenance(args))

    # Physical-unit validation metrics on the held-out labeled records.
    val_ids = {ids[i] for i in val_idx.tolist()}
    val_manifest = type(manifest)(
        schema=manifest.schema,
        records=[r for r in manifest.records if r.id in val_ids],
        root=manifest.root,
    )
    metric_report = evaluate(
        make_predictor(model, args.resolution), val_manifest, manifest.schema,
        resolution=args.resolution,
    )
    out = {
        "config": _provenance(args),
        "training": report,
        "validation": metric_report.to_json(),
        "train_ids": sorted(ids[i] for i in train_idx.tolist()),
        "val_ids": sorted(val_ids),
    }
    _write_json(out, args.out_report)
    print(
        f"trained {args.steps} steps; val RMSE (encoded) = "
        f"{report.get('val_rmse_student', float('nan')):.4f}; report -> {args.out_report}"
    )
    return 0


def _cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    model = load_regressor_checkpoint(args.checkpoint)
    translate = None
    if args.translate_checkpoint:
        cut_model = load_cut_checkpoint(args.translate_checkpoint)
        from .translation import apply_translation

        def translate(crops):
            return apply_translation(cut_model, crops)

    crop_config = CropConfig(
        base_edge_px=args.base_edge,
        n_random_crops=args.n_crops,
        rng_seed=args.seed,
    )
    report = evaluate(
        make_predictor(model, args.resolution),
        manifest,
        manifest.schema,
        crop_config=crop_config,
        resolution=args.resolution,
        translate=translate,
    )
    out = {"config": _provenance(args), "metrics": report.to_json()}
    _write_json(out, args.out)
    print(f"evaluated {report.n_samples} records; report -> {args.out}")
    return 0


def _cmd_sharpness(args) -> int:
    in_dir = Path(args.in_dir)
    paths = sorted(in_dir.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG images in {in_dir}")
    rows = {p.name: sharpness(load_image(p)) for p in paths}
    for name, value in rows.items():
        print(f"{name}\t{value:.4f}")
    print(f"mean\t{float(np.mean(list(rows.values()))):.4f}")
    if args.out:
        _write_json({"config": _provenance(args), "sharpness": rows}, args.out)
    return 0


def _cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.report) as fh:
        blob = json.load(fh)
    metrics = blob.get("metrics") or blob.get("validation") or {}
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []

    records = metrics.get("per_record") or []
    if records:
        records = sorted(records, key=lambda r: r["gt_mass"])
        gt = np.array([r["gt_mass"] for r in records])
        ratio = np.array([r["pred_mass"] / r["gt_mass"] for r in records])
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(gt, ratio, "o-", label="HRE")
        if len(ratio) >= 2:
            half_band = 1.96 * ratio.std(ddof=1) / np.sqrt(len(ratio))
            ax.fill_between(gt, ratio - half_band, ratio + half_band, alpha=0.3,
                            label="95% confidence")
        ax.axhline(1.0, color="gray", linestyle="--")
        ax.set_xlabel("ground-truth herbage mass (kg DM/ha)")
        ax.set_ylabel("predicted / ground truth")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "hre_line.png"
        fig.savefig(path)
        plt.close(fig)
        made.append(path)

    for rec_id, agg in (metrics.get("drone_aggregation") or {}).items():
        hist = agg["histogram"]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        edges = np.array(hist["bin_edges"])
        ax.bar(edges[:-1], hist["counts"], width=np.diff(edges), align="edge")
        ax.set_xlabel("predicted mass (kg DM/ha)")
        ax.set_ylabel("crops")
        ax.set_title(f"{rec_id}: mean {agg['mass']:.1f} kg DM/ha over {agg['n_crops']} crops")
        fig.tight_layout()
        path = out_dir / f"crops_hist_{rec_id}.png"
        fig.savefig(path)
        plt.close(fig)
        made.append(path)

    if not made:
        print("report contains no plottable data")
    else:
        for p in made:
            print(f"wrote {p}")
    return 0


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="herbage", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers: dict[str, _Parser] = {}

    def add(name: str, func, help_text: str) -> _Parser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file; flags override it")
        p.set_defaults(func=func)
        subparsers[name] = p
        return p

    p = add("synth-data", _cmd_synth_data, "generate the synthetic two-domain dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-ground", type=int, default=10)
    p.add_argument("--n-drone", type=int, default=4)
    p.add_argument("--schema", default="irish", choices=["irish", "grassclover"])
    p.add_argument("--ground-size", type=int, default=512)
    p.add_argument("--drone-size", type=int, default=2048)
    p.add_argument("--blur-sigma", type=float, default=4.0)

    p = add("annotate-altitude", _cmd_annotate_altitude, "derive drone altitude from GPS + terrain elevation")
    p.add_argument("--manifest-in", required=True)
    p.add_argument("--manifest-out", required=True)
    p.add_argument("--source", default="fixture", choices=["http", "fixture"])
    p.add_argument("--fixture-file", default=None, help="JSON list of [lat, lon, elevation] rows")
    p.add_argument("--cache-file", default=None)
    p.add_argument("--endpoint", default="https://api.opentopodata.org/v1")
    p.add_argument("--dataset", default="aster30m")

    p = add("crop", _cmd_crop, "plan and emit altitude-adjusted drone crops")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="random", choices=["random", "checkerboard"])
    p.add_argument("--n-crops", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-edge", type=int, default=256)
    p.add_argument("--reference-altitude", type=float, default=6.0)
    p.add_argument("--upscale-to", type=int, default=0, help="bicubic upscale edge; 0 = keep native")

    p = add("translate-train", _cmd_translate_train, "train the unpaired translation network")
    p.add_argument("--ground-manifest", required=True)
    p.add_argument("--drone-crops", required=True, help="directory of drone crop PNGs")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", default=None, help="loss history JSON path")
    p.add_argument("--n-patches", type=int, default=64)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--lr", type=float, default=2e-4)

    p = add("translate-apply", _cmd_translate_apply, "apply a trained translation checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)

    p = add("ssl-train", _cmd_ssl_train, "semi-supervised regression training")
    p.add_argument("--labeled-manifest", required=True)
    p.add_argument("--unlabeled-dir", default=None)
    p.add_argument("--labeled-only", action="store_true", help="baseline: no SSL phase")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--warmup-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--labeled-per-batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--ema-decay", type=float, default=0.99)
    p.add_argument("--alignment-window", type=int, default=50)
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.add_argument("--backbone", default="small_cnn", choices=["small_cnn", "tiny_cnn", "resnet18"])
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out-report", required=True)

    p = add("evaluate", _cmd_evaluate, "evaluate a regressor checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--translate-checkpoint", default=None, help="translate drone crops first")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--n-crops", type=int, default=50)
    p.add_argument("--base-edge", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)

    p = add("sharpness", _cmd_sharpness, "Laplacian-variance sharpness of a directory of images")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out", default=None, help="optional JSON output")

    p = add("report", _cmd_report, "plots from an evaluation report")
    p.add_argument("--report", required=True, dest="report")
    p.add_argument("--out-dir", required=True)

    return parser, subparsers


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            with open(args.config) as fh:
                file_config = json.load(fh)
            section = file_config.get(args.command, {})
            sp = subparsers[args.command]
            sp.set_defaults(**{k.replace("-", "_"): v for k, v in section.items()})
            args = parser.parse_args(argv)  # explicit flags still win
        torch.manual_seed(getattr(args, "seed", 0))
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, PipelineError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
