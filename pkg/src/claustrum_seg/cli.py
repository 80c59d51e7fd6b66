"""Command-line entry point: ``claustrum-seg {phantom|stats|train|predict|evaluate|gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, schemas
from .augment import AugmentConfig
from .nifti_io import NiftiError, Volume, read_nifti, write_nifti
from .preprocess import FRAME, ROI_SHAPE, RoiWindow, crop_roi, fit_roi_window, imbalance_report, prepare_subject, resize_mask, restore_from_roi
from .train import TrainConfig, evaluate_masks, kfold_cross_validate
from .unet import CheckpointError, UNetConfig, load_checkpoint, predict_proba
from .utils import sha256_file, write_json

log = logging.getLogger("claustrum_seg")

WORKERS_ENV = "CLAUSTRUM_SEG_WORKERS"
FAULT_ENV = "CLAUSTRUM_SEG_INJECT_FAULT"  # test-only negative control for gradcheck
MANIFEST_NAME = "run_manifest.json"
NORMALIZATION = "per-volume min-max to [0, 1] after bilinear resize to 256x256"


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


def _default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise UsageError(f"{WORKERS_ENV} must be >= 1")
    return n


def _emit_json(obj, schema, what, path=None) -> None:
    schemas.validate(obj, schema, what)
    if path is not None:
        write_json(path, obj)


# ------------------------------------------------------------------ phantom


def cmd_phantom(args) -> int:
    from .phantom import PhantomConfig, generate_dataset

    overrides = {"n_subjects": args.subjects, "seed": args.seed}
    if args.slices is not None:
        overrides["slices_per_subject"] = args.slices
    if args.ribbon_slices is not None:
        overrides["ribbon_slices"] = args.ribbon_slices
    try:
        config = PhantomConfig(**overrides).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = generate_dataset(config, args.out, workers=args.workers)
    schemas.validate(manifest, schemas.PHANTOM_MANIFEST, "phantom manifest")
    print(
        f"wrote {len(manifest['subjects'])} subjects to {args.out} "
        f"(foreground {100 * manifest['foreground_fraction']:.3f}% of pixels)"
    )
    return 0


# ------------------------------------------------------------------ stats


def _parse_window(text: str) -> RoiWindow:
    try:
        row0, col0 = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--window expects ROW0,COL0, got {text!r}") from None
    try:
        return RoiWindow(row0, col0, *ROI_SHAPE).validate(FRAME)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def centered_window() -> RoiWindow:
    return RoiWindow((FRAME[0] - ROI_SHAPE[0]) // 2, (FRAME[1] - ROI_SHAPE[1]) // 2, *ROI_SHAPE)


def cmd_stats(args) -> int:
    from .dataset import load_dataset

    subjects = load_dataset(args.dataset)
    samples = [s for subj in subjects for s in subj.slices]
    if args.window:
        window = _parse_window(args.window)
    elif any(np.any(s.label) for s in samples):
        window = fit_roi_window([s.label for s in samples], margin=args.margin)
    else:
        window = centered_window()
    stats = imbalance_report(samples, window)
    report = {"window": window.to_dict(), **stats.to_dict()}
    _emit_json(report, schemas.STATS_REPORT, "stats report", args.json)
    print(stats.table())
    print(json.dumps(report, sort_keys=True))
    return 0


# ------------------------------------------------------------------ train


def load_run_config(path) -> tuple[UNetConfig, TrainConfig, AugmentConfig]:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: invalid JSON ({exc})") from None
    try:
        schemas.validate(raw, schemas.RUN_CONFIG, "config")
        return (
            UNetConfig(**raw.get("unet", {})).validate(),
            TrainConfig(**raw.get("train", {})).validate(),
            AugmentConfig.from_dict(raw.get("augment", {})).validate(),
        )
    except (schemas.SchemaError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _apply_overrides(args, unet_cfg: UNetConfig, cfg: TrainConfig, aug: AugmentConfig) -> None:
    if args.folds is not None:
        cfg.k_folds = args.folds
    if args.max_epochs is not None:
        cfg.max_epochs = args.max_epochs
    if args.patience is not None:
        cfg.patience = args.patience
    if args.base_channels is not None:
        unet_cfg.base_channels = args.base_channels
    if args.copies is not None:
        aug.copies_per_sample = args.copies
    if args.seed is not None:
        cfg.seed = unet_cfg.seed = aug.seed = args.seed
    try:
        unet_cfg.validate(), cfg.validate(), aug.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _dataset_fingerprints(subjects) -> dict:
    out = {}
    for subj in subjects:
        for p in (subj.image_path, subj.label_path):
            if p is not None:
                out[Path(p).name] = sha256_file(p)
    return out


def cmd_train(args) -> int:
    from .dataset import load_dataset

    unet_cfg, cfg, aug = load_run_config(args.config)
    _apply_overrides(args, unet_cfg, cfg, aug)
    subjects = load_dataset(args.dataset)
    if len(subjects) < cfg.k_folds:
        raise UsageError(f"{len(subjects)} subjects cannot fill {cfg.k_folds} folds")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = kfold_cross_validate(subjects, unet_cfg, cfg, aug, out_dir=out, workers=args.workers)

    cv = result.to_dict()
    _emit_json(cv, schemas.CV_REPORT, "cross-validation report", out / "cv_report.json")
    phantom_meta = Path(args.dataset) / "manifest.json"
    phantom_config = None
    if phantom_meta.exists():
        meta = json.loads(phantom_meta.read_text())
        if meta.get("kind") == "phantom_dataset":
            phantom_config = meta.get("config")
    manifest = {
        "tool_version": __version__,
        "seed": cfg.seed,
        "config": {"unet": asdict(unet_cfg), "train": asdict(cfg), "augment": aug.to_dict()},
        "phantom_config": phantom_config,
        "fold_assignments": result.assignments,
        "checkpoints": {
            f"fold{f.fold_index}.unet": {
                "fold": f.fold_index,
                "window": f.window,
                "class_weights": f.class_weights,
                "test_subjects": f.test_subjects,
            }
            for f in result.folds
        },
        "normalization": NORMALIZATION,
        "inputs": _dataset_fingerprints(subjects),
    }
    _emit_json(manifest, schemas.RUN_MANIFEST, "run manifest", out / MANIFEST_NAME)
    for f in result.folds:
        print(f"fold {f.fold_index}: dice per case {f.mean_dice:.4f} ({f.epochs_trained} epochs, {f.stop_reason} stop)")
    print(f"dice per case: {result.aggregate_dice:.4f}")
    return 0


# ------------------------------------------------------------------ predict


def _manifest_entry(checkpoint: Path, manifest_path) -> dict:
    path = Path(manifest_path) if manifest_path else checkpoint.parent / MANIFEST_NAME
    if not path.exists():
        raise UsageError(f"run manifest {path} not found; the ROI window is stored there (use --manifest)")
    manifest = json.loads(path.read_text())
    try:
        schemas.validate(manifest, schemas.RUN_MANIFEST, "run manifest")
    except schemas.SchemaError as exc:
        raise UsageError(str(exc)) from None
    entry = manifest["checkpoints"].get(checkpoint.name)
    if entry is None:
        raise UsageError(f"{checkpoint.name} is not listed in {path}")
    return {**entry, "threshold": manifest["config"]["train"].get("threshold", 0.5)}


def predict_volume(model, image: Volume, window: RoiWindow, threshold: float = 0.5) -> Volume:
    """Mask volume in the input's grid: prepare, crop, forward, threshold, restore, resize back."""
    if image.data.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {image.data.shape}")
    slices = prepare_subject(image, None, "input")
    crops = np.stack([crop_roi(s, window).image for s in slices])[:, None]
    probs = predict_proba(model, crops)
    in_plane = image.data.shape[:2]
    masks = [resize_mask(restore_from_roi((p[0] > threshold).astype(np.uint8), window, FRAME), in_plane) for p in probs]
    return Volume(np.stack(masks, axis=2).astype(np.uint8), image.spacing, np.array(image.affine, copy=True))


def cmd_predict(args) -> int:
    checkpoint = Path(args.checkpoint)
    entry = _manifest_entry(checkpoint, args.manifest)
    try:
        model = load_checkpoint(checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint {checkpoint} not found") from None
    window = RoiWindow.from_dict(entry["window"])
    threshold = entry["threshold"] if args.threshold is None else args.threshold
    image = read_nifti(args.input)
    mask = predict_volume(model, image, window, threshold)
    write_nifti(mask, args.out, dtype=np.uint8)
    print(f"wrote {args.out}: {int(mask.data.sum())} foreground voxels")
    return 0


# ------------------------------------------------------------------ evaluate


def _find(root: Path, sid: str, kind: str) -> Path | None:
    for ext in (".nii.gz", ".nii"):
        p = root / f"{sid}_{kind}{ext}"
        if p.exists():
            return p
    return None


def _subject_ids(root: Path, kind: str) -> list[str]:
    ids = set()
    for p in root.glob(f"*_{kind}.nii*"):
        ids.add(p.name.split(f"_{kind}.nii")[0])
    return sorted(ids)


def _parse_indices(text: str | None) -> set[int] | None:
    if not text:
        return None
    try:
        return {int(v) for v in text.split(",")}
    except ValueError:
        raise UsageError(f"--slices expects comma-separated integers, got {text!r}") from None


def cmd_evaluate(args) -> int:
    from .overlay import write_overlay

    pred_root, label_root = Path(args.predictions), Path(args.labels)
    for root in (pred_root, label_root):
        if not root.is_dir():
            raise UsageError(f"{root} is not a directory")
    ids = _subject_ids(pred_root, "pred")
    if not ids:
        raise UsageError(f"no *_pred.nii[.gz] files in {pred_root}")
    wanted = _parse_indices(args.slices)
    pred, truth, overlays = {}, {}, []
    for sid in ids:
        lbl_path = _find(label_root, sid, "lbl")
        if lbl_path is None:
            raise FileNotFoundError(f"no label volume for {sid} in {label_root}")
        p = read_nifti(_find(pred_root, sid, "pred")).data
        t = read_nifti(lbl_path).data
        if p.shape != t.shape:
            raise ValueError(f"{sid}: prediction shape {p.shape} != label shape {t.shape}")
        pred[sid] = [(p[:, :, k] > 0).astype(np.uint8) for k in range(p.shape[2])]
        truth[sid] = [(t[:, :, k] > 0).astype(np.uint8) for k in range(t.shape[2])]
        if args.overlays:
            img_path = _find(label_root, sid, "img")
            img = read_nifti(img_path).data if img_path is not None else np.zeros(p.shape)
            for k in range(p.shape[2]):
                if wanted is not None and k not in wanted:
                    continue
                if wanted is None and not (truth[sid][k].any() or pred[sid][k].any()):
                    continue
                overlays.append(
                    write_overlay(Path(args.overlays) / f"{sid}_slice{k:03d}.png", img[:, :, k], truth[sid][k], pred[sid][k])
                )
    report = evaluate_masks(pred, truth).to_dict()
    _emit_json(report, schemas.EVAL_REPORT, "evaluation report", args.out)
    for sid, d in report["per_subject_dice"].items():
        print(f"{sid}\tdice {d:.4f}")
    print(f"dice per case: {report['mean_dice']:.4f}")
    if report["icc"] is not None:
        print("\t".join(f"{k} {report['icc'][k]}" for k in ("ICC1", "ICC2", "ICC3", "ICC1k", "ICC2k", "ICC3k")))
    if overlays:
        print(f"wrote {len(overlays)} overlays to {args.overlays}")
    return 0


# ------------------------------------------------------------------ gradcheck


def cmd_gradcheck(args) -> int:
    from . import autodiff
    from .gradcheck import CHECKS, run_checks

    names = args.op or None
    if names:
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            raise UsageError(f"unknown --op {unknown}; choose from {', '.join(CHECKS)}")
    faults = [f for f in os.environ.get(FAULT_ENV, "").split(",") if f]
    with autodiff.inject_fault(*faults):
        reports = run_checks(names, seed=args.seed)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="claustrum-seg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--workers", type=int, default=None, help=f"parallel workers (default ${WORKERS_ENV} or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic labelled dataset")
    p.add_argument("--subjects", type=int, default=30)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slices", type=int, default=None, help="axial slices per subject")
    p.add_argument("--ribbon-slices", type=int, default=None, help="slices containing foreground")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("stats", help="foreground/background counts before and after the ROI crop")
    p.add_argument("dataset")
    p.add_argument("--window", help="ROW0,COL0 of a fixed 64x112 window (default: fitted)")
    p.add_argument("--margin", type=int, default=4)
    p.add_argument("--json", help="also write the JSON report here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="K-fold cross-validated training")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with optional unet/train/augment sections")
    p.add_argument("--folds", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--copies", type=int, help="augmented copies per training slice")
    p.add_argument("--seed", type=int, help="seed for folds, weights and augmentation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one NIfTI volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help=f"run manifest (default: {MANIFEST_NAME} next to the checkpoint)")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Dice and ICC of predicted against reference masks")
    p.add_argument("predictions", help="directory of <id>_pred.nii[.gz]")
    p.add_argument("labels", help="directory of <id>_lbl.nii[.gz] (and optional <id>_img for overlays)")
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--overlays", help="directory for PNG overlays")
    p.add_argument("--slices", help="comma-separated slice indices to render")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference verification of the autodiff primitives")
    p.add_argument("--op", action="append", help="check only this primitive (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    try:
        if args.workers is None:
            args.workers = _default_workers()
        elif args.workers < 1:
            raise UsageError("--workers must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"claustrum-seg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, NiftiError, CheckpointError, FloatingPointError, KeyError) as exc:
        print(f"claustrum-seg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
