"""Adam training with early stopping, subject-level K-fold cross-validation,
and evaluation (per-case Dice, ICC on per-subject foreground volumes)."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, augment_dataset
from .dataset import Subject
from .metrics import ClassWeights, IccReport, compute_class_weights, confusion, dice, icc, weighted_bce_tensor
from .nifti_io import SliceSample
from .preprocess import RoiWindow, crop_roi, fit_roi_window, restore_from_roi, select_ci_slices
from .unet import UNetConfig, UNetModel, build_model, forward, predict_proba, save_checkpoint
from .utils import derived_rng, write_json

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    l2_lambda: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    k_folds: int = 5
    val_fraction: float = 0.15  # share of training subjects held out for early stopping
    roi_margin: int = 4
    threshold: float = 0.5
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must be in (0, 1)")
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        return self


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, config: TrainConfig, decay=None) -> None:
    """One bias-corrected Adam update in place.

    L2 enters as ``g + l2_lambda * theta`` for parameters whose ``decay`` flag is
    set (all of them if ``decay`` is None). Raises before touching anything if
    a gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; step aborted")
    state.step += 1
    b1, b2, lr, eps = config.adam_beta1, config.adam_beta2, config.learning_rate, config.adam_epsilon
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if config.l2_lambda and (decay is None or decay[i]):
            g = g + config.l2_lambda * p.data
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------- early stopping


class EarlyStopping:
    """Tracks the best validation score; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------- inference helpers


def _stack(samples: list[SliceSample], dtype=np.float32):
    x = np.stack([s.image for s in samples])[:, None].astype(dtype)
    y = np.stack([s.label for s in samples])[:, None].astype(dtype)
    return x, y


def _require_clean(samples):
    for s in samples:
        if s.augmented:
            raise ValueError(f"evaluation got an augmented sample ({s.subject_id}:{s.slice_index})")


def predict_subject(model: UNetModel, slices: list[SliceSample], window: RoiWindow, threshold: float = 0.5) -> list[np.ndarray]:
    """Full-frame binary masks for every slice: crop, eval forward, threshold, paste back."""
    _require_clean(slices)
    if not slices:
        return []
    crops = np.stack([crop_roi(s, window).image for s in slices])[:, None]
    probs = predict_proba(model, crops)
    frame = slices[0].image.shape
    return [restore_from_roi((p[0] > threshold).astype(np.uint8), window, frame) for p in probs]


@dataclass
class EvalReport:
    per_subject_dice: dict
    mean_dice: float
    volumes: dict  # subject -> [truth pixels, predicted pixels]
    icc: IccReport | None

    def to_dict(self) -> dict:
        return {
            "per_subject_dice": self.per_subject_dice,
            "mean_dice": self.mean_dice,
            "volumes": self.volumes,
            "icc": None if self.icc is None else self.icc.to_dict(),
        }


def evaluate_masks(pred: dict, truth: dict) -> EvalReport:
    """Per-case Dice from pooled counts, and ICC over (truth, predicted) foreground volumes."""
    if set(pred) != set(truth):
        raise ValueError("prediction and truth cover different subjects")
    per, vols = {}, {}
    for sid in truth:
        counts = None
        for p, t in zip(pred[sid], truth[sid], strict=True):
            c = confusion(p, t)
            counts = c if counts is None else counts + c
        per[sid] = dice(counts)
        vols[sid] = [counts.tp + counts.fn, counts.tp + counts.fp]
    report = icc(np.array(list(vols.values()), dtype=float)) if len(vols) >= 2 else None
    return EvalReport(per, float(np.mean(list(per.values()))), vols, report)


def evaluate(model: UNetModel, subjects: list[Subject], window: RoiWindow, threshold: float = 0.5, overlay_dir=None) -> EvalReport:
    pred, truth = {}, {}
    for subj in subjects:
        if any(s.label is None for s in subj.slices):
            raise ValueError(f"subject {subj.subject_id} lacks labels")
        pred[subj.subject_id] = predict_subject(model, subj.slices, window, threshold)
        truth[subj.subject_id] = [s.label for s in subj.slices]
    report = evaluate_masks(pred, truth)
    if overlay_dir is not None:
        from .overlay import write_subject_overlays

        for subj in subjects:
            write_subject_overlays(subj, pred[subj.subject_id], overlay_dir)
    return report


# ---------------------------------------------------------------- training


def prepare_training(train: list[Subject], aug: AugmentConfig, margin: int, workers: int = 1) -> tuple[RoiWindow, ClassWeights, list[SliceSample]]:
    """ROI window, class weights and augmented ROI samples from training subjects only."""
    ci = [s for subj in train for s in select_ci_slices(subj.slices)]
    if not ci:
        raise ValueError("training subjects contain no foreground slices")
    window = fit_roi_window([s.label for s in ci], margin=margin)
    crops = [crop_roi(s, window) for s in ci]
    weights = compute_class_weights([s.label for s in crops])
    return window, weights, augment_dataset(crops, aug, workers=workers)


def train_fold(
    train_samples: list[SliceSample],
    val_subjects: list[Subject],
    window: RoiWindow,
    weights: ClassWeights,
    unet_cfg: UNetConfig,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[UNetModel, dict]:
    """Mini-batch Adam on weighted BCE; keeps the parameters of the best validation epoch.

    Without validation subjects the training loss (negated) drives early stopping.
    """
    cfg.validate()
    if not train_samples:
        raise ValueError("empty training set")
    for subj in val_subjects:
        _require_clean(subj.slices)
    rng = rng or np.random.default_rng(cfg.seed)
    model = build_model(unet_cfg)
    params = [t for _, t in model.parameters()]
    decay = [name.endswith(".w") for name, _ in model.parameters()]
    state = AdamState.zeros_like(params)
    x_all, y_all = _stack(train_samples)
    stopper = EarlyStopping(cfg.patience)
    best = model.copy()
    history = {"loss": [], "val_dice": [], "seconds": []}
    stop_reason = "max"
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            model.zero_grad()
            loss = weighted_bce_tensor(forward(model, x_all[idx], "train"), y_all[idx], weights)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            ad.backward(loss)
            adam_step(params, [p.grad for p in params], state, cfg, decay)
            losses.append(float(loss.data) * len(idx))
        epoch_loss = sum(losses) / len(order)
        if val_subjects:
            score = evaluate(model, val_subjects, window, cfg.threshold).mean_dice
        else:
            score = -epoch_loss
        history["loss"].append(epoch_loss)
        history["val_dice"].append(score if val_subjects else None)
        history["seconds"].append(time.perf_counter() - t0)
        log.info("epoch %d loss %.5f val %.4f (%.1fs)", epoch, epoch_loss, score, history["seconds"][-1])
        improved = score > stopper.best
        stop = stopper.update(epoch, score)
        if improved:
            best = model.copy()
        if stop:
            stop_reason = "early"
            break
    history.update(epochs_trained=epoch, best_epoch=stopper.best_epoch, best_score=stopper.best, stop_reason=stop_reason)
    return best, history


# ---------------------------------------------------------------- cross-validation


def assign_folds(subject_ids: list[str], k: int, seed: int) -> list[list[str]]:
    """Seeded shuffle, then round-robin so fold sizes differ by at most one."""
    if len(subject_ids) < k:
        raise ValueError(f"{len(subject_ids)} subjects cannot fill {k} folds")
    perm = derived_rng(seed, "folds").permutation(len(subject_ids))
    shuffled = [subject_ids[i] for i in perm]
    return [sorted(shuffled[f::k]) for f in range(k)]


@dataclass
class FoldReport:
    fold_index: int
    test_subjects: list[str]
    per_subject_dice: dict
    mean_dice: float
    epochs_trained: int
    stop_reason: str
    best_epoch: int = 0
    train_subjects: list[str] = field(default_factory=list)
    val_subjects: list[str] = field(default_factory=list)
    window: dict = field(default_factory=dict)
    class_weights: dict = field(default_factory=dict)
    volumes: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CVResult:
    folds: list[FoldReport]
    aggregate_dice: float
    icc: IccReport | None
    assignments: list[list[str]]

    def to_dict(self) -> dict:
        return {
            "aggregate_dice": self.aggregate_dice,
            "folds": [f.to_dict() for f in self.folds],
            "assignments": self.assignments,
            "icc": None if self.icc is None else self.icc.to_dict(),
        }


def run_fold(
    fold: int,
    subjects: list[Subject],
    test_ids: list[str],
    unet_cfg: UNetConfig,
    cfg: TrainConfig,
    aug: AugmentConfig,
    out_dir=None,
) -> tuple[FoldReport, UNetModel]:
    test = [s for s in subjects if s.subject_id in test_ids]
    rest = [s for s in subjects if s.subject_id not in test_ids]
    rng = derived_rng(cfg.seed, "fold", fold)
    n_val = int(round(cfg.val_fraction * len(rest))) if len(rest) > 1 else 0
    n_val = min(max(n_val, 1 if cfg.val_fraction > 0 and len(rest) > 1 else 0), len(rest) - 1)
    val_idx = set(rng.choice(len(rest), size=n_val, replace=False).tolist()) if n_val else set()
    val = [s for i, s in enumerate(rest) if i in val_idx]
    train = [s for i, s in enumerate(rest) if i not in val_idx]

    window, weights, samples = prepare_training(train, aug, cfg.roi_margin)
    fold_unet = UNetConfig(**{**asdict(unet_cfg), "seed": unet_cfg.seed + 1000 * fold})
    model, history = train_fold(samples, val, window, weights, fold_unet, cfg, rng)
    report = evaluate(model, test, window, cfg.threshold)

    train_ids = [s.subject_id for s in train]
    fr = FoldReport(
        fold_index=fold,
        test_subjects=sorted(test_ids),
        per_subject_dice=report.per_subject_dice,
        mean_dice=report.mean_dice,
        epochs_trained=history["epochs_trained"],
        stop_reason=history["stop_reason"],
        best_epoch=history["best_epoch"],
        train_subjects=train_ids,
        val_subjects=[s.subject_id for s in val],
        window=window.to_dict(),
        class_weights=weights.to_dict(),
        volumes=report.volumes,
        history={k: history[k] for k in ("loss", "val_dice")},  # wall-clock stays out for byte-stable reports
        provenance={
            # subjects whose samples fed each fold-level statistic
            "window_subjects": sorted({s.subject_id for s in samples if not s.augmented}),
            "weight_subjects": sorted({s.subject_id for s in samples if not s.augmented}),
            "augmented_subjects": sorted({s.subject_id for s in samples if s.augmented}),
            "train_sample_count": len(samples),
            "train_augmented_count": sum(s.augmented for s in samples),
            "eval_augmented_count": 0,
        },
    )
    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / f"fold{fold}.unet")
        write_json(Path(out_dir) / f"fold{fold}.json", fr.to_dict())
    return fr, model


def _run_fold_star(args):
    fr, _ = run_fold(*args)
    return fr


def kfold_cross_validate(
    subjects: list[Subject],
    unet_cfg: UNetConfig,
    cfg: TrainConfig,
    aug: AugmentConfig,
    out_dir=None,
    workers: int = 1,
) -> CVResult:
    cfg.validate()
    ids = [s.subject_id for s in subjects]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")
    folds = assign_folds(ids, cfg.k_folds, cfg.seed)
    jobs = [(f, subjects, test_ids, unet_cfg, cfg, aug, out_dir) for f, test_ids in enumerate(folds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_fold_star, jobs))
    else:
        reports = [_run_fold_star(j) for j in jobs]
    vols = {sid: v for r in reports for sid, v in r.volumes.items()}
    icc_report = icc(np.array([vols[s] for s in sorted(vols)], dtype=float)) if len(vols) >= 2 else None
    return CVResult(reports, float(np.mean([r.mean_dice for r in reports])), icc_report, folds)
