"""Class-weighted BCE, Dice, confusion counts and Shrout-Fleiss ICCs."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, _make

EPS = 1e-7


@dataclass(frozen=True)
class ClassWeights:
    """``w`` weights the background log-term, ``one_minus_w`` the foreground term."""

    w: float
    one_minus_w: float
    ci_pixels: int = 0
    total_pixels: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class IccReport:
    icc1: float
    icc2: float
    icc3: float
    icc1k: float
    icc2k: float
    icc3k: float
    n_subjects: int
    n_judges: int
    note: str = ""
    mean_squares: dict = field(default_factory=dict)

    ROWS = (
        ("Single raters absolute", "ICC1", "icc1"),
        ("Single random raters", "ICC2", "icc2"),
        ("Single fixed raters", "ICC3", "icc3"),
        ("Average raters absolute", "ICC1k", "icc1k"),
        ("Average random raters", "ICC2k", "icc2k"),
        ("Average fixed raters", "ICC3k", "icc3k"),
    )

    def to_dict(self) -> dict:
        out = {label: _json_float(getattr(self, attr)) for _, label, attr in self.ROWS}
        out["types"] = {label: desc for desc, label, _ in self.ROWS}
        out["n_subjects"] = self.n_subjects
        out["n_judges"] = self.n_judges
        if self.note:
            out["note"] = self.note
        return out


def _json_float(x: float):
    return None if not np.isfinite(x) else float(x)


def compute_class_weights(labels) -> ClassWeights:
    """Foreground fraction f over all given label grids; w = f.

    A small foreground fraction therefore puts a weight close to 1 on the
    foreground log-term.
    """
    labels = list(labels)
    if not labels:
        raise ValueError("compute_class_weights needs at least one label slice")
    ci = int(sum(int(np.count_nonzero(np.asarray(l) > 0)) for l in labels))
    total = int(sum(np.asarray(l).size for l in labels))
    f = ci / total
    if ci == total:
        warnings.warn("every pixel is foreground; background term weight w = 1", RuntimeWarning)
    elif ci == 0:
        warnings.warn("no foreground pixels; foreground term weight is 1", RuntimeWarning)
    return ClassWeights(w=f, one_minus_w=1.0 - f, ci_pixels=ci, total_pixels=total)


def _check_binary(a: np.ndarray, what: str):
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{what} must be binary (0/1)")


def weighted_bce(pred, target, weights: ClassWeights) -> tuple[float, np.ndarray]:
    """Mean of -(1-w) c log p - w (1-c) log(1-p) and its gradient w.r.t. ``pred``.

    ``pred`` is clamped to [EPS, 1-EPS]; the gradient is evaluated at the
    clamped value (it is not zeroed outside the clamp).
    """
    p = np.asarray(pred)
    c = np.asarray(target)
    if p.shape != c.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {c.shape}")
    _check_binary(c, "target")
    c = c.astype(p.dtype if p.dtype.kind == "f" else np.float64)
    p = np.clip(p, EPS, 1 - EPS)
    w, wf = weights.w, weights.one_minus_w
    n = p.size
    loss = -(wf * c * np.log(p) + w * (1 - c) * np.log1p(-p))
    grad = (-wf * c / p + w * (1 - c) / (1 - p)) / n
    return float(loss.mean()), grad.astype(p.dtype, copy=False)


def weighted_bce_tensor(pred: Tensor, target, weights: ClassWeights) -> Tensor:
    """``weighted_bce`` as a differentiable node in the autodiff graph."""
    value, grad = weighted_bce(pred.data, target, weights)

    def bw(g):
        return (grad * g,)

    return _make(np.asarray(value, dtype=pred.dtype), (pred,), bw, "weighted_bce")


def confusion(pred_mask, truth) -> ConfusionCounts:
    p = np.asarray(pred_mask)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    _check_binary(p, "prediction")
    _check_binary(t, "truth")
    p = p.astype(bool)
    t = t.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice(counts: ConfusionCounts) -> float:
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2 * counts.tp / denom


def dice_per_case(pred: dict, truth: dict) -> dict:
    """Pooled Dice per subject.

    ``pred`` and ``truth`` map subject id to a sequence of slice masks (or a
    volume). Counts are summed over all of a subject's slices before the ratio.
    """
    if set(pred) != set(truth):
        raise ValueError(f"subject mismatch: {sorted(set(pred) ^ set(truth))}")
    out = {}
    for sid in truth:
        p_slices, t_slices = pred[sid], truth[sid]
        if len(p_slices) != len(t_slices):
            raise ValueError(f"subject {sid}: {len(p_slices)} predicted vs {len(t_slices)} true slices")
        total = ConfusionCounts(0, 0, 0, 0)
        for p, t in zip(p_slices, t_slices):
            total = total + confusion(p, t)
        out[sid] = dice(total)
    return out


def icc(ratings) -> IccReport:
    """All six Shrout & Fleiss (1979) ICCs for an n_subjects x n_judges matrix."""
    x = np.asarray(ratings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("ratings must be a 2D (subjects x judges) matrix")
    n, k = x.shape
    if n < 2 or k < 2:
        raise ValueError(f"need at least 2 subjects and 2 judges, got {n}x{k}")
    if not np.all(np.isfinite(x)):
        raise ValueError("ratings contain missing or non-finite values")

    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    grand = col_means.mean()
    ss_rows = k * np.sum((row_means - grand) ** 2)
    ss_cols = n * np.sum((col_means - grand) ** 2)
    ss_within = np.sum((x - row_means[:, None]) ** 2)
    resid = x - row_means[:, None] - (col_means - grand)[None, :]
    ss_err = np.sum(resid**2)

    bms = ss_rows / (n - 1)
    wms = ss_within / (n * (k - 1))
    jms = ss_cols / (k - 1)
    ems = ss_err / ((n - 1) * (k - 1))
    ms = {"BMS": bms, "WMS": wms, "JMS": jms, "EMS": ems}

    if bms == 0:
        nan = float("nan")
        return IccReport(nan, nan, nan, nan, nan, nan, n, k,
                         note="zero between-subject variance: ICC undefined", mean_squares=ms)

    with np.errstate(divide="ignore", invalid="ignore"):
        icc1 = (bms - wms) / (bms + (k - 1) * wms)
        icc2 = (bms - ems) / (bms + (k - 1) * ems + k * (jms - ems) / n)
        icc3 = (bms - ems) / (bms + (k - 1) * ems)
        icc1k = (bms - wms) / bms
        icc2k = (bms - ems) / (bms + (jms - ems) / n)
        icc3k = (bms - ems) / bms
    return IccReport(
        float(icc1), float(icc2), float(icc3), float(icc1k), float(icc2k), float(icc3k), n, k,
        mean_squares={key: float(v) for key, v in ms.items()},
    )
