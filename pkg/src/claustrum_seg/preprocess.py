"""Slice preprocessing: resize, label binarization, min-max scaling, CI slice
selection, and the fixed-size region-of-interest crop used to tame class
imbalance (plus its inverse for writing predictions back to full frame)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .nifti_io import SliceSample, Volume, axial_slices

FRAME = (256, 256)
ROI_SHAPE = (64, 112)


def binarize(label) -> np.ndarray:
    return (np.asarray(label) > 0).astype(np.uint8)


def _resample(grid: np.ndarray, target, order: int) -> np.ndarray:
    h, w = grid.shape
    th, tw = target
    # pixel-centre alignment
    rows = (np.arange(th) + 0.5) * (h / th) - 0.5
    cols = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(grid.astype(np.float64), [rr, cc], order=order, mode="nearest")


def resize_slice(sample: SliceSample, target=FRAME) -> SliceSample:
    """Bilinear resize of the image; nearest-neighbour (then re-binarized) for the label."""
    h, w = sample.image.shape
    if h == 0 or w == 0:
        raise ValueError("cannot resize an empty slice")
    if (h, w) == tuple(target):
        return sample
    image = _resample(sample.image, target, order=1)
    label = None if sample.label is None else binarize(_resample(sample.label, target, order=0))
    return sample.derive(image=image, label=label, transform=f"resize{h}x{w}->{target[0]}x{target[1]}")


def resize_mask(mask, target) -> np.ndarray:
    """Nearest-neighbour resize of a binary mask (identity at the same size)."""
    mask = np.asarray(mask)
    if mask.shape == tuple(target):
        return binarize(mask)
    return binarize(_resample(mask, target, order=0))


def normalize_array(values: np.ndarray) -> np.ndarray:
    """(x - min) / (max - min) over finite values; a constant input maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    if not finite.any():
        raise ValueError("cannot normalize: no finite values")
    lo, hi = v[finite].min(), v[finite].max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def normalize_volume(slices: list[SliceSample]) -> list[SliceSample]:
    """Min-max scale a subject's slices jointly so inter-slice contrast is kept."""
    if not slices:
        return []
    stack = normalize_array(np.stack([s.image for s in slices]))
    return [s.derive(image=stack[i], transform="minmax") for i, s in enumerate(slices)]


def select_ci_slices(samples: list[SliceSample]) -> list[SliceSample]:
    out = []
    for s in samples:
        if s.label is None:
            raise ValueError(f"slice {s.subject_id}:{s.slice_index} has no label")
        if np.any(s.label):
            out.append(s)
    return out


@dataclass(frozen=True)
class RoiWindow:
    row0: int
    col0: int
    rows: int = ROI_SHAPE[0]
    cols: int = ROI_SHAPE[1]

    def validate(self, frame=FRAME) -> "RoiWindow":
        if self.row0 < 0 or self.col0 < 0 or self.row0 + self.rows > frame[0] or self.col0 + self.cols > frame[1]:
            raise ValueError(f"ROI window {self} does not fit in a {frame[0]}x{frame[1]} frame")
        return self

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.row0, self.row0 + self.rows), slice(self.col0, self.col0 + self.cols)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoiWindow":
        return cls(int(d["row0"]), int(d["col0"]), int(d.get("rows", ROI_SHAPE[0])), int(d.get("cols", ROI_SHAPE[1])))


def crop_roi(sample: SliceSample, window: RoiWindow) -> SliceSample:
    window.validate(sample.image.shape)
    rs, cs = window.slices
    label = None if sample.label is None else sample.label[rs, cs]
    return sample.derive(image=sample.image[rs, cs], label=label, transform="roi_crop", roi=window.to_dict())


def restore_from_roi(mask, window: RoiWindow, frame=FRAME) -> np.ndarray:
    """Paste a window-sized mask into a zero frame."""
    mask = np.asarray(mask)
    window.validate(frame)
    if mask.shape != (window.rows, window.cols):
        raise ValueError(f"mask shape {mask.shape} != window shape {(window.rows, window.cols)}")
    out = np.zeros(frame, dtype=mask.dtype)
    rs, cs = window.slices
    out[rs, cs] = mask
    return out


def fit_roi_window(labels, margin: int = 4, frame=FRAME, shape=ROI_SHAPE) -> RoiWindow:
    """Window of ``shape`` containing every foreground pixel of ``labels`` plus ``margin``.

    The window is centred on the foreground centroid, shifted as little as
    needed to contain the margin-padded bounding box, then clamped to the frame.
    """
    union = np.zeros(frame, dtype=bool)
    total = np.zeros(2)
    count = 0
    for lab in labels:
        lab = np.asarray(lab) > 0
        if lab.shape != tuple(frame):
            raise ValueError(f"label shape {lab.shape} != frame {frame}")
        union |= lab
        idx = np.argwhere(lab)
        total += idx.sum(axis=0)
        count += len(idx)
    if count == 0:
        raise ValueError("fit_roi_window needs at least one foreground pixel")
    centroid = total / count
    pts = np.argwhere(union)
    lo = np.maximum(pts.min(axis=0) - margin, 0)
    hi = np.minimum(pts.max(axis=0) + margin, np.array(frame) - 1)  # inclusive
    extent = hi - lo + 1
    if extent[0] > shape[0] or extent[1] > shape[1]:
        raise ValueError(
            f"foreground extent {extent[0]}x{extent[1]} (margin {margin}) exceeds window {shape[0]}x{shape[1]}"
        )
    start = []
    for ax in range(2):
        s = int(np.floor(centroid[ax] - shape[ax] / 2 + 0.5))
        s = min(s, int(lo[ax]))  # window must start at or before the box
        s = max(s, int(hi[ax]) - shape[ax] + 1)  # and end at or after it
        s = min(max(s, 0), frame[ax] - shape[ax])
        start.append(s)
    return RoiWindow(start[0], start[1], shape[0], shape[1])


@dataclass
class ImbalanceStats:
    rows: list[dict] = field(default_factory=list)
    fg_fraction_before: float = 0.0
    fg_fraction_after: float = 0.0

    def to_dict(self) -> dict:
        return {
            "slices": self.rows,
            "aggregate": {
                "fg_fraction_before": self.fg_fraction_before,
                "fg_fraction_after": self.fg_fraction_after,
                "ci_pixels_before": sum(r["ci_pixels_before"] for r in self.rows),
                "ci_pixels_after": sum(r["ci_pixels_after"] for r in self.rows),
                "bg_pixels_before": sum(r["bg_pixels_before"] for r in self.rows),
                "bg_pixels_after": sum(r["bg_pixels_after"] for r in self.rows),
            },
        }

    def table(self) -> str:
        head = ("Slice ID", "CI before ROI", "CI after ROI", "BG before ROI", "BG after ROI")
        lines = ["\t".join(head)]
        for r in self.rows:
            lines.append(
                "\t".join(
                    str(v)
                    for v in (r["slice_id"], r["ci_pixels_before"], r["ci_pixels_after"], r["bg_pixels_before"], r["bg_pixels_after"])
                )
            )
        lines.append(
            f"foreground fraction: {100 * self.fg_fraction_before:.2f}% before ROI, "
            f"{100 * self.fg_fraction_after:.2f}% after ROI"
        )
        return "\n".join(lines)


def imbalance_report(samples: list[SliceSample], window: RoiWindow) -> ImbalanceStats:
    """Foreground/background pixel counts per slice before and after the ROI crop."""
    rows = []
    for s in samples:
        if s.label is None:
            raise ValueError(f"slice {s.subject_id}:{s.slice_index} has no label")
        lab = binarize(s.label)
        cropped = binarize(crop_roi(s, window).label)
        ci_b, ci_a = int(lab.sum()), int(cropped.sum())
        rows.append(
            {
                "slice_id": f"{s.subject_id}:{s.slice_index}" if s.subject_id else str(s.slice_index),
                "ci_pixels_before": ci_b,
                "ci_pixels_after": ci_a,
                "bg_pixels_before": lab.size - ci_b,
                "bg_pixels_after": cropped.size - ci_a,
            }
        )
    tot_b = sum(r["ci_pixels_before"] + r["bg_pixels_before"] for r in rows)
    tot_a = sum(r["ci_pixels_after"] + r["bg_pixels_after"] for r in rows)
    return ImbalanceStats(
        rows=rows,
        fg_fraction_before=sum(r["ci_pixels_before"] for r in rows) / tot_b if tot_b else 0.0,
        fg_fraction_after=sum(r["ci_pixels_after"] for r in rows) / tot_a if tot_a else 0.0,
    )


def prepare_subject(image: Volume, label: Volume | None, subject_id: str) -> list[SliceSample]:
    """Axial slices resized to the working frame, labels binarized, intensities scaled to [0, 1]."""
    slices = axial_slices(image, subject_id, label)
    slices = [resize_slice(s) for s in slices]
    return normalize_volume(slices)
