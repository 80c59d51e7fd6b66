"""PNG overlays: ground truth in green, prediction in red, overlap in yellow."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def render_overlay(image: np.ndarray, truth=None, pred=None) -> np.ndarray:
    """RGB uint8 array with the same height and width as ``image``."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    gray = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    rgb = np.repeat((gray * 255).astype(np.uint8)[..., None], 3, axis=2)
    if truth is not None:
        rgb[np.asarray(truth) > 0] = (0, 255, 0)
    if pred is not None:
        p = np.asarray(pred) > 0
        both = p & (np.asarray(truth) > 0) if truth is not None else np.zeros_like(p)
        rgb[p] = (255, 0, 0)
        rgb[both] = (255, 255, 0)
    return rgb


def write_overlay(path, image, truth=None, pred=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_overlay(image, truth, pred)).save(path)
    return path


def write_subject_overlays(subject, masks, out_dir, slice_indices=None) -> list[Path]:
    """One PNG per requested slice (default: slices with truth or prediction)."""
    out = []
    for s, m in zip(subject.slices, masks):
        if slice_indices is not None:
            if s.slice_index not in slice_indices:
                continue
        elif not (np.any(s.label) or np.any(m)):
            continue
        out.append(write_overlay(Path(out_dir) / f"{subject.subject_id}_slice{s.slice_index:03d}.png", s.image, s.label, m))
    return out
