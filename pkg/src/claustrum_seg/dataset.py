"""Loading labelled subjects from a directory of NIfTI image/label pairs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .nifti_io import SliceSample, Volume, read_nifti
from .preprocess import prepare_subject


@dataclass
class Subject:
    subject_id: str
    slices: list[SliceSample]  # full-frame, normalized, labelled
    image_path: Path | None = None
    label_path: Path | None = None
    original_shape: tuple[int, ...] = ()
    fingerprint: dict = field(default_factory=dict)

    @property
    def labels(self):
        return [s.label for s in self.slices]


def subject_from_volumes(subject_id: str, image: Volume, label: Volume | None) -> Subject:
    return Subject(subject_id, prepare_subject(image, label, subject_id), original_shape=image.data.shape)


def _pairs(root: Path) -> list[tuple[str, Path, Path]]:
    manifest = root / "manifest.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        if "subjects" in meta:
            return [(s["subject_id"], root / s["image"], root / s["label"]) for s in meta["subjects"]]
    pairs = []
    for img in sorted(root.glob("*_img.nii*")):
        sid = img.name.split("_img.nii")[0]
        ext = img.name[len(sid) + len("_img") :]
        lbl = root / f"{sid}_lbl{ext}"
        if not lbl.exists():
            raise FileNotFoundError(f"no label file for {img.name}")
        pairs.append((sid, img, lbl))
    return pairs


def load_dataset(path, subject_ids=None) -> list[Subject]:
    """Read every ``<id>_img`` / ``<id>_lbl`` pair under ``path`` (manifest order if present)."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    pairs = _pairs(root)
    if not pairs:
        raise FileNotFoundError(f"no *_img.nii[.gz] / *_lbl.nii[.gz] pairs in {root}")
    out = []
    for sid, img_path, lbl_path in pairs:
        if subject_ids is not None and sid not in subject_ids:
            continue
        img, lbl = read_nifti(img_path), read_nifti(lbl_path)
        subj = subject_from_volumes(sid, img, lbl)
        subj.image_path, subj.label_path = img_path, lbl_path
        out.append(subj)
    return out
