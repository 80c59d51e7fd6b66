"""Training-set augmentation: elastic warps, affine transforms, intensity rescaling."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .nifti_io import SliceSample
from .preprocess import binarize
from .utils import derived_rng


@dataclass
class AugmentConfig:
    elastic_alpha: float = 8.0
    elastic_sigma: float = 4.0
    max_rotation: float = 10.0  # degrees
    max_translation: float = 5.0  # pixels
    max_scale_delta: float = 0.05
    intensity_gain_range: tuple[float, float] = (0.9, 1.1)
    intensity_bias_range: tuple[float, float] = (-0.05, 0.05)
    copies_per_sample: int = 4
    seed: int = 0

    def validate(self) -> "AugmentConfig":
        if self.elastic_sigma <= 0:
            raise ValueError("elastic_sigma must be positive")
        if self.elastic_alpha < 0:
            raise ValueError("elastic_alpha must be non-negative")
        if self.copies_per_sample < 0:
            raise ValueError("copies_per_sample must be >= 0")
        for rng_ in (self.intensity_gain_range, self.intensity_bias_range):
            if len(rng_) != 2 or not all(np.isfinite(rng_)) or rng_[0] > rng_[1]:
                raise ValueError(f"bad intensity range {rng_}")
        if self.intensity_gain_range[0] <= 0:
            raise ValueError("intensity gain must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensity_gain_range"] = list(self.intensity_gain_range)
        d["intensity_bias_range"] = list(self.intensity_bias_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        for k in ("intensity_gain_range", "intensity_bias_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _warp(sample: SliceSample, coords, transform: str, **extra) -> SliceSample:
    image = ndimage.map_coordinates(sample.image.astype(np.float64), coords, order=1, mode="constant", cval=0.0)
    label = None
    if sample.label is not None:
        label = binarize(ndimage.map_coordinates(sample.label.astype(np.float64), coords, order=0, mode="constant", cval=0.0))
    return sample.derive(image=image, label=label, transform=transform, **extra)


def elastic_deform(sample: SliceSample, alpha: float, sigma: float, rng: np.random.Generator) -> SliceSample:
    """Warp by a uniform [-1, 1] displacement field smoothed with a Gaussian (std ``sigma``) and scaled by ``alpha``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    shape = sample.image.shape
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant", cval=0) * alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant", cval=0) * alpha
    rr, cc = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return _warp(sample, [rr + dy, cc + dx], "elastic")


def affine_transform(
    sample: SliceSample,
    rotation: float = 0.0,
    translation: tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
    rng: np.random.Generator | None = None,
) -> SliceSample:
    """Rotate (degrees) about the image centre, scale, then translate by (rows, cols).

    Output pixels pulled from outside the input are zero. ``rng`` is accepted
    for interface symmetry; the transform itself is deterministic.
    """
    h, w = sample.image.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = np.deg2rad(rotation)
    cos, sin = np.cos(theta), np.sin(theta)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: p = c + R^-1 (p' - c - t) / s
    qr = (rr - center[0] - translation[0]) / scale
    qc = (cc - center[1] - translation[1]) / scale
    src_r = center[0] + cos * qr + sin * qc
    src_c = center[1] - sin * qr + cos * qc
    return _warp(sample, [src_r, src_c], "affine")


def intensity_rescale(sample: SliceSample, gain: float, bias: float) -> SliceSample:
    if gain <= 0:
        raise ValueError("gain must be positive")
    image = np.clip(gain * sample.image + bias, 0.0, 1.0)
    return sample.derive(image=image, transform="intensity")


def augment_one(sample: SliceSample, config: AugmentConfig, copy_index: int) -> SliceSample:
    """One stochastic variant, fully determined by (seed, subject, slice, copy)."""
    rng = derived_rng(config.seed, sample.subject_id, sample.slice_index, copy_index)
    out = elastic_deform(sample, config.elastic_alpha, config.elastic_sigma, rng)
    rot = rng.uniform(-config.max_rotation, config.max_rotation)
    shift = tuple(rng.uniform(-config.max_translation, config.max_translation, 2))
    scale = 1.0 + rng.uniform(-config.max_scale_delta, config.max_scale_delta)
    out = affine_transform(out, rot, shift, scale)
    gain = rng.uniform(*config.intensity_gain_range)
    bias = rng.uniform(*config.intensity_bias_range)
    out = intensity_rescale(out, gain, bias)
    out.provenance["augmented"] = True
    out.provenance["copy_index"] = copy_index
    return out


def _augment_star(args):
    return augment_one(*args)


def augment_dataset(samples: list[SliceSample], config: AugmentConfig, workers: int = 1) -> list[SliceSample]:
    """Originals followed by ``copies_per_sample`` variants of each original."""
    config.validate()
    for s in samples:
        if s.augmented:
            raise ValueError("augment_dataset expects non-augmented samples")
    jobs = [(s, config, k) for s in samples for k in range(config.copies_per_sample)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            variants = list(pool.map(_augment_star, jobs, chunksize=8))
    else:
        variants = [augment_one(*j) for j in jobs]
    return list(samples) + variants
