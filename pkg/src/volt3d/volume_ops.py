"""Preprocessing and augmentation transforms on :class:`Volume` objects."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadAxis, NonFiniteInput, ShapeMismatch
from .nifti_io import Volume

DEFAULT_FLIP_AXIS = 1


@dataclass(frozen=True)
class ResizeSpec:
    target_shape: tuple
    method: str = "trilinear"

    def __post_init__(self):
        if len(self.target_shape) != 3 or any(int(t) < 1 for t in self.target_shape):
            raise ShapeMismatch(f"bad target shape {self.target_shape}")
        if self.method not in ("trilinear", "nearest"):
            raise ValueError(f"unknown resize method {self.method!r}")


@dataclass(frozen=True)
class AugmentationPolicy:
    flip_axis: int = DEFAULT_FLIP_AXIS
    num_augmented_per_class: int = 7
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.flip_axis not in (0, 1, 2):
            raise BadAxis(f"flip axis must be 0, 1 or 2, got {self.flip_axis}")
        if self.num_augmented_per_class < 0:
            raise ValueError("num_augmented_per_class must be >= 0")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ValueError(f"noise_sigma must be finite and >= 0, got {self.noise_sigma}")


def normalize_intensity(v: Volume, method: str = "minmax") -> Volume:
    """Rescale to [0, 1] by per-volume min/max (constant volumes map to 0).

    ``method="zscore"`` standardizes to zero mean, unit variance instead.
    """
    x = v.data.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput(f"volume {v.source_id or '<memory>'} has NaN/Inf voxels")
    if method == "zscore":
        sd = x.std()
        out = (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)
        return v.replace(out)
    if method != "minmax":
        raise ValueError(f"unknown normalization {method!r}")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return v.replace(np.zeros_like(x))
    out = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return v.replace(out)


def _source_coords(n_in, n_out):
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(s, 0.0, n_in - 1)


def _axis_weights(n_in, n_out):
    s = _source_coords(n_in, n_out)
    lo = np.floor(s).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = s - lo
    return lo, hi, frac


def resize_trilinear(v: Volume, spec: ResizeSpec) -> Volume:
    """Resample onto ``spec.target_shape`` with half-voxel centres and edge clamping.

    Trilinear interpolation is separable, so it is applied one axis at a time.
    """
    target = tuple(int(t) for t in spec.target_shape)
    data = v.data.astype(np.float64)
    for axis, n_out in enumerate(target):
        n_in = data.shape[axis]
        if spec.method == "nearest":
            s = _source_coords(n_in, n_out)
            idx = np.minimum(np.floor(s + 0.5).astype(np.intp), n_in - 1)
            data = np.take(data, idx, axis=axis)
            continue
        if n_in == n_out:
            continue
        lo, hi, frac = _axis_weights(n_in, n_out)
        shape = [1, 1, 1]
        shape[axis] = n_out
        frac = frac.reshape(shape)
        data = np.take(data, lo, axis=axis) * (1.0 - frac) + np.take(data, hi, axis=axis) * frac
    if spec.method == "trilinear":
        # blending can overshoot by an ulp; keep the documented range guarantee
        data = np.clip(data, v.data.min(), v.data.max())
    spacing = tuple(sp * n_in / n_out for sp, n_in, n_out in zip(v.spacing, v.shape, target))
    return Volume(data, spacing, v.source_id)


def flip_lr(v: Volume, axis: int = DEFAULT_FLIP_AXIS) -> Volume:
    if axis not in (0, 1, 2):
        raise BadAxis(f"flip axis must be 0, 1 or 2, got {axis}")
    return v.replace(np.flip(v.data, axis=axis).copy())


def add_gaussian_noise(v: Volume, sigma: float, seed: int) -> Volume:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return v.replace(v.data.copy())
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=v.shape)
    return v.replace(v.data.astype(np.float64) + noise)
