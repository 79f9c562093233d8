"""Intensity normalization, HU windowing, zero-region cropping, patch sampling.

All operations are pure functions over immutable samples.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data_model import DataError, ModalitySample, SegMask, Volume


@dataclass(frozen=True)
class WindowSpec:
    """CT intensity window: HU center and width."""

    level: float
    width: float

    def __post_init__(self):
        if self.width <= 0:
            raise DataError(f"window width must be > 0, got {self.width}")


@dataclass(frozen=True)
class PatchSpec:
    """Extents (D, H, W) of a training patch."""

    shape: tuple[int, int, int]

    def __post_init__(self):
        shape = tuple(int(x) for x in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise DataError(f"patch shape must be 3 extents >= 1, got {self.shape}")
        object.__setattr__(self, "shape", shape)


def minmax_normalize(v: Volume) -> Volume:
    """Rescale to [0, 1]; a constant volume maps to all zeros."""
    vox = v.voxels
    lo, hi = float(vox.min()), float(vox.max())
    if hi == lo:
        return Volume(np.zeros_like(vox), v.spacing)
    return Volume((vox - lo) / (hi - lo), v.spacing)


def hu_window(v: Volume, w: WindowSpec) -> Volume:
    """Linear window ramp: clamp((x - (level - width/2)) / width, 0, 1)."""
    out = (v.voxels - (w.level - w.width / 2.0)) / w.width
    return Volume(np.clip(out, 0.0, 1.0), v.spacing)


def nonzero_bbox(vox: np.ndarray) -> tuple[slice, slice, slice]:
    """Tight axis-aligned bounding box of nonzero voxels."""
    if not np.any(vox):
        raise DataError("reference volume is all zeros; bounding box undefined")
    slices = []
    for ax in range(3):
        other = tuple(i for i in range(3) if i != ax)
        hit = np.any(vox != 0, axis=other)
        idx = np.where(hit)[0]
        slices.append(slice(int(idx[0]), int(idx[-1]) + 1))
    return tuple(slices)


def crop_nonzero(s: ModalitySample, reference: str = "a") -> ModalitySample:
    """Crop both modalities and the mask to the nonzero bbox of one modality."""
    if reference not in ("a", "b"):
        raise DataError(f"reference must be 'a' or 'b', got {reference!r}")
    ref = s.vol_a if reference == "a" else s.vol_b
    box = nonzero_bbox(ref.voxels)
    vol_a = Volume(s.vol_a.voxels[box], s.vol_a.spacing)
    vol_b = Volume(s.vol_b.voxels[box], s.vol_b.spacing)
    mask = SegMask(s.mask.labels[box], s.mask.num_classes) if s.mask is not None else None
    return dataclasses.replace(s, vol_a=vol_a, vol_b=vol_b, mask=mask)


def _pad_to(arr: np.ndarray, shape: tuple[int, int, int], value) -> np.ndarray:
    pads = [(0, max(0, t - s)) for s, t in zip(arr.shape, shape)]
    if any(p[1] for p in pads):
        arr = np.pad(arr, pads, mode="constant", constant_values=value)
    return arr


def random_patch(
    s: ModalitySample, p: PatchSpec, rng: np.random.Generator
) -> ModalitySample:
    """Extract one shared random patch from both modalities and the mask.

    Inputs smaller than the patch are zero-padded first (class 0 in mask
    space). The offset is uniform over valid positions and deterministic
    given the rng state.
    """
    target = p.shape
    vox_a = _pad_to(s.vol_a.voxels, target, 0.0)
    vox_b = _pad_to(s.vol_b.voxels, target, 0.0)
    labels = _pad_to(s.mask.labels, target, 0) if s.mask is not None else None

    offset = tuple(int(rng.integers(0, vox_a.shape[i] - target[i] + 1)) for i in range(3))
    box = tuple(slice(o, o + t) for o, t in zip(offset, target))
    mask = SegMask(labels[box], s.mask.num_classes) if labels is not None else None
    return dataclasses.replace(
        s,
        vol_a=Volume(vox_a[box], s.vol_a.spacing),
        vol_b=Volume(vox_b[box], s.vol_b.spacing),
        mask=mask,
    )


def preprocess_sample(
    s: ModalitySample,
    normalize: str = "minmax",
    window: WindowSpec | None = None,
    crop: bool = False,
) -> ModalitySample:
    """Apply the configured normalization (and optional zero-crop) to a sample.

    normalize="minmax" rescales both modalities; normalize="window" applies
    the HU window to modality a (CT) and min-max to modality b (MR).
    """
    if crop:
        s = crop_nonzero(s, reference="a")
    if normalize == "minmax":
        vol_a = minmax_normalize(s.vol_a)
        vol_b = minmax_normalize(s.vol_b)
    elif normalize == "window":
        if window is None:
            raise DataError("normalize='window' requires a WindowSpec")
        vol_a = hu_window(s.vol_a, window)
        vol_b = minmax_normalize(s.vol_b)
    else:
        raise DataError(f"unknown normalize mode {normalize!r}")
    return dataclasses.replace(s, vol_a=vol_a, vol_b=vol_b)
