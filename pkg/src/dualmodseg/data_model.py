"""Volumes, masks, aligned two-modality samples, and dataset splitting.

All container types are immutable after construction and validate their
invariants eagerly, so a constructed object is always safe to share across
threads.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Invalid volume, mask, sample, or split construction."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with physical voxel spacing in mm per axis (D, H, W)."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3:
            raise DataError(f"volume must be 3D, got shape {vox.shape}")
        if min(vox.shape) < 1:
            raise DataError(f"all extents must be >= 1, got {vox.shape}")
        if not np.isfinite(vox).all():
            raise DataError("volume contains non-finite voxels")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise DataError(f"spacing must be 3 positive components, got {self.spacing}")
        object.__setattr__(self, "voxels", _freeze(vox))
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class SegMask:
    """Per-voxel class indices in {0, ..., num_classes-1}, aligned to a Volume."""

    labels: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise DataError(f"mask must be 3D, got shape {lab.shape}")
        lab = lab.astype(np.int64, copy=False)
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise DataError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{lab.min()}, {lab.max()}]"
            )
        object.__setattr__(self, "labels", _freeze(lab))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def one_hot(self) -> np.ndarray:
        """(C, D, H, W) one-hot encoding, computed on demand."""
        eye = np.eye(self.num_classes, dtype=np.float32)
        return np.moveaxis(eye[self.labels], -1, 0)


@dataclass(frozen=True)
class ModalitySample:
    """An aligned pair of same-grid volumes plus an optional label mask."""

    id: str
    vol_a: Volume
    vol_b: Volume
    mask: Optional[SegMask] = None

    def __post_init__(self):
        if self.vol_a.shape != self.vol_b.shape:
            raise DataError(
                f"{self.id}: modality shapes differ {self.vol_a.shape} vs {self.vol_b.shape}"
            )
        if self.vol_a.spacing != self.vol_b.spacing:
            raise DataError(
                f"{self.id}: modality spacings differ "
                f"{self.vol_a.spacing} vs {self.vol_b.spacing}"
            )
        if self.mask is not None and self.mask.shape != self.vol_a.shape:
            raise DataError(
                f"{self.id}: mask shape {self.mask.shape} != volume shape {self.vol_a.shape}"
            )

    @property
    def labeled(self) -> bool:
        return self.mask is not None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.vol_a.shape

    def without_mask(self) -> "ModalitySample":
        return dataclasses.replace(self, mask=None)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint labeled / unlabeled / val / test partitions of a sample list.

    Unlabeled samples may carry masks internally (they are withheld at batch
    time), which allows post-hoc evaluation of pseudo-label quality.
    """

    labeled: tuple[ModalitySample, ...]
    unlabeled: tuple[ModalitySample, ...] = ()
    val: tuple[ModalitySample, ...] = ()
    test: tuple[ModalitySample, ...] = ()

    def __post_init__(self):
        for name in ("labeled", "unlabeled", "val", "test"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        ids: list[str] = []
        for part in (self.labeled, self.unlabeled, self.val, self.test):
            ids.extend(s.id for s in part)
        if len(ids) != len(set(ids)):
            raise DataError("split partitions share sample ids")
        for name in ("labeled", "val", "test"):
            for s in getattr(self, name):
                if not s.labeled:
                    raise DataError(f"{name} sample {s.id} has no mask")


@dataclass(frozen=True)
class Batch:
    """One training batch of patch-sized samples, labeled first."""

    labeled_samples: tuple[ModalitySample, ...]
    unlabeled_samples: tuple[ModalitySample, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "labeled_samples", tuple(self.labeled_samples))
        object.__setattr__(self, "unlabeled_samples", tuple(self.unlabeled_samples))
        if not self.labeled_samples and not self.unlabeled_samples:
            raise DataError("batch is empty")
        shapes = {s.shape for s in self.labeled_samples + self.unlabeled_samples}
        if len(shapes) != 1:
            raise DataError(f"batch patches have mixed shapes: {sorted(shapes)}")
        for s in self.labeled_samples:
            if not s.labeled:
                raise DataError(f"labeled batch entry {s.id} has no mask")
        for s in self.unlabeled_samples:
            if s.labeled:
                raise DataError(f"unlabeled batch entry {s.id} carries a mask")

    @property
    def size(self) -> int:
        return len(self.labeled_samples) + len(self.unlabeled_samples)

    @property
    def patch_shape(self) -> tuple[int, int, int]:
        return (self.labeled_samples + self.unlabeled_samples)[0].shape


def make_split(
    samples: Sequence[ModalitySample],
    labeled_fraction: float,
    seed: int,
    val_count: int = 0,
    test_count: int = 0,
) -> DatasetSplit:
    """Partition samples into labeled/unlabeled (+ optional val/test) pools.

    val_count and test_count samples are set aside first; of the remaining
    train pool, max(1, floor(labeled_fraction * pool)) become labeled and the
    rest unlabeled. Deterministic for a given seed.
    """
    if not samples:
        raise DataError("empty sample list")
    if not (0.0 < labeled_fraction <= 1.0):
        raise DataError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    for s in samples:
        if not s.labeled:
            raise DataError(f"sample {s.id} has no mask; splits are built from labeled data")
    if val_count < 0 or test_count < 0:
        raise DataError("val_count and test_count must be >= 0")
    if val_count + test_count >= len(samples):
        raise DataError("val_count + test_count leaves no training pool")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    shuffled = [samples[i] for i in order]
    test = shuffled[:test_count]
    val = shuffled[test_count:test_count + val_count]
    pool = shuffled[test_count + val_count:]
    n_labeled = max(1, math.floor(labeled_fraction * len(pool)))
    return DatasetSplit(
        labeled=tuple(pool[:n_labeled]),
        unlabeled=tuple(pool[n_labeled:]),
        val=tuple(val),
        test=tuple(test),
    )


def compose_batch(
    split: DatasetSplit,
    batch_size: int,
    labeled_count: int,
    rng: np.random.Generator,
    patch=None,
) -> Batch:
    """Draw a batch of labeled_count labeled + the rest unlabeled samples.

    Sampling is with replacement across calls and deterministic given the rng
    state. If `patch` (a preprocessing.PatchSpec) is given, every drawn sample
    is cropped to a random patch with the same rng; unlabeled masks are
    withheld before patching.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if not (0 < labeled_count <= batch_size):
        raise DataError(f"labeled_count must be in (0, {batch_size}], got {labeled_count}")
    if not split.labeled:
        raise DataError("labeled pool is empty")
    n_unlabeled = batch_size - labeled_count
    if n_unlabeled > 0 and not split.unlabeled:
        raise DataError("unlabeled pool is empty but unlabeled samples were requested")

    def draw(pool, k):
        idx = rng.choice(len(pool), size=k, replace=len(pool) < k)
        return [pool[i] for i in idx]

    labeled = draw(split.labeled, labeled_count)
    unlabeled = [s.without_mask() for s in draw(split.unlabeled, n_unlabeled)] if n_unlabeled else []
    if patch is not None:
        from .preprocessing import random_patch

        labeled = [random_patch(s, patch, rng) for s in labeled]
        unlabeled = [random_patch(s, patch, rng) for s in unlabeled]
    return Batch(labeled_samples=tuple(labeled), unlabeled_samples=tuple(unlabeled))
