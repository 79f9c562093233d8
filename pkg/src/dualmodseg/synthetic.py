"""Deterministic paired-modality phantom volumes with known ground truth.

A shared latent geometry (a union of randomized ellipsoids) defines the
mask. Modality a is bright inside the region, modality b is dark inside
(inverted contrast, T1ce/T2-style complementarity), each with independent
Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data_model import DataError, ModalitySample, SegMask, Volume

BACKGROUND_A = 0.2
BACKGROUND_B = 0.8


@dataclass(frozen=True)
class SynthSpec:
    shape: tuple[int, int, int] = (16, 16, 16)
    num_blobs: int = 2
    noise_sigma: float = 0.05
    contrast_a: float = 0.6
    contrast_b: float = 0.6
    seed: int = 0

    def __post_init__(self):
        shape = tuple(int(x) for x in self.shape)
        if len(shape) != 3 or any(x % 8 != 0 for x in shape):
            raise DataError(f"shape extents must be divisible by 8, got {self.shape}")
        if not (1 <= self.num_blobs <= 3):
            raise DataError(f"num_blobs must be in 1..3, got {self.num_blobs}")
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        object.__setattr__(self, "shape", shape)


def ellipsoid_mask(
    shape: tuple[int, int, int],
    center: tuple[float, float, float],
    semiaxes: tuple[float, float, float],
) -> np.ndarray:
    """Boolean voxel-membership mask of one axis-aligned ellipsoid."""
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, semiaxes):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def generate_sample(spec: SynthSpec) -> ModalitySample:
    """One deterministic sample: latent blob mask + two complementary modalities."""
    rng = np.random.default_rng(spec.seed)
    shape = spec.shape
    mask = np.zeros(shape, dtype=bool)
    for _ in range(spec.num_blobs):
        center = tuple(rng.uniform(0.25 * n, 0.75 * n) for n in shape)
        semiaxes = tuple(rng.uniform(n / 8.0, n / 4.0) for n in shape)
        mask |= ellipsoid_mask(shape, center, semiaxes)

    fg = mask.astype(np.float64)
    vox_a = BACKGROUND_A + spec.contrast_a * fg
    vox_b = BACKGROUND_B - spec.contrast_b * fg
    if spec.noise_sigma > 0:
        vox_a = vox_a + rng.normal(0.0, spec.noise_sigma, shape)
        vox_b = vox_b + rng.normal(0.0, spec.noise_sigma, shape)
    vox_a = np.clip(vox_a, 0.0, 1.0)
    vox_b = np.clip(vox_b, 0.0, 1.0)

    return ModalitySample(
        id=f"synth-{spec.seed}",
        vol_a=Volume(vox_a),
        vol_b=Volume(vox_b),
        mask=SegMask(mask.astype(np.int64), num_classes=2),
    )


def generate_dataset(n: int, base_seed: int, template: SynthSpec) -> list[ModalitySample]:
    """n samples seeded base_seed + i; disjoint seed ranges give disjoint streams."""
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    return [generate_sample(replace(template, seed=base_seed + i)) for i in range(n)]
