"""Evaluation metrics: Dice coefficient and average surface distance.

Surfaces are class voxels with at least one 6-connected neighbor outside the
class (the array boundary counts as outside); distances are Euclidean
between surface-voxel centers in physical mm.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .data_model import SegMask
from .network import ShapeError


class EmptySurfaceError(ValueError):
    """A surface distance was requested against an empty surface."""


def _labels(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, SegMask) else np.asarray(mask)


def dice_score(pred, gt, class_id: int) -> float:
    """Overlap 2|P n G| / (|P| + |G|); 1.0 when both sets are empty."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    p = p == class_id
    g = g == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def extract_surface(mask, class_id: int) -> np.ndarray:
    """(N, 3) coordinates of class voxels exposed on any of the 6 faces."""
    lab = _labels(mask)
    inside = lab == class_id
    padded = np.pad(inside, 1, mode="constant", constant_values=False)
    covered = np.ones_like(inside)
    for ax in range(3):
        for shift in (1, -1):
            covered &= np.roll(padded, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(inside & ~covered)


def asd(pred, gt, class_id: int, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Symmetric mean nearest-surface distance in mm.

    (sum of pred-surface distances to the gt surface + vice versa) divided by
    the total surface voxel count. Raises EmptySurfaceError when either
    surface is empty (the distance is undefined).
    """
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    surf_p = extract_surface(p, class_id)
    surf_g = extract_surface(g, class_id)
    if len(surf_p) == 0 or len(surf_g) == 0:
        raise EmptySurfaceError(
            f"empty surface for class {class_id} "
            f"(pred: {len(surf_p)} voxels, gt: {len(surf_g)} voxels)"
        )
    sp = np.asarray(spacing, dtype=np.float64)
    pts_p = surf_p * sp
    pts_g = surf_g * sp
    d_pg, _ = cKDTree(pts_g).query(pts_p)
    d_gp, _ = cKDTree(pts_p).query(pts_g)
    return float((d_pg.sum() + d_gp.sum()) / (len(pts_p) + len(pts_g)))


@dataclass(frozen=True)
class MetricsReport:
    """Per-sample DSC / ASD with mean +/- population standard deviation."""

    per_sample: tuple[tuple[str, float, Optional[float]], ...]
    dsc_mean: float
    dsc_std: float
    asd_mean: float
    asd_std: float
    asd_excluded: int

    @classmethod
    def from_samples(cls, rows: Sequence[tuple[str, float, Optional[float]]]) -> "MetricsReport":
        dscs = np.array([r[1] for r in rows], dtype=np.float64)
        asds = np.array([r[2] for r in rows if r[2] is not None], dtype=np.float64)
        excluded = sum(1 for r in rows if r[2] is None)
        return cls(
            per_sample=tuple(rows),
            dsc_mean=float(dscs.mean()) if dscs.size else float("nan"),
            dsc_std=float(dscs.std()) if dscs.size else float("nan"),
            asd_mean=float(asds.mean()) if asds.size else float("nan"),
            asd_std=float(asds.std()) if asds.size else float("nan"),
            asd_excluded=excluded,
        )

    def summary_line(self) -> str:
        line = (
            f"DSC {self.dsc_mean:.4f}+/-{self.dsc_std:.4f}, "
            f"ASD {self.asd_mean:.4f}+/-{self.asd_std:.4f} mm "
            f"(n={len(self.per_sample)}"
        )
        if self.asd_excluded:
            line += f", asd_excluded={self.asd_excluded}"
        return line + ")"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["id", "dsc", "asd_mm"])
        for sid, dsc, asd_mm in self.per_sample:
            writer.writerow([sid, f"{dsc:.6f}", "" if asd_mm is None else f"{asd_mm:.6f}"])
        buf.write(f"# {self.summary_line()}\n")
        return buf.getvalue()


def evaluate_dataset(
    predictions: Sequence,
    references: Sequence,
    spacings: Sequence[Sequence[float]],
    ids: Optional[Sequence[str]] = None,
    class_id: int = 1,
) -> MetricsReport:
    """Per-sample DSC and ASD over aligned prediction/reference lists.

    Samples whose prediction or reference surface is empty are excluded from
    the ASD aggregate and counted in `asd_excluded`.
    """
    if ids is None:
        ids = [str(i) for i in range(len(predictions))]
    if not (len(predictions) == len(references) == len(spacings) == len(ids)):
        raise ValueError(
            f"misaligned inputs: {len(predictions)} predictions, {len(references)} "
            f"references, {len(spacings)} spacings, {len(ids)} ids"
        )
    rows = []
    for sid, pred, ref, sp in zip(ids, predictions, references, spacings):
        dsc = dice_score(pred, ref, class_id)
        try:
            dist = asd(pred, ref, class_id, sp)
        except EmptySurfaceError:
            dist = None
        rows.append((sid, dsc, dist))
    return MetricsReport.from_samples(rows)
