"""Segmentation quality measures on binary masks.

Four measures are reported per refinement event:
  dsc   volumetric overlap, 2|A n B| / (|A|+|B|)
  assd  average symmetric surface distance in mm
  hd95  95th percentile symmetric Hausdorff distance in mm
  sdsc  surface overlap within a 1 mm tolerance

Surface voxels are foreground voxels with at least one background
6-neighbor; the volume exterior counts as background. Surface points are
voxel centers in mm. Distance percentiles use linear interpolation
between order statistics.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import GridMismatchError, IcrError
from .volume import BinaryMask

SDSC_TOLERANCE_MM = 1.0


class EmptySurfaceError(IcrError):
    """Distance metrics are undefined when a mask has no surface."""


def surface_points(mask: BinaryMask) -> np.ndarray:
    """Surface voxel centers as an (n, 3) array of mm coordinates."""
    m = mask.values.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    idx = np.argwhere(m & ~interior)
    return idx.astype(np.float64) * np.asarray(mask.grid.spacing, dtype=np.float64)


def _check_grids(pred: BinaryMask, gt: BinaryMask) -> None:
    if pred.grid != gt.grid:
        raise GridMismatchError("pred and gt grids differ")


def dsc(pred: BinaryMask, gt: BinaryMask) -> float:
    """Volumetric Dice overlap; 1.0 when both masks are empty."""
    _check_grids(pred, gt)
    p = pred.values.astype(bool)
    g = gt.values.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each src point to its nearest dst point."""
    tree = cKDTree(dst)
    dists, _ = tree.query(src, k=1)
    return np.atleast_1d(dists)


def _percentile_linear(values: np.ndarray, q: float) -> float:
    vals = np.sort(np.asarray(values, dtype=np.float64))
    n = len(vals)
    if n == 1:
        return float(vals[0])
    rank = (q / 100.0) * (n - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, n - 1)
    frac = rank - lo
    return float(vals[lo] * (1.0 - frac) + vals[hi] * frac)


def assd(pred: BinaryMask, gt: BinaryMask) -> float:
    """Average symmetric surface distance in mm."""
    _check_grids(pred, gt)
    sp = surface_points(pred)
    sg = surface_points(gt)
    if len(sp) == 0 or len(sg) == 0:
        raise EmptySurfaceError("assd is undefined for an empty surface")
    d_total = _directed_distances(sg, sp).sum() + _directed_distances(sp, sg).sum()
    return float(d_total / (len(sg) + len(sp)))


def hd95(pred: BinaryMask, gt: BinaryMask) -> float:
    """95th percentile symmetric Hausdorff distance in mm."""
    _check_grids(pred, gt)
    sp = surface_points(pred)
    sg = surface_points(gt)
    if len(sp) == 0 or len(sg) == 0:
        raise EmptySurfaceError("hd95 is undefined for an empty surface")
    d_pg = _percentile_linear(_directed_distances(sp, sg), 95.0)
    d_gp = _percentile_linear(_directed_distances(sg, sp), 95.0)
    return float(max(d_pg, d_gp))


def sdsc(pred: BinaryMask, gt: BinaryMask, tau: float = SDSC_TOLERANCE_MM) -> float:
    """Surface Dice: fraction of surface points within tau mm of the other surface."""
    _check_grids(pred, gt)
    sp = surface_points(pred)
    sg = surface_points(gt)
    if len(sp) == 0 and len(sg) == 0:
        return 1.0
    if len(sp) == 0 or len(sg) == 0:
        return 0.0
    close_p = int((_directed_distances(sp, sg) <= tau).sum())
    close_g = int((_directed_distances(sg, sp) <= tau).sum())
    return (close_p + close_g) / (len(sp) + len(sg))


@dataclass(frozen=True)
class MetricReport:
    """Per-event evaluation row; distance metrics are None when undefined."""

    dsc: float
    assd_mm: float | None
    hd95_mm: float | None
    sdsc: float
    changed_voxels: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_masks(pred: BinaryMask, gt: BinaryMask, changed_voxels: int = 0) -> MetricReport:
    """All four measures with empty-surface conventions applied."""
    _check_grids(pred, gt)
    try:
        assd_mm: float | None = assd(pred, gt)
        hd95_mm: float | None = hd95(pred, gt)
    except EmptySurfaceError:
        assd_mm = None
        hd95_mm = None
    return MetricReport(
        dsc=dsc(pred, gt),
        assd_mm=assd_mm,
        hd95_mm=hd95_mm,
        sdsc=sdsc(pred, gt),
        changed_voxels=changed_voxels,
    )
