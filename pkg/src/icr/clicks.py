"""Click simulation and click-to-guidance encoding.

The simulator compares the thresholded prediction against ground truth,
computes the exact distance of every erroneous voxel to the border of
the erroneous region, normalizes those distances into a multinomial
distribution, and samples one interaction coordinate. The label is
always ground-truth-consistent: additive on false negatives, subtractive
on false positives. Guidance encoding splats a truncated Gaussian per
click, per polarity, combined by voxelwise maximum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edt import edt_3d
from .errors import GridMismatchError
from .rng import multinomial_index
from .volume import BinaryMask, Grid3, ProbMap

POSITIVE = "positive"
NEGATIVE = "negative"

GUIDANCE_SIGMA_VOX = 2.0
GUIDANCE_TRUNC_SIGMAS = 3.0


@dataclass(frozen=True)
class Click:
    coord: tuple[int, int, int]
    label: str
    event_index: int

    def __post_init__(self):
        if self.label not in (POSITIVE, NEGATIVE):
            raise ValueError(f"label must be positive/negative, got {self.label!r}")
        if self.event_index < 1:
            raise ValueError("event_index starts at 1")


class ClickSet:
    """Ordered clicks with strictly increasing event indices from 1."""

    def __init__(self, clicks=()):
        self._clicks: list[Click] = []
        for c in clicks:
            self.append(c)

    def append(self, click: Click) -> None:
        expected = len(self._clicks) + 1
        if click.event_index != expected:
            raise ValueError(f"event index {click.event_index} != expected {expected}")
        self._clicks.append(click)

    def __len__(self):
        return len(self._clicks)

    def __iter__(self):
        return iter(self._clicks)

    def __getitem__(self, i):
        return self._clicks[i]

    def extended(self, click: Click) -> "ClickSet":
        return ClickSet([*self._clicks, click])


@dataclass(frozen=True)
class ErrorRegions:
    """Disagreement voxels between a thresholded prediction and the truth."""

    grid: Grid3
    mask: np.ndarray  # bool, True where prediction != truth
    false_negative: np.ndarray  # bool, truth foreground missed

    @property
    def false_positive(self) -> np.ndarray:
        return self.mask & ~self.false_negative

    def count(self) -> int:
        return int(self.mask.sum())


def error_mask(pred: ProbMap, gt: BinaryMask, threshold: float = 0.5) -> ErrorRegions:
    if pred.grid != gt.grid:
        raise GridMismatchError("prediction and ground truth grids differ")
    pred_fg = pred.values > threshold
    gt_fg = gt.values.astype(bool)
    disagree = pred_fg != gt_fg
    return ErrorRegions(pred.grid, disagree, disagree & gt_fg)


def click_weights(errors: ErrorRegions) -> np.ndarray:
    """Border distances over the error region, normalized to sum 1."""
    dist = edt_3d(errors.mask, errors.grid.spacing)
    total = dist.sum()
    return dist / total


def simulate_click(
    pred: ProbMap,
    gt: BinaryMask,
    rng: np.random.Generator,
    event_index: int = 1,
) -> Click | None:
    """Sample one corrective click, or None when the prediction is perfect."""
    errors = error_mask(pred, gt)
    if errors.count() == 0:
        return None
    dist = edt_3d(errors.mask, errors.grid.spacing)
    flat_idx = multinomial_index(rng, dist.ravel())
    coord = tuple(int(v) for v in np.unravel_index(flat_idx, errors.grid.dims))
    label = POSITIVE if gt.values[coord] == 1 else NEGATIVE
    return Click(coord, label, event_index)


@dataclass(frozen=True)
class GuidanceChannels:
    grid: Grid3
    positive: np.ndarray
    negative: np.ndarray


def _splat(channel: np.ndarray, coord, sigma: float) -> None:
    radius = int(np.ceil(GUIDANCE_TRUNC_SIGMAS * sigma))
    dims = channel.shape
    lo = [max(0, coord[a] - radius) for a in range(3)]
    hi = [min(dims[a], coord[a] + radius + 1) for a in range(3)]
    axes = [np.arange(lo[a], hi[a], dtype=np.float64) - coord[a] for a in range(3)]
    di, dj, dk = np.meshgrid(*axes, indexing="ij")
    d2 = di**2 + dj**2 + dk**2
    blob = np.exp(-d2 / (2.0 * sigma**2))
    blob[np.sqrt(d2) > GUIDANCE_TRUNC_SIGMAS * sigma] = 0.0
    region = channel[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    np.maximum(region, blob.astype(channel.dtype), out=region)


def encode_clicks(clicks, grid: Grid3, sigma: float = GUIDANCE_SIGMA_VOX) -> GuidanceChannels:
    """Accumulated clicks as positive/negative feature maps in [0, 1]."""
    pos = np.zeros(grid.dims, dtype=np.float32)
    neg = np.zeros(grid.dims, dtype=np.float32)
    for click in clicks:
        if any(not 0 <= click.coord[a] < grid.dims[a] for a in range(3)):
            raise ValueError(f"click {click.coord} outside grid {grid.dims}")
        _splat(pos if click.label == POSITIVE else neg, click.coord, sigma)
    return GuidanceChannels(grid, pos, neg)


def mask_dropout(
    prev: ProbMap, p: float, rng: np.random.Generator, training: bool
) -> ProbMap:
    """With probability p during training, replace the previous mask by a
    0.5-filled volume (no class information); pass-through otherwise."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1]")
    if training and rng.random() < p:
        return ProbMap(prev.grid, np.full(prev.grid.dims, 0.5, dtype=np.float32))
    return prev
