"""Synthetic PET-CT phantom generator.

Each case is a soft-tissue CT cube plus a PET channel with one hot tumor
ellipsoid (the ground truth) and a configurable number of distractor hot
spots that sit outside the ground truth as false-positive bait. A case is
a pure function of (seed, case_index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import DataError
from .volume import BinaryMask, CaseRecord, Grid3, Volume, save_case, write_manifest

CT_BACKGROUND_HU = 40.0
CT_TUMOR_DELTA_HU = 25.0
PET_BACKGROUND = 1.0
TUMOR_UPTAKE_RANGE = (4.0, 6.0)
# distractor uptake and CT density overlap the tumor's ranges so no
# per-voxel feature separates them; they stay false-positive bait that
# only corrective clicks reliably remove
DISTRACTOR_UPTAKE_RANGE = (4.0, 6.0)
DISTRACTOR_CT_DELTA_RANGE_HU = (20.0, 25.0)
DISTRACTOR_RADIUS_RANGE_MM = (2.0, 3.5)
AXIS_FACTOR_RANGE = (0.7, 1.3)
DISTRACTOR_GAP_VOXELS = 2.0
EDGE_SHARPNESS = 2.0
# soft profiles stay positive out to (1 + 0.5/EDGE_SHARPNESS) x semi-axes;
# placement separates by this halo so hot components never merge
HALO_FACTOR = 1.0 + 0.5 / EDGE_SHARPNESS
_PLACEMENT_TRIES = 500


@dataclass(frozen=True)
class PhantomConfig:
    grid: Grid3 = Grid3((32, 32, 32))
    tumor_radius_range: tuple[float, float] = (3.0, 8.0)
    n_distractors: tuple[int, int] = (0, 3)
    pet_noise_std: float = 0.1
    ct_texture_std: float = 20.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.tumor_radius_range
        if not (0 < lo <= hi):
            raise ValueError(f"tumor radius range must be positive and ordered, got {self.tumor_radius_range}")
        dlo, dhi = self.n_distractors
        if dlo < 0 or dhi < dlo:
            raise ValueError(f"distractor count range invalid: {self.n_distractors}")


def _coordinate_grids(grid: Grid3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes = [np.arange(grid.dims[a], dtype=np.float64) * grid.spacing[a] for a in range(3)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid_rho2(coords, center, semi_axes) -> np.ndarray:
    """Squared normalized radius: <=1 inside the ellipsoid."""
    xx, yy, zz = coords
    return (
        ((xx - center[0]) / semi_axes[0]) ** 2
        + ((yy - center[1]) / semi_axes[1]) ** 2
        + ((zz - center[2]) / semi_axes[2]) ** 2
    )


def _soft_profile(rho2: np.ndarray) -> np.ndarray:
    """1 deep inside, ramping to 0 at the boundary; crude uptake blur."""
    return np.clip(EDGE_SHARPNESS * (1.0 - np.sqrt(rho2)) + 0.5, 0.0, 1.0)


def _axis_factors(rng: np.random.Generator) -> np.ndarray:
    # Normalized to unit product so the sampled radius fixes tumor volume.
    f = rng.uniform(*AXIS_FACTOR_RANGE, size=3)
    f = f / np.cbrt(f.prod())
    return np.clip(f, *AXIS_FACTOR_RANGE)


def _max_fit_radius(grid: Grid3) -> float:
    extents = [(grid.dims[a] - 1) * grid.spacing[a] for a in range(3)]
    margin = max(grid.spacing)
    return min(e / 2.0 - margin for e in extents)


def _sample_center(rng, grid: Grid3, semi_axes) -> np.ndarray:
    lo, hi = [], []
    for a in range(3):
        extent = (grid.dims[a] - 1) * grid.spacing[a]
        pad = semi_axes[a] + grid.spacing[a]
        lo.append(pad)
        hi.append(extent - pad)
    return rng.uniform(lo, hi)


def generate_case(config: PhantomConfig, case_index: int) -> CaseRecord:
    grid = config.grid
    rng = rngmod.stream(config.seed, "phantom", case_index)

    r = rng.uniform(*config.tumor_radius_range)
    factors = _axis_factors(rng)
    semi_axes = r * factors
    if semi_axes.max() > _max_fit_radius(grid):
        raise DataError(
            f"tumor radius {r:.1f} mm does not fit a "
            f"{grid.dims} grid at spacing {grid.spacing}"
        )
    center = _sample_center(rng, grid, semi_axes)

    coords = _coordinate_grids(grid)
    tumor_rho2 = _ellipsoid_rho2(coords, center, semi_axes)
    gtv_mask = (tumor_rho2 <= 1.0).astype(np.uint8)
    tumor_profile = _soft_profile(tumor_rho2)

    n_lo, n_hi = config.n_distractors
    n_distractors = int(rng.integers(n_lo, n_hi + 1))
    gap = DISTRACTOR_GAP_VOXELS * max(grid.spacing)
    placed: list[tuple[np.ndarray, float]] = [(center, HALO_FACTOR * float(semi_axes.max()))]
    distractor_pet = np.zeros(grid.dims, dtype=np.float64)
    distractor_ct = np.zeros(grid.dims, dtype=np.float64)
    for _ in range(n_distractors):
        for attempt in range(_PLACEMENT_TRIES):
            dr = rng.uniform(*DISTRACTOR_RADIUS_RANGE_MM)
            dfactors = _axis_factors(rng)
            daxes = dr * dfactors
            dcenter = _sample_center(rng, grid, daxes)
            reach = HALO_FACTOR * float(daxes.max())
            ok = all(
                np.linalg.norm(dcenter - c) >= reach + r_other + gap
                for c, r_other in placed
            )
            if ok:
                break
        else:
            raise DataError(
                f"could not place {n_distractors} distractors on grid {grid.dims}; "
                "reduce counts or radii"
            )
        placed.append((dcenter, reach))
        duptake = rng.uniform(*DISTRACTOR_UPTAKE_RANGE)
        dct = rng.uniform(*DISTRACTOR_CT_DELTA_RANGE_HU)
        drho2 = _ellipsoid_rho2(coords, dcenter, daxes)
        profile = _soft_profile(drho2)
        distractor_pet = np.maximum(distractor_pet, (duptake - PET_BACKGROUND) * profile)
        distractor_ct = np.maximum(distractor_ct, dct * profile)

    uptake = rng.uniform(*TUMOR_UPTAKE_RANGE)
    pet = PET_BACKGROUND + (uptake - PET_BACKGROUND) * tumor_profile
    pet = np.maximum(pet, PET_BACKGROUND + distractor_pet)
    pet = pet + rng.normal(0.0, config.pet_noise_std, grid.dims)
    pet = np.clip(pet, 0.0, None)

    ct = CT_BACKGROUND_HU + np.maximum(CT_TUMOR_DELTA_HU * tumor_profile, distractor_ct)
    ct = ct + rng.normal(0.0, config.ct_texture_std, grid.dims)

    case_id = f"case_{case_index:04d}"
    return CaseRecord(
        case_id,
        ct=Volume(grid, ct.astype(np.float32)),
        pet=Volume(grid, pet.astype(np.float32)),
        gtv=BinaryMask(grid, gtv_mask),
    )


def generate_dataset(config: PhantomConfig, n_cases: int, out_root) -> list[dict]:
    """Write n_cases IVOL case dirs plus a manifest with 5-fold assignment."""
    from pathlib import Path

    out_root = Path(out_root)
    entries = []
    for idx in range(n_cases):
        case = generate_case(config, idx)
        save_case(case, out_root / case.case_id)
        entries.append({"id": case.case_id, "fold": idx % 5})
    write_manifest(out_root, entries)
    return entries
