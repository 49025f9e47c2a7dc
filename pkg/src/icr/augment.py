"""Training-time augmentation on preprocessed cases.

Geometry (one gated affine of rotation/scale/shear/translation, plus
per-axis mirroring) applies identically to CT, PET, and mask; intensity
augmentations (gamma, shift, noise, smoothing) apply to CT only. Inputs
are assumed preprocessed, so out-of-field voxels fill with CT -1, PET 0,
mask 0. A sampled plan is fully concrete: applying it twice gives
identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rng as rngmod
from .volume import BinaryMask, CaseRecord, Grid3, Volume

CT_FILL = -1.0
PET_FILL = 0.0
REFERENCE_GRID = 144
REFERENCE_TRANSLATION_VOX = 32.0


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max_deg: float = 45.0
    scale_shear_range: tuple[float, float] = (-0.1, 0.1)
    translation_max_vox: float = REFERENCE_TRANSLATION_VOX
    affine_prob: float = 0.5
    mirror_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.5, 1.5)
    gamma_prob: float = 0.25
    shift_offset: float = 0.1
    shift_prob: float = 0.25
    noise_std: float = 0.1
    noise_prob: float = 0.25
    smooth_prob: float = 0.25
    smooth_sigma_vox: float = 0.75

    def __post_init__(self):
        for p in (self.affine_prob, self.mirror_prob, self.gamma_prob,
                  self.shift_prob, self.noise_prob, self.smooth_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        for lo, hi in (self.scale_shear_range, self.gamma_range):
            if lo > hi:
                raise ValueError("ranges must be ordered")

    def scaled_for_grid(self, grid: Grid3) -> "AugmentConfig":
        """Shrink the translation range in proportion to the grid size."""
        size = min(grid.dims)
        vox = round(REFERENCE_TRANSLATION_VOX * size / REFERENCE_GRID)
        return replace(self, translation_max_vox=float(vox))


@dataclass(frozen=True)
class AugmentPlan:
    matrix: np.ndarray | None  # 3x3 source<-target linear map about the center
    translation_vox: np.ndarray | None
    mirror: tuple[bool, bool, bool]
    gamma: float | None
    shift: float | None
    noise_std: float | None
    noise_seed: int | None
    smooth_sigma: float | None

    @property
    def is_identity(self) -> bool:
        return (
            self.matrix is None
            and not any(self.mirror)
            and self.gamma is None
            and self.shift is None
            and self.noise_std is None
            and self.smooth_sigma is None
        )


IDENTITY_PLAN = AugmentPlan(None, None, (False, False, False), None, None, None, None, None)


def _rotation_matrix(angles_rad) -> np.ndarray:
    ax, ay, az = angles_rad
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    return rx @ ry @ rz


def sample_augmentation(config: AugmentConfig, rng: np.random.Generator) -> AugmentPlan:
    """Draw one concrete plan; every stochastic choice is resolved here."""
    matrix = None
    translation = None
    if rng.random() < config.affine_prob:
        angles = np.deg2rad(rng.uniform(-config.rotation_max_deg, config.rotation_max_deg, 3))
        scales = 1.0 + rng.uniform(*config.scale_shear_range, size=3)
        shears = rng.uniform(*config.scale_shear_range, size=6)
        shear_m = np.eye(3)
        shear_m[0, 1], shear_m[0, 2] = shears[0], shears[1]
        shear_m[1, 0], shear_m[1, 2] = shears[2], shears[3]
        shear_m[2, 0], shear_m[2, 1] = shears[4], shears[5]
        # composition: scale, then shear, then rotation
        matrix = _rotation_matrix(angles) @ shear_m @ np.diag(scales)
        translation = rng.uniform(-config.translation_max_vox, config.translation_max_vox, 3)
    mirror = tuple(bool(rng.random() < config.mirror_prob) for _ in range(3))
    gamma = float(rng.uniform(*config.gamma_range)) if rng.random() < config.gamma_prob else None
    shift = (
        float(rng.uniform(-config.shift_offset, config.shift_offset))
        if rng.random() < config.shift_prob
        else None
    )
    noise_std = None
    noise_seed = None
    if rng.random() < config.noise_prob:
        noise_std = config.noise_std
        noise_seed = int(rng.integers(0, 2**62))
    smooth = config.smooth_sigma_vox if rng.random() < config.smooth_prob else None
    return AugmentPlan(matrix, translation, mirror, gamma, shift, noise_std, noise_seed, smooth)


def _resample_affine(values: np.ndarray, grid: Grid3, matrix, translation_mm, mode: str, fill: float) -> np.ndarray:
    """Inverse-map target voxel centers through the affine and interpolate."""
    dims = grid.dims
    spacing = np.asarray(grid.spacing)
    axes = [np.arange(dims[a], dtype=np.float64) * spacing[a] for a in range(3)]
    gi, gj, gk = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gi.ravel(), gj.ravel(), gk.ravel()])
    center = ((np.asarray(dims) - 1) * spacing / 2.0)[:, None]
    inv = np.linalg.inv(matrix)
    src_mm = inv @ (pts - center - np.asarray(translation_mm)[:, None]) + center
    src_idx = src_mm / spacing[:, None]

    inside = np.ones(src_idx.shape[1], dtype=bool)
    for a in range(3):
        inside &= (src_idx[a] >= 0.0) & (src_idx[a] <= dims[a] - 1)

    if mode == "nearest":
        idx = [np.clip(np.rint(src_idx[a]).astype(np.int64), 0, dims[a] - 1) for a in range(3)]
        sampled = values[idx[0], idx[1], idx[2]].astype(np.float64)
    else:
        lo, frac = [], []
        for a in range(3):
            p = np.clip(src_idx[a], 0.0, dims[a] - 1)
            l = np.floor(p).astype(np.int64)
            l = np.minimum(l, dims[a] - 2) if dims[a] > 1 else np.zeros_like(l)
            lo.append(l)
            frac.append(p - l)
        sampled = np.zeros(src_idx.shape[1], dtype=np.float64)
        for corner in range(8):
            w = np.ones(src_idx.shape[1], dtype=np.float64)
            idx = []
            for a in range(3):
                bit = (corner >> a) & 1
                idx.append(lo[a] + bit if dims[a] > 1 else lo[a])
                w = w * (frac[a] if bit else (1.0 - frac[a]))
            sampled += w * values[idx[0], idx[1], idx[2]].astype(np.float64)
    sampled = np.where(inside, sampled, fill)
    return sampled.reshape(dims)


def _apply_geometry(values: np.ndarray, grid: Grid3, plan: AugmentPlan, mode: str, fill: float) -> np.ndarray:
    out = values
    if plan.matrix is not None:
        out = _resample_affine(out, grid, plan.matrix, plan.translation_vox * np.asarray(grid.spacing), mode, fill)
    for axis, flip in enumerate(plan.mirror):
        if flip:
            out = np.flip(out, axis=axis)
    return np.ascontiguousarray(out)


def apply_augmentation(plan: AugmentPlan, case: CaseRecord) -> CaseRecord:
    """Transform a preprocessed case; mask stays binary, CT-only intensity ops."""
    if plan.is_identity:
        return case
    grid = case.grid
    ct = _apply_geometry(case.ct.values, grid, plan, "trilinear", CT_FILL)
    pet = _apply_geometry(case.pet.values, grid, plan, "trilinear", PET_FILL)
    gtv = None
    if case.gtv is not None:
        gtv_vals = _apply_geometry(case.gtv.values.astype(np.float32), grid, plan, "nearest", 0.0)
        gtv = BinaryMask(grid, gtv_vals.astype(np.uint8))

    if plan.gamma is not None:
        # gamma on [0,1]: remap from [-1,1] and back
        ct01 = np.clip((ct + 1.0) / 2.0, 0.0, 1.0)
        ct = np.power(ct01, plan.gamma) * 2.0 - 1.0
    if plan.shift is not None:
        ct = ct + plan.shift
    if plan.noise_std is not None:
        noise_rng = rngmod.stream(plan.noise_seed, "augment-noise")
        ct = ct + noise_rng.normal(0.0, plan.noise_std, grid.dims)
    if plan.smooth_sigma is not None:
        ct = gaussian_filter(ct, sigma=plan.smooth_sigma, mode="nearest")

    return CaseRecord(
        case.case_id,
        ct=Volume(grid, np.asarray(ct, dtype=np.float32)),
        pet=Volume(grid, np.asarray(pet, dtype=np.float32)),
        gtv=gtv,
    )
