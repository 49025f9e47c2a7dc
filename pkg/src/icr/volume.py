"""Volume data model, IVOL file format, and scan preprocessing.

Conventions used throughout the package:
  * arrays are indexed [i, j, k] with shape (nx, ny, nz)
  * voxel (i, j, k) sits at physical position (i*sx, j*sy, k*sz) mm
  * IVOL payloads are little-endian and x-fastest, which is numpy
    Fortran order for (nx, ny, nz) arrays
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateVolumeError,
    GridMismatchError,
    VolumeFormatError,
)

IVOL_MAGIC = "IVOL1"


@dataclass(frozen=True)
class Grid3:
    """Voxel counts and mm spacing of a 3D grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) != d or d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or any(
            not np.isfinite(s) or s <= 0 for s in self.spacing
        ):
            raise ValueError(f"spacing must be three positive finite floats, got {self.spacing}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """Scalar 3D samples on a grid (CT in HU, PET uptake, ...)."""

    grid: Grid3
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.shape != self.grid.dims:
            raise ValueError(f"values shape {vals.shape} != grid dims {self.grid.dims}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("volume contains NaN or Inf")
        object.__setattr__(self, "values", _freeze(vals))


@dataclass(frozen=True)
class BinaryMask:
    """3D mask whose voxels are exactly 0 or 1."""

    grid: Grid3
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.shape != self.grid.dims:
            raise ValueError(f"values shape {vals.shape} != grid dims {self.grid.dims}")
        if vals.dtype != np.uint8:
            if not np.isin(vals, (0, 1)).all():
                raise ValueError("mask values must be exactly 0 or 1")
            vals = vals.astype(np.uint8)
        elif vals.max(initial=0) > 1:
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "values", _freeze(vals))

    def foreground_count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class ProbMap:
    """Per-voxel foreground probabilities in [0, 1]."""

    grid: Grid3
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.shape != self.grid.dims:
            raise ValueError(f"values shape {vals.shape} != grid dims {self.grid.dims}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("probability map contains NaN or Inf")
        if vals.min(initial=0.0) < 0.0 or vals.max(initial=0.0) > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(vals))

    def threshold(self, level: float = 0.5) -> BinaryMask:
        """Binarize with strict `> level` comparison."""
        return BinaryMask(self.grid, (self.values > level).astype(np.uint8))


@dataclass(frozen=True)
class CaseRecord:
    """One co-registered PET-CT case, optionally with ground truth."""

    case_id: str
    ct: Volume
    pet: Volume
    gtv: BinaryMask | None = None

    def __post_init__(self):
        if self.ct.grid != self.pet.grid:
            raise GridMismatchError(f"{self.case_id}: ct and pet grids differ")
        if self.gtv is not None and self.gtv.grid != self.ct.grid:
            raise GridMismatchError(f"{self.case_id}: gtv grid differs from scans")

    @property
    def grid(self) -> Grid3:
        return self.ct.grid


# ---------------------------------------------------------------------------
# IVOL: one JSON header line + raw little-endian payload, x-fastest.

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _header_bytes(grid: Grid3, dtype: str) -> bytes:
    header = {
        "magic": IVOL_MAGIC,
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "dtype": dtype,
    }
    return json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"


def write_ivol(path: str | Path, grid: Grid3, values: np.ndarray, dtype: str) -> None:
    if dtype not in _DTYPES:
        raise ValueError(f"unknown IVOL dtype {dtype!r}")
    payload = np.asarray(values, dtype=_DTYPES[dtype]).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(_header_bytes(grid, dtype))
        fh.write(payload)


def read_ivol(path: str | Path) -> tuple[Grid3, np.ndarray, str]:
    """Read an IVOL file; returns (grid, values, dtype tag)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: unreadable header") from exc
    if header.get("magic") != IVOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {header.get('magic')!r}")
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype {dtype!r}")
    try:
        grid = Grid3(tuple(header["dims"]), tuple(header["spacing"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: invalid dims/spacing") from exc
    expected = grid.voxel_count * _DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(grid.dims, order="F")
    if dtype == "f32" and not np.all(np.isfinite(values)):
        raise VolumeFormatError(f"{path}: payload contains NaN or Inf")
    return grid, values, dtype


def load_case(path: str | Path) -> CaseRecord:
    """Load ct.ivol, pet.ivol, and optional gtv.ivol from a case directory."""
    path = Path(path)
    volumes = {}
    for name in ("ct", "pet"):
        fp = path / f"{name}.ivol"
        if not fp.is_file():
            raise VolumeFormatError(f"missing {fp}")
        grid, values, dtype = read_ivol(fp)
        if dtype != "f32":
            raise VolumeFormatError(f"{fp}: expected f32 payload, got {dtype}")
        volumes[name] = Volume(grid, np.array(values))
    gtv = None
    gtv_path = path / "gtv.ivol"
    if gtv_path.is_file():
        grid, values, dtype = read_ivol(gtv_path)
        if dtype != "u8":
            raise VolumeFormatError(f"{gtv_path}: expected u8 payload, got {dtype}")
        if values.max(initial=0) > 1:
            raise VolumeFormatError(f"{gtv_path}: mask values outside {{0,1}}")
        gtv = BinaryMask(grid, np.array(values))
    return CaseRecord(path.name, volumes["ct"], volumes["pet"], gtv)


def save_case(case: CaseRecord, path: str | Path) -> None:
    """Write a case directory; load_case() restores it bit-exactly."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_ivol(path / "ct.ivol", case.ct.grid, case.ct.values, "f32")
    write_ivol(path / "pet.ivol", case.pet.grid, case.pet.values, "f32")
    if case.gtv is not None:
        write_ivol(path / "gtv.ivol", case.gtv.grid, case.gtv.values, "u8")


# ---------------------------------------------------------------------------
# Dataset layout: <root>/<case_id>/{ct,pet,gtv}.ivol + <root>/manifest.json


def write_manifest(root: str | Path, entries: list[dict]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump({"cases": entries}, fh, separators=(",", ":"))
        fh.write("\n")


def load_manifest(root: str | Path) -> list[dict]:
    fp = Path(root) / "manifest.json"
    if not fp.is_file():
        raise VolumeFormatError(f"missing manifest {fp}")
    with open(fp, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    cases = data.get("cases")
    if not isinstance(cases, list):
        raise VolumeFormatError(f"{fp}: manifest has no case list")
    return cases


# ---------------------------------------------------------------------------
# Preprocessing

CT_WINDOW_HU = 200.0


def ct_normalize(ct: Volume) -> Volume:
    """Clamp HU to [-200, 200] and scale linearly to [-1, 1]."""
    vals = np.clip(ct.values, -CT_WINDOW_HU, CT_WINDOW_HU) / np.float32(CT_WINDOW_HU)
    return Volume(ct.grid, vals)


def pet_znormalize(pet: Volume) -> Volume:
    """Standardize to zero mean, unit population std over the whole volume."""
    vals = pet.values.astype(np.float64)
    mean = vals.mean()
    std = vals.std()
    if std == 0.0 or pet.grid.voxel_count < 2:
        raise DegenerateVolumeError("PET volume has zero variance")
    return Volume(pet.grid, ((vals - mean) / std).astype(np.float32))


# ---------------------------------------------------------------------------
# Resampling


def _sample_points(values: np.ndarray, pts: np.ndarray, mode: str) -> np.ndarray:
    """Sample `values` at fractional index coordinates pts (3, n).

    Out-of-range coordinates clamp to the volume edge.
    """
    dims = values.shape
    if mode == "nearest":
        idx = [np.clip(np.rint(pts[a]).astype(np.int64), 0, dims[a] - 1) for a in range(3)]
        return values[idx[0], idx[1], idx[2]]
    if mode != "trilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    out = np.zeros(pts.shape[1], dtype=np.float64)
    lo, frac = [], []
    for a in range(3):
        p = np.clip(pts[a], 0.0, dims[a] - 1)
        l = np.floor(p).astype(np.int64)
        l = np.minimum(l, dims[a] - 2) if dims[a] > 1 else np.zeros_like(l)
        lo.append(l)
        frac.append(p - l)
    for corner in range(8):
        w = np.ones(pts.shape[1], dtype=np.float64)
        idx = []
        for a in range(3):
            bit = (corner >> a) & 1
            idx.append(lo[a] + bit if dims[a] > 1 else lo[a])
            w = w * (frac[a] if bit else (1.0 - frac[a]))
        out += w * values[idx[0], idx[1], idx[2]].astype(np.float64)
    return out


def resample_to(volume: Volume, target: Grid3, mode: str = "trilinear") -> Volume:
    """Resample onto `target`, grids aligned at the first voxel center."""
    src = volume.grid
    ratios = [target.spacing[a] / src.spacing[a] for a in range(3)]
    axes = [np.arange(target.dims[a], dtype=np.float64) * ratios[a] for a in range(3)]
    gi, gj, gk = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gi.ravel(), gj.ravel(), gk.ravel()])
    sampled = _sample_points(volume.values, pts, mode)
    return Volume(target, sampled.reshape(target.dims).astype(np.float32))


def resample_mask(mask: BinaryMask, target: Grid3) -> BinaryMask:
    """Nearest-neighbor resample; binarity is preserved."""
    as_vol = Volume(mask.grid, mask.values.astype(np.float32))
    res = resample_to(as_vol, target, mode="nearest")
    return BinaryMask(target, res.values.astype(np.uint8))
