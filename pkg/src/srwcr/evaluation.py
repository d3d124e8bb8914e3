"""Synthetic benchmark pairs and accuracy measures (RMSE, mTRE, HD, MHD)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .bspline import DisplacementField, FFDGrid, densify, sample_field
from .volume import Volume3D


@dataclass
class SyntheticPair:
    original: Volume3D
    warped: Volume3D
    ground_truth: DisplacementField
    seed: int


def grid_pattern(dims, period: int = 16, thick: int = 2, levels: int = 31) -> Volume3D:
    """Binary lattice of axis-aligned sheets: ``levels`` on the sheets, 0 elsewhere.

    The sheet phase is centred per axis so both borders get the same margin.
    """
    nx, ny, nz = dims
    z, y, x = np.ogrid[:nz, :ny, :nx]
    on = np.zeros((nz, ny, nx), dtype=bool)
    for coord, n in ((x, nx), (y, ny), (z, nz)):
        offset = ((n - thick) % period) // 2
        on = on | (((coord - offset) % period) < thick)
    return Volume3D(np.where(on, float(levels), 0.0))


def random_warp(dims, amplitude: float, spacing: float, rng) -> DisplacementField:
    """Cubic B-spline field with node displacements uniform in ``[-amplitude, amplitude]``.

    The lattice is centred on the volume and only nodes lying inside it move,
    so the field fades out towards the borders.
    """
    dims = tuple(int(d) for d in dims)
    pads = [int(((n - 1) % spacing) // 2) for n in dims]
    grid = FFDGrid.zeros(tuple(n + 2 * p for n, p in zip(dims, pads)), spacing)
    disp = rng.uniform(-amplitude, amplitude, grid.displacements.shape)
    for axis, (n, pad) in enumerate(zip(dims, pads)):
        pos = (np.arange(grid.node_dims[axis]) - 1) * spacing - pad
        index = [slice(None)] * 3
        index[2 - axis] = (pos < 0) | (pos > n - 1)
        disp[tuple(index)] = 0.0
    grid.displacements[:] = disp
    (px, py, pz) = pads
    nx, ny, nz = dims
    data = densify(grid).data[pz:pz + nz, py:py + ny, px:px + nx]
    return DisplacementField(np.ascontiguousarray(data))


def warp_volume(v: Volume3D, field: DisplacementField) -> Volume3D:
    from .pipeline import warp_with_field

    return warp_with_field(v, field)


def generate_synthetic(dims=(128, 128, 128), amplitude: float = 15.0, warp_spacing: float = 32.0,
                       seed: int = 0, period: int = 16, thick: int = 2, levels: int = 31) -> SyntheticPair:
    """Grid image ``O``, a random B-spline warp ``u`` and ``W(x) = O(x + u(x))``."""
    dims = tuple(int(d) for d in dims)
    if min(dims) < 32:
        raise ValueError(f"synthetic volumes need >= 32 voxels per axis, got {dims}")
    if not amplitude < warp_spacing / 2:
        raise ValueError(f"amplitude {amplitude} must stay below half the warp spacing {warp_spacing}")
    rng = np.random.default_rng(seed)
    original = grid_pattern(dims, period, thick, levels)
    field = random_warp(dims, amplitude, warp_spacing, rng)
    return SyntheticPair(original, warp_volume(original, field), field, seed)


def rmse_displacement(f: DisplacementField, gt: DisplacementField) -> float:
    if f.dims != gt.dims:
        raise ValueError(f"field dims differ: {f.dims} vs {gt.dims}")
    diff = f.data - gt.data
    return float(np.sqrt((diff * diff).sum(axis=-1).mean()))


@dataclass
class PointSet:
    points: np.ndarray  # (n, 3) in (x, y, z)
    unit: str = "voxel"

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {self.points.shape}")
        if self.unit not in ("voxel", "mm"):
            raise ValueError(f"unit must be 'voxel' or 'mm', got {self.unit!r}")

    def __len__(self):
        return len(self.points)


def load_points(path, unit: str = "voxel") -> PointSet:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'x y z', got {line!r}")
        rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError(f"{path}: no points")
    return PointSet(np.array(rows), unit)


def save_points(points: PointSet, path) -> None:
    Path(path).write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in points.points.tolist()))


def transform_landmarks(points, field: DisplacementField) -> np.ndarray:
    """``p -> p + f(p)`` with trilinear, border-clamped field sampling (voxel units)."""
    pts = np.asarray(points.points if isinstance(points, PointSet) else points, dtype=np.float64)
    pts = np.atleast_2d(pts)
    shape = (1, 1, len(pts))
    px, py, pz = (np.ascontiguousarray(pts[:, c].reshape(shape)) for c in range(3))
    return pts + sample_field(field, px, py, pz).reshape(-1, 3)


def mean_tre(fixed_pts: PointSet, moving_pts: PointSet, field: DisplacementField, spacing) -> float:
    """Mean distance in millimetres between mapped fixed landmarks and moving landmarks."""
    if len(fixed_pts) != len(moving_pts):
        raise ValueError(f"landmark counts differ: {len(fixed_pts)} vs {len(moving_pts)}")
    mapped = transform_landmarks(fixed_pts, field)
    diff = (mapped - moving_pts.points) * np.asarray(spacing, dtype=np.float64)
    return float(np.sqrt((diff * diff).sum(axis=1)).mean())


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(dst).query(src)
    diff = src - dst[idx]
    return np.sqrt((diff * diff).sum(axis=1))


def _as_array(ps) -> np.ndarray:
    arr = ps.points if isinstance(ps, PointSet) else np.atleast_2d(np.asarray(ps, dtype=np.float64))
    if len(arr) == 0:
        raise ValueError("point set is empty")
    return arr


def hausdorff(xs, ys) -> float:
    a, b = _as_array(xs), _as_array(ys)
    return float(max(_nearest(a, b).max(), _nearest(b, a).max()))


def mhd(xs, ys) -> float:
    """Larger of the two directed mean nearest-point distances."""
    a, b = _as_array(xs), _as_array(ys)
    d1, d2 = _nearest(a, b), _nearest(b, a)
    # correctly rounded sums keep the result independent of summation order
    return max(math.fsum(d1) / len(d1), math.fsum(d2) / len(d2))
