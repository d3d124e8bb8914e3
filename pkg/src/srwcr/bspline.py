"""Cubic B-spline free-form deformations, spatial bin weights and dense fields.

Node ``n`` along an axis sits at voxel coordinate ``(n - 1) * spacing``, so the
four nodes supporting coordinate ``x`` are ``floor(x / spacing) + l`` for
``l = 0..3`` with weight ``beta_l(frac(x / spacing))``.  One extra node ring sits
before the image and two after it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .volume import Volume3D, sample_slab, voxel_grid


class SpatialWeightKind(enum.Enum):
    CUBIC_BSPLINE = "bspline"
    BOXCAR = "boxcar"

    @classmethod
    def parse(cls, value) -> "SpatialWeightKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"bspline": cls.CUBIC_BSPLINE, "cubicbspline": cls.CUBIC_BSPLINE, "boxcar": cls.BOXCAR}
        if key not in aliases:
            raise ValueError(f"unknown spatial weight kind {value!r}")
        return aliases[key]


def basis_eval(l: int, t: float) -> float:
    """Cubic B-spline segment ``beta_l(t)`` for ``l`` in 0..3 and ``t`` in [0, 1)."""
    if l not in (0, 1, 2, 3):
        raise ValueError(f"basis index must be 0..3, got {l}")
    if not 0.0 <= t < 1.0:
        raise ValueError(f"basis argument must lie in [0, 1), got {t}")
    return float(_basis(l, t))


@numba.njit(cache=True, inline="always")
def _basis(l, t):
    if l == 0:
        return (1.0 - t) ** 3 / 6.0
    if l == 1:
        return (3.0 * t**3 - 6.0 * t**2 + 4.0) / 6.0
    if l == 2:
        return (-3.0 * t**3 + 3.0 * t**2 + 3.0 * t + 1.0) / 6.0
    return t**3 / 6.0


def basis_deriv(l: int, t: float, order: int = 1) -> float:
    """First or second derivative of ``beta_l`` with respect to ``t``."""
    if order == 1:
        return ((-(1 - t) ** 2) / 2, (3 * t * t - 4 * t) / 2, (-3 * t * t + 2 * t + 1) / 2, t * t / 2)[l]
    if order == 2:
        return (1 - t, 3 * t - 2, -3 * t + 1, t)[l]
    raise ValueError("order must be 1 or 2")


def axis_matrix(n: int, spacing: float, nodes: int, order: int = 0) -> np.ndarray:
    """Dense ``(n, nodes)`` matrix of basis weights (or derivatives per voxel) on one axis."""
    mat = np.zeros((n, nodes))
    for x in range(n):
        s = x / spacing
        f = math.floor(s)
        t = s - f
        for l in range(4):
            if order == 0:
                w = _basis(l, t)
            else:
                w = basis_deriv(l, t, order) / spacing**order
            mat[x, f + l] = w
    return mat


def nodes_for(n: int, spacing: float) -> int:
    return int(math.floor((n - 1) / spacing)) + 4


@dataclass
class FFDGrid:
    """Control lattice; ``displacements`` has shape (gz, gy, gx, 3), components (x, y, z)."""

    image_dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    displacements: np.ndarray

    @classmethod
    def zeros(cls, image_dims, spacing) -> "FFDGrid":
        if np.isscalar(spacing):
            spacing = (spacing,) * 3
        spacing = tuple(float(s) for s in spacing)
        if min(spacing) <= 0:
            raise ValueError(f"grid spacing must be positive, got {spacing}")
        gx, gy, gz = (nodes_for(n, s) for n, s in zip(image_dims, spacing))
        return cls(tuple(int(d) for d in image_dims), spacing, np.zeros((gz, gy, gx, 3)))

    def __post_init__(self):
        expect = tuple(nodes_for(n, s) for n, s in zip(self.image_dims, self.spacing))[::-1] + (3,)
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        if self.displacements.shape != expect:
            raise ValueError(f"displacements shape {self.displacements.shape} != expected {expect}")

    @property
    def node_dims(self) -> tuple[int, int, int]:
        gz, gy, gx = self.displacements.shape[:3]
        return (gx, gy, gz)

    @property
    def origin(self) -> tuple[float, float, float]:
        return tuple(-s for s in self.spacing)

    @property
    def n_nodes(self) -> int:
        gx, gy, gz = self.node_dims
        return gx * gy * gz

    def node_position(self, node) -> tuple[float, float, float]:
        i, j, k = self.node_index(node)
        return ((i - 1) * self.spacing[0], (j - 1) * self.spacing[1], (k - 1) * self.spacing[2])

    def node_index(self, node) -> tuple[int, int, int]:
        """Accept a flat region index or an (i, j, k) triple."""
        gx, gy, gz = self.node_dims
        if np.isscalar(node):
            node = int(node)
            if not 0 <= node < self.n_nodes:
                raise IndexError(f"node index {node} out of range")
            return (node % gx, (node // gx) % gy, node // (gx * gy))
        i, j, k = (int(c) for c in node)
        if not (0 <= i < gx and 0 <= j < gy and 0 <= k < gz):
            raise IndexError(f"node index {node} out of range")
        return (i, j, k)

    def copy(self, displacements=None) -> "FFDGrid":
        d = self.displacements.copy() if displacements is None else displacements
        return FFDGrid(self.image_dims, self.spacing, d)

    def axis_matrices(self, order: int = 0):
        return tuple(axis_matrix(n, s, g, order) for n, s, g in zip(self.image_dims, self.spacing, self.node_dims))


def _support(grid: FFDGrid, x):
    base, frac = [], []
    for c, s, g in zip(x, grid.spacing, grid.node_dims):
        q = c / s
        f = math.floor(q)
        if f < 0 or f + 3 >= g:
            raise ValueError(f"point {tuple(x)} lies outside the grid support")
        base.append(f)
        frac.append(q - f)
    return base, frac


def transform_point(grid: FFDGrid, x) -> np.ndarray:
    """``T(x) = x + sum of basis-weighted node displacements`` over the 4x4x4 support."""
    (bx, by, bz), (tx, ty, tz) = _support(grid, x)
    out = np.array(x, dtype=np.float64)
    for n in range(4):
        wz = _basis(n, tz)
        for m in range(4):
            wy = _basis(m, ty)
            for l in range(4):
                out += wz * wy * _basis(l, tx) * grid.displacements[bz + n, by + m, bx + l]
    return out


def transform_jacobian(grid: FFDGrid, x, node) -> float:
    """Derivative of any component of T(x) w.r.t. the same component of a node displacement."""
    i, j, k = grid.node_index(node)
    (bx, by, bz), (tx, ty, tz) = _support(grid, x)
    l, m, n = i - bx, j - by, k - bz
    if not (0 <= l <= 3 and 0 <= m <= 3 and 0 <= n <= 3):
        return 0.0
    return float(_basis(l, tx) * _basis(m, ty) * _basis(n, tz))


def spatial_weight(kind, grid: FFDGrid, region, x) -> float:
    """Weight ``w(r, x)`` of voxel ``x`` in spatial bin ``r`` (bins are the control nodes)."""
    kind = SpatialWeightKind.parse(kind)
    if kind is SpatialWeightKind.CUBIC_BSPLINE:
        return transform_jacobian(grid, x, region)
    i, j, k = grid.node_index(region)
    (bx, by, bz), _ = _support(grid, x)
    return 1.0 if (0 <= i - bx <= 3 and 0 <= j - by <= 3 and 0 <= k - bz <= 3) else 0.0


def lattice_apply(coeffs: np.ndarray, mats) -> np.ndarray:
    """Evaluate a tensor-product expansion: coeffs (gz, gy, gx[, c]) -> (nz, ny, nx[, c])."""
    mx, my, mz = mats
    out = np.tensordot(mx, coeffs, axes=([1], [2]))  # (nx, gz, gy, ...)
    out = np.tensordot(my, out, axes=([1], [2]))  # (ny, nx, gz, ...)
    out = np.tensordot(mz, out, axes=([1], [2]))  # (nz, ny, nx, ...)
    return out


def lattice_adjoint(field: np.ndarray, mats) -> np.ndarray:
    """Transpose of :func:`lattice_apply`: (nz, ny, nx[, c]) -> (gz, gy, gx[, c])."""
    mx, my, mz = mats
    out = np.tensordot(mz.T, field, axes=([1], [0]))  # (gz, ny, nx, ...)
    out = np.tensordot(my.T, out, axes=([1], [1]))  # (gy, gz, nx, ...)
    out = np.tensordot(mx.T, out, axes=([1], [2]))  # (gx, gy, gz, ...)
    return np.ascontiguousarray(np.swapaxes(out, 0, 2))


@dataclass
class DisplacementField:
    """Dense per-voxel displacement in voxels; ``data`` has shape (nz, ny, nx, 3)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[3] != 3:
            raise ValueError(f"displacement data must have shape (nz, ny, nx, 3), got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "DisplacementField":
        nx, ny, nz = dims
        return cls(np.zeros((nz, ny, nx, 3)), spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape[:3]
        return (nx, ny, nz)

    def component(self, c: int) -> np.ndarray:
        return self.data[..., c]


def densify(grid: FFDGrid) -> DisplacementField:
    """Dense displacement ``T(x) - x`` on every voxel of the grid's image."""
    return DisplacementField(lattice_apply(grid.displacements, grid.axis_matrices()))


def _check_dims(a: DisplacementField, b: DisplacementField):
    if a.dims != b.dims:
        raise ValueError(f"field dims differ: {a.dims} vs {b.dims}")


def sample_field(field: DisplacementField, px, py, pz) -> np.ndarray:
    """Trilinear, border-clamped sampling of all three components; returns (..., 3)."""
    out = np.empty(px.shape + (3,))
    tmp = np.empty(px.shape)
    for c in range(3):
        comp = np.ascontiguousarray(field.data[..., c])
        sample_slab(comp, px, py, pz, tmp, 0, px.shape[0])
        out[..., c] = tmp
    return out


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Field of ``x -> inner(x) + outer(x + inner(x))``."""
    _check_dims(outer, inner)
    x, y, z = voxel_grid(inner.dims)
    u = inner.data
    px = np.ascontiguousarray(x + u[..., 0])
    py = np.ascontiguousarray(y + u[..., 1])
    pz = np.ascontiguousarray(z + u[..., 2])
    return DisplacementField(u + sample_field(outer, px, py, pz), inner.spacing)


@numba.njit(cache=True)
def _splat(u, sigma, radius, acc, wsum):
    nz, ny, nx = u.shape[:3]
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                tx = i + u[k, j, i, 0]
                ty = j + u[k, j, i, 1]
                tz = k + u[k, j, i, 2]
                x0 = int(math.ceil(tx - radius))
                y0 = int(math.ceil(ty - radius))
                z0 = int(math.ceil(tz - radius))
                for c in range(max(z0, 0), min(int(math.floor(tz + radius)), nz - 1) + 1):
                    dz = c - tz
                    for b in range(max(y0, 0), min(int(math.floor(ty + radius)), ny - 1) + 1):
                        dy = b - ty
                        for a in range(max(x0, 0), min(int(math.floor(tx + radius)), nx - 1) + 1):
                            dx = a - tx
                            d2 = dx * dx + dy * dy + dz * dz
                            if d2 > radius * radius:
                                continue
                            w = math.exp(-d2 * inv2s2)
                            wsum[c, b, a] += w
                            acc[c, b, a, 0] -= w * u[k, j, i, 0]
                            acc[c, b, a, 1] -= w * u[k, j, i, 1]
                            acc[c, b, a, 2] -= w * u[k, j, i, 2]


def invert_field(f: DisplacementField, sigma: float = 1.0, min_weight: float = 1e-12) -> DisplacementField:
    """Approximate inverse by Gaussian splatting of ``-f(x)`` onto ``x + f(x)``.

    Voxels that receive no weight copy the value of the nearest voxel that
    did.  For non-injective inputs the result is a weighted average of the
    colliding contributions.
    """
    acc = np.zeros_like(f.data)
    wsum = np.zeros(f.data.shape[:3])
    _splat(f.data, float(sigma), 3.0 * float(sigma), acc, wsum)
    hit = wsum > min_weight
    out = np.zeros_like(acc)
    out[hit] = acc[hit] / wsum[hit][:, None]
    if not hit.all():
        if not hit.any():
            return DisplacementField(out, f.spacing)
        _, idx = ndimage.distance_transform_edt(~hit, return_indices=True)
        out = out[idx[0], idx[1], idx[2]]
    return DisplacementField(out, f.spacing)


def resample_field(f: DisplacementField, dims, factor: float) -> DisplacementField:
    """Carry a field to a grid whose voxels are ``1/factor`` the size (coordinates scale by factor)."""
    x, y, z = voxel_grid(dims)
    px, py, pz = (np.ascontiguousarray(c / factor) for c in (x, y, z))
    return DisplacementField(factor * sample_field(f, px, py, pz))


def field_to_volume(f: DisplacementField, c: int) -> Volume3D:
    return Volume3D(f.data[..., c], f.spacing)
