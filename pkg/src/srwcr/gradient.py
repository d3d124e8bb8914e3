"""Analytic derivatives of SRWCR (and the lattice RaPTOR baseline).

Stage one produces, for every fixed-grid voxel ``x``, the derivative of the
similarity with respect to the warped moving intensity ``M(T(x))``.  Stage
two pulls that through the image gradient and the B-spline Jacobian onto the
control nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .bspline import FFDGrid, SpatialWeightKind, lattice_adjoint
from .histogram import (KINK_TOL, BinConfig, RegionalPDF, RegionalStats, _bins, _parzen_deriv,
                        check_intensities, grid_tables)
from .parallel import run_chunks


@dataclass
class VoxelDerivTables:
    dd_dm: np.ndarray  # (nz, ny, nx)
    grad_m: np.ndarray  # (nz, ny, nx, 3), intensity per voxel at y = T(x)


@numba.njit(cache=True, nogil=True)
def _dd_dm_srwcr(A, B, moving_is_b, levels, tx, ty, tz, cond_mean, mean, var, one_minus_cr,
                 keep, scale, out, k0, k1):
    bx, wx, sx, ex = tx
    by, wy, sy, ey = ty
    bz, wz, sz, ez = tz
    gx = sx.shape[0]
    gy = sy.shape[0]
    ny, nx = A.shape[1], A.shape[2]
    for z in range(k0, k1):
        for y in range(ny):
            for x in range(nx):
                av = A[z, y, x]
                bv = B[z, y, x]
                a0, ha0, ha1 = _bins(av, levels)
                b0, hb0, hb1 = _bins(bv, levels)
                if moving_is_b:
                    d0 = _parzen_deriv(b0 - bv)
                    d1 = _parzen_deriv(b0 + 1.0 - bv)
                else:
                    d0 = _parzen_deriv(a0 - av)
                    d1 = _parzen_deriv(a0 + 1.0 - av)
                if d0 == 0.0 and d1 == 0.0:
                    out[z, y, x] = 0.0
                    continue
                fb0 = float(b0)
                fb1 = fb0 + 1.0
                acc = 0.0
                for n in range(4):
                    k = bz[z] + n
                    w3 = wz[z, n]
                    if w3 == 0.0:
                        continue
                    for m in range(4):
                        j = by[y] + m
                        w2 = w3 * wy[y, m]
                        if w2 == 0.0:
                            continue
                        for l in range(4):
                            w = w2 * wx[x, l]
                            if w == 0.0:
                                continue
                            r = (k * gy + j) * gx + bx[x] + l
                            if not keep[r]:
                                continue
                            inv = 1.0 / var[r]
                            mu0 = cond_mean[r, a0]
                            mu1 = cond_mean[r, a0 + 1] if a0 < levels else 0.0
                            s = 0.0
                            if moving_is_b:
                                # coefficient b^2 - 2 b mu_r(a) - (1 - CR_r)(b^2 - 2 b mu_r)
                                q = one_minus_cr[r]
                                mr = mean[r]
                                t0 = fb0 * fb0 - q * (fb0 * fb0 - 2.0 * fb0 * mr)
                                t1 = fb1 * fb1 - q * (fb1 * fb1 - 2.0 * fb1 * mr)
                                s += ha0 * d0 * (t0 - 2.0 * fb0 * mu0)
                                s += ha0 * d1 * (t1 - 2.0 * fb1 * mu0)
                                if a0 < levels:
                                    s += ha1 * d0 * (t0 - 2.0 * fb0 * mu1)
                                    s += ha1 * d1 * (t1 - 2.0 * fb1 * mu1)
                            else:
                                # coefficient mu_r(a)^2 - 2 b mu_r(a)
                                s += d0 * hb0 * (mu0 * mu0 - 2.0 * fb0 * mu0)
                                if b0 < levels:
                                    s += d0 * hb1 * (mu0 * mu0 - 2.0 * fb1 * mu0)
                                if a0 < levels:
                                    s += d1 * hb0 * (mu1 * mu1 - 2.0 * fb0 * mu1)
                                    if b0 < levels:
                                        s += d1 * hb1 * (mu1 * mu1 - 2.0 * fb1 * mu1)
                            acc += w * s * inv
                # dp(a, b, r)/dI = -(1/Z) w h h'
                out[z, y, x] = -acc * scale


def _support_tables(grid: FFDGrid, kind):
    # per-voxel base node and the 4 weights, per axis
    return tuple((t[0], t[1], t[2], t[3]) for t in grid_tables(grid, kind))


def srwcr_voxel_derivative(pdf: RegionalPDF, stats: RegionalStats, A, B, grid: FFDGrid,
                           kind=SpatialWeightKind.CUBIC_BSPLINE, cfg: BinConfig = BinConfig(),
                           moving_is_b: bool = True, workers: int = 1) -> np.ndarray:
    kind = SpatialWeightKind.parse(kind)
    a = check_intensities(A, cfg.levels, "model image A")
    b = check_intensities(B, cfg.levels, "estimated image B")
    keep = stats.retained
    retained_mass = float(pdf.region_mass[keep].sum())
    out = np.zeros(a.shape)
    if retained_mass <= 0:
        return out
    scale = 1.0 / (pdf.z * retained_mass)
    tables = _support_tables(grid, kind)
    one_minus_cr = np.where(keep, 1.0 - stats.cr, 0.0)
    var = np.where(keep, stats.var, 1.0)
    run_chunks(lambda k0, k1: _dd_dm_srwcr(a, b, moving_is_b, cfg.levels, *tables, stats.cond_mean,
                                           stats.mean, var, one_minus_cr, keep, scale, out, k0, k1),
               a.shape[0], workers)
    return out


def dD_dB(pdf, stats, A, B, grid, kind=SpatialWeightKind.CUBIC_BSPLINE, cfg=BinConfig(), workers=1):
    """Per-voxel derivative of SRWCR w.r.t. the estimated image intensity."""
    return srwcr_voxel_derivative(pdf, stats, A, B, grid, kind, cfg, True, workers)


def dD_dA(pdf, stats, A, B, grid, kind=SpatialWeightKind.CUBIC_BSPLINE, cfg=BinConfig(), workers=1):
    """Per-voxel derivative of SRWCR w.r.t. the model image intensity."""
    return srwcr_voxel_derivative(pdf, stats, A, B, grid, kind, cfg, False, workers)


@numba.njit(cache=True, nogil=True, inline="always")
def _tent_bins(v, levels):
    a0 = int(np.floor(v))
    if a0 >= levels:
        a0 = levels
    t = v - a0
    return a0, 1.0 - t, t


@numba.njit(cache=True, nogil=True, inline="always")
def _tent_deriv(t):
    if abs(t) <= KINK_TOL or abs(t) >= 1.0 - KINK_TOL:
        return 0.0
    return -1.0 if t > 0 else 1.0


@numba.njit(cache=True, nogil=True)
def _raptor_regions(A, B, levels, tx, ty, tz, pa, ma, mom, r0, r1):
    bx, wx, sx, ex = tx
    by, wy, sy, ey = ty
    bz, wz, sz, ez = tz
    gx = sx.shape[0]
    gy = sy.shape[0]
    for r in range(r0, r1):
        i = r % gx
        j = (r // gx) % gy
        k = r // (gx * gy)
        for z in range(sz[k], ez[k]):
            for y in range(sy[j], ey[j]):
                for x in range(sx[i], ex[i]):
                    av = A[z, y, x]
                    bv = B[z, y, x]
                    a0, h0, h1 = _tent_bins(av, levels)
                    pa[r, a0] += h0
                    ma[r, a0] += h0 * bv
                    if a0 < levels:
                        pa[r, a0 + 1] += h1
                        ma[r, a0 + 1] += h1 * bv
                    mom[r, 0] += 1.0
                    mom[r, 1] += bv
                    mom[r, 2] += bv * bv


@dataclass
class RaptorLattice:
    """Per-patch frequency statistics for the lattice cuboids."""

    count: np.ndarray
    cond_mean: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    local: np.ndarray  # per-patch 1 - CR
    keep: np.ndarray

    @property
    def value(self) -> float:
        return float(self.local[self.keep].mean())


def raptor_lattice_stats(A, B, grid: FFDGrid, cfg: BinConfig = BinConfig(), workers: int = 1) -> RaptorLattice:
    from .metric import DegenerateImageError

    a = check_intensities(A, cfg.levels, "model image A")
    b = check_intensities(B, cfg.levels, "estimated image B")
    tables = _support_tables(grid, SpatialWeightKind.BOXCAR)
    n = grid.n_nodes
    pa = np.zeros((n, cfg.n_bins))
    ma = np.zeros((n, cfg.n_bins))
    mom = np.zeros((n, 3))
    run_chunks(lambda r0, r1: _raptor_regions(a, b, cfg.levels, *tables, pa, ma, mom, r0, r1), n, workers)
    count = mom[:, 0]
    has = count > 0
    cnt = np.where(has, count, 1.0)
    mean = mom[:, 1] / cnt
    var = mom[:, 2] / cnt - mean * mean
    keep = has & (var >= cfg.eps_sigma)
    pa /= cnt[:, None]
    ma /= cnt[:, None]
    ok = pa >= cfg.eps_p
    cond_mean = np.where(ok, ma / np.where(ok, pa, 1.0), 0.0)
    explained = (pa * cond_mean**2).sum(axis=1)
    local = np.where(keep, (mom[:, 2] / cnt - explained) / np.where(keep, var, 1.0), 0.0)
    if not keep.any():
        raise DegenerateImageError("every patch is degenerate")
    return RaptorLattice(count, cond_mean, mean, var, local, keep)


@numba.njit(cache=True, nogil=True)
def _dd_dm_raptor(A, B, moving_is_b, levels, tx, ty, tz, count, cond_mean, mean, var, local,
                  keep, scale, out, k0, k1):
    bx, wx, sx, ex = tx
    by, wy, sy, ey = ty
    bz, wz, sz, ez = tz
    gx = sx.shape[0]
    gy = sy.shape[0]
    ny, nx = A.shape[1], A.shape[2]
    for z in range(k0, k1):
        for y in range(ny):
            for x in range(nx):
                av = A[z, y, x]
                bv = B[z, y, x]
                a0, h0, h1 = _tent_bins(av, levels)
                d0 = _tent_deriv(a0 - av)
                d1 = _tent_deriv(a0 + 1.0 - av)
                acc = 0.0
                for n in range(4):
                    k = bz[z] + n
                    for m in range(4):
                        j = by[y] + m
                        for l in range(4):
                            r = (k * gy + j) * gx + bx[x] + l
                            if not keep[r]:
                                continue
                            mu0 = cond_mean[r, a0]
                            mu1 = cond_mean[r, a0 + 1] if a0 < levels else 0.0
                            if moving_is_b:
                                fit = h0 * mu0 + h1 * mu1
                                g = 2.0 * (bv - fit) - local[r] * 2.0 * (bv - mean[r])
                            else:
                                g = d0 * (2.0 * mu0 * bv - mu0 * mu0) + d1 * (2.0 * mu1 * bv - mu1 * mu1)
                            acc += g / (var[r] * count[r])
                out[z, y, x] = acc * scale


def raptor_voxel_derivative(stats: RaptorLattice, A, B, grid: FFDGrid, cfg: BinConfig = BinConfig(),
                            moving_is_b: bool = True, workers: int = 1) -> np.ndarray:
    a = check_intensities(A, cfg.levels, "model image A")
    b = check_intensities(B, cfg.levels, "estimated image B")
    tables = _support_tables(grid, SpatialWeightKind.BOXCAR)
    out = np.zeros(a.shape)
    scale = 1.0 / float(stats.keep.sum())
    var = np.where(stats.keep, stats.var, 1.0)
    count = np.where(stats.count > 0, stats.count, 1.0)
    run_chunks(lambda k0, k1: _dd_dm_raptor(a, b, moving_is_b, cfg.levels, *tables, count, stats.cond_mean,
                                            stats.mean, var, stats.local, stats.keep, scale, out, k0, k1),
               a.shape[0], workers)
    return out


def assemble_param_gradient(tables: VoxelDerivTables, grid: FFDGrid, penalty_grad=None,
                            weight: float = 0.0) -> np.ndarray:
    """Chain rule onto the nodes: sum_x dD/dM(T(x)) * grad M(T(x)) * dT(x)/dphi_s.

    Returns an array shaped like ``grid.displacements``; adds ``weight *
    penalty_grad`` when given.
    """
    field = tables.dd_dm[..., None] * tables.grad_m
    grad = lattice_adjoint(field, grid.axis_matrices())
    if penalty_grad is not None and weight:
        grad = grad + weight * penalty_grad
    return grad
