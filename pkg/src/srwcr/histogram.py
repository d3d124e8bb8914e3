"""Parzen-window regional joint histograms p(a, b, r) and per-region statistics.

Spatial bins are the control nodes of an :class:`FFDGrid`.  Every voxel
touches only its 64 supporting nodes and, per image, the two intensity bins
inside the Parzen support, so the accumulation is sparse.  Each region's
table is built by gathering over the voxels in its support in a fixed order,
which makes the result independent of how regions are spread over workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .bspline import FFDGrid, SpatialWeightKind, _basis
from .parallel import run_chunks
from .volume import Volume3D

EPS_P = 1e-12
EPS_SIGMA = 1e-8
RANGE_TOL = 1e-9
# intensities this close to a kink of the window take the kink's derivative (0),
# so round-off in interpolated integers does not pick a one-sided slope
KINK_TOL = 1e-9


@dataclass(frozen=True)
class BinConfig:
    levels: int = 31
    eps_p: float = EPS_P
    eps_sigma: float = EPS_SIGMA

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"maximal intensity bin must be >= 1, got {self.levels}")

    @property
    def n_bins(self) -> int:
        return self.levels + 1


@numba.njit(cache=True, inline="always")
def _parzen(t):
    t = abs(t)
    if t < 0.5:
        return -1.8 * t * t - 0.1 * t + 1.0
    if t < 1.0:
        return 1.8 * t * t - 3.7 * t + 1.9
    return 0.0


@numba.njit(cache=True, inline="always")
def _parzen_deriv(t):
    s = abs(t)
    if s <= KINK_TOL or s >= 1.0 - KINK_TOL:
        return 0.0
    g = -3.6 * s - 0.1 if s < 0.5 else 3.6 * s - 3.7
    return g if t > 0 else -g


def parzen(t):
    """Second-order piecewise polynomial Parzen window (zero for ``|t| >= 1``)."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.where(t < 0.5, -1.8 * t * t - 0.1 * t + 1.0, 1.8 * t * t - 3.7 * t + 1.9)
    out = np.where(t < 1.0, out, 0.0)
    return out if out.ndim else float(out)


def parzen_deriv(t):
    """``dh/dt``; set to 0 at ``t = 0`` and ``|t| = 1`` where one-sided slopes differ.

    The zero extends ``KINK_TOL`` around those points.
    """
    t = np.asarray(t, dtype=np.float64)
    s = np.abs(t)
    g = np.where(s < 0.5, -3.6 * s - 0.1, 3.6 * s - 3.7)
    out = np.where((s > KINK_TOL) & (s < 1.0 - KINK_TOL), np.sign(t) * g, 0.0)
    return out if out.ndim else float(out)


@dataclass
class RegionalPDF:
    """``joint[r, a, b] = p_r(a, b)``, ``region_mass[r] = p(r)``, ``z`` the global normalizer."""

    joint: np.ndarray
    region_mass: np.ndarray
    z: float
    node_dims: tuple[int, int, int]

    @property
    def n_regions(self) -> int:
        return self.joint.shape[0]

    def p_abr(self) -> np.ndarray:
        return self.joint * self.region_mass[:, None, None]

    def marginal_a(self) -> np.ndarray:
        return self.joint.sum(axis=2)

    def marginal_b(self) -> np.ndarray:
        return self.joint.sum(axis=1)


@dataclass
class RegionalStats:
    var: np.ndarray  # sigma_r^2
    mean: np.ndarray  # mu_r
    cond_mean: np.ndarray  # mu_r(a), shape (R, L+1)
    cond_var: np.ndarray  # sigma_r^2(a)
    mass_a: np.ndarray  # p_r(a)
    cr: np.ndarray  # CR(A, B | r)
    retained: np.ndarray  # bool per region


def axis_tables(n: int, spacing: float, nodes: int, kind: SpatialWeightKind):
    """Per-axis support tables used by the gather kernels.

    Returns ``base`` (first supporting node per voxel), ``weights`` (n, 4)
    and per-node voxel ranges ``[start, stop)`` of its support.
    """
    base = np.empty(n, dtype=np.int64)
    weights = np.empty((n, 4))
    for x in range(n):
        q = x / spacing
        f = math.floor(q)
        base[x] = f
        for l in range(4):
            weights[x, l] = 1.0 if kind is SpatialWeightKind.BOXCAR else _basis(l, q - f)
    node = np.arange(nodes)
    start = np.searchsorted(base, node - 3, side="left").astype(np.int64)
    stop = np.searchsorted(base, node, side="right").astype(np.int64)
    return base, weights, start, stop


def grid_tables(grid: FFDGrid, kind: SpatialWeightKind):
    return tuple(axis_tables(n, s, g, kind) for n, s, g in zip(grid.image_dims, grid.spacing, grid.node_dims))


@numba.njit(cache=True, nogil=True)
def _bins(v, levels):
    # lower Parzen bin and the window values of the two bins it touches
    a0 = int(math.floor(v))
    if a0 >= levels:
        a0 = levels
    t = v - a0
    return a0, _parzen(t), _parzen(1.0 - t)


@numba.njit(cache=True, nogil=True)
def _bin_table(v, levels):
    flat = v.ravel()
    lo = np.empty(flat.shape[0], dtype=np.int64)
    w = np.empty((flat.shape[0], 2))
    for i in range(flat.shape[0]):
        lo[i], w[i, 0], w[i, 1] = _bins(flat[i], levels)
    return lo.reshape(v.shape), w.reshape(v.shape + (2,))


@numba.njit(cache=True, nogil=True)
def _pdf_regions(A, B, levels, tx, ty, tz, hist, r0, r1):
    bx, wx, sx, ex = tx
    by, wy, sy, ey = ty
    bz, wz, sz, ez = tz
    gx = sx.shape[0]
    gy = sy.shape[0]
    for r in range(r0, r1):
        i = r % gx
        j = (r // gx) % gy
        k = r // (gx * gy)
        h = hist[r]
        for z in range(sz[k], ez[k]):
            w3 = wz[z, k - bz[z]]
            if w3 == 0.0:
                continue
            for y in range(sy[j], ey[j]):
                w2 = w3 * wy[y, j - by[y]]
                if w2 == 0.0:
                    continue
                for x in range(sx[i], ex[i]):
                    w = w2 * wx[x, i - bx[x]]
                    if w == 0.0:
                        continue
                    a0 = A[0][z, y, x]
                    ha0 = A[1][z, y, x, 0]
                    ha1 = A[1][z, y, x, 1]
                    b0 = B[0][z, y, x]
                    hb0 = B[1][z, y, x, 0]
                    hb1 = B[1][z, y, x, 1]
                    h[a0, b0] += w * ha0 * hb0
                    if b0 < levels:
                        h[a0, b0 + 1] += w * ha0 * hb1
                    if a0 < levels:
                        h[a0 + 1, b0] += w * ha1 * hb0
                        if b0 < levels:
                            h[a0 + 1, b0 + 1] += w * ha1 * hb1


def check_intensities(v: Volume3D | np.ndarray, levels: int, name: str) -> np.ndarray:
    data = v.data if isinstance(v, Volume3D) else np.asarray(v, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    if lo < -RANGE_TOL or hi > levels + RANGE_TOL:
        raise ValueError(f"{name} intensities [{lo}, {hi}] are not normalized into [0, {levels}]")
    if lo < 0 or hi > levels:
        data = np.clip(data, 0.0, float(levels))
    return np.ascontiguousarray(data, dtype=np.float64)


def build_regional_pdf(A, B, grid: FFDGrid, kind=SpatialWeightKind.CUBIC_BSPLINE,
                       cfg: BinConfig = BinConfig(), workers: int = 1) -> RegionalPDF:
    """Accumulate ``p(a, b, r) = (1/Z) sum_x w(r, x) h(a - A(x)) h(b - B(x))``."""
    kind = SpatialWeightKind.parse(kind)
    a = check_intensities(A, cfg.levels, "model image A")
    b = check_intensities(B, cfg.levels, "estimated image B")
    if a.shape != b.shape:
        raise ValueError(f"A and B dims differ: {a.shape[::-1]} vs {b.shape[::-1]}")
    if a.shape[::-1] != tuple(grid.image_dims):
        raise ValueError(f"grid covers {grid.image_dims}, images are {a.shape[::-1]}")
    tables = grid_tables(grid, kind)
    n_regions = grid.n_nodes
    hist = np.zeros((n_regions, cfg.n_bins, cfg.n_bins))
    ta, tb = _bin_table(a, cfg.levels), _bin_table(b, cfg.levels)
    run_chunks(lambda r0, r1: _pdf_regions(ta, tb, cfg.levels, *tables, hist, r0, r1), n_regions, workers)
    return normalize_histogram(hist, grid.node_dims)


def normalize_histogram(hist: np.ndarray, node_dims) -> RegionalPDF:
    """Turn raw weighted counts (in place) into per-region conditionals and masses."""
    mass = hist.sum(axis=(1, 2))
    z = float(mass.sum())
    if z <= 0:
        raise ValueError("no voxel carries spatial weight; empty joint histogram")
    np.divide(hist, mass[:, None, None], out=hist, where=(mass > 0)[:, None, None])
    return RegionalPDF(hist, mass / z, z, tuple(node_dims))


def regional_stats(pdf: RegionalPDF, cfg: BinConfig = BinConfig()) -> RegionalStats:
    """Regional variances, conditional means and local correlation ratios."""
    bins = np.arange(cfg.n_bins, dtype=np.float64)
    joint = pdf.joint
    mass_a = joint.sum(axis=2)
    mass_b = joint.sum(axis=1)
    mean = mass_b @ bins
    var = mass_b @ (bins * bins) - mean * mean
    m1 = joint @ bins
    m2 = joint @ (bins * bins)
    ok = mass_a >= cfg.eps_p
    safe = np.where(ok, mass_a, 1.0)
    cond_mean = np.where(ok, m1 / safe, 0.0)
    cond_var = np.where(ok, np.maximum(m2 / safe - cond_mean * cond_mean, 0.0), 0.0)
    retained = (pdf.region_mass >= cfg.eps_p) & (var >= cfg.eps_sigma)
    safe_var = np.where(retained, var, 1.0)
    cr = np.where(retained, 1.0 - (cond_var * mass_a).sum(axis=1) / safe_var, 0.0)
    return RegionalStats(np.maximum(var, 0.0), mean, cond_mean, cond_var, mass_a, cr, retained)


def dump_pdf(pdf: RegionalPDF, header_path) -> None:
    """Write ``p(a, b, r)`` as a scalar volume with x = a, y = b, z = r."""
    from .volume import write_payload

    table = np.ascontiguousarray(np.swapaxes(pdf.p_abr(), 1, 2))
    write_payload(header_path, table, (1.0, 1.0, 1.0), "float32")
