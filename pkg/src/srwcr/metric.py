"""Similarity values (CR, SRWCR, RaPTOR), bending energy and the total cost."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bspline import FFDGrid, lattice_apply
from .histogram import BinConfig, RegionalPDF, RegionalStats, check_intensities

PENALTY_MONO = 0.1
PENALTY_MULTI = 30.0


class DegenerateImageError(ValueError):
    """The estimated image has (near) zero variance where a variance is required."""


@dataclass(frozen=True)
class Orientation:
    """Which image plays the model role ``A`` and which input is deformed.

    ``moving_as`` is ``"A"`` when the warped moving image is the model image
    and ``"B"`` when it is the estimated image.  ``moving`` names which
    benchmark input is deformed: ``"original"`` or ``"warped"``.
    """

    moving_as: str = "A"
    moving: str = "original"

    def __post_init__(self):
        if self.moving_as not in ("A", "B"):
            raise ValueError(f"moving_as must be 'A' or 'B', got {self.moving_as!r}")
        if self.moving not in ("original", "warped"):
            raise ValueError(f"moving must be 'original' or 'warped', got {self.moving!r}")

    @property
    def model_image(self) -> str:
        return "moving" if self.moving_as == "A" else "fixed"

    @property
    def estimated_image(self) -> str:
        return "fixed" if self.moving_as == "A" else "moving"

    @property
    def label(self) -> str:
        return f"M-as-{self.moving_as}/{'O' if self.moving == 'original' else 'W'}-as-M"

    @classmethod
    def parse(cls, text) -> "Orientation":
        """Parse ``"A,original"``, ``"B:warped"`` or labels like ``"M-as-A/O-as-M"``."""
        if isinstance(text, cls):
            return text
        s = str(text).strip().replace(" ", "")
        if s.upper().startswith("M-AS-"):
            role, _, src = s[5:].partition("/")
            moving = {"O": "original", "W": "warped"}.get(src[:1].upper(), "original")
            return cls(role[:1].upper(), moving)
        for sep in (",", ":", "/"):
            if sep in s:
                role, src = s.split(sep, 1)
                return cls(role.upper(), src.lower())
        return cls(s.upper())

    @classmethod
    def all(cls) -> list["Orientation"]:
        return [cls(r, m) for r in ("B", "A") for m in ("warped", "original")]


@dataclass(frozen=True)
class CostBreakdown:
    similarity: float
    penalty: float
    weight: float
    total: float


def correlation_ratio(joint: np.ndarray, cfg: BinConfig = BinConfig()) -> float:
    """CR(A, B) from a normalized joint table indexed ``[a, b]``."""
    joint = np.asarray(joint, dtype=np.float64)
    bins = np.arange(joint.shape[1], dtype=np.float64)
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    mu = pb @ bins
    var = pb @ bins**2 - mu * mu
    if var < cfg.eps_sigma:
        raise DegenerateImageError(f"variance of the estimated image is {var:.3g} (< {cfg.eps_sigma})")
    ok = pa >= cfg.eps_p
    safe = np.where(ok, pa, 1.0)
    mua = np.where(ok, (joint @ bins) / safe, 0.0)
    vara = np.where(ok, (joint @ bins**2) / safe - mua**2, 0.0)
    return float(1.0 - (vara * pa).sum() / var)


def _retained_mass(pdf: RegionalPDF, stats: RegionalStats) -> float:
    mass = float(pdf.region_mass[stats.retained].sum())
    if mass <= 0:
        raise DegenerateImageError("no spatial bin has enough mass and variance to be retained")
    return mass


def srwcr(pdf: RegionalPDF, stats: RegionalStats) -> float:
    """Mass-weighted mean of ``1 - CR_r`` over retained regions (0 = perfect dependence)."""
    keep = stats.retained
    bins = np.arange(pdf.joint.shape[2], dtype=np.float64)
    second = pdf.marginal_b()[keep] @ (bins * bins)
    explained = (stats.mass_a[keep] * stats.cond_mean[keep] ** 2).sum(axis=1)
    local = (second - explained) / stats.var[keep]
    return float((pdf.region_mass[keep] * local).sum() / _retained_mass(pdf, stats))


def srwcr_triple_sum(pdf: RegionalPDF, stats: RegionalStats) -> float:
    """Same value accumulated as one sum over (r, a, b) of the joint density."""
    keep = np.flatnonzero(stats.retained)
    bins = np.arange(pdf.joint.shape[2], dtype=np.float64)
    total = 0.0
    for r in keep:
        coef = (bins[None, :] ** 2 - stats.cond_mean[r][:, None] ** 2) / stats.var[r]
        total += float((coef * pdf.joint[r] * pdf.region_mass[r]).sum())
    return total / _retained_mass(pdf, stats)


def lattice_patches(dims, grid: FFDGrid) -> list[tuple[int, int, int, int, int, int]]:
    """Support cuboids of the control nodes, clipped to the image, as (x0, y0, z0, x1, y1, z1)."""
    patches = []
    gx, gy, gz = grid.node_dims
    sx, sy, sz = grid.spacing
    for k in range(gz):
        for j in range(gy):
            for i in range(gx):
                lo, hi = [], []
                for n, s, c in zip(dims, (sx, sy, sz), (i, j, k)):
                    lo.append(max(0, math.ceil((c - 3) * s)))
                    hi.append(min(n, math.ceil((c + 1) * s)))
                if all(h > l for l, h in zip(lo, hi)):
                    patches.append((*lo, *hi))
    return patches


def random_patches(dims, size: int, count: int, seed: int = 0) -> list[tuple[int, int, int, int, int, int]]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        lo = [int(rng.integers(0, max(n - size, 0) + 1)) for n in dims]
        out.append((*lo, *(min(l + size, n) for l, n in zip(lo, dims))))
    return out


def _tent_stats(a: np.ndarray, b: np.ndarray, n_bins: int):
    a0 = np.minimum(np.floor(a).astype(np.int64), n_bins - 1)
    t = a - a0
    up = np.minimum(a0 + 1, n_bins - 1)
    pa = np.bincount(a0, 1 - t, n_bins) + np.bincount(up, t, n_bins)
    ma = np.bincount(a0, (1 - t) * b, n_bins) + np.bincount(up, t * b, n_bins)
    return pa, ma


def raptor(A, B, patches, cfg: BinConfig = BinConfig()) -> float:
    """Patch-averaged ``1 - CR`` with tent-kernel conditionals and raw-frequency variance.

    Patches whose estimated-image variance falls below ``cfg.eps_sigma`` are
    skipped and the mean is taken over the remaining ones.
    """
    a = check_intensities(A, cfg.levels, "model image A")
    b = check_intensities(B, cfg.levels, "estimated image B")
    vals = []
    for x0, y0, z0, x1, y1, z1 in patches:
        pa_img = a[z0:z1, y0:y1, x0:x1].ravel()
        pb_img = b[z0:z1, y0:y1, x0:x1].ravel()
        n = pa_img.size
        if n == 0:
            continue
        s1 = pb_img.sum() / n
        s2 = (pb_img * pb_img).sum() / n
        var = s2 - s1 * s1
        if var < cfg.eps_sigma:
            continue
        pa, ma = _tent_stats(pa_img, pb_img, cfg.n_bins)
        pa /= n
        ma /= n
        ok = pa >= cfg.eps_p
        explained = (ma[ok] ** 2 / pa[ok]).sum()
        vals.append((s2 - explained) / var)
    if not vals:
        raise DegenerateImageError("every patch is degenerate")
    return float(np.mean(vals))


_BENDING_TERMS = (
    # derivative order per (x, y, z) axis and multiplicity
    ((2, 0, 0), 1.0),
    ((0, 2, 0), 1.0),
    ((0, 0, 2), 1.0),
    ((1, 1, 0), 2.0),
    ((1, 0, 1), 2.0),
    ((0, 1, 1), 2.0),
)


def _gram_matrices(grid: FFDGrid):
    per_order = [grid.axis_matrices(order) for order in (0, 1, 2)]
    grams = {}
    for axis in range(3):
        for o in (0, 1, 2):
            m = per_order[o][axis]
            grams[axis, o] = m.T @ m
    return grams


def bending_energy(grid: FFDGrid) -> tuple[float, np.ndarray]:
    """Mean squared second derivative of the deformation and its gradient per node.

    The voxel sum of each squared derivative field is a quadratic form in the
    node displacements with a Kronecker-structured Gram matrix, so both the
    value and the gradient are exact and cost only lattice-sized products.
    """
    grams = _gram_matrices(grid)
    phi = grid.displacements
    n_vox = float(np.prod(grid.image_dims))
    grad = np.zeros_like(phi)
    for orders, mult in _BENDING_TERMS:
        mats = tuple(grams[axis, o] for axis, o in enumerate(orders))
        grad += mult * lattice_apply(phi, mats)
    value = float((phi * grad).sum()) / n_vox
    return value, 2.0 * grad / n_vox


def total_cost(similarity: float, grid: FFDGrid | None, weight: float = PENALTY_MONO,
               penalty: float | None = None) -> CostBreakdown:
    if weight < 0:
        raise ValueError(f"penalty weight must be >= 0, got {weight}")
    if penalty is None:
        penalty = bending_energy(grid)[0] if grid is not None else 0.0
    return CostBreakdown(float(similarity), float(penalty), float(weight), float(similarity + weight * penalty))
