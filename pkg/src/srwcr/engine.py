"""One cost + gradient evaluation split into four stages.

1. warp the moving image at ``T(x)`` (with the interpolant's spatial derivative)
2. accumulate the regional joint histograms
3. per-voxel derivative of the similarity w.r.t. the warped intensity
4. per-node assembly of the parameter gradient (plus the bending penalty)

Regional statistics run serially between stages 2 and 3.  Every parallel
stage uses a fixed work partition, so results do not depend on ``workers``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bspline import FFDGrid, SpatialWeightKind, densify
from .gradient import (VoxelDerivTables, assemble_param_gradient, raptor_lattice_stats,
                       raptor_voxel_derivative, srwcr_voxel_derivative)
from .histogram import BinConfig, build_regional_pdf, regional_stats
from .metric import CostBreakdown, Orientation, bending_energy, srwcr
from .parallel import run_chunks
from .volume import Volume3D, sample_grad_slab, voxel_grid

METRICS = ("srwcr", "raptor")


@dataclass(frozen=True)
class EvalPlan:
    orientation: Orientation = Orientation()
    kind: SpatialWeightKind = SpatialWeightKind.CUBIC_BSPLINE
    bins: BinConfig = BinConfig()
    workers: int = 1
    deterministic: bool = True  # every stage is order-fixed already, so "off" changes nothing
    penalty_weight: float = 0.1
    metric: str = "srwcr"

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError(f"worker count must be >= 1, got {self.workers}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        object.__setattr__(self, "kind", SpatialWeightKind.parse(self.kind))


@dataclass
class Evaluation:
    cost: CostBreakdown
    gradient: np.ndarray  # shaped like grid.displacements
    warped: Volume3D
    timings: dict = field(default_factory=dict)


def warp_moving(moving: Volume3D, grid: FFDGrid, workers: int = 1):
    """Backward-warp ``moving`` through the FFD; also returns the interpolant gradient."""
    u = densify(grid).data
    x, y, z = voxel_grid(grid.image_dims)
    px = np.ascontiguousarray(x + u[..., 0])
    py = np.ascontiguousarray(y + u[..., 1])
    pz = np.ascontiguousarray(z + u[..., 2])
    out = np.empty(px.shape)
    gx, gy, gz = (np.empty(px.shape) for _ in range(3))
    run_chunks(lambda k0, k1: sample_grad_slab(moving.data, px, py, pz, out, gx, gy, gz, k0, k1),
               px.shape[0], workers)
    return out, np.stack([gx, gy, gz], axis=-1)


def evaluate(plan: EvalPlan, fixed: Volume3D, moving: Volume3D, grid: FFDGrid) -> Evaluation:
    if fixed.dims != moving.dims:
        raise ValueError(f"fixed dims {fixed.dims} != moving dims {moving.dims}")
    if tuple(grid.image_dims) != fixed.dims:
        raise ValueError(f"grid built for {grid.image_dims}, images are {fixed.dims}")
    timings = {}
    w = plan.workers
    moving_is_b = plan.orientation.moving_as == "B"

    t0 = time.perf_counter()
    warped, grad_m = warp_moving(moving, grid, w)
    timings["warp"] = time.perf_counter() - t0
    if moving_is_b:
        a, b = fixed.data, warped
    else:
        a, b = warped, fixed.data

    t0 = time.perf_counter()
    if plan.metric == "srwcr":
        pdf = build_regional_pdf(a, b, grid, plan.kind, plan.bins, w)
        timings["histogram"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        stats = regional_stats(pdf, plan.bins)
        similarity = srwcr(pdf, stats)
        timings["stats"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        dd = srwcr_voxel_derivative(pdf, stats, a, b, grid, plan.kind, plan.bins, moving_is_b, w)
        del pdf
    else:
        rstats = raptor_lattice_stats(a, b, grid, plan.bins, w)
        timings["histogram"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        similarity = rstats.value
        timings["stats"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        dd = raptor_voxel_derivative(rstats, a, b, grid, plan.bins, moving_is_b, w)
    timings["voxel_derivative"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    penalty, penalty_grad = bending_energy(grid)
    grad = assemble_param_gradient(VoxelDerivTables(dd, grad_m), grid, penalty_grad, plan.penalty_weight)
    timings["assembly"] = time.perf_counter() - t0

    cost = CostBreakdown(similarity, penalty, plan.penalty_weight, similarity + plan.penalty_weight * penalty)
    return Evaluation(cost, grad, Volume3D(warped, fixed.spacing), timings)


def cost_only(plan: EvalPlan, fixed: Volume3D, moving: Volume3D, grid: FFDGrid) -> CostBreakdown:
    """Cost without the gradient stages (finite-difference oracles use this)."""
    warped, _ = warp_moving(moving, grid, plan.workers)
    a, b = (fixed.data, warped) if plan.orientation.moving_as == "B" else (warped, fixed.data)
    if plan.metric == "srwcr":
        pdf = build_regional_pdf(a, b, grid, plan.kind, plan.bins, plan.workers)
        similarity = srwcr(pdf, regional_stats(pdf, plan.bins))
    else:
        similarity = raptor_lattice_stats(a, b, grid, plan.bins, plan.workers).value
    penalty = bending_energy(grid)[0]
    return CostBreakdown(similarity, penalty, plan.penalty_weight, similarity + plan.penalty_weight * penalty)
