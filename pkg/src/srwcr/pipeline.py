"""Multi-resolution registration driver and its configuration file."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bspline import DisplacementField, FFDGrid, SpatialWeightKind, compose, densify, resample_field
from .engine import EvalPlan, evaluate
from .histogram import BinConfig
from .metric import PENALTY_MONO, PENALTY_MULTI, Orientation
from .optimizer import LbfgsConfig, minimize
from .volume import Volume3D, build_pyramid, normalize_intensity, voxel_grid

log = logging.getLogger(__name__)

MIN_LEVEL_DIM = 16

CONFIG_KEYS = (
    "levels", "grid_spacing", "bins", "penalty_weight", "orientation", "weight_kind", "threads",
    "deterministic", "max_iter_l0", "max_iter_l1", "max_iter_l2", "intensity_window",
    # extensions
    "metric", "multimodal",
)


@dataclass(frozen=True)
class RegistrationConfig:
    levels: int = 3
    grid_spacing: tuple[float, float, float] = (5.0, 5.0, 5.0)
    bins: int = 31
    penalty_weight: float = PENALTY_MONO
    orientation: Orientation = Orientation("A", "original")
    weight_kind: SpatialWeightKind = SpatialWeightKind.CUBIC_BSPLINE
    max_iter: tuple[int, ...] = (200, 200, 120)
    intensity_window: tuple[float, float] | None = None
    threads: int = 1
    deterministic: bool = True
    metric: str = "srwcr"
    optimizer: LbfgsConfig = LbfgsConfig()

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if min(self.grid_spacing) < 2:
            raise ValueError(f"grid spacing must be >= 2 voxels, got {self.grid_spacing}")
        object.__setattr__(self, "weight_kind", SpatialWeightKind.parse(self.weight_kind))
        object.__setattr__(self, "orientation", Orientation.parse(self.orientation))

    def iterations(self, level: int) -> int:
        """Iteration cap for ``level`` (0 = coarsest); the finest level uses the last entry."""
        caps = list(self.max_iter)
        offset = len(caps) - self.levels
        i = level + offset
        return caps[max(0, min(i, len(caps) - 1))]

    def plan(self) -> EvalPlan:
        return EvalPlan(self.orientation, self.weight_kind, BinConfig(self.bins), self.threads,
                        self.deterministic, self.penalty_weight, self.metric)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _triple(text: str) -> tuple[float, float, float]:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise ValueError(f"expected one or three numbers, got {text!r}")
    return tuple(vals)


def load_config(path) -> RegistrationConfig:
    """Read ``key = value`` lines; unknown keys are an error."""
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        entries[key] = value
    return config_from_entries(entries)


def config_from_entries(entries: dict) -> RegistrationConfig:
    kw = {}
    if "levels" in entries:
        kw["levels"] = int(entries["levels"])
    if "grid_spacing" in entries:
        kw["grid_spacing"] = _triple(entries["grid_spacing"])
    if "bins" in entries:
        kw["bins"] = int(entries["bins"])
    if "multimodal" in entries and _bool(entries["multimodal"]):
        kw["penalty_weight"] = PENALTY_MULTI
    if "penalty_weight" in entries:
        kw["penalty_weight"] = float(entries["penalty_weight"])
    if "orientation" in entries:
        kw["orientation"] = Orientation.parse(entries["orientation"])
    if "weight_kind" in entries:
        kw["weight_kind"] = SpatialWeightKind.parse(entries["weight_kind"])
    if "threads" in entries:
        kw["threads"] = int(entries["threads"])
    if "deterministic" in entries:
        kw["deterministic"] = _bool(entries["deterministic"])
    if "metric" in entries:
        kw["metric"] = entries["metric"].strip().lower()
    caps = list(RegistrationConfig.max_iter)
    for i in range(3):
        key = f"max_iter_l{i}"
        if key in entries:
            caps[i] = int(entries[key])
    kw["max_iter"] = tuple(caps)
    if "intensity_window" in entries and entries["intensity_window"].strip().lower() not in ("", "none"):
        lo, hi = (float(v) for v in entries["intensity_window"].replace(",", " ").split())
        kw["intensity_window"] = (lo, hi)
    return RegistrationConfig(**kw)


@dataclass
class LevelTrace:
    level: int
    dims: tuple[int, int, int]
    costs: list
    iterations: int
    reason: str
    evaluations: int


@dataclass
class RegistrationResult:
    field: DisplacementField
    warped: Volume3D
    traces: list = field(default_factory=list)

    @property
    def reasons(self) -> list[str]:
        return [t.reason for t in self.traces]


def warp_with_field(v: Volume3D, f: DisplacementField) -> Volume3D:
    """Backward warp: ``out(x) = v(x + f(x))`` with trilinear, border-clamped sampling."""
    if v.dims != f.dims:
        raise ValueError(f"volume dims {v.dims} != field dims {f.dims}")
    from .volume import sample_slab

    x, y, z = voxel_grid(v.dims)
    px = np.ascontiguousarray(x + f.data[..., 0])
    py = np.ascontiguousarray(y + f.data[..., 1])
    pz = np.ascontiguousarray(z + f.data[..., 2])
    out = np.empty(px.shape)
    sample_slab(v.data, px, py, pz, out, 0, px.shape[0])
    return v.with_data(out)


def register(fixed: Volume3D, moving: Volume3D, cfg: RegistrationConfig = RegistrationConfig(),
             callback=None) -> RegistrationResult:
    """Coarse-to-fine FFD registration of ``moving`` onto ``fixed``.

    Each level optimizes a fresh identity FFD on the original moving image
    pre-warped by the field accumulated so far, then composes the result into
    that field.  The returned field maps fixed-grid voxels into the moving
    image, in finest-level voxels.
    """
    if fixed.dims != moving.dims:
        raise ValueError(f"fixed dims {fixed.dims} != moving dims {moving.dims}")
    f_norm = normalize_intensity(fixed, cfg.bins, cfg.intensity_window)
    m_norm = normalize_intensity(moving, cfg.bins, cfg.intensity_window)
    for name, v in (("fixed", f_norm), ("moving", m_norm)):
        if not v.data.any():
            raise ValueError(f"{name} image is constant after normalization")
    f_pyr = build_pyramid(f_norm, cfg.levels)
    m_pyr = build_pyramid(m_norm, cfg.levels)
    plan = cfg.plan()
    accumulated = None
    traces = []
    for level, (f_l, m_l) in enumerate(zip(f_pyr, m_pyr)):
        dims = f_l.dims
        if min(dims) < MIN_LEVEL_DIM:
            raise ValueError(f"level {level} dims {dims} are below {MIN_LEVEL_DIM} voxels; use fewer levels")
        if accumulated is None:
            accumulated = DisplacementField.zeros(dims)
        else:
            accumulated = resample_field(accumulated, dims, 2.0)
        m_pre = warp_with_field(m_l, accumulated)
        grid = FFDGrid.zeros(dims, cfg.grid_spacing)
        shape = grid.displacements.shape

        last = {}

        def objective(x, grid=grid, f_l=f_l, m_pre=m_pre, last=last):
            grid.displacements[:] = x.reshape(shape)
            ev = evaluate(plan, f_l, m_pre, grid)
            last[ev.cost.total] = ev.cost
            return ev.cost.total, ev.gradient.ravel()

        def level_cb(state, step, level=level, last=last):
            c = last.get(state.cost)
            last.clear()
            if c is not None:
                log.debug("level %d iter %d cost %.9g similarity %.9g penalty %.6g |g| %.3e step %.3e", level,
                          state.iteration, state.cost, c.similarity, c.penalty, float(np.linalg.norm(state.grad)),
                          step)
            if callback is not None:
                callback(level, state, step)

        opt_cfg = replace(cfg.optimizer, max_iter=cfg.iterations(level))
        res = minimize(objective, grid.displacements.ravel(), opt_cfg, level_cb)
        grid.displacements[:] = res.x.reshape(shape)
        accumulated = compose(accumulated, densify(grid))
        traces.append(LevelTrace(level, dims, res.costs, res.iterations, res.reason, res.evaluations))
        log.info("level %d dims %s: %d iterations, cost %.6g -> %.6g (%s)", level, dims, res.iterations,
                 res.costs[0], res.cost, res.reason)
    return RegistrationResult(accumulated, warp_with_field(m_norm, accumulated), traces)


def transform_landmarks(points, f: DisplacementField) -> np.ndarray:
    from .evaluation import transform_landmarks as _tl

    return _tl(points, f)


@dataclass
class BenchmarkRun:
    orientation: Orientation
    initial_rmse: float
    final_rmse: float
    result: RegistrationResult


def run_synthetic(pair, cfg: RegistrationConfig = RegistrationConfig()) -> BenchmarkRun:
    """Register one synthetic pair in ``cfg.orientation`` and score it against the ground truth.

    With the original image moving, the recovered field is compared with the
    ground truth directly; with the warped image moving it is inverted first.
    """
    from .bspline import invert_field
    from .evaluation import rmse_displacement

    o = cfg.orientation
    if o.moving == "original":
        fixed, moving = pair.warped, pair.original
    else:
        fixed, moving = pair.original, pair.warped
    result = register(fixed, moving, cfg)
    estimate = result.field if o.moving == "original" else invert_field(result.field)
    initial = rmse_displacement(DisplacementField.zeros(pair.ground_truth.dims), pair.ground_truth)
    return BenchmarkRun(o, initial, rmse_displacement(estimate, pair.ground_truth), result)
