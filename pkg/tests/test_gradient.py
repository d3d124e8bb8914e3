import numpy as np
import pytest

from srwcr.bspline import FFDGrid
from srwcr.engine import EvalPlan, evaluate
from srwcr.gradcheck import gradcheck, random_case
from srwcr.gradient import VoxelDerivTables, assemble_param_gradient, dD_dA, dD_dB
from srwcr.histogram import BinConfig, build_regional_pdf, regional_stats
from srwcr.metric import Orientation, srwcr
from srwcr.volume import Volume3D

CFG = BinConfig(7)


def value(A, B, grid, kind="bspline"):
    pdf = build_regional_pdf(A, B, grid, kind, CFG)
    return srwcr(pdf, regional_stats(pdf, CFG))


def voxel_fd(A, B, grid, wrt, kind="bspline", step=1e-3):
    out = np.zeros(A.shape)
    img = A if wrt == "A" else B
    for idx in np.ndindex(A.shape):
        x0 = img[idx]
        img[idx] = x0 + step
        up = value(A, B, grid, kind)
        img[idx] = x0 - step
        down = value(A, B, grid, kind)
        img[idx] = x0
        out[idx] = (up - down) / (2 * step)
    return out


def analytic(A, B, grid, wrt, kind="bspline"):
    pdf = build_regional_pdf(A, B, grid, kind, CFG)
    stats = regional_stats(pdf, CFG)
    fn = dD_dA if wrt == "A" else dD_dB
    return fn(pdf, stats, A, B, grid, kind, CFG)


def random_pair(rng, shape=(6, 6, 6)):
    A = rng.uniform(0.05, 6.95, shape)
    B = np.clip(0.6 * A + rng.uniform(0, 2.5, shape), 0, 7)
    return A, B


@pytest.mark.parametrize("kind", ["bspline", "boxcar"])
@pytest.mark.parametrize("wrt", ["A", "B"])
def test_voxel_derivative_matches_fd(rng, kind, wrt):
    A, B = random_pair(rng)
    grid = FFDGrid.zeros((6, 6, 6), 2.0)
    got = analytic(A, B, grid, wrt, kind)
    want = voxel_fd(A, B, grid, wrt, kind)
    assert np.abs(got - want).max() < 1e-5
    # sign check: the field is not trivially zero
    assert np.abs(want).max() > 1e-4


def test_dd_db_at_global_minimum(rng):
    A = rng.integers(1, 7, (6, 6, 6)).astype(float)
    B = A.copy()
    grid = FFDGrid.zeros((6, 6, 6), 2.0)
    assert abs(value(A, B, grid)) < 1e-12
    got = analytic(A, B, grid, "B")
    direction = rng.normal(size=A.shape)
    step = 1e-3
    fd = (value(A, B + step * direction, grid) - value(A, B - step * direction, grid)) / (2 * step)
    assert abs(fd - (got * direction).sum()) < 1e-5


def test_constant_model_image_gives_zero(rng):
    A = np.full((4, 4, 4), 3.0)
    B = rng.uniform(0, 7, (4, 4, 4))
    grid = FFDGrid.zeros((4, 4, 4), 2.0)
    for wrt in ("A", "B"):
        got = analytic(A, B, grid, wrt)
        assert np.abs(got).max() < 1e-12
        assert np.abs(voxel_fd(A, B, grid, wrt)).max() < 1e-9


def test_zero_tables_give_zero_gradient():
    grid = FFDGrid.zeros((8, 8, 8), 3.0)
    tables = VoxelDerivTables(np.zeros((8, 8, 8)), np.ones((8, 8, 8, 3)))
    assert not assemble_param_gradient(tables, grid).any()


def test_node_without_support_has_zero_gradient(rng):
    # dims 17, spacing 4: the last node sits 8 voxels past the last voxel
    fixed, moving, grid = random_case(17, 4.0, seed=3)
    ev = evaluate(EvalPlan(), fixed, moving, grid)
    assert grid.node_position((grid.node_dims[0] - 1, 0, 0))[0] == 24.0
    assert not ev.gradient[:, :, -1].any()
    assert np.abs(ev.gradient[:, :, :-1]).max() > 0


def test_gradient_is_zero_at_constructed_optimum():
    # integer shift representable exactly: every node displaced by (2, 0, -1)
    shape = (20, 20, 20)
    rng = np.random.default_rng(5)
    base = rng.integers(0, 32, shape).astype(float)
    grid = FFDGrid.zeros(shape, 5.0)
    grid.displacements[..., 0] = 2.0
    grid.displacements[..., 2] = -1.0
    z, y, x = np.indices(shape)
    fixed = base[np.clip(z - 1, 0, 19), y, np.clip(x + 2, 0, 19)]
    for mas in ("A", "B"):
        ev = evaluate(EvalPlan(Orientation(mas)), Volume3D(fixed), Volume3D(base), grid)
        assert ev.cost.similarity == pytest.approx(0.0, abs=1e-12)
        assert np.linalg.norm(ev.gradient) < 1e-6


def test_parameter_gradient_sampled_components():
    # ten random node components, central differences with a 0.01 voxel step
    fixed, moving, grid = random_case(16, 4.0, seed=0)
    comps = np.sort(np.random.default_rng(0).choice(grid.displacements.size, 10, replace=False))
    for mas in ("A", "B"):
        for kind in ("bspline", "boxcar"):
            rep = gradcheck(EvalPlan(Orientation(mas), kind), fixed, moving, grid, 0.01, comps)
            assert rep.passed(), [(c.index, c.analytic, c.numeric) for c in rep.failures()]


def test_parameter_gradient_small_step():
    # a step small enough that few voxels cross a kink of the Parzen window
    fixed, moving, grid = random_case(16, 4.0, seed=1)
    comps = np.random.default_rng(1).choice(grid.displacements.size, 40, replace=False)
    for mas in ("A", "B"):
        for kind in ("bspline", "boxcar"):
            rep = gradcheck(EvalPlan(Orientation(mas), kind), fixed, moving, grid, 1e-5, comps)
            assert rep.max_rel < 1e-3
