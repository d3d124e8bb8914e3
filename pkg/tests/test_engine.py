import numpy as np
import pytest

from srwcr.bspline import FFDGrid
from srwcr.engine import EvalPlan, cost_only, evaluate
from srwcr.gradcheck import random_case
from srwcr.metric import Orientation
from srwcr.volume import Volume3D


@pytest.mark.parametrize("metric", ["srwcr", "raptor"])
@pytest.mark.parametrize("mas", ["A", "B"])
def test_worker_count_is_bitwise_invariant(mas, metric):
    fixed, moving, grid = random_case(24, 5.0, seed=2, amplitude=1.0)
    one = evaluate(EvalPlan(Orientation(mas), workers=1, metric=metric), fixed, moving, grid)
    eight = evaluate(EvalPlan(Orientation(mas), workers=8, metric=metric), fixed, moving, grid)
    assert one.cost == eight.cost
    assert np.array_equal(one.gradient, eight.gradient)
    assert np.array_equal(one.warped.data, eight.warped.data)


def test_evaluate_is_pure():
    fixed, moving, grid = random_case(16, 4.0, seed=4)
    before = grid.displacements.copy()
    a = evaluate(EvalPlan(), fixed, moving, grid)
    b = evaluate(EvalPlan(), fixed, moving, grid)
    assert a.cost == b.cost and np.array_equal(a.gradient, b.gradient)
    assert np.array_equal(grid.displacements, before)


def test_identity_on_identical_integer_images(rng):
    data = rng.integers(0, 32, (16, 16, 16)).astype(float)
    grid = FFDGrid.zeros((16, 16, 16), 4.0)
    ev = evaluate(EvalPlan(), Volume3D(data), Volume3D(data.copy()), grid)
    assert abs(ev.cost.total) < 1e-12
    assert np.linalg.norm(ev.gradient) < 1e-6


def test_cost_only_agrees_with_evaluate():
    fixed, moving, grid = random_case(16, 4.0, seed=6)
    for mas in ("A", "B"):
        for metric in ("srwcr", "raptor"):
            plan = EvalPlan(Orientation(mas), metric=metric)
            assert cost_only(plan, fixed, moving, grid) == evaluate(plan, fixed, moving, grid).cost


def test_stage_timings_reported():
    fixed, moving, grid = random_case(16, 4.0, seed=0)
    ev = evaluate(EvalPlan(), fixed, moving, grid)
    assert set(ev.timings) == {"warp", "histogram", "stats", "voxel_derivative", "assembly"}


def test_penalty_enters_total():
    fixed, moving, grid = random_case(16, 4.0, seed=0)
    ev = evaluate(EvalPlan(penalty_weight=30.0), fixed, moving, grid)
    assert ev.cost.total == ev.cost.similarity + 30.0 * ev.cost.penalty
    assert ev.cost.penalty > 0


def test_plan_and_shape_errors():
    fixed, moving, grid = random_case(16, 4.0, seed=0)
    with pytest.raises(ValueError):
        EvalPlan(workers=0)
    with pytest.raises(ValueError):
        EvalPlan(metric="mi")
    with pytest.raises(ValueError):
        evaluate(EvalPlan(), fixed, Volume3D(np.zeros((8, 8, 8))), grid)
    with pytest.raises(ValueError):
        evaluate(EvalPlan(), fixed, moving, FFDGrid.zeros((8, 8, 8), 4.0))
