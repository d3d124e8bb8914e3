import numpy as np
import pytest

from oracles import hausdorff_brute, mhd_brute
from srwcr.bspline import DisplacementField
from srwcr.evaluation import (PointSet, generate_synthetic, grid_pattern, hausdorff, load_points, mean_tre, mhd,
                              random_warp, rmse_displacement, save_points)
from srwcr.pipeline import warp_with_field


def initial_rmse(pair):
    return rmse_displacement(DisplacementField.zeros(pair.ground_truth.dims), pair.ground_truth)


def test_rmse_examples(rng):
    gt = DisplacementField(rng.normal(size=(4, 5, 6, 3)))
    assert rmse_displacement(gt, gt) == 0.0
    shifted = DisplacementField(gt.data + (1.0, 0.0, 0.0))
    assert rmse_displacement(shifted, gt) == pytest.approx(1.0, abs=1e-12)
    other = DisplacementField(rng.normal(size=(4, 5, 6, 3)))
    loop = sum(float(((other.data[i] - gt.data[i]) ** 2).sum()) for i in np.ndindex(4, 5, 6)) / 120
    assert rmse_displacement(other, gt) == pytest.approx(np.sqrt(loop), rel=1e-12)
    with pytest.raises(ValueError):
        rmse_displacement(gt, DisplacementField.zeros((6, 5, 5)))


def test_mean_tre(rng):
    f = DisplacementField.zeros((8, 8, 8))
    p = PointSet(rng.uniform(1, 6, (5, 3)))
    assert mean_tre(p, p, f, (1, 1, 1)) == 0.0
    q = PointSet(p.points + (0, 0, 1))
    assert mean_tre(p, q, f, (0.9, 0.9, 2.5)) == pytest.approx(2.5)
    f.data[..., 2] = 1.0
    assert mean_tre(p, q, f, (0.9, 0.9, 2.5)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        mean_tre(p, PointSet(q.points[:3]), f, (1, 1, 1))


def test_surface_distance_examples():
    a = PointSet([[0.0, 0.0, 0.0]])
    b = PointSet([[3.0, 0.0, 0.0]])
    assert hausdorff(a, a) == 0.0 and mhd(a, a) == 0.0
    assert hausdorff(a, b) == 3.0
    two = PointSet([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    assert mhd(two, a) == 1.0
    with pytest.raises(ValueError):
        hausdorff(a, np.zeros((0, 3)))


def test_surface_distances_match_brute_force(rng):
    for _ in range(5):
        xs = rng.normal(size=(50, 3))
        ys = rng.normal(size=(50, 3)) + 0.3
        assert hausdorff(xs, ys) == hausdorff_brute(xs.tolist(), ys.tolist())
        assert mhd(xs, ys) == mhd_brute(xs.tolist(), ys.tolist())
        assert hausdorff(xs, ys) == hausdorff(ys, xs)
        assert mhd(xs, ys) <= hausdorff(xs, ys)


def test_points_round_trip(tmp_path, rng):
    p = PointSet(rng.uniform(size=(7, 3)), "mm")
    path = tmp_path / "pts.txt"
    save_points(p, path)
    back = load_points(path, "mm")
    assert np.array_equal(back.points, p.points) and back.unit == "mm"
    path.write_text("1 2\n")
    with pytest.raises(ValueError):
        load_points(path)


def test_grid_pattern():
    v = grid_pattern((64, 64, 64))
    assert set(np.unique(v.data)) == {0.0, 31.0}
    on = np.flatnonzero(v.data[3, 3] > 0)
    assert list(on) == [7, 8, 23, 24, 39, 40, 55, 56]
    # same margin at both borders
    assert on[0] == 63 - on[-1]


def test_zero_amplitude_is_identity():
    pair = generate_synthetic((32, 32, 32), 0.0, 16.0, seed=1)
    assert not pair.ground_truth.data.any()
    assert np.array_equal(pair.warped.data, pair.original.data)


def test_seeded_reproducibility():
    a = generate_synthetic((32, 32, 32), 5.0, 16.0, seed=9)
    b = generate_synthetic((32, 32, 32), 5.0, 16.0, seed=9)
    c = generate_synthetic((32, 32, 32), 5.0, 16.0, seed=10)
    assert np.array_equal(a.ground_truth.data, b.ground_truth.data)
    assert np.array_equal(a.warped.data, b.warped.data)
    assert not np.array_equal(a.ground_truth.data, c.ground_truth.data)


def test_warped_is_backward_warp_of_original():
    pair = generate_synthetic((40, 36, 32), 5.0, 16.0, seed=2)
    assert np.array_equal(pair.warped.data, warp_with_field(pair.original, pair.ground_truth).data)


def test_amplitude_monotone():
    values = [initial_rmse(generate_synthetic((48, 48, 48), a, 16.0, seed=3)) for a in (1.0, 3.0, 5.0, 7.0)]
    assert all(b > a for a, b in zip(values, values[1:]))
    assert values[-1] / values[0] == pytest.approx(7.0, rel=1e-9)


def test_generator_guards():
    with pytest.raises(ValueError):
        generate_synthetic((32, 32, 32), 8.0, 16.0)
    with pytest.raises(ValueError):
        generate_synthetic((16, 32, 32), 1.0, 16.0)


def test_field_fades_to_border():
    f = random_warp((64, 64, 64), 7.5, 16.0, np.random.default_rng(0)).data
    interior = np.abs(f[16:48, 16:48, 16:48]).mean()
    face = np.abs(f[:, :, 0]).mean()
    assert face < interior


def test_default_calibration_band():
    # ten default pairs; only the fields are needed for the initial error
    values = [rmse_displacement(DisplacementField.zeros((128,) * 3),
                                random_warp((128,) * 3, 15.0, 32.0, np.random.default_rng(s)))
              for s in range(10)]
    assert 4.2 <= np.mean(values) <= 4.7
