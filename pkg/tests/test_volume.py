import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srwcr.volume import (Volume3D, VolumeFormatError, build_pyramid, gaussian_downsample, image_gradient,
                          load_volume, normalize_intensity, read_header, sample_at, save_volume,
                          trilinear_sample, write_payload)


def naive_trilinear(data, p):
    nz, ny, nx = data.shape
    x, y, z = (min(max(c, 0.0), n - 1.0) for c, n in zip(p, (nx, ny, nz)))
    i, j, k = (min(int(np.floor(c)), max(n - 2, 0)) for c, n in zip((x, y, z), (nx, ny, nz)))
    fx, fy, fz = x - i, y - j, z - k
    total = 0.0
    for dk, wz in ((0, 1 - fz), (1, fz)):
        for dj, wy in ((0, 1 - fy), (1, fy)):
            for di, wx in ((0, 1 - fx), (1, fx)):
                total += wx * wy * wz * data[min(k + dk, nz - 1), min(j + dj, ny - 1), min(i + di, nx - 1)]
    return total


def test_round_trip_float32(tmp_path, rng):
    v = Volume3D(rng.uniform(0, 100, (3, 4, 5)).astype(np.float32), (0.5, 1.0, 2.5))
    save_volume(v, tmp_path / "v.mhd")
    back = load_volume(tmp_path / "v.mhd")
    assert back.dims == (5, 4, 3)
    assert back.spacing == (0.5, 1.0, 2.5)
    np.testing.assert_array_equal(back.data, v.data)


@pytest.mark.parametrize("etype", ["int16", "uint8"])
def test_round_trip_integer_types(tmp_path, etype):
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    save_volume(Volume3D(arr), tmp_path / "v.mhd", element_type=etype)
    np.testing.assert_array_equal(load_volume(tmp_path / "v.mhd").data, arr)


def test_header_keys_and_layout(tmp_path):
    arr = np.arange(6, dtype=np.float64).reshape(1, 2, 3)
    save_volume(Volume3D(arr), tmp_path / "v.mhd")
    h = read_header(tmp_path / "v.mhd")
    assert h.dim_size == (3, 2, 1)
    raw = np.frombuffer((tmp_path / h.data_file).read_bytes(), dtype="<f4")
    np.testing.assert_array_equal(raw, np.arange(6))  # x fastest


def test_payload_length_mismatch(tmp_path):
    save_volume(Volume3D(np.zeros((2, 2, 2))), tmp_path / "v.mhd")
    (tmp_path / "v.raw").write_bytes(b"\0" * 12)
    with pytest.raises(VolumeFormatError, match="length mismatch"):
        load_volume(tmp_path / "v.mhd")


def test_missing_key(tmp_path):
    (tmp_path / "v.mhd").write_text("dim_size = 2 2 2\nspacing = 1 1 1\n")
    with pytest.raises(VolumeFormatError, match="missing key"):
        read_header(tmp_path / "v.mhd")


def test_missing_header_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.mhd")


def test_vector_payload_rejected_as_scalar(tmp_path):
    write_payload(tmp_path / "f.mhd", np.zeros((2, 2, 2, 3)), (1, 1, 1))
    assert read_header(tmp_path / "f.mhd").components == 3
    with pytest.raises(VolumeFormatError, match="scalar"):
        load_volume(tmp_path / "f.mhd")


def test_normalize_range_and_constant(rng):
    v = Volume3D(rng.normal(size=(4, 5, 6)) * 50 + 7)
    n = normalize_intensity(v, 31)
    assert n.data.min() == 0.0 and n.data.max() == 31.0
    assert not normalize_intensity(Volume3D(np.full((3, 3, 3), 4.0))).data.any()


def test_normalize_window_clamps():
    v = Volume3D(np.array([-100.0, 0.0, 50.0, 100.0, 400.0]).reshape(1, 1, 5))
    np.testing.assert_allclose(normalize_intensity(v, 10, (0, 100)).data.ravel(), [0, 0, 5, 10, 10])
    with pytest.raises(ValueError):
        normalize_intensity(v, 10, (5, 5))


def test_downsample_constant_and_dims():
    v = Volume3D(np.full((9, 8, 7), 3.0), (1.0, 2.0, 3.0))
    d = gaussian_downsample(v)
    assert d.dims == (4, 4, 5)
    assert d.spacing == (2.0, 4.0, 6.0)
    np.testing.assert_allclose(d.data, 3.0, atol=1e-12)


def test_pyramid_order():
    levels = build_pyramid(Volume3D(np.zeros((32, 32, 32))), 3)
    assert [lv.dims for lv in levels] == [(8, 8, 8), (16, 16, 16), (32, 32, 32)]


def test_sampling_rules(rng):
    data = rng.uniform(size=(4, 5, 6))
    v = Volume3D(data)
    assert trilinear_sample(v, (2, 3, 1)) == data[1, 3, 2]
    assert trilinear_sample(v, (-3, 0, 0)) == data[0, 0, 0]
    assert trilinear_sample(v, (99, 99, 99)) == data[-1, -1, -1]
    assert trilinear_sample(v, (0.5, 0, 0)) == pytest.approx(0.5 * (data[0, 0, 0] + data[0, 0, 1]))


@settings(max_examples=60, deadline=None)
@given(st.tuples(*(st.floats(-2, 8, allow_nan=False) for _ in range(3))))
def test_sampling_matches_naive(p):
    data = np.arange(4 * 5 * 6, dtype=np.float64).reshape(4, 5, 6) ** 1.5
    got = trilinear_sample(Volume3D(data), p)
    assert got == pytest.approx(naive_trilinear(data, p), rel=1e-12, abs=1e-12)


def test_linear_field_reproduced_exactly(rng):
    z, y, x = np.mgrid[:5, :6, :7].astype(float)
    data = 2 * x - 3 * y + 0.5 * z + 1
    pts = rng.uniform(0, 4, (50, 3))
    got = sample_at(data, pts[:, 0], pts[:, 1], pts[:, 2])
    np.testing.assert_allclose(got, 2 * pts[:, 0] - 3 * pts[:, 1] + 0.5 * pts[:, 2] + 1, atol=1e-12)


def test_image_gradient_ramp():
    z, y, x = np.mgrid[:4, :5, :6].astype(float)
    gx, gy, gz = image_gradient(Volume3D(3 * x - y))
    np.testing.assert_allclose(gx.data, 3.0)
    np.testing.assert_allclose(gy.data, -1.0)
    np.testing.assert_allclose(gz.data, 0.0)
