"""Scalar 3-D volumes: storage, raw+header I/O, normalization, pyramid, sampling.

Arrays are held in C order with shape ``(nz, ny, nx)`` so that flattening
gives the x-fastest layout used on disk.  Points and dimension tuples are
always given in ``(x, y, z)`` order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage

ELEMENT_TYPES = {
    "float32": np.dtype("<f4"),
    "int16": np.dtype("<i2"),
    "uint8": np.dtype("u1"),
}
HEADER_KEYS = ("dim_size", "spacing", "element_type", "byte_order", "components", "data_file")


class VolumeFormatError(ValueError):
    """Raised for malformed headers or payloads."""


@dataclass(frozen=True)
class Volume3D:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {arr.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def size(self) -> int:
        return self.data.size

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(data, self.spacing)


@dataclass(frozen=True)
class VolumeHeader:
    dim_size: tuple[int, int, int]
    spacing: tuple[float, float, float]
    element_type: str = "float32"
    byte_order: str = "little"
    components: int = 1
    data_file: str = ""
    extra: dict = field(default_factory=dict)

    def expected_bytes(self) -> int:
        n = self.dim_size[0] * self.dim_size[1] * self.dim_size[2]
        return n * self.components * ELEMENT_TYPES[self.element_type].itemsize

    def to_text(self) -> str:
        lines = [
            f"dim_size = {' '.join(str(d) for d in self.dim_size)}",
            f"spacing = {' '.join(repr(float(s)) for s in self.spacing)}",
            f"element_type = {self.element_type}",
            f"byte_order = {self.byte_order}",
            f"components = {self.components}",
            f"data_file = {self.data_file}",
        ]
        return "\n".join(lines) + "\n"


def read_header(path) -> VolumeHeader:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"header not found: {path}")
    entries = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        entries[key] = value
    for key in HEADER_KEYS:
        if key not in entries:
            raise VolumeFormatError(f"{path}: missing key {key!r}")
    try:
        dims = tuple(int(v) for v in entries["dim_size"].split())
    except ValueError:
        raise VolumeFormatError(f"{path}: bad dim_size {entries['dim_size']!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{path}: dim_size must be three positive integers, got {entries['dim_size']!r}")
    try:
        spacing = tuple(float(v) for v in entries["spacing"].split())
    except ValueError:
        raise VolumeFormatError(f"{path}: bad spacing {entries['spacing']!r}") from None
    if len(spacing) != 3 or min(spacing) <= 0:
        raise VolumeFormatError(f"{path}: spacing must be three positive numbers, got {entries['spacing']!r}")
    etype = entries["element_type"]
    if etype not in ELEMENT_TYPES:
        raise VolumeFormatError(f"{path}: unsupported element_type {etype!r}")
    if entries["byte_order"] != "little":
        raise VolumeFormatError(f"{path}: unsupported byte_order {entries['byte_order']!r}")
    try:
        comps = int(entries["components"])
    except ValueError:
        raise VolumeFormatError(f"{path}: bad components {entries['components']!r}") from None
    if comps not in (1, 3):
        raise VolumeFormatError(f"{path}: components must be 1 or 3, got {comps}")
    extra = {k: v for k, v in entries.items() if k not in HEADER_KEYS}
    return VolumeHeader(dims, spacing, etype, "little", comps, entries["data_file"], extra)


def read_payload(header_path, header: VolumeHeader) -> np.ndarray:
    """Decode the raw payload into float64 with shape (nz, ny, nx[, 3])."""
    data_path = Path(header_path).parent / header.data_file
    if not data_path.exists():
        raise FileNotFoundError(f"data_file not found: {data_path}")
    raw = data_path.read_bytes()
    if len(raw) != header.expected_bytes():
        raise VolumeFormatError(
            f"{data_path}: payload length mismatch: {len(raw)} bytes, "
            f"header dim_size {header.dim_size} x components {header.components} "
            f"of {header.element_type} needs {header.expected_bytes()}"
        )
    arr = np.frombuffer(raw, dtype=ELEMENT_TYPES[header.element_type]).astype(np.float64)
    nx, ny, nz = header.dim_size
    shape = (nz, ny, nx) if header.components == 1 else (nz, ny, nx, 3)
    return arr.reshape(shape)


def write_payload(header_path, array: np.ndarray, spacing, element_type: str = "float32") -> VolumeHeader:
    header_path = Path(header_path)
    if element_type not in ELEMENT_TYPES:
        raise VolumeFormatError(f"unsupported element_type {element_type!r}")
    comps = 3 if array.ndim == 4 else 1
    nz, ny, nx = array.shape[:3]
    data_file = header_path.with_suffix(".raw").name
    if data_file == header_path.name:
        data_file = header_path.name + ".raw"
    header = VolumeHeader((nx, ny, nz), tuple(spacing), element_type, "little", comps, data_file)
    dtype = ELEMENT_TYPES[element_type]
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        array = np.clip(np.rint(array), info.min, info.max)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    (header_path.parent / data_file).write_bytes(np.ascontiguousarray(array, dtype=dtype).tobytes())
    header_path.write_text(header.to_text())
    return header


def load_volume(header_path) -> Volume3D:
    header = read_header(header_path)
    if header.components != 1:
        raise VolumeFormatError(f"{header_path}: expected a scalar volume, components = {header.components}")
    return Volume3D(read_payload(header_path, header), header.spacing)


def save_volume(vol: Volume3D, header_path, element_type: str = "float32") -> VolumeHeader:
    return write_payload(header_path, vol.data, vol.spacing, element_type)


def normalize_intensity(v: Volume3D, levels: int = 31, window=None) -> Volume3D:
    """Map intensities linearly onto ``[0, levels]``.

    Without ``window`` the volume's own [min, max] is used; with
    ``window=(lo, hi)`` values are clamped to the window first.  A constant
    volume maps to all zeros.
    """
    data = v.data
    if window is not None:
        lo, hi = float(window[0]), float(window[1])
        if not lo < hi:
            raise ValueError(f"window must satisfy lo < hi, got {window}")
        data = np.clip(data, lo, hi)
    else:
        lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return v.with_data(np.zeros_like(data))
    out = (data - lo) * (levels / (hi - lo))
    # guard the endpoints against rounding so [0, levels] holds exactly
    np.clip(out, 0.0, float(levels), out=out)
    return v.with_data(out)


def gaussian_downsample(v: Volume3D, sigma: float = 1.0) -> Volume3D:
    if min(v.dims) < 4:
        raise ValueError(f"every dimension must be >= 4 to downsample, got {v.dims}")
    smooth = ndimage.gaussian_filter(v.data, sigma, mode="constant", cval=0.0, truncate=3.0)
    mass = ndimage.gaussian_filter(np.ones_like(v.data), sigma, mode="constant", cval=0.0, truncate=3.0)
    smooth /= mass
    spacing = tuple(2.0 * s for s in v.spacing)
    return Volume3D(smooth[::2, ::2, ::2], spacing)


def build_pyramid(v: Volume3D, levels: int) -> list[Volume3D]:
    """Resolution pyramid ordered coarse to fine; the last entry is ``v``."""
    out = [v]
    for _ in range(levels - 1):
        out.append(gaussian_downsample(out[-1]))
    return out[::-1]


@numba.njit(cache=True, inline="always")
def _cell(p, n):
    # clamped coordinate -> (lower index, fraction, inside-domain flag)
    inside = 1.0
    if p < 0.0:
        p = 0.0
        inside = 0.0
    elif p > n - 1:
        p = n - 1.0
        inside = 0.0
    if n == 1:
        return 0, 0.0, 0.0
    i = int(math.floor(p))
    if i > n - 2:
        i = n - 2
    return i, p - i, inside


@numba.njit(cache=True)
def _sample_point(vol, px, py, pz):
    nz, ny, nx = vol.shape
    i, fx, _ = _cell(px, nx)
    j, fy, _ = _cell(py, ny)
    k, fz, _ = _cell(pz, nz)
    i1 = min(i + 1, nx - 1)
    j1 = min(j + 1, ny - 1)
    k1 = min(k + 1, nz - 1)
    c00 = vol[k, j, i] * (1 - fx) + vol[k, j, i1] * fx
    c10 = vol[k, j1, i] * (1 - fx) + vol[k, j1, i1] * fx
    c01 = vol[k1, j, i] * (1 - fx) + vol[k1, j, i1] * fx
    c11 = vol[k1, j1, i] * (1 - fx) + vol[k1, j1, i1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@numba.njit(cache=True, nogil=True)
def sample_slab(vol, px, py, pz, out, k0, k1):
    """Trilinear samples for output slices ``k0:k1`` (arrays shaped like out)."""
    for k in range(k0, k1):
        for j in range(out.shape[1]):
            for i in range(out.shape[2]):
                out[k, j, i] = _sample_point(vol, px[k, j, i], py[k, j, i], pz[k, j, i])


@numba.njit(cache=True, nogil=True)
def sample_grad_slab(vol, px, py, pz, out, gx, gy, gz, k0, k1):
    """Trilinear samples plus the exact spatial derivative of the interpolant.

    The derivative along an axis is zero where that coordinate was clamped.
    On cell faces the cell above is used (one-sided derivative).
    """
    nz, ny, nx = vol.shape
    for k in range(k0, k1):
        for j in range(out.shape[1]):
            for i in range(out.shape[2]):
                a, fx, inx = _cell(px[k, j, i], nx)
                b, fy, iny = _cell(py[k, j, i], ny)
                c, fz, inz = _cell(pz[k, j, i], nz)
                a1 = min(a + 1, nx - 1)
                b1 = min(b + 1, ny - 1)
                c1 = min(c + 1, nz - 1)
                v000 = vol[c, b, a]
                v001 = vol[c, b, a1]
                v010 = vol[c, b1, a]
                v011 = vol[c, b1, a1]
                v100 = vol[c1, b, a]
                v101 = vol[c1, b, a1]
                v110 = vol[c1, b1, a]
                v111 = vol[c1, b1, a1]
                c00 = v000 * (1 - fx) + v001 * fx
                c10 = v010 * (1 - fx) + v011 * fx
                c01 = v100 * (1 - fx) + v101 * fx
                c11 = v110 * (1 - fx) + v111 * fx
                e0 = c00 * (1 - fy) + c10 * fy
                e1 = c01 * (1 - fy) + c11 * fy
                out[k, j, i] = e0 * (1 - fz) + e1 * fz
                dx0 = (v001 - v000) * (1 - fy) + (v011 - v010) * fy
                dx1 = (v101 - v100) * (1 - fy) + (v111 - v110) * fy
                gx[k, j, i] = inx * (dx0 * (1 - fz) + dx1 * fz)
                dy0 = c10 - c00
                dy1 = c11 - c01
                gy[k, j, i] = iny * (dy0 * (1 - fz) + dy1 * fz)
                gz[k, j, i] = inz * (e1 - e0)


def trilinear_sample(v: Volume3D, p) -> float:
    """Sample ``v`` at continuous voxel coordinate ``p = (x, y, z)``."""
    return float(_sample_point(v.data, float(p[0]), float(p[1]), float(p[2])))


def sample_at(data: np.ndarray, px, py, pz) -> np.ndarray:
    """Vectorized trilinear sampling of a raw array at coordinate arrays."""
    px, py, pz = (np.ascontiguousarray(np.broadcast_to(np.asarray(c, np.float64), np.shape(px))) for c in (px, py, pz))
    shape = px.shape
    px3, py3, pz3 = (c.reshape((1, 1, -1)) if c.ndim != 3 else c for c in (px, py, pz))
    out = np.empty(px3.shape)
    sample_slab(data, px3, py3, pz3, out, 0, out.shape[0])
    return out.reshape(shape)


def voxel_grid(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integer voxel coordinates broadcastable to shape (nz, ny, nx)."""
    nx, ny, nz = dims
    z, y, x = np.meshgrid(np.arange(nz, dtype=np.float64), np.arange(ny, dtype=np.float64),
                          np.arange(nx, dtype=np.float64), indexing="ij")
    return x, y, z


def image_gradient(v: Volume3D) -> tuple[Volume3D, Volume3D, Volume3D]:
    """Per-axis finite differences (central inside, one-sided at borders), per voxel."""
    if min(v.dims) < 2:
        raise ValueError(f"every dimension must be >= 2 for a gradient, got {v.dims}")
    gz, gy, gx = np.gradient(v.data, edge_order=1)
    return v.with_data(gx), v.with_data(gy), v.with_data(gz)
