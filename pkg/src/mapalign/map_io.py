"""MRC2014 reading/writing and Gaussian-kernel map synthesis.

Map data is held as a float64 array indexed ``data[ix, iy, iz]`` so that voxel
``(i, j, k)`` sits at world position ``origin + (i, j, k) * voxel_size``.  MRC
files store the x index fastest, which is the transpose of that layout.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DensityMap",
    "MRCError",
    "read_mrc",
    "write_mrc",
    "encode_mrc",
    "decode_mrc",
    "synthesize_map",
    "add_noise",
    "KERNEL_WIDTH_PER_RESOLUTION",
    "SYNTH_CONTOUR_FRACTION",
]

HEADER_BYTES = 1024
DEFAULT_MAX_VOXELS = 1024**3

# molmap convention: Gaussian std = resolution / (pi * sqrt(2))
KERNEL_WIDTH_PER_RESOLUTION = 1.0 / (math.pi * math.sqrt(2.0))
SYNTH_CONTOUR_FRACTION = 0.1

_MODE_DTYPES = {0: "i1", 1: "i2", 2: "f4"}
_LITTLE_STAMP = bytes([0x44, 0x44, 0x00, 0x00])
_BIG_STAMP = bytes([0x11, 0x11, 0x00, 0x00])
_CONTOUR_LABEL = "mapalign contour_level="


class MRCError(ValueError):
    """Raised for malformed, truncated or unsupported MRC input."""


@dataclass(frozen=True, eq=False)
class DensityMap:
    """Scalar density on a regular voxel grid.

    Parameters
    ----------
    data : ndarray, shape (nx, ny, nz)
        Density per voxel, x index first.
    voxel_size : array_like, shape (3,)
        Angstrom per voxel along x, y, z.
    origin : array_like, shape (3,)
        World position of voxel (0, 0, 0) in Angstrom.
    contour_level : float
        Recommended density threshold.
    """

    data: np.ndarray
    voxel_size: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    contour_level: float = 0.0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"density data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("density data contains non-finite values")
        voxel = np.broadcast_to(np.asarray(self.voxel_size, dtype=np.float64), (3,)).copy()
        if np.any(voxel <= 0) or not np.all(np.isfinite(voxel)):
            raise ValueError(f"voxel_size must be positive, got {voxel}")
        origin = np.broadcast_to(np.asarray(self.origin, dtype=np.float64), (3,)).copy()
        for arr in (data, voxel, origin):
            arr.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", voxel)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "contour_level", float(self.contour_level))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent(self) -> np.ndarray:
        """World-space position of the last voxel, relative to the origin."""
        return (np.array(self.dims) - 1) * self.voxel_size

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin.copy(), self.origin + self.extent

    def voxel_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-axis world coordinates of voxel centres."""
        return tuple(self.origin[a] + np.arange(self.dims[a]) * self.voxel_size[a] for a in range(3))

    def with_contour(self, level: float) -> DensityMap:
        return DensityMap(self.data, self.voxel_size, self.origin, level)

    def above_contour_volume(self) -> float:
        """Volume (A^3) of the bounding box of voxels at or above contour."""
        idx = np.argwhere(self.data >= self.contour_level)
        if len(idx) == 0:
            return 0.0
        span = (idx.max(axis=0) - idx.min(axis=0) + 1) * self.voxel_size
        return float(np.prod(span))


# ---------------------------------------------------------------------------
# MRC2014
# ---------------------------------------------------------------------------


def _detect_byte_order(header: bytes, max_voxels: int) -> str:
    # MACHST first byte: 0x44 (or 0x41) little-endian, 0x11 big-endian
    candidates = (">", "<") if header[212] == 0x11 else ("<", ">")
    for order in candidates:
        nx, ny, nz, mode = struct.unpack(order + "4i", header[:16])
        if min(nx, ny, nz) >= 1 and nx * ny * nz <= max_voxels and 0 <= mode <= 16:
            return order
    raise MRCError("header dimensions are not plausible in either byte order")


def decode_mrc(raw: bytes, max_voxels: int = DEFAULT_MAX_VOXELS) -> DensityMap:
    """Parse MRC2014 bytes into a :class:`DensityMap`."""
    if len(raw) < HEADER_BYTES:
        raise MRCError(f"file is {len(raw)} bytes, shorter than the {HEADER_BYTES}-byte header")
    header = raw[:HEADER_BYTES]
    order = _detect_byte_order(header, max_voxels)
    ints = struct.unpack(order + "256i", header)
    floats = struct.unpack(order + "256f", header)

    nx, ny, nz, mode = ints[0:4]
    if nx * ny * nz > max_voxels:
        raise MRCError(f"dims {nx}x{ny}x{nz} exceed the safety cap of {max_voxels} voxels")
    if mode not in _MODE_DTYPES:
        raise MRCError(f"unsupported MRC mode {mode}")
    axes = ints[16:19]
    if tuple(axes) != (1, 2, 3):
        raise MRCError(f"axis order MAPC/MAPR/MAPS={axes} is not supported (only 1/2/3)")

    nstart = np.array(ints[4:7], dtype=np.float64)
    sampling = np.array(ints[7:10], dtype=np.float64)
    cell = np.array(floats[10:13], dtype=np.float64)
    sampling[sampling <= 0] = np.array([nx, ny, nz], dtype=np.float64)[sampling <= 0]
    voxel = cell / sampling
    if np.any(voxel <= 0):
        voxel = np.ones(3)
    origin = np.array(floats[49:52], dtype=np.float64)
    if not np.any(origin):
        origin = nstart * voxel

    nsymbt = ints[23]
    offset = HEADER_BYTES + max(nsymbt, 0)
    dtype = np.dtype(_MODE_DTYPES[mode]).newbyteorder(order)
    count = nx * ny * nz
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise MRCError(f"file truncated: expected {need} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = values.reshape(nz, ny, nx).transpose(2, 1, 0).astype(np.float64)

    contour = _read_contour_label(header, ints[55])
    if contour is None:
        contour = float(data.mean() + 2.0 * data.std())
    return DensityMap(data, voxel, origin, contour)


def _read_contour_label(header: bytes, nlabl: int) -> float | None:
    for i in range(min(max(nlabl, 0), 10)):
        label = header[224 + 80 * i : 224 + 80 * (i + 1)].decode("ascii", "replace").strip()
        if label.startswith(_CONTOUR_LABEL):
            try:
                return float(label[len(_CONTOUR_LABEL) :])
            except ValueError:
                return None
    return None


def read_mrc(path, max_voxels: int = DEFAULT_MAX_VOXELS) -> DensityMap:
    """Read an uncompressed MRC2014 map (modes 0, 1, 2; either byte order).

    The contour level is taken from a label written by :func:`write_mrc` when
    present, otherwise it defaults to ``mean + 2 * std`` of the data.
    """
    return decode_mrc(Path(path).read_bytes(), max_voxels=max_voxels)


def encode_mrc(m: DensityMap) -> bytes:
    """Serialise ``m`` as little-endian MODE 2 MRC2014 bytes."""
    nx, ny, nz = m.dims
    ints = [0] * 256
    ints[0:4] = [nx, ny, nz, 2]
    ints[7:10] = [nx, ny, nz]
    ints[16:19] = [1, 2, 3]
    ints[22] = 1  # ISPG
    ints[27] = 20140  # NVERSION
    ints[55] = 1  # NLABL
    header = bytearray(struct.pack("<256i", *ints))

    values = m.data.transpose(2, 1, 0).astype("<f4")
    stored = values.astype(np.float64)
    floats = {
        10: m.dims[0] * m.voxel_size[0],
        11: m.dims[1] * m.voxel_size[1],
        12: m.dims[2] * m.voxel_size[2],
        13: 90.0,
        14: 90.0,
        15: 90.0,
        19: stored.min(),
        20: stored.max(),
        21: stored.mean(),
        49: m.origin[0],
        50: m.origin[1],
        51: m.origin[2],
        54: stored.std(),
    }
    for word, value in floats.items():
        struct.pack_into("<f", header, 4 * word, value)
    header[208:212] = b"MAP "
    header[212:216] = _LITTLE_STAMP
    label = f"{_CONTOUR_LABEL}{m.contour_level!r}".encode("ascii")[:80]
    header[224 : 224 + 80] = label.ljust(80, b" ")
    return bytes(header) + values.tobytes(order="C")


def write_mrc(m: DensityMap, path) -> None:
    """Write ``m`` as a MODE 2 little-endian MRC2014 file.

    Voxel size and origin are stored as float32 header words, so they
    round-trip exactly only when representable in single precision.
    """
    Path(path).write_bytes(encode_mrc(m))


# ---------------------------------------------------------------------------
# Synthetic maps
# ---------------------------------------------------------------------------


def synthesize_map(
    centers,
    weights=None,
    resolution: float = 5.0,
    voxel_size: float = 1.0,
    padding: float = 10.0,
    contour_fraction: float = SYNTH_CONTOUR_FRACTION,
) -> DensityMap:
    """Sum isotropic Gaussians on a grid covering ``centers`` plus ``padding``.

    Each centre contributes ``w * exp(-|x - c|^2 / (2 s^2))`` with
    ``s = resolution * KERNEL_WIDTH_PER_RESOLUTION``.  The grid is centred on the
    centres' bounding box, so a symmetric configuration gives a symmetric map.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.shape[0] < 1 or centers.shape[1] != 3:
        raise ValueError("need at least one 3D centre")
    if weights is None:
        weights = np.ones(len(centers))
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), (len(centers),))
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    if resolution <= 0 or voxel_size <= 0 or padding < 0:
        raise ValueError("resolution and voxel_size must be positive, padding non-negative")

    lo = centers.min(axis=0) - padding
    hi = centers.max(axis=0) + padding
    span = hi - lo
    if np.any(span <= 0):
        raise ValueError("degenerate bounding box: add padding or spread the centres")
    n = np.ceil(span / voxel_size - 1e-9).astype(int) + 1
    origin = lo - ((n - 1) * voxel_size - span) / 2.0

    s = resolution * KERNEL_WIDTH_PER_RESOLUTION
    axes = [origin[a] + np.arange(n[a]) * voxel_size for a in range(3)]
    data = np.zeros(tuple(n))
    cutoff = 6.0 * s
    for c, w in zip(centers, weights):
        # separable evaluation restricted to a 6s box around the centre
        sl = []
        parts = []
        for a in range(3):
            i0 = max(int(np.floor((c[a] - cutoff - origin[a]) / voxel_size)), 0)
            i1 = min(int(np.ceil((c[a] + cutoff - origin[a]) / voxel_size)) + 1, n[a])
            sl.append(slice(i0, i1))
            parts.append(np.exp(-((axes[a][i0:i1] - c[a]) ** 2) / (2 * s * s)))
        data[tuple(sl)] += w * parts[0][:, None, None] * parts[1][None, :, None] * parts[2][None, None, :]
    peak = float(data.max())
    return DensityMap(data, voxel_size, origin, contour_fraction * peak)


def add_noise(m: DensityMap, fraction: float, rng: np.random.Generator) -> DensityMap:
    """Add i.i.d. Gaussian noise with std ``fraction * max(data)``; contour unchanged."""
    sigma = fraction * float(np.abs(m.data).max())
    noisy = m.data + rng.normal(0.0, sigma, size=m.data.shape)
    return DensityMap(noisy, m.voxel_size, m.origin, m.contour_level)
