"""Grid sampling, density vectors, mean-shift mode seeking and DBSCAN keypoints."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree

from .map_io import DensityMap

__all__ = [
    "SampledCloud",
    "MeanShiftParams",
    "KeyPointSet",
    "EmptyCloudError",
    "EmptyKeypointsError",
    "DegenerateVectorError",
    "interpolate_density",
    "sample_grid",
    "compute_density_vector",
    "density_vectors",
    "kernel_mean",
    "mean_shift_converge",
    "extract_keypoints",
    "dbscan_labels",
    "write_ply",
    "KERNEL_TRUNCATION",
]

KERNEL_TRUNCATION = 3.0  # in units of the bandwidth
DEGENERATE_SHIFT = 1e-9
MAX_RESTARTS = 5  # extra mean-shift passes used to carry points off saddles


class EmptyCloudError(ValueError):
    """No lattice point reaches the contour level."""


class EmptyKeypointsError(ValueError):
    """DBSCAN labelled every point as noise."""


class DegenerateVectorError(ValueError):
    """The kernel mean coincides with the query point, so no direction exists."""


@dataclass(frozen=True, eq=False)
class SampledCloud:
    """Lattice points above contour with unit density vectors."""

    points: np.ndarray
    vectors: np.ndarray
    sampling_interval: float
    source_contour: float = 0.0

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        vectors = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 3)
        if len(points) != len(vectors):
            raise ValueError("points and vectors differ in length")
        if len(points) == 0:
            raise EmptyCloudError("a sampled cloud needs at least one point")
        if np.any(np.abs(np.linalg.norm(vectors, axis=1) - 1.0) > 1e-6):
            raise ValueError("density vectors must have unit length")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "vectors", vectors)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> SampledCloud:
        """Rigidly move points and rotate vectors."""
        return SampledCloud(
            self.points @ rotation.T + translation,
            self.vectors @ rotation.T,
            self.sampling_interval,
            self.source_contour,
        )

    def subset(self, mask: np.ndarray) -> SampledCloud:
        return SampledCloud(self.points[mask], self.vectors[mask], self.sampling_interval, self.source_contour)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass(frozen=True)
class MeanShiftParams:
    bandwidth: float
    max_iters: int = 200
    tol: float = 1e-2

    def __post_init__(self):
        if self.bandwidth <= 0 or self.max_iters < 1 or self.tol <= 0:
            raise ValueError(f"invalid mean-shift parameters {self}")


@dataclass(frozen=True, eq=False)
class KeyPointSet:
    """Cluster centres of mean-shifted points.

    ``labels`` maps each shifted input point to its cluster (-1 for noise).
    """

    positions: np.ndarray
    member_counts: np.ndarray
    parent_cloud_interval: float
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.positions)


# ---------------------------------------------------------------------------
# Density access
# ---------------------------------------------------------------------------


def interpolate_density(m: DensityMap, points: np.ndarray) -> np.ndarray:
    """Trilinear density at world ``points``; zero outside the grid."""
    points = np.atleast_2d(points)
    idx = ((points - m.origin) / m.voxel_size).T
    return map_coordinates(m.data, idx, order=1, mode="constant", cval=0.0)


def _kernel_weights(m: DensityMap) -> np.ndarray:
    # negative (noise) densities would make the kernel mean ill-defined
    return np.maximum(m.data, 0.0)


@numba.njit(cache=True, parallel=True)
def _kernel_mean_kernel(phi, origin, voxel, sigma, cutoff, points, out, denom):
    nx, ny, nz = phi.shape
    inv = 1.5 / (sigma * sigma)
    r2max = cutoff * cutoff
    for p in numba.prange(points.shape[0]):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        i0 = max(int(math.ceil((px - cutoff - origin[0]) / voxel[0])), 0)
        i1 = min(int(math.floor((px + cutoff - origin[0]) / voxel[0])), nx - 1)
        j0 = max(int(math.ceil((py - cutoff - origin[1]) / voxel[1])), 0)
        j1 = min(int(math.floor((py + cutoff - origin[1]) / voxel[1])), ny - 1)
        k0 = max(int(math.ceil((pz - cutoff - origin[2]) / voxel[2])), 0)
        k1 = min(int(math.floor((pz + cutoff - origin[2]) / voxel[2])), nz - 1)
        sw = 0.0
        sx = 0.0
        sy = 0.0
        sz = 0.0
        for i in range(i0, i1 + 1):
            gx = origin[0] + i * voxel[0]
            dx2 = (gx - px) * (gx - px)
            for j in range(j0, j1 + 1):
                gy = origin[1] + j * voxel[1]
                dxy2 = dx2 + (gy - py) * (gy - py)
                if dxy2 > r2max:
                    continue
                for k in range(k0, k1 + 1):
                    f = phi[i, j, k]
                    if f == 0.0:
                        continue
                    gz = origin[2] + k * voxel[2]
                    d2 = dxy2 + (gz - pz) * (gz - pz)
                    if d2 > r2max:
                        continue
                    w = math.exp(-inv * d2) * f
                    sw += w
                    sx += w * gx
                    sy += w * gy
                    sz += w * gz
        denom[p] = sw
        if sw > 0.0:
            out[p, 0] = sx / sw
            out[p, 1] = sy / sw
            out[p, 2] = sz / sw
        else:
            out[p, 0] = px
            out[p, 1] = py
            out[p, 2] = pz


def kernel_mean(points: np.ndarray, m: DensityMap, bandwidth: float, phi: np.ndarray | None = None):
    """Density-weighted kernel mean around each point.

    Returns ``(means, denominators)``.  Grid points farther than
    ``KERNEL_TRUNCATION * bandwidth`` are ignored; a zero denominator leaves
    the point where it is.
    """
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    if phi is None:
        phi = _kernel_weights(m)
    out = np.empty_like(points)
    denom = np.empty(len(points))
    _kernel_mean_kernel(
        np.ascontiguousarray(phi),
        m.origin,
        m.voxel_size,
        float(bandwidth),
        KERNEL_TRUNCATION * float(bandwidth),
        points,
        out,
        denom,
    )
    return out, denom


def density_vectors(points: np.ndarray, m: DensityMap, params: MeanShiftParams):
    """Unit vectors from each point toward its kernel mean.

    Returns ``(vectors, valid)``; invalid rows (degenerate or empty
    neighbourhoods) hold zeros.
    """
    means, denom = kernel_mean(points, m, params.bandwidth)
    shift = means - np.atleast_2d(points)
    norm = np.linalg.norm(shift, axis=1)
    valid = (denom > 0) & (norm >= DEGENERATE_SHIFT)
    vectors = np.zeros_like(shift)
    vectors[valid] = shift[valid] / norm[valid, None]
    return vectors, valid


def compute_density_vector(x, m: DensityMap, params: MeanShiftParams) -> np.ndarray:
    """Unit direction from ``x`` toward its density-weighted kernel mean."""
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    lo, hi = m.bounds()
    if np.any(x[0] < lo - 1e-9) or np.any(x[0] > hi + 1e-9):
        raise ValueError(f"point {x[0]} lies outside the map bounds")
    means, denom = kernel_mean(x, m, params.bandwidth)
    if denom[0] <= 0:
        raise DegenerateVectorError("no density above contour within the kernel support")
    shift = means[0] - x[0]
    norm = float(np.linalg.norm(shift))
    if norm < DEGENERATE_SHIFT:
        raise DegenerateVectorError(f"kernel mean coincides with {x[0]}")
    return shift / norm


# ---------------------------------------------------------------------------
# Sampling and mode seeking
# ---------------------------------------------------------------------------


def sample_grid(m: DensityMap, interval: float, params: MeanShiftParams | None = None) -> SampledCloud:
    """Keep lattice points (spacing ``interval``, anchored at the map origin)
    whose interpolated density reaches the contour, each with a density vector.

    ``params`` defaults to a bandwidth equal to the interval.  Points whose
    vector is undefined are dropped.
    """
    if interval <= 0:
        raise ValueError("sampling interval must be positive")
    if params is None:
        params = MeanShiftParams(bandwidth=float(interval))
    counts = np.floor(m.extent / interval + 1e-9).astype(int) + 1
    axes = [m.origin[a] + interval * np.arange(counts[a]) for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    keep = interpolate_density(m, grid) >= m.contour_level
    if not np.any(keep):
        raise EmptyCloudError(f"no lattice point reaches contour level {m.contour_level:g}")
    points = grid[keep]
    vectors, valid = density_vectors(points, m, params)
    if not np.any(valid):
        raise EmptyCloudError("every sampled point has an undefined density vector")
    return SampledCloud(points[valid], vectors[valid], float(interval), m.contour_level)


def _shift_until_still(y: np.ndarray, m: DensityMap, params: MeanShiftParams, phi: np.ndarray) -> np.ndarray:
    y = y.copy()
    active = np.arange(len(y))
    for _ in range(params.max_iters):
        nxt, denom = kernel_mean(y[active], m, params.bandwidth, phi=phi)
        step = np.linalg.norm(nxt - y[active], axis=1)
        y[active] = nxt
        active = active[(step >= params.tol) & (denom > 0)]
        if len(active) == 0:
            break
    return y


def mean_shift_converge(cloud: SampledCloud | np.ndarray, m: DensityMap, params: MeanShiftParams) -> np.ndarray:
    """Iterate each point to its density mode.

    A point stops once its step falls below ``params.tol`` or after
    ``params.max_iters`` steps.  A small step can also happen while passing a
    saddle, so the result is re-run until a further pass moves no point by
    more than ``tol`` (at most ``MAX_RESTARTS`` extra passes).
    """
    start = cloud.points if isinstance(cloud, SampledCloud) else np.atleast_2d(cloud)
    if len(start) == 0:
        raise ValueError("mean shift needs at least one point")
    phi = _kernel_weights(m)
    y = _shift_until_still(np.array(start, dtype=np.float64), m, params, phi)
    for _ in range(MAX_RESTARTS):
        again = _shift_until_still(y, m, params, phi)
        if np.max(np.linalg.norm(again - y, axis=1)) <= params.tol:
            break
        y = again
    return y


# ---------------------------------------------------------------------------
# DBSCAN
# ---------------------------------------------------------------------------


def dbscan_labels(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN cluster labels (-1 for noise), expanding seeds in index order.

    ``min_pts`` counts the point itself.
    """
    points = np.atleast_2d(points)
    tree = cKDTree(points)
    neighbours = tree.query_ball_point(points, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neighbours])
    labels = np.full(len(points), -1, dtype=np.int64)
    cluster = 0
    for seed in range(len(points)):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster
        stack = [seed]
        while stack:
            p = stack.pop()
            for q in neighbours[p]:
                if labels[q] == -1:
                    labels[q] = cluster
                    if core[q]:
                        stack.append(q)
        cluster += 1
    return labels


def extract_keypoints(shifted: np.ndarray, eps: float, min_pts: int = 2, interval: float | None = None) -> KeyPointSet:
    """Cluster mean-shifted points and return one keypoint per cluster (its centroid)."""
    shifted = np.atleast_2d(np.asarray(shifted, dtype=np.float64))
    if len(shifted) == 0 or eps <= 0 or min_pts < 1:
        raise ValueError("need points, eps > 0 and min_pts >= 1")
    labels = dbscan_labels(shifted, eps, min_pts)
    n = int(labels.max()) + 1
    if n == 0:
        raise EmptyKeypointsError("all points were classified as noise")
    counts = np.bincount(labels[labels >= 0], minlength=n)
    sums = np.zeros((n, 3))
    np.add.at(sums, labels[labels >= 0], shifted[labels >= 0])
    return KeyPointSet(sums / counts[:, None], counts, float(interval if interval is not None else eps), labels)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def write_ply(path, points: np.ndarray, vectors: np.ndarray, scalars: dict[str, np.ndarray] | None = None) -> None:
    """ASCII PLY with ``x y z nx ny nz`` and optional integer scalar properties."""
    scalars = scalars or {}
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property float nx",
        "property float ny",
        "property float nz",
    ]
    lines += [f"property int {name}" for name in scalars]
    lines.append("end_header")
    extra = [np.asarray(v, dtype=int) for v in scalars.values()]
    for i, (p, v) in enumerate(zip(points, vectors)):
        row = " ".join(f"{c:.6f}" for c in (*p, *v))
        if extra:
            row += " " + " ".join(str(int(col[i])) for col in extra)
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")
