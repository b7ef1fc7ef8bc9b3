"""SHOT-style orientation histograms over density vectors.

Each keypoint gets a local reference frame from the weighted covariance of its
neighbours.  The neighbourhood is split into 2 radial shells x 2 elevation
bands x 8 azimuth wedges, and inside every sector the cosine between the
neighbour's density vector and the frame's z axis is histogrammed into 11
bins, giving 352 values.  Contributions are spread quadrilinearly over
adjacent cosine bins, azimuth wedges, elevation bands and shells.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import SampledCloud

__all__ = [
    "LocalReferenceFrame",
    "Descriptor",
    "DegenerateFrameError",
    "compute_lrf",
    "compute_descriptor",
    "compute_descriptors",
    "orientation_histogram",
    "descriptor_matrix",
    "frame_flip_permutations",
    "write_descriptor_matrix",
    "read_descriptor_matrix",
    "N_SHELLS",
    "N_BANDS",
    "N_WEDGES",
    "N_COS_BINS",
    "DESCRIPTOR_LENGTH",
]

N_SHELLS = 2
N_BANDS = 2
N_WEDGES = 8
N_COS_BINS = 11
DESCRIPTOR_LENGTH = N_SHELLS * N_BANDS * N_WEDGES * N_COS_BINS

# relative eigenvalue gap below which the frame is considered ambiguous
EIGEN_GAP_TOL = 1e-6


class DegenerateFrameError(ValueError):
    """Too few neighbours, or a covariance that does not fix the axes."""


@dataclass(frozen=True, eq=False)
class LocalReferenceFrame:
    axes: np.ndarray  # rows are x, y, z unit vectors

    def to_local(self, offsets: np.ndarray) -> np.ndarray:
        return offsets @ self.axes.T


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray
    keypoint_index: int
    support_radius: float
    lrf: LocalReferenceFrame


def _neighbour_offsets(keypoint, cloud: SampledCloud, radius: float, idx=None):
    keypoint = np.asarray(keypoint, dtype=np.float64)
    if idx is None:
        d = np.linalg.norm(cloud.points - keypoint, axis=1)
        idx = np.flatnonzero(d <= radius)
    else:
        idx = np.sort(np.asarray(idx, dtype=np.int64))
    return idx, cloud.points[idx] - keypoint


def _disambiguate(axis: np.ndarray, offsets: np.ndarray, weights: np.ndarray, tol: float) -> np.ndarray:
    proj = offsets @ axis
    n_pos = np.count_nonzero(proj > tol)
    n_neg = np.count_nonzero(proj < -tol)
    if n_pos == n_neg:
        return axis if np.dot(weights, proj) >= 0 else -axis
    return axis if n_pos > n_neg else -axis


def _frame_from_offsets(offsets: np.ndarray, radius: float) -> LocalReferenceFrame:
    if len(offsets) < 3:
        raise DegenerateFrameError(f"only {len(offsets)} neighbours within the support radius")
    dist = np.linalg.norm(offsets, axis=1)
    weights = radius - dist
    if weights.sum() <= 0:
        raise DegenerateFrameError("all neighbours lie on the support boundary")
    cov = (offsets * weights[:, None]).T @ offsets / weights.sum()
    evals, evecs = np.linalg.eigh(cov)
    l3, l2, l1 = evals
    if l1 <= 0 or l2 <= 1e-10 * l1:
        raise DegenerateFrameError("neighbour covariance has rank below 2")
    if (l1 - l2) < EIGEN_GAP_TOL * l1 or (l2 - l3) < EIGEN_GAP_TOL * l1:
        raise DegenerateFrameError("repeated covariance eigenvalues leave the frame ambiguous")
    tol = 1e-9 * radius
    x = _disambiguate(evecs[:, 2], offsets, weights, tol)
    z = _disambiguate(evecs[:, 0], offsets, weights, tol)
    y = np.cross(z, x)
    return LocalReferenceFrame(np.vstack([x, y, z]))


def compute_lrf(keypoint, cloud: SampledCloud, radius: float) -> LocalReferenceFrame:
    """Weighted-covariance frame at ``keypoint`` (x: largest spread, z: smallest).

    Neighbour weights are ``radius - distance``; each of x and z points toward
    the majority of neighbour offsets and ``y = z cross x``.
    """
    _, offsets = _neighbour_offsets(keypoint, cloud, radius)
    return _frame_from_offsets(offsets, radius)


def _linear_split(pos: np.ndarray, nbins: int, circular: bool = False):
    """Split fractional bin positions into (lower bin, upper bin, upper weight).

    ``pos`` is measured so that bin ``b`` is centred at ``b``.  Non-circular
    positions outside the first/last centre go entirely to the end bin.
    """
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64)
    hi = lo + 1
    if circular:
        return lo % nbins, hi % nbins, frac
    below = lo < 0
    above = hi > nbins - 1
    lo = np.clip(lo, 0, nbins - 1)
    hi = np.clip(hi, 0, nbins - 1)
    frac = np.where(below, 0.0, np.where(above, 0.0, frac))
    lo = np.where(below, 0, lo)
    return lo, hi, frac


def orientation_histogram(local: np.ndarray, vectors: np.ndarray, lrf: LocalReferenceFrame, radius: float) -> np.ndarray:
    r = np.linalg.norm(local, axis=1)
    cos = np.clip(vectors @ lrf.axes[2], -1.0, 1.0)
    azimuth = np.mod(np.arctan2(local[:, 1], local[:, 0]), 2 * np.pi)
    with np.errstate(invalid="ignore", divide="ignore"):
        elevation = np.where(r > 0, np.arcsin(np.clip(local[:, 2] / np.where(r > 0, r, 1.0), -1, 1)), 0.0)

    splits = [
        _linear_split(r / (radius / N_SHELLS) - 0.5, N_SHELLS),
        _linear_split((elevation + np.pi / 2) / (np.pi / N_BANDS) - 0.5, N_BANDS),
        _linear_split(azimuth / (2 * np.pi / N_WEDGES) - 0.5, N_WEDGES, circular=True),
        _linear_split((cos + 1.0) / (2.0 / N_COS_BINS) - 0.5, N_COS_BINS),
    ]
    hist = np.zeros((N_SHELLS, N_BANDS, N_WEDGES, N_COS_BINS))
    for corner in range(16):
        index = []
        weight = np.ones(len(local))
        for dim, (lo, hi, frac) in enumerate(splits):
            if corner >> dim & 1:
                index.append(hi)
                weight = weight * frac
            else:
                index.append(lo)
                weight = weight * (1.0 - frac)
        np.add.at(hist, tuple(index), weight)
    values = hist.ravel()
    norm = np.linalg.norm(values)
    return values / norm if norm > 0 else values


def compute_descriptor(keypoint, cloud: SampledCloud, radius: float, keypoint_index: int = -1, neighbours=None) -> Descriptor:
    """352-bin orientation histogram of density vectors around ``keypoint``.

    ``neighbours`` may pass precomputed indices of cloud points within
    ``radius``; they are re-sorted so the result does not depend on their order.
    """
    idx, offsets = _neighbour_offsets(keypoint, cloud, radius, neighbours)
    lrf = _frame_from_offsets(offsets, radius)
    values = orientation_histogram(lrf.to_local(offsets), cloud.vectors[idx], lrf, radius)
    return Descriptor(values, keypoint_index, float(radius), lrf)


def compute_descriptors(keypoints: np.ndarray, cloud: SampledCloud, radius: float) -> list[Descriptor]:
    """Descriptors for every keypoint with a well-defined frame (others are skipped)."""
    keypoints = np.atleast_2d(keypoints)
    tree = cKDTree(cloud.points)
    out = []
    for i, (kp, nb) in enumerate(zip(keypoints, tree.query_ball_point(keypoints, r=radius))):
        try:
            out.append(compute_descriptor(kp, cloud, radius, keypoint_index=i, neighbours=nb))
        except DegenerateFrameError:
            continue
    return out


def frame_flip_permutations() -> list[np.ndarray]:
    """Bin permutations equivalent to re-signing the frame axes.

    The four proper frames sharing a frame's axis lines (identity and the
    half-turns about z, y and x) map bin centres onto bin centres, so the
    descriptor computed in a flipped frame is an exact permutation of the
    original.  Element ``k`` satisfies ``flipped = values[perm[k]]``.
    """
    s, b, w, c = np.meshgrid(
        np.arange(N_SHELLS), np.arange(N_BANDS), np.arange(N_WEDGES), np.arange(N_COS_BINS), indexing="ij"
    )
    shape = (N_SHELLS, N_BANDS, N_WEDGES, N_COS_BINS)
    last_b, last_c = N_BANDS - 1, N_COS_BINS - 1
    half = N_WEDGES // 2
    maps = [
        (s, b, w, c),
        (s, b, (w + half) % N_WEDGES, c),  # half-turn about z
        (s, last_b - b, (half - 1 - w) % N_WEDGES, last_c - c),  # about y
        (s, last_b - b, (N_WEDGES - 1 - w) % N_WEDGES, last_c - c),  # about x
    ]
    return [np.ravel_multi_index(m, shape).ravel() for m in maps]


def descriptor_matrix(descriptors: list[Descriptor]) -> np.ndarray:
    if not descriptors:
        return np.zeros((0, DESCRIPTOR_LENGTH))
    return np.vstack([d.values for d in descriptors])


def write_descriptor_matrix(path, matrix: np.ndarray) -> None:
    """Little-endian uint32 count, uint32 dimension, then float32 values row-major."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype="<f4"))
    header = np.array(matrix.shape, dtype="<u4").tobytes()
    Path(path).write_bytes(header + np.ascontiguousarray(matrix).tobytes())


def read_descriptor_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    count, dim = np.frombuffer(raw[:8], dtype="<u4")
    return np.frombuffer(raw[8:], dtype="<f4", count=int(count) * int(dim)).reshape(int(count), int(dim))
