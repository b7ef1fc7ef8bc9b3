"""Superimposition score and ground-truth RMSD evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import SampledCloud
from .registration import RigidTransform, apply

__all__ = [
    "SimilarityScore",
    "EvalReport",
    "similarity",
    "occupancy_histograms",
    "js_divergence",
    "rmsd_vs_ground_truth",
    "FAILURE_RMSD",
]

FAILURE_RMSD = 10.0
LN2 = math.log(2.0)


@dataclass(frozen=True)
class SimilarityScore:
    js_divergence: float
    vector_agreement: float
    score: float
    overlapped_pairs: int
    dot_threshold: float

    @property
    def js_divergence_normalized(self) -> float:
        return self.js_divergence / LN2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["js_divergence_normalized"] = self.js_divergence_normalized
        return d


@dataclass(frozen=True)
class EvalReport:
    rmsd: float
    failed: bool
    reference_point_count: int

    def to_dict(self) -> dict:
        return asdict(self)


def occupancy_histograms(a: np.ndarray, b: np.ndarray, cell: float) -> tuple[np.ndarray, np.ndarray]:
    """Point-count histograms of two clouds on a shared grid, as probabilities.

    The grid spans the union bounding box and is shifted by half a cell so
    that points on a lattice of spacing ``cell`` anchored at the box corner
    fall on cell centres, not cell faces.
    """
    lo = np.minimum(a.min(axis=0), b.min(axis=0)) - 0.5 * cell
    ia = np.floor((a - lo) / cell).astype(np.int64)
    ib = np.floor((b - lo) / cell).astype(np.int64)
    shape = np.maximum(ia.max(axis=0), ib.max(axis=0)) + 1
    ha = np.bincount(np.ravel_multi_index(ia.T, shape), minlength=int(np.prod(shape))).astype(np.float64)
    hb = np.bincount(np.ravel_multi_index(ib.T, shape), minlength=int(np.prod(shape))).astype(np.float64)
    return ha / ha.sum(), hb / hb.sum()


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats (0 <= D <= ln 2)."""
    m = 0.5 * (p + q)

    def kl(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log(x[nz] / m[nz])))

    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), LN2)


def similarity(
    src_transformed: SampledCloud,
    tgt: SampledCloud,
    dot_threshold: float = 0.5,
    pair_radius: float | None = None,
    grid_cell: float | None = None,
) -> SimilarityScore:
    """Score an already superimposed pair of clouds.

    ``score = (1 - JS / ln 2) * agreement`` where agreement is the fraction of
    overlapped pairs (source point with its nearest target point within
    ``pair_radius``) whose density vectors have dot product above
    ``dot_threshold``.  JS compares grid-occupancy distributions.  Zero
    overlapped pairs give a score of 0.
    """
    if not 0 < dot_threshold < 1:
        raise ValueError("dot_threshold must lie in (0, 1)")
    interval = tgt.sampling_interval
    if pair_radius is None:
        pair_radius = interval / 2.0 + 1e-6
    if grid_cell is None:
        grid_cell = interval
    p, q = occupancy_histograms(src_transformed.points, tgt.points, grid_cell)
    js = js_divergence(p, q)

    dist, nn = cKDTree(tgt.points).query(src_transformed.points, k=1, distance_upper_bound=pair_radius)
    paired = np.isfinite(dist)
    n = int(paired.sum())
    if n == 0:
        return SimilarityScore(js, 0.0, 0.0, 0, dot_threshold)
    dots = np.einsum("ij,ij->i", src_transformed.vectors[paired], tgt.vectors[nn[paired]])
    agreement = float(np.count_nonzero(dots > dot_threshold)) / n
    score = (1.0 - js / LN2) * agreement
    return SimilarityScore(js, agreement, score, n, dot_threshold)


def rmsd_vs_ground_truth(estimated: RigidTransform, truth: RigidTransform, reference_points) -> EvalReport:
    """RMSD between reference points placed by ``estimated`` and by ``truth``."""
    pts = np.atleast_2d(np.asarray(reference_points, dtype=np.float64))
    if pts.size == 0:
        raise ValueError("reference point set is empty")
    diff = apply(estimated, pts) - apply(truth, pts)
    rmsd = float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))
    return EvalReport(rmsd, rmsd > FAILURE_RMSD, len(pts))
