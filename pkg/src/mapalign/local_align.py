"""Local (sub-map) alignment with a sliding translational mask."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .descriptors import Descriptor
from .map_io import DensityMap
from .pipeline import AlignmentResult, PreparedMap, RunConfig, align_prepared, prepare
from .pointcloud import SampledCloud
from .registration import CoarseFailure, RigidTransform, compose, invert, rotation_angle
from .scoring import SimilarityScore, similarity

__all__ = [
    "MaskSpec",
    "Mask",
    "CandidateResult",
    "NoCandidatesError",
    "mask_positions",
    "generate_masks",
    "deduplicate",
    "align_local",
    "volume_ratio",
]

DEDUP_ANGLE_DEG = 3.0
FULL_WINDOW = -1  # lattice index given to the unmasked attempt


class NoCandidatesError(RuntimeError):
    """No mask produced a usable alignment."""


@dataclass(frozen=True)
class MaskSpec:
    stride: np.ndarray
    margin: float = 0.0

    def __post_init__(self):
        stride = np.broadcast_to(np.asarray(self.stride, dtype=np.float64), (3,)).copy()
        if np.any(stride <= 0) or self.margin < 0:
            raise ValueError("mask stride must be positive and margin non-negative")
        object.__setattr__(self, "stride", stride)


@dataclass(frozen=True, eq=False)
class Mask:
    origin: np.ndarray
    size: np.ndarray
    indices: np.ndarray
    lattice_index: int

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.origin - 1e-9) & (points <= self.origin + self.size + 1e-9), axis=1)


@dataclass
class CandidateResult:
    transform: RigidTransform
    score: SimilarityScore
    mask_origin: np.ndarray
    rank: int = 0
    lattice_index: int = 0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            **self.score.to_dict(),
            "matrix": self.transform.to_json(),
            "mask_origin": [float(v) for v in self.mask_origin],
        }


def mask_positions(lo: float, hi: float, size: float, stride: float) -> np.ndarray:
    """Window start offsets along one axis.

    Starts at ``lo`` and steps by ``stride``; one extra window flush with
    ``hi`` is appended when the regular steps leave the end uncovered.
    """
    span = hi - lo
    if size >= span - 1e-9:
        return np.array([lo])
    count = int(math.floor((span - size) / stride + 1e-9)) + 1
    starts = lo + stride * np.arange(count)
    if starts[-1] + size < hi - 1e-9:
        starts = np.append(starts, hi - size)
    return starts


def generate_masks(tgt: SampledCloud, src_extent, spec: MaskSpec, min_points: int = 50) -> list[Mask]:
    """Axis-aligned windows of size ``src_extent + 2 * margin`` tiled over ``tgt``.

    Windows holding fewer than ``min_points`` target points are dropped.
    """
    size = np.asarray(src_extent, dtype=np.float64) + 2.0 * spec.margin
    lo, hi = tgt.bounds()
    axes = [mask_positions(lo[a], hi[a], size[a], spec.stride[a]) for a in range(3)]
    masks = []
    for lattice_index, origin in enumerate(itertools.product(*axes)):
        origin = np.array(origin)
        inside = np.all((tgt.points >= origin - 1e-9) & (tgt.points <= origin + size + 1e-9), axis=1)
        if inside.sum() >= min_points:
            masks.append(Mask(origin, size, np.flatnonzero(inside), lattice_index))
    if not masks:
        raise NoCandidatesError("every mask holds fewer than the minimum number of points")
    return masks


def _transform_distance(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    rel = compose(a, invert(b))
    return math.degrees(rotation_angle(rel.rotation)), float(np.linalg.norm(a.translation - b.translation))


def deduplicate(candidates: list[CandidateResult], max_angle_deg: float, max_shift: float) -> list[CandidateResult]:
    """Order by score (ties: lower lattice index) and drop near-duplicates of
    better candidates."""
    ordered = sorted(candidates, key=lambda c: (-c.score.score, c.lattice_index))
    kept: list[CandidateResult] = []
    for cand in ordered:
        if any(
            ang < max_angle_deg and shift < max_shift
            for ang, shift in (_transform_distance(cand.transform, k.transform) for k in kept)
        ):
            continue
        kept.append(cand)
    for rank, cand in enumerate(kept, start=1):
        cand.rank = rank
    return kept


def volume_ratio(a: DensityMap, b: DensityMap) -> float:
    """Smaller above-contour bounding-box volume over the larger."""
    va, vb = a.above_contour_volume(), b.above_contour_volume()
    if max(va, vb) == 0:
        return 0.0
    return min(va, vb) / max(va, vb)


def _restrict(prep: PreparedMap, mask: Mask) -> PreparedMap:
    positions = prep.described_positions
    inside = mask.contains(positions)
    descs: list[Descriptor] = [d for d, keep in zip(prep.descriptors, inside) if keep]
    return PreparedMap(prep.cloud.subset(mask.indices), prep.keypoints, descs, {})


def align_local(
    src_map: DensityMap,
    tgt_map: DensityMap,
    config: RunConfig | None = None,
    use_masks: bool = True,
    src: PreparedMap | None = None,
    tgt: PreparedMap | None = None,
) -> list[CandidateResult]:
    """Ranked candidate transforms placing ``src_map`` inside ``tgt_map``.

    With masks, the smaller map (by above-contour bounding box) is aligned to
    every window of the larger map's cloud, plus one unmasked attempt.  Every
    candidate is re-scored against the whole larger cloud, near-duplicates are
    merged and the best ``config.candidates`` are returned.  If the inputs
    arrive larger-first they are swapped internally and the transforms
    inverted, so results always map ``src_map`` onto ``tgt_map``.

    ``use_masks=False`` runs a single unmasked attempt with no swapping.
    """
    c = (config or RunConfig()).resolved()
    swapped = use_masks and src_map.above_contour_volume() > tgt_map.above_contour_volume()
    if swapped:
        src_map, tgt_map = tgt_map, src_map
        src, tgt = tgt, src
    src = src if src is not None else prepare(src_map, c)
    tgt = tgt if tgt is not None else prepare(tgt_map, c)

    attempts: list[tuple[int, np.ndarray, PreparedMap]] = [(FULL_WINDOW, tgt.cloud.bounds()[0], tgt)]
    if use_masks:
        extent = np.ptp(src.cloud.points, axis=0)
        stride = c.mask_stride if c.mask_stride is not None else np.maximum(extent / 2.0, c.sampling_interval)
        spec = MaskSpec(stride, c.mask_margin)
        try:
            masks = generate_masks(tgt.cloud, extent, spec, c.mask_min_points)
        except NoCandidatesError:
            masks = []
        # a single full-cover window duplicates the unmasked attempt
        if not (len(masks) == 1 and len(masks[0].indices) == len(tgt.cloud)):
            attempts += [(m.lattice_index, m.origin, _restrict(tgt, m)) for m in masks]

    candidates = []
    for lattice_index, origin, window in attempts:
        try:
            result: AlignmentResult = align_prepared(src, window, c, score_cloud=tgt.cloud)
        except CoarseFailure:
            continue
        transform = invert(result.transform) if swapped else result.transform
        diag = {**result.diagnostics, "window_points": len(window.cloud), "window_descriptors": len(window.descriptors)}
        candidates.append(CandidateResult(transform, result.score, np.asarray(origin, dtype=float), 0, lattice_index, diag))
    if not candidates:
        raise NoCandidatesError("no window produced a coarse alignment")
    if not use_masks:
        candidates[0].rank = 1
        return candidates[:1]
    kept = deduplicate(candidates, DEDUP_ANGLE_DEG, c.sampling_interval)
    return kept[: c.candidates]
