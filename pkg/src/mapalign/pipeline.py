"""Run configuration and the two-stage global alignment pipeline."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .descriptors import Descriptor, compute_descriptors, descriptor_matrix, frame_flip_permutations
from .map_io import DensityMap
from .pointcloud import (
    KeyPointSet,
    MeanShiftParams,
    SampledCloud,
    extract_keypoints,
    mean_shift_converge,
    sample_grid,
)
from .registration import (
    CoarseFailure,
    CoarseParams,
    FineParams,
    RigidTransform,
    estimate_coarse,
    mutual_match,
    refine_sparse_icp,
)
from .scoring import SimilarityScore, similarity

__all__ = ["RunConfig", "PreparedMap", "AlignmentResult", "prepare", "align_prepared", "align_global", "load_config"]

GLOBAL_INTERVAL = 5.0
FITTING_INTERVAL = 3.0


@dataclass
class RunConfig:
    """Pipeline settings.  Lengths are in Angstrom; ``None`` means "derive
    from the sampling interval" (see :meth:`resolved`)."""

    sampling_interval: float = GLOBAL_INTERVAL
    bandwidth: float | None = None
    mean_shift_iters: int = 200
    mean_shift_tol: float = 1e-2
    dbscan_eps: float | None = None
    dbscan_min_pts: int = 2
    descriptor_radius: float | None = None
    noise_bound: float | None = None
    p_exponent: float = 0.4
    icp_max_iters: int = 60
    max_corr_dist: float | None = None
    icp_tol: float = 1e-6
    flip_invariant_matching: bool = True
    dot_threshold: float = 0.5
    pair_radius: float | None = None
    grid_cell: float | None = None
    mask_stride: float | None = None
    mask_margin: float | None = None
    mask_min_points: int = 50
    candidates: int = 5
    contour: float | None = None
    seed: int = 0
    threads: int | None = None

    def resolved(self) -> RunConfig:
        s = float(self.sampling_interval)
        if s <= 0:
            raise ValueError("sampling_interval must be positive")
        fill = {
            "bandwidth": s,
            "dbscan_eps": s,
            "descriptor_radius": 3.0 * s,
            "noise_bound": s,
            "max_corr_dist": 3.0 * s,
            "pair_radius": s / 2.0 + 1e-6,
            "grid_cell": s,
            "mask_margin": s,
        }
        out = dataclasses.replace(self, **{k: v for k, v in fill.items() if getattr(self, k) is None})
        for name in ("bandwidth", "dbscan_eps", "descriptor_radius", "noise_bound", "max_corr_dist", "pair_radius", "grid_cell"):
            if getattr(out, name) <= 0:
                raise ValueError(f"{name} must be positive")
        return out

    def mean_shift(self) -> MeanShiftParams:
        c = self.resolved()
        return MeanShiftParams(c.bandwidth, c.mean_shift_iters, c.mean_shift_tol)

    def coarse(self) -> CoarseParams:
        return CoarseParams(self.resolved().noise_bound)

    def fine(self) -> FineParams:
        c = self.resolved()
        return FineParams(c.p_exponent, c.icp_max_iters, c.max_corr_dist, c.icp_tol)

    def update(self, values: dict) -> RunConfig:
        known = {f.name: f for f in dataclasses.fields(self)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **values)


def load_config(path) -> dict:
    """Read a JSON object or ``key = value`` lines into a dict of typed values."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError("config JSON must be an object")
        return data
    except json.JSONDecodeError:
        pass
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        if value.lower() in ("none", ""):
            out[key] = None
        elif "int" in str(types[key]) and "float" not in str(types[key]):
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


@dataclass
class PreparedMap:
    """Everything extracted from one map before matching."""

    cloud: SampledCloud
    keypoints: KeyPointSet
    descriptors: list[Descriptor]
    timings: dict = field(default_factory=dict)

    @property
    def described_positions(self) -> np.ndarray:
        return self.keypoints.positions[[d.keypoint_index for d in self.descriptors]]

    @property
    def descriptor_matrix(self) -> np.ndarray:
        return descriptor_matrix(self.descriptors)

    def counts(self) -> dict:
        return {"points": len(self.cloud), "keypoints": len(self.keypoints), "descriptors": len(self.descriptors)}


@dataclass
class AlignmentResult:
    transform: RigidTransform
    score: SimilarityScore
    coarse: RigidTransform
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    rank: int | None = None


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1000.0


def prepare(m: DensityMap, config: RunConfig) -> PreparedMap:
    """Sample a map, seek density modes, cluster keypoints and describe them."""
    c = config.resolved()
    if c.contour is not None:
        m = m.with_contour(c.contour)
    params = c.mean_shift()
    timings = {}
    t0 = time.perf_counter()
    cloud = sample_grid(m, c.sampling_interval, params)
    timings["sample"] = _ms(t0)
    t0 = time.perf_counter()
    shifted = mean_shift_converge(cloud, m, params)
    keypoints = extract_keypoints(shifted, c.dbscan_eps, c.dbscan_min_pts, interval=c.sampling_interval)
    timings["keypoints"] = _ms(t0)
    t0 = time.perf_counter()
    descriptors = compute_descriptors(keypoints.positions, cloud, c.descriptor_radius)
    timings["descriptors"] = _ms(t0)
    return PreparedMap(cloud, keypoints, descriptors, timings)


def align_prepared(
    src: PreparedMap,
    tgt: PreparedMap,
    config: RunConfig,
    tgt_cloud: SampledCloud | None = None,
    score_cloud: SampledCloud | None = None,
) -> AlignmentResult:
    """Mutual matching, robust coarse pose, sparse ICP and scoring.

    ``tgt_cloud`` overrides the cloud used for ICP and ``score_cloud`` the one
    used for scoring (both default to ``tgt.cloud``).
    """
    c = config.resolved()
    tgt_cloud = tgt.cloud if tgt_cloud is None else tgt_cloud
    score_cloud = tgt_cloud if score_cloud is None else score_cloud
    timings = {}

    t0 = time.perf_counter()
    perms = frame_flip_permutations() if c.flip_invariant_matching else None
    matches = mutual_match(src.descriptor_matrix, tgt.descriptor_matrix, perms)
    timings["match"] = _ms(t0)

    t0 = time.perf_counter()
    if len(matches) < 3:
        raise CoarseFailure(f"only {len(matches)} mutual feature matches")
    sp = src.described_positions[[mt.source_index for mt in matches]]
    tp = tgt.described_positions[[mt.target_index for mt in matches]]
    coarse = estimate_coarse(sp, tp, c.coarse())
    timings["coarse"] = _ms(t0)

    t0 = time.perf_counter()
    refined = refine_sparse_icp(src.cloud, tgt_cloud, coarse, c.fine())
    timings["fine"] = _ms(t0)

    t0 = time.perf_counter()
    moved = src.cloud.transformed(refined.transform.rotation, refined.transform.translation)
    score = similarity(moved, score_cloud, c.dot_threshold, c.pair_radius, c.grid_cell)
    timings["score"] = _ms(t0)

    diagnostics = {
        "matches": len(matches),
        "icp_iterations": refined.iterations,
        "icp_converged": refined.converged,
        "icp_failed": refined.failed,
        "icp_pairs": refined.pairs,
    }
    return AlignmentResult(refined.transform, score, coarse, diagnostics, timings)


def align_global(src_map: DensityMap, tgt_map: DensityMap, config: RunConfig | None = None) -> AlignmentResult:
    """Rigid transform moving ``src_map`` onto ``tgt_map`` (world coordinates)."""
    config = config or RunConfig()
    src = prepare(src_map, config)
    tgt = prepare(tgt_map, config)
    result = align_prepared(src, tgt, config)
    result.timings = {**_merge_prep_timings(src, tgt), **result.timings}
    result.diagnostics.update({"source": src.counts(), "target": tgt.counts()})
    return result


def _merge_prep_timings(src: PreparedMap, tgt: PreparedMap) -> dict:
    return {k: src.timings.get(k, 0.0) + tgt.timings.get(k, 0.0) for k in ("sample", "keypoints", "descriptors")}
