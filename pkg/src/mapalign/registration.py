"""Feature matching, robust coarse pose estimation and Lp-norm ICP refinement."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import SampledCloud

__all__ = [
    "RigidTransform",
    "Correspondence",
    "CoarseParams",
    "FineParams",
    "CoarseFailure",
    "RefineResult",
    "mutual_match",
    "nearest_neighbours",
    "permuted_distances",
    "kabsch",
    "truncated_ls_objective",
    "consistent_clique",
    "consistency_graph",
    "greedy_cliques",
    "estimate_coarse",
    "lp_objective",
    "irls_step",
    "refine_sparse_icp",
    "compose",
    "invert",
    "apply",
    "rotation_angle",
    "random_rotation",
    "BRUTE_FORCE_LIMIT",
]

BRUTE_FORCE_LIMIT = 5000


class CoarseFailure(RuntimeError):
    """Too few mutually consistent correspondences to fix a pose."""


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, matrix, tol: float = 1e-6) -> RigidTransform:
        """Build from a 4x4 homogeneous matrix, rejecting non-rigid blocks."""
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        rot = m[:3, :3]
        if not np.allclose(m[3], [0, 0, 0, 1], atol=tol):
            raise ValueError("last row of a rigid transform must be (0, 0, 0, 1)")
        if np.abs(rot.T @ rot - np.eye(3)).max() > tol or abs(np.linalg.det(rot) - 1.0) > tol:
            raise ValueError("rotation block is not in SO(3)")
        return cls(rot, m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_json(self) -> list[float]:
        """Row-major list of the 16 homogeneous matrix entries."""
        return [float(v) for v in self.matrix().ravel()]

    @classmethod
    def from_json(cls, values) -> RigidTransform:
        if isinstance(values, str):
            values = json.loads(values)
        if isinstance(values, dict):
            values = values.get("matrix", values.get("transform"))
        return cls.from_matrix(np.asarray(values, dtype=np.float64).reshape(4, 4))

    def is_rigid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol


def apply(a: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Rotate then translate ``points`` (n, 3)."""
    return np.asarray(points) @ a.rotation.T + a.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    return RigidTransform(a.rotation.T, -a.rotation.T @ a.translation)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle (radians) of rotation matrix ``r``."""
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation from a random unit quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _project_so3(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


# ---------------------------------------------------------------------------
# Feature matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Correspondence:
    source_index: int
    target_index: int
    feature_distance: float


def nearest_neighbours(queries: np.ndarray, data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact Euclidean nearest neighbour of every query row among ``data`` rows.

    Ties resolve to the lowest data index.
    """
    queries = np.atleast_2d(queries)
    data = np.atleast_2d(data)
    if len(data) > BRUTE_FORCE_LIMIT or len(queries) > BRUTE_FORCE_LIMIT:
        dist, idx = cKDTree(data).query(queries, k=1)
        return np.asarray(idx, dtype=np.int64), np.asarray(dist)
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries))
    sq_data = np.einsum("ij,ij->i", data, data)
    for start in range(0, len(queries), 1024):
        q = queries[start : start + 1024]
        d2 = np.einsum("ij,ij->i", q, q)[:, None] - 2.0 * q @ data.T + sq_data[None, :]
        best = np.argmin(d2, axis=1)
        idx[start : start + len(q)] = best
        dist[start : start + len(q)] = np.linalg.norm(q - data[best], axis=1)
    return idx, dist


def mutual_match(src, tgt, permutations=None) -> list[Correspondence]:
    """Pairs ``(i, j)`` where each descriptor is the other's nearest neighbour.

    Accepts lists of :class:`~mapalign.descriptors.Descriptor` or plain
    descriptor matrices; indices refer to positions in the inputs.  The result
    is sorted by feature distance.

    ``permutations`` optionally lists index arrays forming a group of bin
    permutations (see :func:`~mapalign.descriptors.frame_flip_permutations`);
    the feature distance then becomes the minimum L2 distance over permuted
    copies of the source descriptor.
    """
    a = _as_matrix(src)
    b = _as_matrix(tgt)
    if len(a) == 0 or len(b) == 0:
        return []
    if permutations is None:
        fwd, dist = nearest_neighbours(a, b)
        bwd, _ = nearest_neighbours(b, a)
    else:
        d = permuted_distances(a, b, permutations)
        fwd = np.argmin(d, axis=1)
        dist = d[np.arange(len(a)), fwd]
        bwd = np.argmin(d, axis=0)
    src_idx = np.flatnonzero(bwd[fwd] == np.arange(len(a)))
    order = np.lexsort((src_idx, dist[src_idx]))
    return [Correspondence(int(src_idx[k]), int(fwd[src_idx[k]]), float(dist[src_idx[k]])) for k in order]


def permuted_distances(a: np.ndarray, b: np.ndarray, permutations) -> np.ndarray:
    """``d[i, j] = min_k |a[i][perm_k] - b[j]|`` (exact, chunked brute force)."""
    out = np.full((len(a), len(b)), np.inf)
    sq_b = np.einsum("ij,ij->i", b, b)
    for perm in permutations:
        ap = a[:, perm]
        sq_a = np.einsum("ij,ij->i", ap, ap)
        for start in range(0, len(a), 1024):
            blk = slice(start, start + 1024)
            d2 = sq_a[blk, None] - 2.0 * ap[blk] @ b.T + sq_b[None, :]
            np.minimum(out[blk], np.sqrt(np.maximum(d2, 0.0)), out=out[blk])
    return out


def _as_matrix(descs) -> np.ndarray:
    if isinstance(descs, np.ndarray):
        return np.atleast_2d(descs).astype(np.float64)
    if len(descs) == 0:
        return np.zeros((0, 1))
    return np.vstack([d.values for d in descs]).astype(np.float64)


# ---------------------------------------------------------------------------
# Coarse estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoarseParams:
    noise_bound: float
    min_correspondences: int = 3
    gnc_factor: float = 1.4
    max_gnc_iters: int = 100

    def __post_init__(self):
        if self.noise_bound <= 0 or self.min_correspondences < 3:
            raise ValueError(f"invalid coarse parameters {self}")


def kabsch(src: np.ndarray, dst: np.ndarray, weights: np.ndarray | None = None) -> RigidTransform:
    """Weighted least-squares rigid transform taking ``src`` onto ``dst``."""
    src = np.atleast_2d(src)
    dst = np.atleast_2d(dst)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    cs = w @ src / total
    cd = w @ dst / total
    h = ((src - cs) * w[:, None]).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, cd - rot @ cs)


def truncated_ls_objective(t: RigidTransform, src: np.ndarray, dst: np.ndarray, noise_bound: float) -> float:
    """Sum of squared residuals, each capped at ``noise_bound ** 2``."""
    r2 = np.sum((dst - apply(t, src)) ** 2, axis=1)
    return float(np.minimum(r2, noise_bound**2).sum())


def consistency_graph(src: np.ndarray, dst: np.ndarray, noise_bound: float) -> np.ndarray:
    """Boolean adjacency: ``i`` and ``k`` are consistent when ``|S_i - S_k|`` and
    ``|T_i - T_k|`` differ by at most ``2 * noise_bound``."""
    ds = np.linalg.norm(src[:, None] - src[None], axis=-1)
    dt = np.linalg.norm(dst[:, None] - dst[None], axis=-1)
    adj = np.abs(ds - dt) <= 2.0 * noise_bound
    np.fill_diagonal(adj, False)
    return adj


def greedy_cliques(adj: np.ndarray) -> list[np.ndarray]:
    """Distinct cliques grown greedily from every vertex, largest first.

    From each seed, the candidate with the most consistent candidates left is
    added until none remain; ties go to the lower index.
    """
    n = len(adj)
    degree = adj.sum(axis=1)
    seen = set()
    cliques = []
    for seed in np.lexsort((np.arange(n), -degree)):
        clique = [seed]
        cand = adj[seed].copy()
        while cand.any():
            idx = np.flatnonzero(cand)
            inner = adj[np.ix_(idx, idx)].sum(axis=1)
            pick = idx[np.lexsort((idx, -inner))[0]]
            clique.append(pick)
            cand &= adj[pick]
        key = tuple(sorted(int(i) for i in clique))
        if key not in seen:
            seen.add(key)
            cliques.append(np.array(key, dtype=np.int64))
    cliques.sort(key=lambda c: (-len(c), tuple(c)))
    return cliques


def consistent_clique(src: np.ndarray, dst: np.ndarray, noise_bound: float) -> np.ndarray:
    """Indices of the largest greedily found pairwise length-consistent subset."""
    return greedy_cliques(consistency_graph(src, dst, noise_bound))[0]


def _gnc_tls(src, dst, init: RigidTransform, noise_bound: float, factor: float, max_iters: int):
    """Graduated non-convexity for the truncated quadratic loss."""
    c2 = noise_bound**2
    t = init
    r2 = np.sum((dst - apply(t, src)) ** 2, axis=1)
    r2max = r2.max()
    if r2max <= c2:
        return t
    mu = c2 / max(2.0 * r2max - c2, 1e-12)
    weights = np.ones(len(src))
    for _ in range(max_iters):
        upper = (mu + 1.0) / mu * c2
        lower = mu / (mu + 1.0) * c2
        new = np.where(r2 >= upper, 0.0, np.where(r2 <= lower, 1.0, 0.0))
        mid = (r2 > lower) & (r2 < upper)
        new[mid] = noise_bound / np.sqrt(r2[mid]) * np.sqrt(mu * (mu + 1.0)) - mu
        if new.sum() < 3:
            break
        t = kabsch(src, dst, new)
        r2 = np.sum((dst - apply(t, src)) ** 2, axis=1)
        converged = np.abs(new - weights).max() < 1e-9
        weights = new
        if converged and np.all((weights == 0) | (weights == 1)):
            break
        mu *= factor
    return t


def estimate_coarse(src_points: np.ndarray, tgt_points: np.ndarray, params: CoarseParams) -> RigidTransform:
    """Robust rigid pose from putative keypoint correspondences.

    ``src_points[i]`` is matched to ``tgt_points[i]``.  The truncated
    least-squares cost ``sum(min(|T - R S - t|^2, eps^2))`` is approached by
    pruning to pairwise length-consistent cliques, a closed-form fit on each
    clique, a graduated non-convexity polish from the largest one and a refit
    on each fit's inliers; the candidate with the lowest truncated cost wins.
    """
    src = np.atleast_2d(np.asarray(src_points, dtype=np.float64))
    dst = np.atleast_2d(np.asarray(tgt_points, dtype=np.float64))
    if len(src) != len(dst):
        raise ValueError("correspondence arrays differ in length")
    if len(src) < params.min_correspondences:
        raise CoarseFailure(f"{len(src)} correspondences, need {params.min_correspondences}")

    # canonical order makes the greedy steps independent of input order
    key = np.hstack([src, dst])
    perm = np.lexsort(key.T[::-1])
    src, dst = src[perm], dst[perm]

    cliques = [c for c in greedy_cliques(consistency_graph(src, dst, params.noise_bound)) if len(c) >= params.min_correspondences]
    if not cliques:
        raise CoarseFailure("fewer than the minimum number of consistent correspondences survive pruning")

    eps = params.noise_bound
    candidates = [kabsch(src[c], dst[c]) for c in cliques]
    candidates.append(_gnc_tls(src, dst, candidates[0], eps, params.gnc_factor, params.max_gnc_iters))
    for t in list(candidates):
        close = np.sum((dst - apply(t, src)) ** 2, axis=1) <= eps**2
        if close.sum() >= 3:
            candidates.append(kabsch(src[close], dst[close]))
    costs = [truncated_ls_objective(t, src, dst, eps) for t in candidates]
    best = candidates[int(np.argmin(costs))]
    return RigidTransform(_project_so3(best.rotation), best.translation)


# ---------------------------------------------------------------------------
# Sparse ICP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FineParams:
    p_exponent: float = 0.4
    max_iters: int = 60
    max_corr_dist: float = 15.0
    tol: float = 1e-6
    inner_iters: int = 8
    residual_floor: float = 1e-6

    def __post_init__(self):
        if not 0 < self.p_exponent < 1 or self.max_corr_dist <= 0 or self.max_iters < 1 or self.tol <= 0:
            raise ValueError(f"invalid fine parameters {self}")


@dataclass(frozen=True)
class RefineResult:
    transform: RigidTransform
    converged: bool
    failed: bool
    iterations: int
    pairs: int


def lp_objective(residuals: np.ndarray, p: float, floor: float = 0.0) -> float:
    """``sum(r ** p)``; below ``floor`` the power is replaced by its C1 quadratic
    continuation, which is the function the reweighting actually majorizes."""
    r = np.asarray(residuals, dtype=np.float64)
    if floor <= 0:
        return float(np.sum(r**p))
    small = r < floor
    vals = np.where(small, 0.5 * p * floor ** (p - 2) * r**2 + (1 - 0.5 * p) * floor**p, np.maximum(r, floor) ** p)
    return float(vals.sum())


def irls_step(src: np.ndarray, dst: np.ndarray, t: RigidTransform, p: float, floor: float) -> RigidTransform:
    """One reweighted Procrustes step for the Lp cost on fixed pairs."""
    r = np.linalg.norm(dst - apply(t, src), axis=1)
    w = np.maximum(r, floor) ** (p - 2.0)
    return kabsch(src, dst, w / w.max())


def refine_sparse_icp(src: SampledCloud | np.ndarray, tgt: SampledCloud | np.ndarray, init: RigidTransform, params: FineParams) -> RefineResult:
    """Point-to-point ICP minimising ``sum |T_i - R S_i - t|^p`` (0 < p < 1).

    Each outer iteration pairs every moved source point with its nearest
    target point, drops pairs beyond ``max_corr_dist`` and runs
    ``inner_iters`` reweighted Procrustes steps on the fixed pairs.
    """
    s = src.points if isinstance(src, SampledCloud) else np.atleast_2d(src)
    d = tgt.points if isinstance(tgt, SampledCloud) else np.atleast_2d(tgt)
    tree = cKDTree(d)
    t = init
    p = params.p_exponent
    for it in range(1, params.max_iters + 1):
        dist, nn = tree.query(apply(t, s), k=1, distance_upper_bound=params.max_corr_dist)
        keep = np.isfinite(dist)
        if keep.sum() < 3:
            return RefineResult(init if it == 1 else t, False, it == 1, it, int(keep.sum()))
        ps, pd = s[keep], d[nn[keep]]
        prev = t
        for _ in range(params.inner_iters):
            t = irls_step(ps, pd, t, p, params.residual_floor)
        t = RigidTransform(_project_so3(t.rotation), t.translation)
        delta = compose(t, invert(prev))
        # displacement of the worst-moved paired source point
        change = np.linalg.norm(apply(delta, apply(prev, ps)) - apply(prev, ps), axis=1).max()
        if change < params.tol:
            return RefineResult(t, True, False, it, int(keep.sum()))
    return RefineResult(t, False, False, params.max_iters, int(keep.sum()))
