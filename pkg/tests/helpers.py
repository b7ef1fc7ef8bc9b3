"""Seeded test inputs shared by the unit and acceptance suites."""

import numpy as np

from mapalign.registration import RigidTransform, apply, random_rotation


def correspondence_set(seed, n_inliers=40, n_outliers=60, noise=0.5, box=50.0):
    """Keypoint pairs under a random rigid motion plus uniformly random outliers.

    Returns ``(src, dst, truth, inlier_mask)`` with rows shuffled.
    """
    rng = np.random.default_rng(seed)
    n = n_inliers + n_outliers
    src = rng.uniform(-box / 2, box / 2, size=(n, 3))
    truth = RigidTransform(random_rotation(rng), rng.uniform(-20, 20, size=3))
    dst = apply(truth, src) + rng.normal(0, noise, size=(n, 3))
    dst[n_inliers:] = rng.uniform(-box / 2, box / 2, size=(n_outliers, 3)) + truth.translation
    inlier = np.arange(n) < n_inliers
    order = rng.permutation(n)
    return src[order], dst[order], truth, inlier[order]


def pose_errors(est: RigidTransform, truth: RigidTransform) -> tuple[float, float]:
    """(rotation geodesic error in degrees, translation error in Angstrom)."""
    c = (np.trace(est.rotation.T @ truth.rotation) - 1.0) / 2.0
    ang = float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    return ang, float(np.linalg.norm(est.translation - truth.translation))
