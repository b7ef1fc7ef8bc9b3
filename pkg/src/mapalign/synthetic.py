"""Seeded synthetic fixtures with ground truth known by construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .map_io import DensityMap, add_noise, synthesize_map
from .registration import RigidTransform, apply, random_rotation

__all__ = ["random_chain", "blob_map", "FixturePair", "transformed_pair", "cropped_pair"]


def random_chain(n: int, rng: np.random.Generator, step: float = 3.8, min_sep: float = 4.0, compactness: float = 0.15) -> np.ndarray:
    """Self-avoiding random walk of ``n`` pseudo-atoms, pulled toward its centroid.

    Looks roughly like a C-alpha trace, which gives keypoint neighbourhoods
    enough asymmetry for the descriptors to tell them apart.
    """
    pts = [np.zeros(3)]
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    while len(pts) < n:
        arr = np.asarray(pts)
        centroid = arr.mean(axis=0)
        for _ in range(200):
            d = direction + 0.9 * rng.normal(size=3) + compactness * (centroid - pts[-1]) / step
            d /= np.linalg.norm(d)
            cand = pts[-1] + step * d
            if len(arr) < 3 or np.min(np.linalg.norm(arr[:-2] - cand, axis=1)) >= min_sep:
                break
        pts.append(cand)
        direction = d
    pts = np.asarray(pts)
    return pts - pts.mean(axis=0)


def blob_map(centers, rng: np.random.Generator, resolution=5.0, voxel_size=1.0, padding=8.0, noise=0.0, weights=None) -> DensityMap:
    if weights is None:
        weights = rng.uniform(0.6, 1.4, size=len(centers))
    m = synthesize_map(centers, weights, resolution, voxel_size, padding)
    if noise > 0:
        m = add_noise(m, noise, rng)
    return m


@dataclass
class FixturePair:
    """Source and target maps with ``truth`` taking source world coordinates
    onto target world coordinates."""

    source: DensityMap
    target: DensityMap
    truth: RigidTransform
    source_centers: np.ndarray
    target_centers: np.ndarray


def transformed_pair(
    seed: int,
    n_atoms: int = 120,
    resolution: float = 5.0,
    voxel_size: float = 1.0,
    noise: float = 0.01,
    max_shift_fraction: float = 0.5,
    rotate: bool = True,
) -> FixturePair:
    """Map of a random chain and an independently noised copy moved by a random
    rotation (uniform over SO(3)) and translation up to ``max_shift_fraction``
    of the source span."""
    rng = np.random.default_rng(seed)
    centers = random_chain(n_atoms, rng)
    weights = rng.uniform(0.6, 1.4, size=n_atoms)
    rot = random_rotation(rng) if rotate else np.eye(3)
    span = np.ptp(centers, axis=0).max()
    direction = rng.normal(size=3)
    shift = direction / np.linalg.norm(direction) * rng.uniform(0, max_shift_fraction * span)
    truth = RigidTransform(rot, shift)
    moved = apply(truth, centers)
    src = blob_map(centers, rng, resolution, voxel_size, noise=noise, weights=weights)
    tgt = blob_map(moved, rng, resolution, voxel_size, noise=noise, weights=weights)
    return FixturePair(src, tgt, truth, centers, moved)


def cropped_pair(
    seed: int,
    n_atoms: int = 300,
    volume_ratio: float = 0.4,
    resolution: float = 5.0,
    voxel_size: float = 1.0,
    noise: float = 0.01,
) -> FixturePair:
    """Small map made of the atoms inside a sub-box of a larger chain, moved by
    a random rigid motion; the target is the full (unmoved) structure.

    The sub-box is scaled so that the fragment's bounding box (inflated by the
    blob radius) has, after the random motion, ``volume_ratio`` times the volume of the full one.
    """
    rng = np.random.default_rng(seed)
    centers = random_chain(n_atoms, rng)
    weights = rng.uniform(0.6, 1.4, size=n_atoms)
    lo, hi = centers.min(axis=0), centers.max(axis=0)
    anchor = rng.uniform(0, 1, size=3)
    rot = random_rotation(rng)
    shift = rng.normal(size=3) * 10.0
    place = RigidTransform(rot, shift)
    full = _blob_box_volume(centers)

    def crop(scale):
        side = (hi - lo) * scale
        corner = lo + anchor * (hi - lo - side)
        return np.all((centers >= corner) & (centers <= corner + side), axis=1)

    # bisect the box scale until the blob bounding-box volume ratio matches
    a, b = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (a + b)
        inside = crop(mid)
        ratio = _blob_box_volume(apply(place, centers[inside])) / full if inside.sum() else 0.0
        a, b = (mid, b) if ratio < volume_ratio else (a, mid)
    inside = crop(b)
    part = centers[inside]
    # source = moved fragment; truth maps it back into the target frame
    src_centers = apply(place, part)
    truth = RigidTransform(rot.T, -rot.T @ shift)
    src = blob_map(src_centers, rng, resolution, voxel_size, noise=noise, weights=weights[inside])
    tgt = blob_map(centers, rng, resolution, voxel_size, noise=noise, weights=weights)
    return FixturePair(src, tgt, truth, src_centers, centers)


def _blob_box_volume(centers: np.ndarray, pad: float = 2.5) -> float:
    return float(np.prod(np.ptp(centers, axis=0) + 2 * pad))
