import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapalign.map_io import DensityMap, synthesize_map
from mapalign.pointcloud import (
    DegenerateVectorError,
    EmptyCloudError,
    EmptyKeypointsError,
    MeanShiftParams,
    SampledCloud,
    compute_density_vector,
    dbscan_labels,
    extract_keypoints,
    interpolate_density,
    mean_shift_converge,
    sample_grid,
    write_ply,
)
from oracles import dbscan_bruteforce, kernel_mean_untruncated, mean_shift_single, partition, trilinear


def _angle_deg(u, v):
    c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def rot90_z(m: DensityMap) -> DensityMap:
    """The map turned 90 degrees about z (x -> y, y -> -x) on an exactly matching grid."""
    ny = m.dims[1]
    data = np.flip(m.data, axis=1).transpose(1, 0, 2)
    v = m.voxel_size
    origin = np.array([-(m.origin[1] + (ny - 1) * v[1]), m.origin[0], m.origin[2]])
    return DensityMap(np.ascontiguousarray(data), v[[1, 0, 2]], origin, m.contour_level)


ROT90_Z = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture(scope="module")
def two_blobs():
    return synthesize_map([[-3.0, 0.0, 0.0], [4.0, 1.5, -1.0]], [1.0, 0.7], resolution=5.0, voxel_size=1.0, padding=8.0)


class TestInterpolation:
    def test_matches_oracle(self, two_blobs):
        pts = np.random.default_rng(0).uniform(*two_blobs.bounds(), size=(50, 3))
        got = interpolate_density(two_blobs, pts)
        for p, g in zip(pts, got):
            assert g == pytest.approx(trilinear(two_blobs.data, two_blobs.origin, two_blobs.voxel_size, p), abs=1e-12)


class TestSampleGrid:
    def test_lattice_count(self):
        m = DensityMap(np.ones((10, 10, 10)), contour_level=0.5)
        cloud = sample_grid(m, 5.0)
        assert len(cloud) == 8

    def test_empty_above_contour(self):
        m = DensityMap(np.ones((6, 6, 6)), contour_level=2.0)
        with pytest.raises(EmptyCloudError):
            sample_grid(m, 2.0)

    def test_points_reach_contour(self, single_blob):
        cloud = sample_grid(single_blob, 2.0)
        for p in cloud.points:
            assert trilinear(single_blob.data, single_blob.origin, single_blob.voxel_size, p) >= single_blob.contour_level - 1e-12

    def test_points_on_lattice(self, single_blob):
        cloud = sample_grid(single_blob, 2.0)
        k = (cloud.points - single_blob.origin) / 2.0
        np.testing.assert_allclose(k, np.round(k), atol=1e-9)

    def test_unit_vectors(self, chain_map):
        cloud = sample_grid(chain_map, 2.0)
        np.testing.assert_allclose(np.linalg.norm(cloud.vectors, axis=1), 1.0, atol=1e-6)

    def test_bad_interval(self, single_blob):
        with pytest.raises(ValueError):
            sample_grid(single_blob, 0.0)

    def test_transformed_rotates_vectors(self, single_blob):
        cloud = sample_grid(single_blob, 3.0)
        moved = cloud.transformed(ROT90_Z, np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(moved.points, cloud.points @ ROT90_Z.T + [1, 2, 3])
        np.testing.assert_allclose(moved.vectors, cloud.vectors @ ROT90_Z.T)

    def test_cloud_validation(self):
        with pytest.raises(ValueError):
            SampledCloud(np.zeros((2, 3)), np.array([[1.0, 0, 0], [0.5, 0, 0]]), 1.0, 0.0)


class TestDensityVector:
    def test_blob_centre_is_degenerate(self, single_blob):
        with pytest.raises(DegenerateVectorError):
            compute_density_vector([0.0, 0.0, 0.0], single_blob, MeanShiftParams(2.0))

    def test_points_toward_centre(self, single_blob):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.uniform(-5, 5, size=3)
            u = compute_density_vector(x, single_blob, MeanShiftParams(2.0))
            assert _angle_deg(u, -x) < 2.0

    def test_matches_untruncated_sum(self, two_blobs):
        rng = np.random.default_rng(2)
        m = two_blobs
        for _ in range(10):
            x = rng.uniform(-6, 6, size=3)
            u = compute_density_vector(x, m, MeanShiftParams(2.0))
            y = kernel_mean_untruncated(x, m.data, m.origin, m.voxel_size, 2.0)
            assert _angle_deg(u, y - x) < 1.0

    def test_outside_bounds(self, single_blob):
        with pytest.raises(ValueError):
            compute_density_vector([100.0, 0, 0], single_blob, MeanShiftParams(2.0))

    def test_equivariant_under_lattice_rotation(self, two_blobs):
        turned = rot90_z(two_blobs)
        params = MeanShiftParams(2.0)
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.uniform(-5, 5, size=3)
            u = compute_density_vector(x, two_blobs, params)
            v = compute_density_vector(ROT90_Z @ x, turned, params)
            assert _angle_deg(ROT90_Z @ u, v) < 2.0

    def test_params_validated(self):
        with pytest.raises(ValueError):
            MeanShiftParams(bandwidth=0.0)
        with pytest.raises(ValueError):
            MeanShiftParams(bandwidth=1.0, max_iters=0)
        with pytest.raises(ValueError):
            MeanShiftParams(bandwidth=1.0, tol=0.0)


class TestMeanShift:
    def test_single_blob_converges_to_centre(self, single_blob):
        params = MeanShiftParams(2.0)
        cloud = sample_grid(single_blob, 2.0, params)
        out = mean_shift_converge(cloud, single_blob, params)
        tol = params.tol + single_blob.voxel_size[0]
        assert np.all(np.linalg.norm(out, axis=1) < tol)
        m = single_blob
        for x, y in zip(cloud.points[::7], out[::7]):
            path, _ = mean_shift_single(x, m.data, m.origin, m.voxel_size, 2.0, 10 * params.max_iters, 1e-9)
            assert np.linalg.norm(path[-1]) < tol
            assert np.linalg.norm(y - path[-1]) < tol

    def test_fixed_point_returns_immediately(self, single_blob):
        params = MeanShiftParams(2.0)
        out = mean_shift_converge(np.zeros((1, 3)), single_blob, params)
        assert np.linalg.norm(out[0]) < params.tol

    def test_oracle_steps_shrink(self, single_blob):
        m = single_blob
        _, steps = mean_shift_single([4.0, -3.0, 2.0], m.data, m.origin, m.voxel_size, 2.0, 60, 1e-9)
        tail = steps[3:]
        assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))

    def test_idempotent(self, chain_map):
        params = MeanShiftParams(2.0)
        cloud = sample_grid(chain_map, 2.0, params)
        once = mean_shift_converge(cloud, chain_map, params)
        twice = mean_shift_converge(once, chain_map, params)
        assert np.max(np.linalg.norm(twice - once, axis=1)) <= params.tol

    def test_length_preserved(self, chain_map):
        params = MeanShiftParams(2.0, max_iters=3)
        cloud = sample_grid(chain_map, 2.0, params)
        assert len(mean_shift_converge(cloud, chain_map, params)) == len(cloud)


class TestKeypoints:
    def test_single_cluster_centroid(self):
        pts = np.random.default_rng(0).uniform(0, 0.5, size=(8, 3))
        kp = extract_keypoints(pts, eps=1.0, min_pts=1)
        assert len(kp) == 1
        np.testing.assert_allclose(kp.positions[0], pts.mean(axis=0))
        assert kp.member_counts[0] == 8

    def test_two_groups(self):
        rng = np.random.default_rng(1)
        a = rng.normal(0, 0.1, size=(10, 3))
        kp = extract_keypoints(np.vstack([a, a + [10.0, 0, 0]]), eps=1.0, min_pts=2)
        assert len(kp) == 2

    def test_all_noise(self):
        pts = np.arange(15.0).reshape(5, 3) * 10
        with pytest.raises(EmptyKeypointsError):
            extract_keypoints(pts, eps=1.0, min_pts=2)

    def test_min_pts_counts_self(self):
        pts = np.array([[0.0, 0, 0], [0.5, 0, 0], [10, 0, 0]])
        labels = dbscan_labels(pts, 1.0, 2)
        assert labels[0] == labels[1] >= 0 and labels[2] == -1

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0, 20, size=(200, 3))
        for eps, min_pts in ((1.5, 2), (2.5, 4)):
            assert partition(dbscan_labels(pts, eps, min_pts)) == partition(dbscan_bruteforce(pts, eps, min_pts))

    def test_reduction_on_fixture(self, chain_prepared):
        assert len(chain_prepared.keypoints) <= 0.5 * len(chain_prepared.cloud)

    def test_positions_distinct(self, chain_prepared):
        pos = chain_prepared.keypoints.positions
        d = np.linalg.norm(pos[:, None] - pos[None], axis=2) + np.eye(len(pos)) * 1e9
        assert d.min() > 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 3.0), st.integers(1, 5))
def test_dbscan_partition_property(seed, eps, min_pts):
    pts = np.random.default_rng(seed).uniform(0, 10, size=(40, 3))
    assert partition(dbscan_labels(pts, eps, min_pts)) == partition(dbscan_bruteforce(pts, eps, min_pts))


def test_write_ply(tmp_path, single_blob):
    cloud = sample_grid(single_blob, 2.0)
    flags = np.arange(len(cloud)) % 2
    write_ply(tmp_path / "c.ply", cloud.points, cloud.vectors, {"keypoint": flags})
    lines = (tmp_path / "c.ply").read_text().splitlines()
    assert lines[0] == "ply"
    assert f"element vertex {len(cloud)}" in lines
    body = lines[lines.index("end_header") + 1 :]
    assert len(body) == len(cloud)
    row = np.array(body[1].split(), dtype=float)
    np.testing.assert_allclose(row[:3], cloud.points[1], atol=1e-6)
    assert abs(np.linalg.norm(row[3:6]) - 1.0) < 1e-5
    assert row[6] == 1
