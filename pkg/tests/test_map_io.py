import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mapalign.map_io import (
    DensityMap,
    KERNEL_WIDTH_PER_RESOLUTION,
    MRCError,
    decode_mrc,
    encode_mrc,
    read_mrc,
    synthesize_map,
    write_mrc,
)
from oracles import mrc_bytes


def _f32_map(shape, seed=0, voxel=(1.0, 1.5, 2.0), origin=(-3.0, 4.5, 10.0), contour=0.25):
    data = np.random.default_rng(seed).normal(size=shape).astype(np.float32).astype(np.float64)
    return DensityMap(data, voxel, origin, contour)


class TestDensityMap:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            DensityMap(np.array([[[np.nan]]]))

    def test_rejects_bad_voxel(self):
        with pytest.raises(ValueError):
            DensityMap(np.zeros((2, 2, 2)), voxel_size=(1.0, 0.0, 1.0))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            DensityMap(np.zeros((0, 2, 2)))

    def test_data_is_read_only(self):
        m = DensityMap(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            m.data[0, 0, 0] = 1.0

    def test_above_contour_volume(self):
        data = np.zeros((10, 10, 10))
        data[2:5, 3:4, 1:9] = 1.0
        m = DensityMap(data, voxel_size=2.0, contour_level=0.5)
        assert m.above_contour_volume() == pytest.approx(3 * 1 * 8 * 8.0)


class TestReadMrc:
    def test_handbuilt_header(self, tmp_path):
        values = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        path = tmp_path / "hand.mrc"
        path.write_bytes(mrc_bytes(values))
        m = read_mrc(path)
        assert m.dims == (2, 3, 4)
        np.testing.assert_array_equal(m.data, values)
        # x fastest on disk
        raw = np.frombuffer(path.read_bytes()[1024:], dtype="<f4")
        assert raw[1] == values[1, 0, 0]

    def test_big_endian_matches_little(self, tmp_path):
        values = np.random.default_rng(1).normal(size=(3, 4, 5)).astype(np.float32)
        little = decode_mrc(mrc_bytes(values, voxel=(1.2, 1.2, 1.2), origin=(5, 6, 7)))
        big = decode_mrc(mrc_bytes(values, voxel=(1.2, 1.2, 1.2), origin=(5, 6, 7), big_endian=True))
        np.testing.assert_array_equal(little.data, big.data)
        np.testing.assert_array_equal(little.voxel_size, big.voxel_size)
        np.testing.assert_array_equal(little.origin, big.origin)

    @pytest.mark.parametrize("mode,dtype", [(0, np.int8), (1, np.int16), (2, np.float32)])
    def test_modes(self, mode, dtype):
        values = (np.arange(60).reshape(3, 4, 5) - 30).astype(dtype)
        m = decode_mrc(mrc_bytes(values, mode=mode))
        np.testing.assert_array_equal(m.data, values.astype(np.float64))

    def test_voxel_size_from_cell(self):
        m = decode_mrc(mrc_bytes(np.zeros((4, 5, 6), np.float32), voxel=(0.5, 1.0, 2.0)))
        np.testing.assert_allclose(m.voxel_size, [0.5, 1.0, 2.0])

    def test_origin_falls_back_to_nstart(self):
        m = decode_mrc(mrc_bytes(np.zeros((4, 4, 4), np.float32), voxel=(2.0, 2.0, 2.0), nstart=(1, -2, 3)))
        np.testing.assert_allclose(m.origin, [2.0, -4.0, 6.0])

    def test_skips_symmetry_block(self):
        values = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        m = decode_mrc(mrc_bytes(values, nsymbt=80))
        np.testing.assert_array_equal(m.data, values)

    def test_truncated(self):
        raw = mrc_bytes(np.zeros((4, 4, 4), np.float32))
        with pytest.raises(MRCError, match="truncated"):
            decode_mrc(raw[:-4])

    def test_short_header(self):
        with pytest.raises(MRCError):
            decode_mrc(b"\x00" * 100)

    def test_unsupported_mode(self):
        raw = bytearray(mrc_bytes(np.zeros((2, 2, 2), np.float32)))
        struct.pack_into("<i", raw, 12, 6)
        with pytest.raises(MRCError, match="mode"):
            decode_mrc(bytes(raw))

    def test_dims_cap(self):
        raw = mrc_bytes(np.zeros((4, 4, 4), np.float32))
        with pytest.raises(MRCError):
            decode_mrc(raw, max_voxels=10)

    def test_axis_permutation_rejected(self):
        raw = bytearray(mrc_bytes(np.zeros((2, 2, 2), np.float32)))
        struct.pack_into("<3i", raw, 64, 3, 2, 1)
        with pytest.raises(MRCError, match="axis order"):
            decode_mrc(bytes(raw))

    def test_default_contour_without_label(self):
        values = np.random.default_rng(2).normal(size=(4, 4, 4)).astype(np.float32)
        m = decode_mrc(mrc_bytes(values))
        d = values.astype(np.float64)
        assert m.contour_level == pytest.approx(d.mean() + 2 * d.std())


class TestWriteMrc:
    def test_round_trip(self, tmp_path):
        m = _f32_map((5, 6, 7))
        write_mrc(m, tmp_path / "m.mrc")
        back = read_mrc(tmp_path / "m.mrc")
        assert back.dims == m.dims
        np.testing.assert_array_equal(back.data, m.data)
        np.testing.assert_array_equal(back.voxel_size, m.voxel_size)
        np.testing.assert_array_equal(back.origin, m.origin)
        assert back.contour_level == m.contour_level

    def test_single_voxel_size(self, tmp_path):
        write_mrc(DensityMap(np.zeros((1, 1, 1))), tmp_path / "one.mrc")
        assert (tmp_path / "one.mrc").stat().st_size == 1028

    def test_header_statistics(self):
        m = _f32_map((4, 5, 6))
        raw = encode_mrc(m)
        dmin, dmax, dmean = struct.unpack("<3f", raw[76:88])
        assert dmax == np.float32(m.data.max())
        assert dmin == np.float32(m.data.min())
        assert dmean == pytest.approx(m.data.mean(), abs=1e-6)

    def test_stamp_and_map_word(self):
        raw = encode_mrc(_f32_map((2, 2, 2)))
        assert raw[208:212] == b"MAP "
        assert raw[212:216] == bytes([0x44, 0x44, 0, 0])
        assert struct.unpack("<i", raw[12:16])[0] == 2

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-1e3, 1e3, width=32)))
    def test_byte_swapped_encoding_property(self, values):
        m = DensityMap(values.astype(np.float64))
        little = encode_mrc(m)
        words = np.frombuffer(little[:1024], dtype="<i4").copy()
        swapped = bytearray(words.byteswap().tobytes())
        swapped[208:212] = b"MAP "
        swapped[212:216] = bytes([0x11, 0x11, 0, 0])
        swapped[224:1024] = little[224:1024]  # labels are text
        body = np.frombuffer(little[1024:], dtype="<f4").astype(">f4").tobytes()
        back = decode_mrc(bytes(swapped) + body)
        np.testing.assert_array_equal(back.data, m.data)


class TestSynthesizeMap:
    def test_peak_at_centre(self):
        m = synthesize_map([[0.0, 0.0, 0.0]], [1.0], resolution=6.0)
        peak = np.unravel_index(np.argmax(m.data), m.dims)
        world = m.origin + np.array(peak) * m.voxel_size
        assert np.linalg.norm(world) <= math.sqrt(3) * 0.5 + 1e-9

    def test_linearity(self):
        one = synthesize_map([[1.0, 2.0, 3.0]], [1.0])
        two = synthesize_map([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]], [1.0, 1.0])
        np.testing.assert_allclose(two.data, 2.0 * one.data, rtol=1e-12)

    def test_kernel_width(self):
        # the voxel 1 A from the centre follows the analytic kernel
        m = synthesize_map([[0.0, 0.0, 0.0]], [1.0], resolution=4.0, voxel_size=1.0, padding=10.0)
        s = 4.0 * KERNEL_WIDTH_PER_RESOLUTION
        centre = np.round(-m.origin).astype(int)
        assert np.allclose(m.origin + centre, 0.0)
        i = centre[0] + 1
        expected = math.exp(-1.0 / (2 * s * s))
        assert m.data[i, centre[1], centre[2]] / m.data[tuple(centre)] == pytest.approx(expected, rel=1e-12)
        # at distance s, interpolating log-density in squared distance between
        # the bracketing voxels (exact for a Gaussian) gives exp(-0.5)
        lo = math.floor(s)
        v0 = m.data[centre[0] + lo, centre[1], centre[2]]
        v1 = m.data[centre[0] + lo + 1, centre[1], centre[2]]
        frac = (s * s - lo * lo) / ((lo + 1) ** 2 - lo * lo)
        interp = math.exp(math.log(v0) + frac * (math.log(v1) - math.log(v0)))
        assert interp / m.data[tuple(centre)] == pytest.approx(math.exp(-0.5), rel=0.02)

    def test_matches_analytic_kernel(self):
        centers = np.array([[0.3, -1.2, 2.5], [4.0, 1.0, -2.0]])
        weights = np.array([1.0, 0.5])
        m = synthesize_map(centers, weights, resolution=4.0, voxel_size=1.0, padding=6.0)
        s = 4.0 * KERNEL_WIDTH_PER_RESOLUTION
        gx, gy, gz = np.meshgrid(*m.voxel_coords(), indexing="ij")
        expected = sum(w * np.exp(-((gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2) / (2 * s * s)) for c, w in zip(centers, weights))
        # the generator truncates each kernel at 6 s
        assert np.max(np.abs(m.data - expected)) < 1e-7

    def test_non_negative_and_symmetric(self, single_blob):
        d = single_blob.data
        assert d.min() >= 0
        assert all(n % 2 == 1 for n in single_blob.dims)
        for axis in range(3):
            assert np.max(np.abs(d - np.flip(d, axis=axis))) < 1e-6 * d.max()

    def test_contour_fraction(self, single_blob):
        assert single_blob.contour_level == pytest.approx(0.1 * single_blob.data.max())

    def test_covers_centres_plus_padding(self):
        centers = np.array([[0, 0, 0], [10, -5, 3.0]])
        m = synthesize_map(centers, padding=4.0)
        lo, hi = m.bounds()
        assert np.all(lo <= centers.min(axis=0) - 4.0 + 1e-9)
        assert np.all(hi >= centers.max(axis=0) + 4.0 - 1e-9)

    def test_degenerate_box(self):
        with pytest.raises(ValueError):
            synthesize_map([[0.0, 0.0, 0.0]], padding=0.0)
