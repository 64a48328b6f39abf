"""Raster formats round-trip bit-exactly; tiling and normalization contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bathyfill.rasters import (
    CoregistrationError,
    DepthRaster,
    NormalizationSpec,
    RasterParseError,
    RgbRaster,
    assemble_depth,
    check_coregistered,
    denormalize_depth,
    extract_patches,
    normalize_depth,
    normalize_image,
    read_grid,
    read_ppm,
    write_grid,
    write_ppm,
)


def random_depth(h=7, w=5, seed=0, gap_p=0.3):
    rng = np.random.default_rng(seed)
    values = -rng.uniform(0.1, 12.0, size=(h, w))
    values[rng.random((h, w)) < gap_p] = -9999.0
    return DepthRaster(values, gsd=0.25)


class TestDepthRaster:
    def test_mask_matches_nodata(self):
        r = random_depth()
        np.testing.assert_array_equal(r.mask == 0, r.values == r.nodata)

    def test_positive_depths_rejected(self):
        with pytest.raises(ValueError, match="<= 0"):
            DepthRaster(np.array([[1.0, -2.0]]))

    def test_non_2d_rejected(self):
        with pytest.raises(ValueError):
            DepthRaster(np.zeros(5))


class TestGridFormat:
    def test_round_trip_field_for_field(self, tmp_path):
        r = random_depth(seed=3)
        path = tmp_path / "a.grid"
        write_grid(r, path)
        back = read_grid(path)
        np.testing.assert_array_equal(back.values, r.values)
        assert back.gsd == r.gsd and back.nodata == r.nodata

    def test_round_trip_bytes_stable(self, tmp_path):
        r = random_depth(seed=4)
        p1, p2 = tmp_path / "a.grid", tmp_path / "b.grid"
        write_grid(r, p1)
        write_grid(read_grid(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_all_nodata_mask_zero(self, tmp_path):
        r = DepthRaster(np.full((3, 3), -9999.0))
        path = tmp_path / "n.grid"
        write_grid(r, path)
        assert read_grid(path).mask.sum() == 0

    def test_hand_written_fixture(self, tmp_path):
        path = tmp_path / "fix.grid"
        path.write_text(
            "ncols 2\nnrows 2\ncellsize 0.5\nnodata_value -9999.0\n-1.5 -2.25\n-9999.0 -0.125\n"
        )
        r = read_grid(path)
        assert r.gsd == 0.5
        np.testing.assert_array_equal(r.values, [[-1.5, -2.25], [-9999.0, -0.125]])
        np.testing.assert_array_equal(r.mask, [[1, 1], [0, 1]])

    def test_malformed_header_reports_line(self, tmp_path):
        path = tmp_path / "bad.grid"
        path.write_text("ncols 2\nbogus 3\n")
        with pytest.raises(RasterParseError, match=r":2:"):
            read_grid(path)

    def test_wrong_cell_count_reports_line(self, tmp_path):
        path = tmp_path / "bad.grid"
        path.write_text("ncols 3\nnrows 1\ncellsize 1.0\nnodata_value -9999\n-1.0 -2.0\n")
        with pytest.raises(RasterParseError, match=r":5:"):
            read_grid(path)


class TestPpmFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        img = RgbRaster(rng.integers(0, 256, size=(6, 4, 3), dtype=np.uint8))
        path = tmp_path / "img.ppm"
        write_ppm(img, path)
        np.testing.assert_array_equal(read_ppm(path).pixels, img.pixels)

    def test_round_trip_bytes_stable(self, tmp_path):
        rng = np.random.default_rng(6)
        img = RgbRaster(rng.integers(0, 256, size=(3, 5, 3), dtype=np.uint8))
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        write_ppm(img, p1)
        write_ppm(read_ppm(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(RasterParseError, match="P6"):
            read_ppm(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(RasterParseError, match="truncated"):
            read_ppm(path)


class TestPatches:
    def _pair(self, n=8, seed=0):
        rng = np.random.default_rng(seed)
        img = RgbRaster(rng.integers(0, 256, size=(n, n, 3), dtype=np.uint8), gsd=0.25)
        dsm = random_depth(n, n, seed=seed + 1)
        return img, dsm

    def test_exactly_one_patch(self):
        img, dsm = self._pair(4)
        assert len(extract_patches(img, dsm, 4)) == 1

    def test_tiling_counts(self):
        img, dsm = self._pair(8)
        patches = extract_patches(img, dsm, 4, stride=4)
        assert len(patches) == 4
        origins = {(p.row0, p.col0) for p in patches}
        assert origins == {(0, 0), (0, 4), (4, 0), (4, 4)}

    def test_reassembly_reproduces_raster(self):
        img, dsm = self._pair(8, seed=2)
        patches = extract_patches(img, dsm, 4)
        back = assemble_depth(patches, 8, 8, dsm.gsd)
        np.testing.assert_array_equal(back.values, dsm.values)

    def test_coregistration_rejected(self):
        img, _ = self._pair(8)
        other = random_depth(8, 6)
        with pytest.raises(CoregistrationError):
            extract_patches(img, other, 4)

    def test_gsd_mismatch_rejected(self):
        img, dsm = self._pair(8)
        dsm.gsd = 0.5
        with pytest.raises(CoregistrationError, match="sample distances"):
            check_coregistered(img, dsm)


class TestNormalization:
    def test_paper_divisor_lands_at_one(self):
        spec = NormalizationSpec(depth_divisor=-15.0)
        assert normalize_depth(np.array([-15.0]), spec)[0] == pytest.approx(1.0)

    def test_zero_depth_is_zero(self):
        assert normalize_depth(np.array([0.0]), NormalizationSpec())[0] == 0.0

    def test_rgb_255_is_one(self):
        assert normalize_image(np.array([255.0]), NormalizationSpec())[0] == pytest.approx(1.0)

    def test_positive_divisor_rejected(self):
        with pytest.raises(ValueError):
            NormalizationSpec(depth_divisor=6.0)

    def test_nodata_preserved_both_ways(self):
        spec = NormalizationSpec(depth_divisor=-6.0)
        values = np.array([-3.0, -9999.0, -6.0])
        normed = normalize_depth(values, spec)
        assert normed[1] == -9999.0
        back = denormalize_depth(normed, spec)
        assert back[1] == -9999.0
        np.testing.assert_allclose(back[[0, 2]], values[[0, 2]], atol=1e-9)

    @given(st.floats(-20.0, -0.01), st.floats(-30.0, -1.0))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_identity(self, depth, divisor):
        spec = NormalizationSpec(depth_divisor=divisor)
        back = denormalize_depth(normalize_depth(np.array([depth]), spec), spec)
        assert back[0] == pytest.approx(depth, abs=1e-6)
