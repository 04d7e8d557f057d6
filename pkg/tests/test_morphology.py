import numpy as np
import pytest

from lesionforge.morphology import (
    component_volume_mm3,
    connected_components,
    dilate,
    erode,
)
from lesionforge.volume import Geometry, LesionMask

from conftest import make_random_mask
from oracles import dilate_reference, erode_reference, flood_fill_count


class TestConnectedComponents:
    def test_empty_mask(self, iso_geom):
        cm = connected_components(LesionMask.empty(iso_geom))
        assert cm.count == 0
        assert cm.labels.max() == 0

    def test_corner_touching_voxels(self, iso_geom):
        data = np.zeros(iso_geom.dims, dtype=np.uint8)
        data[3, 3, 3] = 1
        data[4, 4, 4] = 1
        mask = LesionMask(iso_geom, data)
        assert connected_components(mask, 26).count == 1
        assert connected_components(mask, 18).count == 2
        assert connected_components(mask, 6).count == 2

    def test_edge_touching_voxels(self, iso_geom):
        data = np.zeros(iso_geom.dims, dtype=np.uint8)
        data[3, 3, 3] = 1
        data[4, 4, 3] = 1  # share an edge
        mask = LesionMask(iso_geom, data)
        assert connected_components(mask, 26).count == 1
        assert connected_components(mask, 18).count == 1
        assert connected_components(mask, 6).count == 2

    @pytest.mark.parametrize("connectivity", [6, 18, 26])
    def test_counts_match_flood_fill(self, connectivity):
        rng = np.random.default_rng(10)
        for _ in range(50):
            mask = make_random_mask((16, 16, 16), rng, density=0.2)
            cm = connected_components(mask, connectivity)
            assert cm.count == flood_fill_count(mask.foreground, connectivity)

    def test_ids_ascend_by_first_linear_index(self):
        geom = Geometry.isotropic((8, 8, 8))
        data = np.zeros(geom.dims, dtype=np.uint8)
        data[6, 6, 6] = 1  # linear index 6 + 8*6 + 64*6
        data[1, 0, 0] = 1  # linear index 1, must become id 1
        data[0, 0, 4] = 1  # linear index 256
        cm = connected_components(LesionMask(geom, data), 26)
        assert cm.count == 3
        assert cm.labels[1, 0, 0] == 1
        assert cm.labels[0, 0, 4] == 2
        assert cm.labels[6, 6, 6] == 3
        assert list(cm.first_voxel_indices) == [1, 256, 6 + 8 * 6 + 64 * 6]

    def test_relabel_stable(self):
        rng = np.random.default_rng(11)
        mask = make_random_mask((12, 12, 12), rng)
        a = connected_components(mask, 26)
        b = connected_components(LesionMask(mask.geom, a.labels > 0), 26)
        assert np.array_equal(a.labels, b.labels)

    def test_volumes(self):
        geom = Geometry((8, 8, 8), (1.0, 1.0, 3.0), np.diag([1.0, 1.0, 3.0, 1.0]))
        data = np.zeros(geom.dims, dtype=np.uint8)
        data[0:2, 0, 0] = 1
        cm = connected_components(LesionMask(geom, data))
        assert cm.volumes_mm3[0] == pytest.approx(6.0)

    def test_invalid_connectivity(self, iso_geom):
        with pytest.raises(ValueError, match="connectivity"):
            connected_components(LesionMask.empty(iso_geom), 10)


class TestErode:
    def test_single_voxel_vanishes(self):
        fg = np.zeros((5, 5, 5), dtype=bool)
        fg[2, 2, 2] = True
        assert not erode(fg, 1).any()

    def test_cube_shrinks_to_interior(self):
        fg = np.zeros((9, 9, 9), dtype=bool)
        fg[2:7, 2:7, 2:7] = True  # 5^3 cube
        out = erode(fg, 1)
        expected = np.zeros_like(fg)
        expected[3:6, 3:6, 3:6] = True  # 3^3 interior
        assert np.array_equal(out, expected)
        assert out.sum() == 27

    def test_over_erosion_empties(self):
        fg = np.zeros((9, 9, 9), dtype=bool)
        fg[2:7, 2:7, 2:7] = True
        assert not erode(fg, 3).any()

    def test_volume_boundary_is_background(self):
        fg = np.ones((3, 3, 3), dtype=bool)
        out = erode(fg, 1)
        expected = np.zeros_like(fg)
        expected[1, 1, 1] = True
        assert np.array_equal(out, expected)

    def test_matches_reference(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            fg = rng.random((10, 10, 10)) < 0.5
            assert np.array_equal(erode(fg, 1), erode_reference(fg))

    def test_composition(self):
        rng = np.random.default_rng(13)
        fg = rng.random((12, 12, 12)) < 0.7
        assert np.array_equal(erode(fg, 3), erode(erode(fg, 1), 2))

    def test_monotone(self):
        rng = np.random.default_rng(14)
        small = rng.random((10, 10, 10)) < 0.4
        big = small | (rng.random((10, 10, 10)) < 0.2)
        assert not (erode(small, 1) & ~erode(big, 1)).any()

    def test_rejects_zero_iterations(self):
        with pytest.raises(ValueError, match="iterations"):
            erode(np.ones((3, 3, 3), dtype=bool), 0)


class TestDilate:
    def test_center_voxel_becomes_cross(self):
        fg = np.zeros((5, 5, 5), dtype=bool)
        fg[2, 2, 2] = True
        out = dilate(fg, 1)
        assert out.sum() == 7
        assert out[2, 2, 2] and out[1, 2, 2] and out[3, 2, 2]
        assert out[2, 1, 2] and out[2, 3, 2] and out[2, 2, 1] and out[2, 2, 3]

    def test_corner_voxel_clipped(self):
        fg = np.zeros((5, 5, 5), dtype=bool)
        fg[0, 0, 0] = True
        assert dilate(fg, 1).sum() == 4

    def test_closing_contains_input(self):
        # Holds for interior shapes only: erosion treats the volume boundary
        # as background, so edge voxels of X never survive the closing.
        rng = np.random.default_rng(15)
        for _ in range(50):
            fg = np.zeros((10, 10, 10), dtype=bool)
            fg[1:-1, 1:-1, 1:-1] = rng.random((8, 8, 8)) < 0.3
            closed = erode(dilate(fg, 1), 1)
            assert not (fg & ~closed).any()

    def test_matches_reference(self):
        rng = np.random.default_rng(16)
        for _ in range(25):
            fg = rng.random((10, 10, 10)) < 0.2
            assert np.array_equal(dilate(fg, 1), dilate_reference(fg))

    def test_composition_and_monotone(self):
        rng = np.random.default_rng(17)
        fg = rng.random((10, 10, 10)) < 0.1
        assert np.array_equal(dilate(fg, 3), dilate(dilate(fg, 2), 1))
        bigger = fg | (rng.random((10, 10, 10)) < 0.1)
        assert not (dilate(fg, 2) & ~dilate(bigger, 2)).any()


class TestComponentVolume:
    def test_isotropic(self):
        geom = Geometry.isotropic((6, 6, 6))
        comp = np.zeros(geom.dims, dtype=bool)
        comp.ravel()[:10] = True
        assert component_volume_mm3(comp, geom) == pytest.approx(10.0)

    def test_anisotropic(self):
        geom = Geometry((6, 6, 6), (1.0, 1.0, 3.0), np.diag([1.0, 1.0, 3.0, 1.0]))
        comp = np.zeros(geom.dims, dtype=bool)
        comp.ravel()[:10] = True
        assert component_volume_mm3(comp, geom) == pytest.approx(30.0)

    def test_random_recount(self):
        rng = np.random.default_rng(18)
        geom = Geometry((8, 8, 8), (0.5, 2.0, 1.5), np.diag([0.5, 2.0, 1.5, 1.0]))
        comp = rng.random(geom.dims) < 0.5
        expected = float(comp.sum()) * 0.5 * 2.0 * 1.5
        assert component_volume_mm3(comp, geom) == pytest.approx(expected)
