import numpy as np
import pytest

from longireg.volume import (Grid3, GridMismatchError, LabelMask, Volume3, downsample,
                             require_same_grid, resample_nearest)


class TestGrid:
    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            Grid3((4, 4, 4), (1.0, 0.0, 1.0))

    def test_rejects_tiny_dims(self):
        with pytest.raises(ValueError):
            Grid3((1, 4, 4))

    def test_world_index_round_trip(self):
        g = Grid3((5, 6, 7), (0.5, 1.0, 2.0), (10.0, -3.0, 1.0))
        idx = np.array([1.5, 2.0, 6.0])
        assert np.allclose(g.world_to_index(g.index_to_world(idx)), idx)

    def test_dict_round_trip(self):
        g = Grid3((5, 6, 7), (0.5, 1.0, 2.0), (10.0, -3.0, 1.0))
        assert Grid3.from_dict(g.to_dict()) == g


class TestVolume:
    def test_flat_is_x_fastest(self):
        g = Grid3((2, 3, 4))
        v = Volume3(g, np.arange(24.0))
        assert v.data[1, 0, 0] == 1.0
        assert v.data[0, 1, 0] == 2.0
        assert np.array_equal(v.flat(), np.arange(24.0))

    def test_rejects_nan(self):
        d = np.zeros((3, 3, 3))
        d[1, 1, 1] = np.nan
        with pytest.raises(ValueError):
            Volume3(Grid3((3, 3, 3)), d)

    def test_rejects_unknown_units(self):
        with pytest.raises(ValueError):
            Volume3(Grid3((3, 3, 3)), np.zeros((3, 3, 3)), "furlongs")

    def test_label_mask_rejects_fractional(self):
        with pytest.raises(ValueError):
            LabelMask(Grid3((2, 2, 2)), np.full((2, 2, 2), 0.5))

    def test_grid_mismatch(self):
        a = Volume3(Grid3((3, 3, 3)), np.zeros((3, 3, 3)))
        b = Volume3(Grid3((3, 3, 3), (2, 2, 2)), np.zeros((3, 3, 3)))
        with pytest.raises(GridMismatchError):
            require_same_grid(a, b)


class TestDownsample:
    def test_constant(self):
        v = Volume3(Grid3((8, 8, 8)), np.full((8, 8, 8), 7.0))
        d = downsample(v, 2)
        assert d.grid.dims == (4, 4, 4)
        assert np.all(d.data == 7.0)

    def test_first_block_mean(self):
        v = Volume3(Grid3((4, 4, 4)), np.arange(64.0))
        d = downsample(v, 2)
        assert d.data[0, 0, 0] == np.mean([0, 1, 4, 5, 16, 17, 20, 21]) == 10.5

    def test_brute_force_blocks(self, rng):
        data = rng.normal(size=(9, 8, 10))
        d = downsample(Volume3(Grid3(data.shape), data), 2)
        assert d.grid.dims == (5, 4, 5)
        for i, j, k in np.ndindex(*d.grid.dims):
            block = data[2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2]
            assert d.data[i, j, k] == pytest.approx(block.mean(), abs=1e-12)

    def test_spacing_and_origin(self):
        d = downsample(Volume3(Grid3((8, 8, 8)), np.zeros((8, 8, 8))), 2)
        assert d.grid.spacing == (2.0, 2.0, 2.0)
        assert d.grid.origin == (0.5, 0.5, 0.5)

    def test_factor_one_rejected(self):
        with pytest.raises(ValueError):
            downsample(Volume3(Grid3((8, 8, 8)), np.zeros((8, 8, 8))), 1)


class TestResampleNearest:
    def test_identity(self, rng):
        m = LabelMask(Grid3((5, 5, 5)), rng.integers(0, 3, (5, 5, 5)))
        assert np.array_equal(resample_nearest(m, m.grid).labels, m.labels)

    def test_upsampled_cube_doubles(self):
        labels = np.zeros((8, 8, 8), int)
        labels[2:5, 2:5, 2:5] = 1
        src = LabelMask(Grid3((8, 8, 8)), labels)
        target = Grid3((16, 16, 16), (0.5, 0.5, 0.5), (-0.25, -0.25, -0.25))
        out = resample_nearest(src, target)
        # brute-force nearest lookup
        expect = np.zeros(target.dims, int)
        for idx in np.ndindex(*target.dims):
            w = target.index_to_world(idx)
            s = np.floor(src.grid.world_to_index(w) + 0.5).astype(int)
            if np.all(s >= 0) and np.all(s < 8):
                expect[idx] = labels[tuple(s)]
        assert np.array_equal(out.labels, expect)
        xs = np.flatnonzero(out.labels.any(axis=(1, 2)))
        assert len(xs) == 6

    def test_outside_extent_is_empty(self):
        src = LabelMask(Grid3((4, 4, 4)), np.ones((4, 4, 4), int))
        far = Grid3((4, 4, 4), (1, 1, 1), (100.0, 100.0, 100.0))
        assert not resample_nearest(src, far).labels.any()
