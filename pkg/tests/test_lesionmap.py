import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fundoscope.lesionmap import WeightedImage, apply_weight, build_maps, expand_and_tile, fuse, predict_maps
from fundoscope.networks import build_local
from fundoscope.tiling import extract_patches, grid_positions


def accumulate_oracle(LP, d, h, positions):
    """Per-pixel loop: mean of LP over every window that contains the pixel."""
    M = np.zeros((d, d))
    for y in range(d):
        for x in range(d):
            vals = [LP[r, c] for r, py in enumerate(positions) for c, px in enumerate(positions)
                    if py <= y < py + h and px <= x < px + h]
            M[y, x] = sum(vals) / len(vals)
    return M


class TestFuse:
    def test_values(self):
        L = np.array([[0, 1], [2, 3]])
        P = np.array([[0.9, 0.5], [0.8, 0.7]])
        np.testing.assert_allclose(fuse(L, P), [[0.9, 1.0], [2.4, 2.8]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fuse(np.zeros((2, 2)), np.zeros((3, 3)))


class TestExpand:
    def test_no_overlap_is_block_constant(self):
        g = grid_positions(8, 4, 0)
        LP = np.array([[1.0, 2.0], [3.0, 4.0]])
        M = expand_and_tile(LP, g)
        np.testing.assert_array_equal(M[:4, :4], 1.0)
        np.testing.assert_array_equal(M[4:, 4:], 4.0)

    def test_four_way_corner(self):
        g = grid_positions(6, 4, 2)
        LP = np.array([[1.0, 2.0], [3.0, 4.0]])
        M = expand_and_tile(LP, g)
        np.testing.assert_allclose(M[2:4, 2:4], 2.5)  # mean of all four windows
        np.testing.assert_allclose(M[0, 2], 1.5)
        np.testing.assert_allclose(M[2, 0], 2.0)

    def test_clamped_window_overlap(self):
        g = grid_positions(10, 4, 0)  # positions 0, 4, 6
        LP = np.arange(9.0).reshape(3, 3)
        np.testing.assert_allclose(expand_and_tile(LP, g), accumulate_oracle(LP, 10, 4, g.positions))

    def test_wrong_shape(self):
        with pytest.raises(ValueError):
            expand_and_tile(np.zeros((2, 2)), grid_positions(12, 4, 0))


class TestWeight:
    def test_apply_weight_is_per_channel_product(self):
        img = np.random.default_rng(0).uniform(0, 255, (3, 6, 6))
        M = np.random.default_rng(1).uniform(0.3, 4, (6, 6))
        np.testing.assert_allclose(apply_weight(img, M).pixels, img * M[None])

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            apply_weight(np.ones((3, 2, 2)), np.zeros((2, 2)))

    def test_display_rescales(self):
        w = WeightedImage(np.array([[[0.0, 510.0]]]))
        np.testing.assert_array_equal(w.display(), [[[0, 255]]])


class TestMaps:
    def test_predict_maps_layout(self):
        net = build_local(16, width_divisor=16, seed=0)
        img = np.random.default_rng(0).uniform(0, 1, (3, 40, 40))
        g = grid_positions(40, 16, 4)
        maps = build_maps(net, extract_patches(img, g))
        assert maps.L.shape == maps.P.shape == (g.s, g.s)
        assert ((maps.P >= 0.25) & (maps.P <= 1)).all()
        assert maps.M.shape == (40, 40) and (maps.M > 0).all()

    def test_rejects_non_lesion_network(self):
        from fundoscope.networks import build_global

        net = build_global(16, width_divisor=16, n_classes=2)
        g = grid_positions(16, 16, 0)
        with pytest.raises(ValueError):
            predict_maps(net, extract_patches(np.zeros((3, 16, 16)), g))


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 40), st.data())
def test_expand_matches_oracle_property(d, data):
    h = data.draw(st.integers(2, d))
    ov = data.draw(st.integers(0, h - 1))
    g = grid_positions(d, h, ov)
    LP = np.array(data.draw(st.lists(st.floats(0.25, 4.0), min_size=g.n_patches, max_size=g.n_patches)))
    LP = LP.reshape(g.s, g.s)
    np.testing.assert_allclose(expand_and_tile(LP, g), accumulate_oracle(LP, d, h, g.positions),
                               rtol=0, atol=1e-12)
