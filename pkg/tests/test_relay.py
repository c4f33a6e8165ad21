import numpy as np
import pytest

from scaleloss.errors import ConfigError, ShapeError
from scaleloss.relay import (
    FeatureMap,
    LevelParams,
    Pyramid,
    channel_attention,
    global_avg_pool,
    init_relay_params,
    random_pyramid,
    relay_forward,
    spatial_attention,
)

SMALL = [(16, 16, 16), (32, 8, 8), (64, 4, 4)]


def small_setup(seed=0):
    params = init_relay_params([s[0] for s in SMALL], reduction=4, seed=seed, kernel_size=3)
    return random_pyramid(SMALL, seed=seed + 100), params


class TestTypes:
    def test_feature_map_validation(self):
        with pytest.raises(ShapeError):
            FeatureMap(np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            FeatureMap(np.full((1, 2, 2), np.inf))

    def test_pyramid_needs_halving(self):
        with pytest.raises(ShapeError):
            Pyramid((np.zeros((4, 8, 8)), np.zeros((4, 3, 4))))
        with pytest.raises(ShapeError):
            Pyramid((np.zeros((4, 8, 8)),))


class TestPool:
    def test_constant(self):
        np.testing.assert_array_equal(global_avg_pool(FeatureMap(np.full((3, 4, 5), 2.5))), [2.5] * 3)

    def test_mean(self):
        assert global_avg_pool(FeatureMap(np.array([[[1.0, 2.0], [3.0, 4.0]]]))).tolist() == [2.5]

    def test_zero(self):
        np.testing.assert_array_equal(global_avg_pool(FeatureMap(np.zeros((4, 2, 2)))), np.zeros(4))


class TestAttention:
    def test_zero_weights_give_half(self):
        pyr, params = small_setup()
        z = params.zeros_like()
        a_c = channel_attention(pyr.levels[1], z.levels[0], 16)
        np.testing.assert_array_equal(a_c, np.full(16, 0.5))
        a_s = spatial_attention(pyr.levels[0], z.levels[0])
        np.testing.assert_array_equal(a_s, np.full((16, 16), 0.5))

    def test_saturation(self):
        c = 8
        lp = LevelParams(fc1=np.full((2, c), 1.0), fc2=np.full((c, 2), 1.0), spatial=np.zeros((2, 3, 3)), proj=None)
        a = channel_attention(FeatureMap(np.full((c, 2, 2), 10.0)), lp, c)
        assert np.all(a >= 1 - 1e-6)

    def test_channel_mismatch(self):
        pyr, params = small_setup()
        with pytest.raises(ShapeError):
            channel_attention(pyr.levels[2], params.levels[0], 16)

    def test_open_unit_interval(self):
        pyr, params = small_setup(3)
        _, gates = relay_forward(pyr, params, return_attention=True)
        for a_c, a_s in gates:
            assert a_c.min() > 0 and a_c.max() < 1
            assert a_s.min() > 0 and a_s.max() < 1

    def test_spatial_flip_symmetry(self, rng):
        half = rng.normal(size=(4, 6, 3))
        x = np.concatenate([half, half[:, :, ::-1]], axis=2)  # mirror-symmetric in width
        k = rng.normal(size=(2, 5, 5))
        k = 0.5 * (k + k[:, :, ::-1])
        lp = LevelParams(fc1=np.zeros((1, 4)), fc2=np.zeros((4, 1)), spatial=k, proj=None)
        a = spatial_attention(FeatureMap(x), lp)
        np.testing.assert_allclose(a, a[:, ::-1], atol=1e-14)

    def test_deterministic(self):
        pyr, params = small_setup(42)
        a1 = channel_attention(pyr.levels[1], params.levels[0], 16)
        _, params2 = small_setup(42)
        a2 = channel_attention(pyr.levels[1], params2.levels[0], 16)
        assert a1.tobytes() == a2.tobytes()


class TestForward:
    def test_zero_params_scale_input(self):
        pyr, params = small_setup()
        out = relay_forward(pyr, params.zeros_like())
        for x, y in zip(pyr.levels, out.levels):
            np.testing.assert_allclose(y.data, 1.25 * x.data, rtol=0, atol=1e-12)

    def test_zero_input(self):
        _, params = small_setup()
        zero = Pyramid(tuple(FeatureMap(np.zeros(s)) for s in SMALL))
        out = relay_forward(zero, params)
        assert all(not lv.data.any() for lv in out.levels)

    def test_shapes_preserved(self):
        pyr, params = small_setup()
        assert relay_forward(pyr, params).shapes == pyr.shapes

    def test_bounded(self):
        pyr, params = small_setup(5)
        out = relay_forward(pyr, params)
        for x, y in zip(pyr.levels, out.levels):
            assert np.all(np.abs(y.data) <= 2 * np.abs(x.data) + 1e-15)

    def test_bit_deterministic(self):
        pyr, params = small_setup(9)
        a = relay_forward(pyr, params)
        b = relay_forward(pyr, init_relay_params([s[0] for s in SMALL], 4, 9, 3))
        assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.levels, b.levels))

    def test_param_level_mismatch(self):
        pyr, _ = small_setup()
        params = init_relay_params([16, 32], reduction=4, seed=0, kernel_size=3)
        with pytest.raises(ShapeError):
            relay_forward(pyr, params)

    def test_top_level_uses_own_features(self):
        pyr, params = small_setup(1)
        out = relay_forward(pyr, params)
        top = pyr.levels[-1]
        lp = params.levels[-1]
        expected = top.data * channel_attention(top, lp, top.channels)[:, None, None] * spatial_attention(top, lp) + top.data
        np.testing.assert_array_equal(out.levels[-1].data, expected)


class TestInit:
    def test_same_seed(self):
        a = init_relay_params([8, 16], 4, seed=3)
        b = init_relay_params([8, 16], 4, seed=3)
        for la, lb in zip(a.levels, b.levels):
            assert np.array_equal(la.fc1, lb.fc1) and np.array_equal(la.spatial, lb.spatial)

    def test_different_seed(self):
        a = init_relay_params([8, 16], 4, seed=3)
        b = init_relay_params([8, 16], 4, seed=4)
        assert not np.array_equal(a.levels[0].fc1, b.levels[0].fc1)

    def test_full_reduction(self):
        p = init_relay_params([8, 16], reduction=8, seed=0)
        assert p.levels[0].fc1.shape == (1, 8)

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            init_relay_params([8, 12], reduction=8)

    def test_bounds(self):
        p = init_relay_params([64, 128], reduction=16, seed=0)
        lp = p.levels[0]
        assert np.abs(lp.fc1).max() <= 1 / np.sqrt(64)
        assert np.abs(lp.fc2).max() <= 1 / np.sqrt(4)
        assert np.abs(lp.proj).max() <= 1 / np.sqrt(128)
        assert np.abs(lp.spatial).max() <= 1 / np.sqrt(2 * 49)
        assert p.levels[1].proj is None
