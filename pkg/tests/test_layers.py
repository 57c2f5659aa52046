import numpy as np
import pytest

from melcycle import autodiff as ad
from melcycle.autodiff import Tensor
from melcycle.layers import (
    AdaptiveNormConfig,
    Conv1d,
    Conv2d,
    avg_pool_time,
    nearest_resize_2d,
)


class TestResolutionMatching:
    def test_avg_pool_time_matches_block_means(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 12))
        out = avg_pool_time(Tensor(x), 3)
        assert out.shape == (5, 3)
        for q in range(5):
            for t in range(3):
                assert out.data[q, t] == pytest.approx(x[q, 4 * t : 4 * t + 4].mean(), abs=1e-15)

    def test_avg_pool_requires_divisibility(self):
        with pytest.raises(ValueError):
            avg_pool_time(Tensor(np.zeros((2, 10))), 4)

    def test_nearest_resize_floor_convention(self):
        x = np.arange(12.0).reshape(3, 4)
        out = nearest_resize_2d(Tensor(x), 6, 2)
        # floor(i * src / dst): rows repeat, columns subsample even indices
        for i in range(6):
            for j in range(2):
                assert out.data[i, j] == x[(i * 3) // 6, (j * 4) // 2]

    def test_nearest_integer_upsample_then_subsample_is_identity(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 6))
        up = nearest_resize_2d(Tensor(x), 8, 12)
        back = nearest_resize_2d(up, 4, 6)
        np.testing.assert_array_equal(back.data, x)

    def test_pooling_and_resize_are_differentiable(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
        probe = Tensor(rng.standard_normal((4, 2)))
        assert ad.grad_check(lambda x: (avg_pool_time(x, 2) * probe).sum(), [x]) < 1e-6
        x2 = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
        probe2 = Tensor(rng.standard_normal((8, 4)))
        assert (
            ad.grad_check(lambda x: (nearest_resize_2d(x, 8, 4) * probe2).sum(), [x2]) < 1e-6
        )


class TestConvLayers:
    def test_init_is_centered_uniform_with_fan_in_scale(self):
        rng = np.random.default_rng(3)
        conv = Conv2d(rng, 8, 4, (5, 5))
        bound = 1.0 / np.sqrt(8 * 25)
        assert np.all(np.abs(conv.w.data) <= bound)
        assert np.all(conv.b.data == 0.0)
        assert conv.w.data.std() > 0.3 * bound  # actually spread out

    def test_same_seed_same_weights(self):
        a = Conv1d(np.random.default_rng(7), 3, 4, 5)
        b = Conv1d(np.random.default_rng(7), 3, 4, 5)
        np.testing.assert_array_equal(a.w.data, b.w.data)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AdaptiveNormConfig(depth=0)
        with pytest.raises(ValueError):
            AdaptiveNormConfig(kernel_size=4)
        with pytest.raises(ValueError):
            AdaptiveNormConfig(mode="3d")
