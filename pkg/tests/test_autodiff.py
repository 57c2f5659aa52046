import numpy as np
import pytest

from melcycle import autodiff as ad
from melcycle.autodiff import Tensor


def rand(*shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


def naive_conv1d(x, w, b, stride=1, pad=(0, 0)):
    c_out, c_in, k = w.shape
    xp = np.pad(x, ((0, 0), pad))
    t_out = (xp.shape[1] - k) // stride + 1
    out = np.zeros((c_out, t_out))
    for co in range(c_out):
        for t in range(t_out):
            s = 0.0
            for ci in range(c_in):
                for kk in range(k):
                    s += w[co, ci, kk] * xp[ci, t * stride + kk]
            out[co, t] = s + b[co]
    return out


def naive_conv2d(x, w, b, stride=(1, 1), pad=((0, 0), (0, 0))):
    c_out, c_in, kq, kt = w.shape
    xp = np.pad(x, ((0, 0), pad[0], pad[1]))
    q_out = (xp.shape[1] - kq) // stride[0] + 1
    t_out = (xp.shape[2] - kt) // stride[1] + 1
    out = np.zeros((c_out, q_out, t_out))
    for co in range(c_out):
        for q in range(q_out):
            for t in range(t_out):
                s = 0.0
                for ci in range(c_in):
                    for a in range(kq):
                        for c in range(kt):
                            s += w[co, ci, a, c] * xp[ci, q * stride[0] + a, t * stride[1] + c]
                out[co, q, t] = s + b[co]
    return out


class TestConv:
    def test_sliding_window_example(self):
        # [1,2,3] * [1,1], valid -> [3,5]
        out = ad.conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor([[[1.0, 1.0]]]), padding=(0, 0))
        np.testing.assert_array_equal(out.data, [[3.0, 5.0]])

    def test_delta_kernel_is_identity(self):
        x = Tensor(rand(3, 11, seed=1))
        w = np.zeros((3, 3, 5))
        for c in range(3):
            w[c, c, 2] = 1.0
        out = ad.conv1d(x, Tensor(w), padding="same")
        np.testing.assert_array_equal(out.data, x.data)

        x2 = Tensor(rand(2, 6, 7, seed=2))
        w2 = np.zeros((2, 2, 3, 3))
        for c in range(2):
            w2[c, c, 1, 1] = 1.0
        out2 = ad.conv2d(x2, Tensor(w2), padding="same")
        np.testing.assert_array_equal(out2.data, x2.data)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv1d_matches_naive(self, stride):
        rng = np.random.default_rng(10 + stride)
        x = rng.standard_normal((3, 12))
        w = rng.standard_normal((4, 3, 5))
        b = rng.standard_normal(4)
        out = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=2)
        ref = naive_conv1d(x, w, b, stride=stride, pad=(2, 2))
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    @pytest.mark.parametrize("stride", [(1, 1), (2, 2), (2, 1)])
    def test_conv2d_matches_naive(self, stride):
        rng = np.random.default_rng(sum(stride))
        x = rng.standard_normal((2, 9, 8))
        w = rng.standard_normal((3, 2, 3, 5))
        b = rng.standard_normal(3)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding="same")
        ref = naive_conv2d(x, w, b, stride=stride, pad=((1, 1), (2, 2)))
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_output_length_formula(self):
        for t_in, k, s, p in [(12, 5, 2, 2), (64, 5, 2, 2), (7, 3, 1, 1), (10, 2, 1, 0)]:
            x = Tensor(rand(1, t_in, seed=t_in))
            w = Tensor(rand(1, 1, k, seed=k))
            out = ad.conv1d(x, w, stride=s, padding=p)
            assert out.shape[1] == (t_in + 2 * p - k) // s + 1

    def test_same_padding_preserves_dims_for_odd_kernels(self):
        for k in (1, 3, 5, 15):
            x = Tensor(rand(2, 10, 12, seed=k))
            w = Tensor(rand(2, 2, k, k, seed=k + 1, scale=0.1))
            out = ad.conv2d(x, w, padding="same")
            assert out.shape == x.shape


class TestGlu:
    def test_zero_gate_halves(self):
        a = rand(3, 4, seed=3)
        x = np.concatenate([a, np.zeros_like(a)], axis=0)
        out = ad.glu(Tensor(x))
        np.testing.assert_allclose(out.data, 0.5 * a, atol=1e-15)

    def test_saturated_gate_passes_content(self):
        a = rand(3, 4, seed=4)
        x = np.concatenate([a, np.full_like(a, 20.0)], axis=0)
        out = ad.glu(Tensor(x))
        np.testing.assert_allclose(out.data, a, atol=1e-8)

    def test_matches_scalar_reference(self):
        x = rand(6, 5, seed=5)
        out = ad.glu(Tensor(x))
        for c in range(3):
            for t in range(5):
                gate = 1.0 / (1.0 + np.exp(-x[c + 3, t]))
                assert abs(out.data[c, t] - x[c, t] * gate) < 1e-12

    def test_odd_channels_rejected(self):
        with pytest.raises(ValueError):
            ad.glu(Tensor(rand(3, 4, seed=6)))


class TestInstanceNorm:
    def test_two_point_channel(self):
        out, mu, sigma = ad.instance_norm(Tensor([[1.0, -1.0]]))
        assert mu[0] == 0.0
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)

    def test_constant_channel_is_zero(self):
        out, _, _ = ad.instance_norm(Tensor(np.full((2, 7), 3.3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_matches_scalar_loop(self):
        x = rand(4, 5, 6, seed=7)
        out, mu, sigma = ad.instance_norm(Tensor(x))
        for c in range(4):
            vals = x[c].reshape(-1)
            m = sum(vals) / vals.size
            var = sum((v - m) ** 2 for v in vals) / vals.size
            s = np.sqrt(var + 1e-6)
            ref = (x[c] - m) / s
            np.testing.assert_allclose(out.data[c], ref, atol=1e-9)
            assert abs(mu[c] - m) < 1e-12 and abs(sigma[c] - s) < 1e-12

    def test_single_element_channel_rejected(self):
        with pytest.raises(ValueError):
            ad.instance_norm(Tensor([[1.0]]))


class TestPixelShuffle:
    def test_definition_2x2(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
        out = ad.pixel_shuffle_2d(x, 2)
        np.testing.assert_array_equal(out.data, [[[1.0, 2.0], [3.0, 4.0]]])

    def test_unshuffle_inverts_bitwise(self):
        x = rand(8, 3, 4, seed=8)
        back = ad.pixel_unshuffle_2d(ad.pixel_shuffle_2d(Tensor(x), 2), 2)
        np.testing.assert_array_equal(back.data, x)

    def test_matches_index_formula(self):
        r, c, q, t = 2, 3, 2, 4
        x = rand(c * r * r, q, t, seed=9)
        out = ad.pixel_shuffle_2d(Tensor(x), r).data
        for cc in range(c):
            for qq in range(q * r):
                for tt in range(t * r):
                    src = x[cc * r * r + (qq % r) * r + (tt % r), qq // r, tt // r]
                    assert out[cc, qq, tt] == src

    def test_indivisible_channels_rejected(self):
        with pytest.raises(ValueError):
            ad.pixel_shuffle_2d(Tensor(rand(6, 2, 2, seed=10)), 2)


class TestGradCheck:
    def test_linear_closure_is_nearly_exact(self):
        rng = np.random.default_rng(11)
        w = Tensor(np.sign(rng.standard_normal(10)) * rng.uniform(0.5, 1.5, 10))
        x = Tensor(rng.uniform(-1, 1, 10), requires_grad=True)
        assert ad.grad_check(lambda x: (w * x).sum(), [x]) < 1e-10

    def test_nan_output_signaled(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ad.NumericError):
            ad.grad_check(lambda x: x * Tensor([np.nan]), [x])

    @pytest.mark.parametrize("seed", range(10))
    def test_all_ops_pass_fd_check(self, seed):
        rng = np.random.default_rng(100 + seed)

        def t(*shape, scale=1.0):
            return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

        probes = {}

        def probe(shape):
            if shape not in probes:
                probes[shape] = Tensor(rng.standard_normal(shape))
            return probes[shape]

        cases = [
            (lambda a, b: (a + b).sum(), [t(3, 4), t(3, 4)]),
            (lambda a, b: (a - b).sum(), [t(3, 4), t(3, 4)]),
            (lambda a, b: ((a * b) * probe((3, 4))).sum(), [t(3, 4), t(3, 4)]),
            (lambda a: ((-a) * probe((3, 4))).sum(), [t(3, 4)]),
            (lambda a: ad.absolute(a).sum(), [t(3, 4)]),
            (lambda a: (ad.relu(a) * probe((3, 4))).sum(), [t(3, 4)]),
            (lambda a: (ad.sigmoid(a) * probe((3, 4))).sum(), [t(3, 4)]),
            (lambda a: (a.sum(axis=1) * probe((3,))).sum(), [t(3, 5)]),
            (lambda a: (a.mean(axis=0) * probe((5,))).sum(), [t(3, 5)]),
            (lambda a: (a.reshape((6, 2)) * probe((6, 2))).sum(), [t(3, 4)]),
            (lambda a: (a.transpose((1, 0)) * probe((4, 3))).sum(), [t(3, 4)]),
            (
                lambda a: (ad.index_select(a, 1, [0, 0, 2]) * probe((3, 3))).sum(),
                [t(3, 4)],
            ),
            (
                lambda x, w, b: (ad.conv1d(x, w, b, stride=2) * probe((4, 4))).sum(),
                [t(3, 8), t(4, 3, 5, scale=0.4), t(4, scale=0.2)],
            ),
            (
                lambda x, w, b: (ad.conv2d(x, w, b, stride=(2, 1)) * probe((2, 3, 6))).sum(),
                [t(2, 6, 6), t(2, 2, 3, 3, scale=0.4), t(2, scale=0.2)],
            ),
            (lambda a: (ad.glu(a) * probe((2, 5))).sum(), [t(4, 5)]),
            (
                lambda a: (ad.instance_norm(a)[0] * probe((3, 4, 5))).sum(),
                [t(3, 4, 5)],
            ),
            (
                lambda a: (ad.pixel_shuffle_2d(a, 2) * probe((1, 4, 6))).sum(),
                [t(4, 2, 3)],
            ),
        ]
        for fn, inputs in cases:
            assert ad.grad_check(fn, inputs) < 1e-4

    def test_abs_avoids_kink_points(self):
        # |.| has no derivative at 0; random draws stay clear of it
        x = Tensor(np.array([0.5, -0.7, 1.2]), requires_grad=True)
        assert ad.grad_check(lambda x: ad.absolute(x).sum(), [x]) < 1e-8


class TestFiniteness:
    def test_no_nan_or_inf_for_bounded_inputs(self):
        rng = np.random.default_rng(12)
        x = rng.uniform(-1e3, 1e3, (4, 6))
        for out in [
            ad.sigmoid(Tensor(x)),
            ad.relu(Tensor(x)),
            ad.absolute(Tensor(x)),
            ad.glu(Tensor(x)),
            ad.instance_norm(Tensor(x))[0],
        ]:
            assert np.all(np.isfinite(out.data))


class TestGraph:
    def test_gradient_accumulates_on_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        y = (x * x).sum()  # d/dx = 2x
        y.backward()
        np.testing.assert_allclose(x.grad, [4.0])

    def test_detach_blocks_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        y = (x.detach() * x).sum()
        y.backward()
        np.testing.assert_allclose(x.grad, [2.0])

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = x * 2.0
        assert y._backward is None and not y.requires_grad

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            Tensor(rand(2, 2, seed=13), requires_grad=True).backward()
