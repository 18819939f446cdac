import math

import numpy as np
import pytest

from gradcheck import check_gradients
from hvqcodec import autograd as ag
from hvqcodec.autograd import GraphError, NonFiniteError, Tensor


def direct_conv(x, w, stride, pad):
    """Loop-based cross-correlation used as an independent oracle."""
    pt, pb, pl, pr = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    n, c, h, wd = xp.shape
    o, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out


class TestConvForward:
    @pytest.mark.parametrize("stride,pad", [(1, (1, 1, 1, 1)), (2, (1, 2, 1, 2)), (2, 0), (1, (0, 2, 1, 0))])
    def test_matches_direct_loops(self, rng, stride, pad):
        x = rng.standard_normal((2, 3, 9, 8))
        w = rng.standard_normal((4, 3, 4, 4))
        got = ag.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=stride, padding=pad).data
        want = direct_conv(x, w, stride, ag.normalize_padding(pad))
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)

    def test_bias_broadcasts_per_channel(self, rng):
        x = np.zeros((1, 2, 5, 5))
        w = np.zeros((3, 2, 3, 3))
        b = np.array([1.0, -2.0, 0.5])
        y = ag.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                      padding=1).data
        assert np.all(y[0, 1] == -2.0)

    def test_output_size_formula(self):
        assert ag.conv_output_size(64, 5, 2, 1, 2) == 32
        assert ag.conv_transpose_output_size(32, 5, 2, 1, 2) == 64


class TestTransposedConv:
    @pytest.mark.parametrize("stride,pad,op", [(1, (1, 1, 1, 1), 0), (2, (1, 2, 1, 2), 0), (2, 0, 1), (3, (1, 1, 1, 1), 0)])
    def test_is_adjoint_of_conv(self, rng, stride, pad, op):
        k = 5
        x = rng.standard_normal((2, 3, 11 + op, 11 + op))
        w = rng.standard_normal((4, 3, k, k))
        y = ag.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=stride, padding=pad).data
        g = rng.standard_normal(y.shape)
        pt, pb, _, _ = ag.normalize_padding(pad)
        extra = x.shape[2] - ag.conv_transpose_output_size(y.shape[2], k, stride, pt, pb)
        # the transposed layer holds the kernel as [in, out, k, k] = [4, 3, k, k]
        back = ag.conv_transpose2d(Tensor(g, dtype=np.float64), Tensor(w, dtype=np.float64), stride=stride,
                                   padding=pad, output_padding=extra).data
        assert back.shape == x.shape
        lhs = float(np.sum(y * g))
        rhs = float(np.sum(x * back))
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))

    def test_doubles_spatial_extent(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 8, 8)), dtype=np.float64)
        w = Tensor(rng.standard_normal((2, 3, 5, 5)), dtype=np.float64)
        y = ag.conv_transpose2d(x, w, stride=2, padding=(1, 2, 1, 2))
        assert y.shape == (1, 3, 16, 16)


class TestGradients:
    TOL = 1e-3

    def test_conv2d(self, rng):
        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3)) * 0.5
        b = rng.standard_normal(3)
        g = rng.standard_normal((1, 3, 3, 3))
        err = check_gradients(lambda t: ag.tsum(ag.mul(ag.conv2d(t[0], t[1], t[2], stride=2, padding=(1, 0, 1, 0)),
                                                       Tensor(g, dtype=np.float64))), [x, w, b])
        assert err <= self.TOL

    def test_conv_transpose2d(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        w = rng.standard_normal((2, 3, 4, 4)) * 0.5
        b = rng.standard_normal(3)
        y = ag.conv_transpose2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=(1, 1, 1, 1))
        g = rng.standard_normal(y.shape)
        err = check_gradients(lambda t: ag.tsum(ag.mul(ag.conv_transpose2d(t[0], t[1], t[2], stride=2, padding=(1, 1, 1, 1)),
                                                       Tensor(g, dtype=np.float64))), [x, w, b])
        assert err <= self.TOL

    def test_gelu(self, rng):
        x = rng.standard_normal((4, 5)) * 2
        err = check_gradients(lambda t: ag.tsum(ag.square(ag.gelu(t[0]))), [x])
        assert err <= self.TOL

    @pytest.mark.parametrize("inverse", [False, True])
    def test_gdn(self, rng, inverse):
        x = rng.standard_normal((2, 3, 4, 4))
        beta = rng.uniform(0.5, 1.5, 3)
        gamma = np.abs(rng.standard_normal((3, 3))) * 0.2
        g = rng.standard_normal(x.shape)
        err = check_gradients(lambda t: ag.tsum(ag.mul(ag.gdn(t[0], t[1], t[2], inverse=inverse),
                                                       Tensor(g, dtype=np.float64))), [x, beta, gamma])
        assert err <= self.TOL

    def test_commitment(self, rng):
        from hvqcodec.vq import commitment_loss

        z = rng.standard_normal((2, 3, 4, 4))
        zq = rng.standard_normal(z.shape)
        err = check_gradients(lambda t: commitment_loss(t[0], zq), [z])
        assert err <= self.TOL

    @pytest.mark.parametrize("with_fft", [False, True])
    def test_objective(self, rng, with_fft):
        from conftest import tiny_config
        from hvqcodec.model import objective

        cfg = tiny_config(lambda_fft=1e-2 if with_fft else 0.0)
        x = rng.standard_normal((2, 1, 8, 8))
        mask = (rng.random(x.shape) > 0.3).astype(np.uint8)
        weight = rng.uniform(0.5, 2.0, x.shape)
        z = rng.standard_normal((2, 4, 2, 2))
        zq = rng.standard_normal(z.shape)

        def build(t):
            from hvqcodec.vq import commitment_loss

            return objective(x, t[0], mask, commitment_loss(t[1], zq), cfg, weight=weight).total

        err = check_gradients(build, [rng.standard_normal(x.shape), z])
        assert err <= self.TOL

    def test_concat_and_broadcast_mul(self, rng):
        a = rng.standard_normal((1, 2, 3, 3))
        b = rng.standard_normal((1, 1, 3, 3))
        s = rng.standard_normal((1, 3, 1, 1))
        err = check_gradients(lambda t: ag.tsum(ag.square(ag.mul(ag.concat([t[0], t[1]]), t[2]))), [a, b, s])
        assert err <= self.TOL

    def test_straight_through_passes_gradient_unchanged(self, rng):
        z = Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True, dtype=np.float64)
        zq = rng.standard_normal(z.shape)
        y = ag.straight_through(z, zq)
        assert np.array_equal(y.data, zq)
        g = rng.standard_normal(z.shape)
        ag.tsum(ag.mul(y, Tensor(g, dtype=np.float64))).backward()
        np.testing.assert_array_equal(z.grad, g)


class TestElementwise:
    def test_gelu_uses_exact_erf(self):
        xs = np.linspace(-4, 4, 33)
        got = ag.gelu(Tensor(xs, dtype=np.float64)).data
        want = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in xs]
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)

    def test_gdn_forward_formula(self, rng):
        x = rng.standard_normal((1, 3, 2, 2))
        beta = np.array([1.0, 0.5, 2.0])
        gamma = np.abs(rng.standard_normal((3, 3)))
        y = ag.gdn(Tensor(x, dtype=np.float64), Tensor(beta, dtype=np.float64), Tensor(gamma, dtype=np.float64)).data
        yi = ag.gdn(Tensor(x, dtype=np.float64), Tensor(beta, dtype=np.float64), Tensor(gamma, dtype=np.float64),
                    inverse=True).data
        for c in range(3):
            denom = np.sqrt(beta[c] + sum(gamma[c, j] * x[0, j] ** 2 for j in range(3)))
            np.testing.assert_allclose(y[0, c], x[0, c] / denom, rtol=1e-12)
            np.testing.assert_allclose(yi[0, c], x[0, c] * denom, rtol=1e-12)

    def test_fft_loss_matches_numpy_spectrum(self, rng):
        x = rng.standard_normal((2, 1, 8, 8))
        xh = rng.standard_normal(x.shape)
        got = ag.fft_loss(Tensor(x, dtype=np.float64), Tensor(xh, dtype=np.float64)).item()
        want = np.mean(np.abs(np.fft.fft2(xh) - np.fft.fft2(x)) ** 2)
        assert got == pytest.approx(want, rel=1e-12)

    def test_fft_loss_requires_power_of_two(self, rng):
        with pytest.raises(ValueError):
            ag.fft_loss(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 6, 6))))


class TestGraph:
    def test_second_backward_raises(self):
        x = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
        y = ag.tsum(ag.square(x))
        y.backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])
        with pytest.raises(GraphError):
            y.backward()

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            ag.square(x).backward()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ag.no_grad():
            y = ag.square(x)
        assert not y.requires_grad

    def test_grads_accumulate_across_uses(self):
        x = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
        ag.tsum(ag.add(ag.mul(x, x), x)).backward()
        assert x.grad[0] == pytest.approx(7.0)

    def test_non_finite_input_raises(self):
        x = Tensor(np.array([[[[np.nan]]]]))
        w = Tensor(np.ones((1, 1, 1, 1)))
        with pytest.raises(NonFiniteError):
            ag.conv2d(x, w)

    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32
        assert ag.Parameter(np.zeros(2)).dtype == np.float32
