"""Layer forward semantics and hand-written backward passes.

Every differentiable layer kind is checked against the central
finite-difference oracle on a batch of random instances at relative
tolerance 1e-4 (denominator max(|a|, |b|, 1e-8)).
"""

import numpy as np
import pytest

from liftbank.layers import (Activation, Conv1d, Conv2d, Deconv2d,
                             InstanceNorm2d, activation_apply, power_iteration,
                             spectral_normalize_weights)
from liftbank.numerics import Rng, finite_difference_gradient

GRAD_TOL = 1e-4
N_INSTANCES = 50


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def check_input_gradient(layer, x, seed):
    """Compare layer.backward's input gradient against finite differences."""
    r = Rng(seed).normal(layer.forward(x)[0].shape)

    def objective(v):
        y, _ = layer.forward(v)
        return float(np.sum(y * r))

    numeric = finite_difference_gradient(objective, x)
    y, cache = layer.forward(x)
    analytic = layer.backward(cache, r)
    return rel_err(analytic, numeric)


def check_param_gradients(layer, x, seed):
    """Compare accumulated parameter gradients against finite differences."""
    r = Rng(seed).normal(layer.forward(x)[0].shape)
    for _, p in layer.named_parameters("p"):
        p.zero_grad()
    y, cache = layer.forward(x)
    layer.backward(cache, r)
    worst = 0.0
    for _, p in layer.named_parameters("p"):
        numeric = np.zeros_like(p.data)
        h = 1e-5
        for idx in np.ndindex(*p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(np.sum(layer.forward(x)[0] * r))
            p.data[idx] = orig - h
            fm = float(np.sum(layer.forward(x)[0] * r))
            p.data[idx] = orig
            numeric[idx] = (fp - fm) / (2 * h)
        worst = max(worst, rel_err(p.grad, numeric))
    return worst


class TestConv1dForward:
    def test_identity_kernel(self):
        conv = Conv1d(1, 1, 3, rng=Rng(0))
        conv.weight.data[...] = np.array([[[0.0, 1.0, 0.0]]])
        conv.bias.data[...] = 0.0
        y, _ = conv.forward(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(y, [[1.0, 2.0, 3.0]])

    def test_box_kernel_hand_convolution(self):
        conv = Conv1d(1, 1, 3, rng=Rng(0))
        conv.weight.data[...] = 1.0
        conv.bias.data[...] = 0.0
        y, _ = conv.forward(np.array([[1.0, 2.0, 3.0]]))
        # zero padded: [0,1,2,3,0] correlated with ones
        np.testing.assert_allclose(y, [[3.0, 6.0, 5.0]])

    def test_bias_only(self):
        conv = Conv1d(1, 1, 3, rng=Rng(0))
        conv.weight.data[...] = 0.0
        conv.bias.data[...] = 5.0
        y, _ = conv.forward(np.zeros((1, 4)))
        np.testing.assert_allclose(y, [[5.0, 5.0, 5.0, 5.0]])

    def test_channel_mismatch_rejected(self):
        conv = Conv1d(2, 1, 3, rng=Rng(0))
        with pytest.raises(ValueError, match="channels"):
            conv.forward(np.zeros((3, 4)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            Conv1d(1, 1, 4, rng=Rng(0))

    def test_length_preserved_all_odd_kernels(self):
        rng = Rng(1)
        for k in (1, 3, 5, 7):
            for length in (1, 2, 5, 16):
                conv = Conv1d(2, 3, k, rng=rng.fork())
                y, _ = conv.forward(rng.normal((2, length)))
                assert y.shape == (3, length)

    def test_batched_matches_loop(self):
        rng = Rng(2)
        conv = Conv1d(2, 3, 3, rng=rng.fork())
        x = rng.normal((4, 2, 10))
        y, _ = conv.forward(x)
        for i in range(4):
            yi, _ = conv.forward(x[i])
            np.testing.assert_allclose(y[i], yi, atol=1e-12)


class TestLayerBackward:
    def test_identity_kernel_adjoint(self):
        conv = Conv1d(1, 1, 3, rng=Rng(0))
        conv.weight.data[...] = np.array([[[0.0, 1.0, 0.0]]])
        x = Rng(1).normal((1, 6))
        y, cache = conv.forward(x)
        g = Rng(2).normal((1, 6))
        np.testing.assert_allclose(conv.backward(cache, g), g, atol=1e-12)

    def test_zero_grad_out_gives_zeros(self):
        rng = Rng(3)
        conv = Conv1d(2, 2, 3, rng=rng.fork())
        x = rng.normal((2, 5))
        conv.weight.zero_grad()
        conv.bias.zero_grad()
        y, cache = conv.forward(x)
        gin = conv.backward(cache, np.zeros_like(y))
        assert np.all(gin == 0.0)
        assert np.all(conv.weight.grad == 0.0)
        assert np.all(conv.bias.grad == 0.0)

    def test_conv1d_gradients_random_instances(self):
        rng = Rng(10)
        for i in range(N_INSTANCES):
            conv = Conv1d(2, 2, 3, bias=i % 2 == 0, rng=rng.fork())
            x = rng.normal((2, 7))
            assert check_input_gradient(conv, x, seed=1000 + i) <= GRAD_TOL
        conv = Conv1d(2, 3, 5, rng=Rng(77))
        assert check_param_gradients(conv, Rng(78).normal((2, 9)), seed=79) <= GRAD_TOL

    def test_conv2d_gradients_random_instances(self):
        rng = Rng(11)
        for i in range(N_INSTANCES):
            stride = (1, 1) if i % 3 == 0 else (2, 2)
            conv = Conv2d(1, 2, kernel_size=3, stride=stride, padding=1,
                          bias=i % 2 == 0, rng=rng.fork())
            x = rng.normal((1, 6, 6))
            assert check_input_gradient(conv, x, seed=2000 + i) <= GRAD_TOL
        conv = Conv2d(2, 2, kernel_size=4, stride=2, padding=1, rng=Rng(80))
        assert check_param_gradients(conv, Rng(81).normal((2, 6, 6)), seed=82) <= GRAD_TOL

    def test_deconv2d_gradients_random_instances(self):
        rng = Rng(12)
        for i in range(N_INSTANCES):
            deconv = Deconv2d(2, 1, kernel_size=4, stride=2, padding=1,
                              bias=i % 2 == 0, rng=rng.fork())
            x = rng.normal((2, 3, 3))
            assert check_input_gradient(deconv, x, seed=3000 + i) <= GRAD_TOL
        deconv = Deconv2d(2, 2, kernel_size=4, stride=2, padding=1, rng=Rng(83))
        assert check_param_gradients(deconv, Rng(84).normal((2, 3, 3)), seed=85) <= GRAD_TOL

    def test_activation_gradients_random_instances(self):
        rng = Rng(13)
        for i in range(N_INSTANCES):
            kind = ("leaky_relu", "sigmoid", "identity")[i % 3]
            act = Activation(kind, 0.2)
            x = rng.normal((3, 8))
            r = rng.normal((3, 8))

            def objective(v):
                y, _ = act.forward(v)
                return float(np.sum(y * r))

            numeric = finite_difference_gradient(objective, x)
            y, cache = act.forward(x)
            analytic = act.backward(cache, r)
            assert rel_err(analytic, numeric) <= GRAD_TOL

    def test_instance_norm_gradients_random_instances(self):
        rng = Rng(14)
        for i in range(N_INSTANCES):
            norm = InstanceNorm2d(2, affine=i % 2 == 0)
            if norm.gamma is not None:
                norm.gamma.data[...] = rng.uniform((2,), 0.5, 1.5)
                norm.beta.data[...] = rng.normal((2,))
            x = rng.normal((2, 4, 4))
            assert check_input_gradient(norm, x, seed=4000 + i) <= GRAD_TOL
        norm = InstanceNorm2d(3)
        assert check_param_gradients(norm, Rng(86).normal((3, 4, 5)), seed=87) <= GRAD_TOL

    def test_conv2d_deconv2d_shape_mirror(self):
        """Deconv with matching stride/pad/kernel inverts the conv shape map."""
        rng = Rng(15)
        conv = Conv2d(1, 4, kernel_size=4, stride=2, padding=1, rng=rng.fork())
        deconv = Deconv2d(4, 1, kernel_size=4, stride=2, padding=1, rng=rng.fork())
        for h, w in ((8, 8), (16, 12), (32, 8)):
            y, _ = conv.forward(rng.normal((1, h, w)))
            z, _ = deconv.forward(y)
            assert z.shape == (1, h, w)


class TestActivations:
    def test_leaky_relu_values(self):
        act = Activation("leaky_relu", 0.2)
        y, _ = act.forward(np.array([1.0, -1.0]))
        np.testing.assert_allclose(y, [1.0, -0.2])

    def test_sigmoid_at_zero(self):
        assert activation_apply("sigmoid", np.array([0.0]))[0] == pytest.approx(0.5)

    def test_sigmoid_open_interval(self):
        y = activation_apply("sigmoid", np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
        assert np.all(y > 0.0) and np.all(y < 1.0)

    def test_identity(self):
        x = Rng(0).normal((5,))
        np.testing.assert_array_equal(activation_apply("identity", x), x)

    def test_bad_kind_and_slope(self):
        with pytest.raises(ValueError):
            Activation("relu6")
        with pytest.raises(ValueError):
            Activation("leaky_relu", 1.5)


class TestInstanceNorm:
    def test_constant_channel_maps_to_zero(self):
        norm = InstanceNorm2d(1, affine=False)
        y, _ = norm.forward(np.full((1, 3, 3), 7.0))
        np.testing.assert_allclose(y, 0.0, atol=1e-6)

    def test_two_point_channel(self):
        norm = InstanceNorm2d(1, affine=False)
        y, _ = norm.forward(np.array([1.0, -1.0]).reshape(1, 1, 2))
        np.testing.assert_allclose(y.ravel(), [1.0, -1.0], atol=1e-4)

    def test_standardizes_any_input(self):
        rng = Rng(5)
        norm = InstanceNorm2d(4, affine=False)
        x = 3.0 * rng.normal((4, 6, 5)) + 2.0
        y, _ = norm.forward(x)
        means = y.mean(axis=(1, 2))
        stds = y.std(axis=(1, 2))
        assert np.all(np.abs(means) <= 1e-10)
        np.testing.assert_allclose(stds, 1.0, atol=1e-3)


class TestSpectralNorm:
    def test_diagonal_matrix_against_svd(self):
        w = np.array([[2.0, 0.0], [0.0, 1.0]])
        u = np.array([0.6, 0.8])
        out = spectral_normalize_weights(w, u, iters=60)
        np.testing.assert_allclose(out, [[1.0, 0.0], [0.0, 0.5]], atol=1e-6)

    def test_identity_unchanged(self):
        w = np.eye(3)
        u = Rng(1).normal((3,))
        u /= np.linalg.norm(u)
        out = spectral_normalize_weights(w, u, iters=30)
        np.testing.assert_allclose(out, np.eye(3), atol=1e-9)

    def test_zero_matrix_guard(self):
        w = np.zeros((3, 3))
        u = np.ones(3) / np.sqrt(3.0)
        out = spectral_normalize_weights(w, u, iters=5)
        np.testing.assert_array_equal(out, w)

    def test_unit_spectral_norm_after_iterations(self):
        """Against the brute-force SVD oracle on random 4x4 matrices."""
        rng = Rng(2)
        for _ in range(50):
            w = rng.normal((4, 4))
            u = rng.normal((4,))
            u /= np.linalg.norm(u)
            out = spectral_normalize_weights(w, u, iters=20)
            top = np.linalg.svd(out, compute_uv=False)[0]
            assert 0.99 <= top <= 1.01

    def test_power_iteration_requires_iters(self):
        with pytest.raises(ValueError):
            power_iteration(np.eye(2), np.array([1.0, 0.0]), 0)

    def test_sn_conv_grad_scales_by_sigma(self):
        """Backward treats the spectral scale as constant for the step."""
        rng = Rng(3)
        plain = Conv1d(2, 2, 3, bias=False, rng=Rng(30))
        normed = Conv1d(2, 2, 3, bias=False, spectral_norm=True, rng=Rng(30))
        normed.weight.data[...] = plain.weight.data
        x = rng.normal((2, 6))
        g = rng.normal((2, 6))
        plain.weight.zero_grad()
        normed.weight.zero_grad()
        yp, cp = plain.forward(x)
        yn, cn = normed.forward(x)
        w2d = normed.weight.data.reshape(2, -1)
        sigma = float(np.linalg.norm(w2d.T @ normed.sn_u))
        np.testing.assert_allclose(yn, yp / sigma, atol=1e-12)
        plain.backward(cp, g)
        normed.backward(cn, g)
        np.testing.assert_allclose(normed.weight.grad, plain.weight.grad / sigma,
                                   atol=1e-12)

    def test_update_spectral_state_converges(self):
        conv = Conv1d(3, 3, 3, spectral_norm=True, rng=Rng(4))
        for _ in range(40):
            conv.update_spectral_state(1)
        w2d = conv.weight.data.reshape(3, -1)
        sigma_est = float(np.linalg.norm(w2d.T @ conv.sn_u))
        sigma_true = np.linalg.svd(w2d, compute_uv=False)[0]
        assert sigma_est == pytest.approx(sigma_true, rel=1e-6)
