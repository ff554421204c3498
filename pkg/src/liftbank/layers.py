"""Differentiable building blocks with hand-written backward passes.

Every layer exposes ``forward(x) -> (y, cache)`` and
``backward(cache, grad_out) -> grad_in``. Parameter gradients are
accumulated into ``Parameter.grad``, so a block evaluated several times per
step (the lifting transform reuses its predictors on the forward and the
inverse path) sums all contributions; call ``zero_grad`` between steps.

Data is channels-first with arbitrary leading batch axes: 1-D signals are
``(..., C, L)``, 2-D feature maps ``(..., C, H, W)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import Rng

__all__ = [
    "Parameter",
    "Activation",
    "activation_apply",
    "Conv1d",
    "Conv2d",
    "Deconv2d",
    "InstanceNorm2d",
    "power_iteration",
    "spectral_sigma",
    "spectral_normalize_weights",
]

_SIGMA_FLOOR = 1e-12


class Parameter:
    """Trainable array plus its accumulated gradient buffer."""

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    @property
    def shape(self):
        return self.data.shape


def _flatten_batch(x, core_ndim):
    """View (..., core dims) as (B, core dims); returns (batched, lead shape)."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[: x.ndim - core_ndim]
    return x.reshape((-1,) + x.shape[x.ndim - core_ndim:]), lead


def _restore_batch(y, lead):
    return y.reshape(lead + y.shape[1:])


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

class Activation:
    """Elementwise activation: leaky_relu(slope), sigmoid, or identity."""

    KINDS = ("leaky_relu", "sigmoid", "identity")

    def __init__(self, kind, slope=0.2):
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        if kind == "leaky_relu" and not 0.0 < slope < 1.0:
            raise ValueError("leaky ReLU slope must lie in (0, 1)")
        self.kind = kind
        self.slope = float(slope)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "identity":
            return x, None
        if self.kind == "leaky_relu":
            y = np.where(x >= 0.0, x, self.slope * x)
            return y, x
        # numerically stable logistic, clamped to the open unit interval
        y = np.empty_like(x)
        pos = x >= 0.0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        np.clip(y, 1e-12, 1.0 - 1e-12, out=y)
        return y, y

    def backward(self, cache, grad_out):
        if self.kind == "identity":
            return np.asarray(grad_out, dtype=np.float64)
        if self.kind == "leaky_relu":
            return np.where(cache >= 0.0, grad_out, self.slope * grad_out)
        return grad_out * cache * (1.0 - cache)


def activation_apply(kind, x, slope=0.2):
    """Functional form of Activation.forward."""
    y, _ = Activation(kind, slope).forward(x)
    return y


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------

def power_iteration(w2d, u, iters):
    """Run power iterations on a 2-D matrix, updating ``u`` in place.

    Returns the current estimate of the largest singular value.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    sigma = 0.0
    for _ in range(iters):
        v = w2d.T @ u
        nv = np.linalg.norm(v)
        if nv <= _SIGMA_FLOOR:
            return 0.0
        v /= nv
        wu = w2d @ v
        sigma = np.linalg.norm(wu)
        if sigma <= _SIGMA_FLOOR:
            return 0.0
        u[...] = wu / sigma
    return float(sigma)


def spectral_sigma(w2d, u):
    """Largest-singular-value estimate from the stored vector, no state update."""
    return float(np.linalg.norm(w2d.T @ u))


def spectral_normalize_weights(w, u, iters=1):
    """Divide a weight tensor by its power-iteration largest singular value.

    ``w`` is reshaped to (C_out, rest); ``u`` is the persistent unit vector of
    length C_out and is updated in place. A degenerate all-zero weight (sigma
    below 1e-12) is returned unchanged.
    """
    w = np.asarray(w, dtype=np.float64)
    w2d = w.reshape(w.shape[0], -1)
    sigma = power_iteration(w2d, u, iters)
    if sigma <= _SIGMA_FLOOR:
        return w
    return w / sigma


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _init_weight(rng, shape, fan_in):
    # uniform fan-in scaling for weights and biases; nonzero bias init keeps
    # pre-activations off the leaky-ReLU kink in zero-padded regions
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(shape, -bound, bound)


def _unit_vector(rng, n):
    v = rng.normal((n,))
    return v / np.linalg.norm(v)


class Conv1d:
    """1-D convolution, stride 1, odd kernel, zero "same" padding.

    Output length always equals input length, which is what lets the lifting
    predictors keep both coupling branches shape-compatible.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, bias=True,
                 spectral_norm=False, rng=None):
        if kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd for symmetric same padding")
        rng = rng if rng is not None else Rng(0)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        fan_in = in_channels * kernel_size
        self.weight = Parameter(_init_weight(
            rng, (out_channels, in_channels, kernel_size), fan_in))
        self.bias = Parameter(_init_weight(rng, (out_channels,), fan_in)) if bias else None
        self.sn_u = _unit_vector(rng, out_channels) if spectral_norm else None

    def _effective_weight(self):
        if self.sn_u is None:
            return self.weight.data, 1.0
        w2d = self.weight.data.reshape(self.out_channels, -1)
        sigma = spectral_sigma(w2d, self.sn_u)
        if sigma <= _SIGMA_FLOOR:
            return self.weight.data, 1.0
        return self.weight.data / sigma, sigma

    def update_spectral_state(self, iters=1):
        if self.sn_u is not None:
            power_iteration(self.weight.data.reshape(self.out_channels, -1),
                            self.sn_u, iters)

    def forward_cf(self, x3):
        """Channels-first core: x3 is contiguous (C_in, B, L); returns same layout.

        Each kernel tap is one contiguous GEMM over the padded flat signal;
        the lifting transform keeps its branches in this layout so no data
        transposes happen in the training hot path.
        """
        cin, batch, length = x3.shape
        if cin != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {cin}")
        w, sigma = self._effective_weight()
        k = self.kernel_size
        pad = k // 2
        taps = np.ascontiguousarray(np.moveaxis(w, 2, 0))     # (k, C_out, C_in)
        xp = np.pad(x3, ((0, 0), (0, 0), (pad, pad)))
        xpf = xp.reshape(cin, -1)
        lp = length + 2 * pad
        z = np.empty((self.out_channels, batch * lp))
        z3 = z.reshape(self.out_channels, batch, lp)
        y = np.empty((self.out_channels, batch, length))
        for t in range(k):
            np.matmul(taps[t], xpf, out=z)
            if t == 0:
                np.copyto(y, z3[:, :, 0:length])
            else:
                y += z3[:, :, t:t + length]
        if self.bias is not None:
            y += self.bias.data[:, None, None]
        cache = (xpf, sigma, batch, length)
        return y, cache

    def backward_cf(self, cache, g3):
        xpf, sigma, batch, length = cache
        k = self.kernel_size
        pad = k // 2
        g3 = np.ascontiguousarray(g3)
        gf = g3.reshape(self.out_channels, -1)
        w, _ = self._effective_weight()
        taps_t = np.ascontiguousarray(w.transpose(2, 1, 0))   # (k, C_in, C_out)
        xp3 = xpf.reshape(self.in_channels, batch, length + 2 * pad)
        gw = np.empty_like(self.weight.data)
        gxp = np.zeros((self.in_channels, batch, length + 2 * pad))
        z = np.empty((self.in_channels, batch * length))
        z3 = z.reshape(self.in_channels, batch, length)
        for t in range(k):
            gw[:, :, t] = np.tensordot(g3, xp3[:, :, t:t + length],
                                       axes=([1, 2], [1, 2]))
            np.matmul(taps_t[t], gf, out=z)
            gxp[:, :, t:t + length] += z3
        self.weight.grad += gw / sigma
        if self.bias is not None:
            self.bias.grad += g3.sum(axis=(1, 2))
        return np.ascontiguousarray(gxp[:, :, pad:pad + length])

    def forward(self, x):
        xb, lead = _flatten_batch(x, 2)
        x3 = np.ascontiguousarray(np.moveaxis(xb, 1, 0))
        y3, cache = self.forward_cf(x3)
        y = np.ascontiguousarray(np.moveaxis(y3, 0, 1))
        return _restore_batch(y, lead), (cache, lead)

    def backward(self, cache, grad_out):
        core_cache, lead = cache
        g, _ = _flatten_batch(grad_out, 2)
        g3 = np.ascontiguousarray(np.moveaxis(g, 1, 0))
        gx3 = self.backward_cf(core_cache, g3)
        gx = np.ascontiguousarray(np.moveaxis(gx3, 0, 1))
        return _restore_batch(gx, lead)

    def named_parameters(self, prefix):
        yield f"{prefix}/weight", self.weight
        if self.bias is not None:
            yield f"{prefix}/bias", self.bias

    def named_state(self, prefix):
        if self.sn_u is not None:
            yield f"{prefix}/sn_u", self.sn_u


def _pair(v):
    if np.isscalar(v):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


class Conv2d:
    """2-D convolution with per-axis stride and zero padding."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1,
                 padding=0, bias=True, spectral_norm=False, rng=None):
        rng = rng if rng is not None else Rng(0)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = _pair(kernel_size)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        kh, kw = self.kernel
        fan_in = in_channels * kh * kw
        self.weight = Parameter(_init_weight(
            rng, (out_channels, in_channels, kh, kw), fan_in))
        self.bias = Parameter(_init_weight(rng, (out_channels,), fan_in)) if bias else None
        self.sn_u = _unit_vector(rng, out_channels) if spectral_norm else None

    def _effective_weight(self):
        if self.sn_u is None:
            return self.weight.data, 1.0
        w2d = self.weight.data.reshape(self.out_channels, -1)
        sigma = spectral_sigma(w2d, self.sn_u)
        if sigma <= _SIGMA_FLOOR:
            return self.weight.data, 1.0
        return self.weight.data / sigma, sigma

    def update_spectral_state(self, iters=1):
        if self.sn_u is not None:
            power_iteration(self.weight.data.reshape(self.out_channels, -1),
                            self.sn_u, iters)

    def out_shape(self, h, w):
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1

    def forward(self, x):
        xb, lead = _flatten_batch(x, 3)
        batch, cin, h, w = xb.shape
        if cin != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {cin}")
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ValueError("input smaller than kernel")
        weight, sigma = self._effective_weight()
        xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        ho, wo = win.shape[2], win.shape[3]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            batch * ho * wo, cin * kh * kw)
        y = cols @ weight.reshape(self.out_channels, -1).T
        if self.bias is not None:
            y += self.bias.data
        y = y.reshape(batch, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        cache = (cols, sigma, lead, batch, (h, w), (ho, wo))
        return _restore_batch(np.ascontiguousarray(y), lead), cache

    def backward(self, cache, grad_out):
        cols, sigma, lead, batch, (h, w), (ho, wo) = cache
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        g, _ = _flatten_batch(grad_out, 3)
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(
            batch * ho * wo, self.out_channels)
        self.weight.grad += (g2.T @ cols).reshape(self.weight.shape) / sigma
        if self.bias is not None:
            self.bias.grad += g2.sum(axis=0)
        weight, _ = self._effective_weight()
        gcols = g2 @ weight.reshape(self.out_channels, -1)
        gwin = gcols.reshape(batch, ho, wo, self.in_channels, kh, kw)
        gwin = gwin.transpose(0, 3, 1, 2, 4, 5)              # (B, C, Ho, Wo, kh, kw)
        gxp = np.zeros((batch, self.in_channels, h + 2 * ph, w + 2 * pw))
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + sh * ho:sh, v:v + sw * wo:sw] += gwin[:, :, :, :, u, v]
        return _restore_batch(gxp[:, :, ph:ph + h, pw:pw + w], lead)

    def named_parameters(self, prefix):
        yield f"{prefix}/weight", self.weight
        if self.bias is not None:
            yield f"{prefix}/bias", self.bias

    def named_state(self, prefix):
        if self.sn_u is not None:
            yield f"{prefix}/sn_u", self.sn_u


class Deconv2d:
    """Transposed 2-D convolution; exact shape inverse of Conv2d.

    For matching kernel/stride/padding the output spatial size is
    (in - 1) * stride - 2 * pad + kernel, which undoes the Conv2d shape map
    and gives the encoder/decoder mirror symmetry the mask estimator needs.
    """

    def __init__(self, in_channels, out_channels, kernel_size=4, stride=2,
                 padding=1, bias=True, spectral_norm=False, rng=None):
        rng = rng if rng is not None else Rng(0)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = _pair(kernel_size)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        kh, kw = self.kernel
        fan_in = in_channels * kh * kw
        self.weight = Parameter(_init_weight(
            rng, (out_channels, in_channels, kh, kw), fan_in))
        self.bias = Parameter(_init_weight(rng, (out_channels,), fan_in)) if bias else None
        self.sn_u = _unit_vector(rng, out_channels) if spectral_norm else None

    def _effective_weight(self):
        if self.sn_u is None:
            return self.weight.data, 1.0
        w2d = self.weight.data.reshape(self.out_channels, -1)
        sigma = spectral_sigma(w2d, self.sn_u)
        if sigma <= _SIGMA_FLOOR:
            return self.weight.data, 1.0
        return self.weight.data / sigma, sigma

    def update_spectral_state(self, iters=1):
        if self.sn_u is not None:
            power_iteration(self.weight.data.reshape(self.out_channels, -1),
                            self.sn_u, iters)

    def out_shape(self, h, w):
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        return (h - 1) * sh - 2 * ph + kh, (w - 1) * sw - 2 * pw + kw

    def forward(self, x):
        xb, lead = _flatten_batch(x, 3)
        batch, cin, h, w = xb.shape
        if cin != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {cin}")
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        ho, wo = self.out_shape(h, w)
        if ho < 1 or wo < 1:
            raise ValueError("deconv output would be empty")
        weight, sigma = self._effective_weight()
        full = np.zeros((batch, self.out_channels, (h - 1) * sh + kh, (w - 1) * sw + kw))
        for u in range(kh):
            for v in range(kw):
                # out[:, o, u + s*h, v + s*w] += sum_i w[o, i, u, v] x[:, i, h, w]
                contrib = np.tensordot(xb, weight[:, :, u, v], axes=([1], [1]))
                full[:, :, u:u + sh * h:sh, v:v + sw * w:sw] += contrib.transpose(0, 3, 1, 2)
        y = full[:, :, ph:ph + ho, pw:pw + wo]
        if self.bias is not None:
            y = y + self.bias.data[:, None, None]
        cache = (xb, sigma, lead, (h, w), (ho, wo))
        return _restore_batch(np.ascontiguousarray(y), lead), cache

    def backward(self, cache, grad_out):
        xb, sigma, lead, (h, w), (ho, wo) = cache
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        batch = xb.shape[0]
        g, _ = _flatten_batch(grad_out, 3)
        gfull = np.zeros((batch, self.out_channels, (h - 1) * sh + kh, (w - 1) * sw + kw))
        gfull[:, :, ph:ph + ho, pw:pw + wo] = g
        weight, _ = self._effective_weight()
        gx = np.zeros_like(xb)
        gw = np.zeros_like(self.weight.data)
        for u in range(kh):
            for v in range(kw):
                sl = gfull[:, :, u:u + sh * h:sh, v:v + sw * w:sw]   # (B, C_out, H, W)
                gx += np.tensordot(sl, weight[:, :, u, v], axes=([1], [0])).transpose(0, 3, 1, 2)
                gw[:, :, u, v] = np.tensordot(sl, xb, axes=([0, 2, 3], [0, 2, 3]))
        self.weight.grad += gw / sigma
        if self.bias is not None:
            self.bias.grad += g.sum(axis=(0, 2, 3))
        return _restore_batch(gx, lead)

    def named_parameters(self, prefix):
        yield f"{prefix}/weight", self.weight
        if self.bias is not None:
            yield f"{prefix}/bias", self.bias

    def named_state(self, prefix):
        if self.sn_u is not None:
            yield f"{prefix}/sn_u", self.sn_u


# ---------------------------------------------------------------------------
# instance normalization
# ---------------------------------------------------------------------------

class InstanceNorm2d:
    """Per-channel standardization over the spatial axes of each sample."""

    def __init__(self, channels, eps=1e-5, affine=True):
        self.channels = int(channels)
        self.eps = float(eps)
        self.gamma = Parameter(np.ones(channels)) if affine else None
        self.beta = Parameter(np.zeros(channels)) if affine else None

    def forward(self, x):
        xb, lead = _flatten_batch(x, 3)
        if xb.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {xb.shape[1]}")
        mu = xb.mean(axis=(2, 3), keepdims=True)
        var = xb.var(axis=(2, 3), keepdims=True)
        scale = np.sqrt(var + self.eps)
        xhat = (xb - mu) / scale
        y = xhat
        if self.gamma is not None:
            y = self.gamma.data[:, None, None] * xhat + self.beta.data[:, None, None]
        return _restore_batch(y, lead), (xhat, scale, lead)

    def backward(self, cache, grad_out):
        xhat, scale, lead = cache
        g, _ = _flatten_batch(grad_out, 3)
        if self.gamma is not None:
            self.gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
            self.beta.grad += g.sum(axis=(0, 2, 3))
            g = g * self.gamma.data[:, None, None]
        m1 = g.mean(axis=(2, 3), keepdims=True)
        m2 = (g * xhat).mean(axis=(2, 3), keepdims=True)
        gx = (g - m1 - xhat * m2) / scale
        return _restore_batch(gx, lead)

    def named_parameters(self, prefix):
        if self.gamma is not None:
            yield f"{prefix}/gamma", self.gamma
            yield f"{prefix}/beta", self.beta

    def named_state(self, prefix):
        return iter(())
