"""Invertible lifting-scheme filterbank.

A waveform is split into even/odd polyphase branches, run through a stack of
additive coupling stages (each preceded by an invertible reshape that trades
time for channels), and merged into a channels-by-frames feature. Every step
has an exact structural inverse, so the analysis/synthesis pair reconstructs
perfectly no matter what the predictor blocks compute, and the synthesis path
reuses the analysis parameters.

With the defaults (6 stages, 4 base channels) the feature is
``(256, T / 64)`` and carries exactly 4 * T numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Activation, Conv1d
from .numerics import Rng

__all__ = [
    "BlockSpec",
    "LiftingConfig",
    "split",
    "split_inverse",
    "invertible_downsample",
    "invertible_upsample",
    "coupling_forward",
    "coupling_inverse",
    "CouplingBlock",
    "LiftingTransform",
]


@dataclass(frozen=True)
class BlockSpec:
    """Layer list of one coupling predictor: conv kernels plus activation."""

    kernel_sizes: tuple = (3, 3)
    leaky_slope: float = 0.2
    spectral_norm: bool = False

    def __post_init__(self):
        if len(self.kernel_sizes) < 1:
            raise ValueError("block needs at least one convolution")
        for k in self.kernel_sizes:
            if k % 2 == 0 or k < 1:
                raise ValueError("block kernel sizes must be odd and positive")


@dataclass(frozen=True)
class LiftingConfig:
    """Structure of the transform.

    num_stages: number of coupling stages (time decimation is 2**num_stages).
    base_channels: branch channels at stage 1; stage j holds
        base_channels * 2**(j-1).
    linear_variant: strip biases and activations from every predictor, making
        the whole transform linear (the "no bias" configuration).
    """

    num_stages: int = 6
    base_channels: int = 4
    block: BlockSpec = field(default_factory=BlockSpec)
    linear_variant: bool = False

    def __post_init__(self):
        if self.num_stages < 1:
            raise ValueError("need at least one lifting stage")
        if self.base_channels < 1:
            raise ValueError("need at least one branch channel")

    def channels(self, stage):
        """Branch channel count at a 1-based stage index."""
        return self.base_channels * (2 ** (stage - 1))

    @property
    def merged_channels(self):
        return 2 * self.channels(self.num_stages)

    @property
    def time_divisor(self):
        return 2 ** self.num_stages


# ---------------------------------------------------------------------------
# structural (parameter-free) operators
# ---------------------------------------------------------------------------

def split(x, n_channels):
    """Polyphase split of (..., T) into two (..., n_channels, T/2) branches.

    Channel 0 of branch a holds the even-index samples, channel 0 of branch b
    the odd-index samples; the remaining channels are zero padding that gives
    the couplings room to work in.
    """
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[-1]
    if t < 2 or t % 2 != 0:
        raise ValueError("length not even")
    shape = x.shape[:-1] + (int(n_channels), t // 2)
    a = np.zeros(shape)
    b = np.zeros(shape)
    a[..., 0, :] = x[..., 0::2]
    b[..., 0, :] = x[..., 1::2]
    return a, b


def split_inverse(a, b):
    """Interleave channel 0 of both branches back into a waveform."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"branch shapes differ: {a.shape} vs {b.shape}")
    half = a.shape[-1]
    x = np.empty(a.shape[:-2] + (2 * half,))
    x[..., 0::2] = a[..., 0, :]
    x[..., 1::2] = b[..., 0, :]
    return x


def invertible_downsample(x):
    """Lossless reshape (..., C, L) -> (..., 2C, L/2).

    out[2c][t] = x[c][2t] and out[2c+1][t] = x[c][2t+1]; no arithmetic.
    """
    x = np.asarray(x, dtype=np.float64)
    c, length = x.shape[-2], x.shape[-1]
    if length % 2 != 0:
        raise ValueError("time length must be even to down-sample")
    y = x.reshape(x.shape[:-2] + (c, length // 2, 2))
    y = np.swapaxes(y, -1, -2)
    return np.ascontiguousarray(y).reshape(x.shape[:-2] + (2 * c, length // 2))


def invertible_upsample(x):
    """Exact inverse of invertible_downsample: (..., 2C, L) -> (..., C, 2L)."""
    x = np.asarray(x, dtype=np.float64)
    c2, length = x.shape[-2], x.shape[-1]
    if c2 % 2 != 0:
        raise ValueError("channel count must be even to up-sample")
    y = x.reshape(x.shape[:-2] + (c2 // 2, 2, length))
    y = np.swapaxes(y, -1, -2)
    return np.ascontiguousarray(y).reshape(x.shape[:-2] + (c2 // 2, 2 * length))


def coupling_forward(a, b, predictor):
    """Additive coupling step: (a, b) -> (b, a + predictor(b))."""
    t = predictor(b)
    if np.shape(t) != np.shape(b):
        raise ValueError(f"predictor changed shape {np.shape(b)} -> {np.shape(t)}")
    return b, a + t


def coupling_inverse(a, b, predictor):
    """Inverse coupling step, using the same predictor evaluation rule."""
    t = predictor(a)
    if np.shape(t) != np.shape(a):
        raise ValueError(f"predictor changed shape {np.shape(a)} -> {np.shape(t)}")
    return b - t, a


# ---------------------------------------------------------------------------
# predictor blocks and the full transform
# ---------------------------------------------------------------------------

class CouplingBlock:
    """Shape-preserving conv stack used as one stage's lifting predictor.

    Operates on channels-first (C, B, L) arrays, the transform's internal
    layout; the convolutions run their no-transpose fast path there.
    """

    def __init__(self, channels, spec, linear, rng):
        self.channels = int(channels)
        self.linear = bool(linear)
        self.convs = [
            Conv1d(channels, channels, k, bias=not linear,
                   spectral_norm=spec.spectral_norm, rng=rng)
            for k in spec.kernel_sizes
        ]
        self.activation = None if linear else Activation("leaky_relu", spec.leaky_slope)

    def forward(self, x):
        caches = []
        y = x
        for i, conv in enumerate(self.convs):
            y, c = conv.forward_cf(y)
            caches.append((conv.backward_cf, c))
            if self.activation is not None and i < len(self.convs) - 1:
                y, c = self.activation.forward(y)
                caches.append((self.activation.backward, c))
        return y, caches

    def backward(self, caches, grad_out):
        g = grad_out
        for backward_fn, c in reversed(caches):
            g = backward_fn(c, g)
        return g

    def named_parameters(self, prefix):
        for i, conv in enumerate(self.convs):
            yield from conv.named_parameters(f"{prefix}/conv{i}")

    def named_state(self, prefix):
        for i, conv in enumerate(self.convs):
            yield from conv.named_state(f"{prefix}/conv{i}")

    def update_spectral_state(self, iters=1):
        for conv in self.convs:
            conv.update_spectral_state(iters)


def _down_cf(x):
    """(C, B, L) -> (2C, B, L/2), channels-first twin of invertible_downsample."""
    c, b, l = x.shape
    y = np.moveaxis(x.reshape(c, b, l // 2, 2), 3, 1)
    return np.ascontiguousarray(y).reshape(2 * c, b, l // 2)


def _up_cf(x):
    """(2C, B, L) -> (C, B, 2L), exact inverse of _down_cf."""
    c2, b, l = x.shape
    y = np.moveaxis(x.reshape(c2 // 2, 2, b, l), 1, 3)
    return np.ascontiguousarray(y).reshape(c2 // 2, b, 2 * l)


class LiftingTransform:
    """The trainable invertible analysis/synthesis filterbank pair.

    Public arrays are channels-second, ``(..., T)`` waveforms in and
    ``(..., C, M)`` features out; internally branches live in a channels-first
    (C, B, L) layout so the predictors avoid data transposes.
    """

    def __init__(self, config=None, rng=None):
        self.config = config if config is not None else LiftingConfig()
        rng = rng if rng is not None else Rng(0)
        self.blocks = [
            CouplingBlock(self.config.channels(j), self.config.block,
                          self.config.linear_variant, rng)
            for j in range(1, self.config.num_stages + 1)
        ]

    # -- shape helpers ----------------------------------------------------

    def check_length(self, t):
        div = self.config.time_divisor
        if t % div != 0 or t == 0:
            raise ValueError(
                f"input length {t} must be a positive multiple of {div}")

    def feature_shape(self, t):
        self.check_length(t)
        return self.config.merged_channels, t // self.config.time_divisor

    # -- forward / inverse ------------------------------------------------

    def forward_with_cache(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.check_length(x.shape[-1])
        lead = x.shape[:-1]
        xb = x.reshape(-1, x.shape[-1])
        shape = (self.config.base_channels, xb.shape[0], xb.shape[1] // 2)
        a = np.zeros(shape)
        b = np.zeros(shape)
        a[0] = xb[:, 0::2]
        b[0] = xb[:, 1::2]
        caches = []
        for j, block in enumerate(self.blocks, start=1):
            if j >= 2:
                a = _down_cf(a)
                b = _down_cf(b)
            t, c = block.forward(b)
            caches.append(c)
            a, b = b, a + t
        phi_cf = np.concatenate([a, b], axis=0)
        phi = np.ascontiguousarray(np.moveaxis(phi_cf, 0, 1))
        return phi.reshape(lead + phi.shape[1:]), caches

    def forward(self, x):
        phi, _ = self.forward_with_cache(x)
        return phi

    def inverse_with_cache(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        c = phi.shape[-2]
        if c != self.config.merged_channels:
            raise ValueError(
                f"feature has {c} channels, transform expects {self.config.merged_channels}")
        lead = phi.shape[:-2]
        pb = phi.reshape((-1,) + phi.shape[-2:])
        phi_cf = np.ascontiguousarray(np.moveaxis(pb, 1, 0))
        half = c // 2
        a = phi_cf[:half]
        b = phi_cf[half:]
        caches = [None] * len(self.blocks)
        for j in range(len(self.blocks), 0, -1):
            t, bc = self.blocks[j - 1].forward(a)
            caches[j - 1] = bc
            a, b = b - t, a
            if j >= 2:
                a = _up_cf(a)
                b = _up_cf(b)
        x = np.empty((a.shape[1], 2 * a.shape[2]))
        x[:, 0::2] = a[0]
        x[:, 1::2] = b[0]
        return x.reshape(lead + x.shape[1:]), caches

    def inverse(self, phi):
        x, _ = self.inverse_with_cache(phi)
        return x

    # -- vector-Jacobian products ------------------------------------------
    # Parameter gradients accumulate into the conv Parameters; both VJPs can
    # run in one step (shared predictors) and their contributions add up.

    def forward_vjp(self, caches, grad_phi):
        grad_phi = np.asarray(grad_phi, dtype=np.float64)
        lead = grad_phi.shape[:-2]
        gp = grad_phi.reshape((-1,) + grad_phi.shape[-2:])
        g_cf = np.ascontiguousarray(np.moveaxis(gp, 1, 0))
        half = self.config.merged_channels // 2
        ga = g_cf[:half]
        gb = g_cf[half:]
        for j in range(len(self.blocks), 0, -1):
            # stage output was (a', b') = (b, a + F(b))
            ga, gb = gb, ga + self.blocks[j - 1].backward(caches[j - 1], gb)
            if j >= 2:
                ga = _up_cf(ga)
                gb = _up_cf(gb)
        gx = np.empty((ga.shape[1], 2 * ga.shape[2]))
        gx[:, 0::2] = ga[0]
        gx[:, 1::2] = gb[0]
        return gx.reshape(lead + gx.shape[1:])

    def inverse_vjp(self, caches, grad_x):
        grad_x = np.asarray(grad_x, dtype=np.float64)
        lead = grad_x.shape[:-1]
        gb2 = grad_x.reshape(-1, grad_x.shape[-1])
        shape = (self.config.base_channels, gb2.shape[0], gb2.shape[1] // 2)
        ga = np.zeros(shape)
        gb = np.zeros(shape)
        ga[0] = gb2[:, 0::2]
        gb[0] = gb2[:, 1::2]
        for j in range(1, len(self.blocks) + 1):
            if j >= 2:
                ga = _down_cf(ga)
                gb = _down_cf(gb)
            # stage output was (a, b) = (b' - F(a'), a')
            ga, gb = gb + self.blocks[j - 1].backward(caches[j - 1], -ga), ga
        g_cf = np.concatenate([ga, gb], axis=0)
        gphi = np.ascontiguousarray(np.moveaxis(g_cf, 0, 1))
        return gphi.reshape(lead + gphi.shape[1:])

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self, prefix="lifting"):
        for j, block in enumerate(self.blocks, start=1):
            yield from block.named_parameters(f"{prefix}/stage{j}")

    def named_state(self, prefix="lifting"):
        for j, block in enumerate(self.blocks, start=1):
            yield from block.named_state(f"{prefix}/stage{j}")

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def update_spectral_state(self, iters=1):
        for block in self.blocks:
            block.update_spectral_state(iters)
