"""Mask generation and the end-to-end enhancement pipelines.

Two mask sources: a fixed, time-constant binary channel partition (the
transform must learn to route target and interference energy into disjoint
channels), and a small encoder/decoder network with skip connections whose
sigmoid head emits values in (0, 1). Both plug into either transform path:
the lifting filterbank (mask applied to its feature) or the STFT baseline
(mask applied to the complex spectrogram, estimated from the log magnitude).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Activation, Conv2d, Deconv2d, InstanceNorm2d
from .numerics import Rng, pad_to_multiple
from .objective import si_sdr_improvement
from .stft import (Spectrogram, istft, istft_vjp, log_magnitude_feature,
                   stft_forward)

__all__ = [
    "BinaryMaskSpec",
    "binary_mask_generate",
    "MaskEstimator",
    "estimate_mask",
    "apply_mask",
    "EnhancementPipeline",
]

NORM_KINDS = ("none", "instance", "spectral")


@dataclass(frozen=True)
class BinaryMaskSpec:
    """Fixed channel partition; rows in speech_channels pass, the rest block."""

    n_channels: int
    speech_channels: tuple = None

    def __post_init__(self):
        if self.n_channels < 2:
            raise ValueError("need at least two channels to partition")
        if self.speech_channels is None:
            if self.n_channels % 2 != 0:
                raise ValueError("default partition needs an even channel count")
            object.__setattr__(self, "speech_channels",
                               tuple(range(self.n_channels // 2)))
        else:
            chans = tuple(int(c) for c in self.speech_channels)
            if any(c < 0 or c >= self.n_channels for c in chans):
                raise ValueError("speech channel index out of range")
            object.__setattr__(self, "speech_channels", chans)


def binary_mask_generate(spec, n_frames):
    """(C, M) hard mask, constant along the time axis."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    mask = np.zeros((spec.n_channels, int(n_frames)))
    mask[list(spec.speech_channels), :] = 1.0
    return mask


def apply_mask(feature, mask):
    """Elementwise product of equal-shape arrays."""
    feature = np.asarray(feature, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if feature.shape != mask.shape:
        raise ValueError(f"shape mismatch: feature {feature.shape}, mask {mask.shape}")
    return feature * mask


# ---------------------------------------------------------------------------
# mask estimator
# ---------------------------------------------------------------------------

class MaskEstimator:
    """Strided-conv encoder / mirrored deconv decoder with skip concatenation.

    Input is a 2-D feature (channels-or-bins by frames) treated as a
    one-channel image; output is a same-shape mask in (0, 1). Spatial sizes
    that are not divisible by the total stride are zero-padded on the way in
    and cropped on the way out.
    """

    def __init__(self, depth=3, base_channels=16, norm="none", rng=None):
        if norm not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {norm!r}")
        if depth < 1:
            raise ValueError("need at least one encoder stage")
        rng = rng if rng is not None else Rng(0)
        self.depth = int(depth)
        self.norm_kind = norm
        self.act = Activation("leaky_relu", 0.2)
        sn = norm == "spectral"
        # instance norm cancels any conv bias (mean subtraction), so the bias
        # is dropped there and the norm's shift parameter takes its role
        use_bias = norm != "instance"
        chans = [base_channels * (2 ** i) for i in range(depth)]
        self.enc_convs = []
        self.enc_norms = []
        prev = 1
        for c in chans:
            self.enc_convs.append(Conv2d(prev, c, kernel_size=4, stride=2,
                                         padding=1, bias=use_bias,
                                         spectral_norm=sn, rng=rng))
            self.enc_norms.append(InstanceNorm2d(c) if norm == "instance" else None)
            prev = c
        self.dec_convs = []
        self.dec_norms = []
        for i in range(depth - 1, -1, -1):
            in_c = chans[depth - 1] if i == depth - 1 else 2 * chans[i]
            out_c = chans[i - 1] if i >= 1 else base_channels
            self.dec_convs.append(Deconv2d(in_c, out_c, kernel_size=4, stride=2,
                                           padding=1, bias=use_bias,
                                           spectral_norm=sn, rng=rng))
            self.dec_norms.append(InstanceNorm2d(out_c) if norm == "instance" else None)
        # zero-init head: the estimator starts out as a flat 0.5 mask
        self.head = Conv2d(base_channels, 1, kernel_size=1, rng=rng)
        self.head.weight.data[...] = 0.0
        self.head.bias.data[...] = 0.0
        self.sigmoid = Activation("sigmoid")

    @property
    def total_stride(self):
        return 2 ** self.depth

    def forward_with_cache(self, feature):
        feature = np.asarray(feature, dtype=np.float64)
        h0, w0 = feature.shape[-2], feature.shape[-1]
        img = feature[..., None, :, :]
        img, _ = pad_to_multiple(img, self.total_stride)
        img = np.moveaxis(img, -1, -2)
        img, _ = pad_to_multiple(img, self.total_stride)
        img = np.moveaxis(img, -1, -2)

        h = img
        enc_caches = []
        skips = []
        for conv, nrm in zip(self.enc_convs, self.enc_norms):
            h, c1 = conv.forward(h)
            c2 = None
            if nrm is not None:
                h, c2 = nrm.forward(h)
            h, c3 = self.act.forward(h)
            enc_caches.append((c1, c2, c3))
            skips.append(h)

        dec_caches = []
        cat_channels = {}
        for idx, (conv, nrm) in enumerate(zip(self.dec_convs, self.dec_norms)):
            stage = self.depth - 1 - idx
            h, c1 = conv.forward(h)
            c2 = None
            if nrm is not None:
                h, c2 = nrm.forward(h)
            h, c3 = self.act.forward(h)
            dec_caches.append((c1, c2, c3))
            if stage >= 1:
                cat_channels[idx] = h.shape[-3]
                h = np.concatenate([h, skips[stage - 1]], axis=-3)

        h, head_cache = self.head.forward(h)
        mask_img, sig_cache = self.sigmoid.forward(h)
        mask = mask_img[..., 0, :h0, :w0]
        cache = (enc_caches, dec_caches, head_cache, sig_cache,
                 cat_channels, (h0, w0), img.shape)
        return mask, cache

    def forward(self, feature):
        mask, _ = self.forward_with_cache(feature)
        return mask

    def backward(self, cache, grad_mask):
        (enc_caches, dec_caches, head_cache, sig_cache,
         cat_channels, (h0, w0), img_shape) = cache
        grad_mask = np.asarray(grad_mask, dtype=np.float64)
        g_img = np.zeros(grad_mask.shape[:-2] + (1,) + img_shape[-2:])
        g_img[..., 0, :h0, :w0] = grad_mask

        g = self.sigmoid.backward(sig_cache, g_img)
        g = self.head.backward(head_cache, g)

        skip_grads = [None] * self.depth
        for idx in range(self.depth - 1, -1, -1):
            stage = self.depth - 1 - idx
            conv, nrm = self.dec_convs[idx], self.dec_norms[idx]
            c1, c2, c3 = dec_caches[idx]
            if stage >= 1:
                nc = cat_channels[idx]
                skip_grads[stage - 1] = g[..., nc:, :, :]
                g = g[..., :nc, :, :]
            g = self.act.backward(c3, g)
            if nrm is not None:
                g = nrm.backward(c2, g)
            g = conv.backward(c1, g)

        for stage in range(self.depth - 1, -1, -1):
            conv, nrm = self.enc_convs[stage], self.enc_norms[stage]
            c1, c2, c3 = enc_caches[stage]
            if skip_grads[stage] is not None:
                g = g + skip_grads[stage]
            g = self.act.backward(c3, g)
            if nrm is not None:
                g = nrm.backward(c2, g)
            g = conv.backward(c1, g)

        return g[..., 0, :h0, :w0]

    def named_parameters(self, prefix="mask"):
        for i, conv in enumerate(self.enc_convs):
            yield from conv.named_parameters(f"{prefix}/enc{i}")
            if self.enc_norms[i] is not None:
                yield from self.enc_norms[i].named_parameters(f"{prefix}/enc{i}/norm")
        for i, conv in enumerate(self.dec_convs):
            yield from conv.named_parameters(f"{prefix}/dec{i}")
            if self.dec_norms[i] is not None:
                yield from self.dec_norms[i].named_parameters(f"{prefix}/dec{i}/norm")
        yield from self.head.named_parameters(f"{prefix}/head")

    def named_state(self, prefix="mask"):
        for i, conv in enumerate(self.enc_convs):
            yield from conv.named_state(f"{prefix}/enc{i}")
        for i, conv in enumerate(self.dec_convs):
            yield from conv.named_state(f"{prefix}/dec{i}")
        yield from self.head.named_state(f"{prefix}/head")

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def update_spectral_state(self, iters=1):
        for conv in self.enc_convs + self.dec_convs + [self.head]:
            conv.update_spectral_state(iters)


def estimate_mask(net, feature):
    """Run the estimator; output shape equals input shape, values in (0, 1)."""
    return net.forward(feature)


# ---------------------------------------------------------------------------
# end-to-end pipelines
# ---------------------------------------------------------------------------

MASK_SOURCES = ("binary", "estimator", "ones")


class EnhancementPipeline:
    """Transform -> mask -> inverse transform, with a training backward pass.

    Exactly one of ``transform`` (lifting) or ``stft_config`` must be given.
    ``mask_source`` is "binary", "estimator", or "ones" (debug identity).
    """

    def __init__(self, transform=None, stft_config=None, mask_source="binary",
                 binary_spec=None, estimator=None):
        if (transform is None) == (stft_config is None):
            raise ValueError("provide exactly one of transform / stft_config")
        if mask_source not in MASK_SOURCES:
            raise ValueError(f"unknown mask source {mask_source!r}")
        self.transform = transform
        self.stft_config = stft_config
        self.mask_source = mask_source
        self.estimator = estimator
        self.binary_spec = binary_spec
        if mask_source == "estimator" and estimator is None:
            raise ValueError("estimator mask source needs a MaskEstimator")
        if mask_source == "binary" and binary_spec is None:
            if transform is not None:
                self.binary_spec = BinaryMaskSpec(transform.config.merged_channels)
            else:
                raise ValueError("binary mask on the stft path needs an explicit "
                                 "BinaryMaskSpec (bin count is odd)")

    @property
    def kind(self):
        return "lifting" if self.transform is not None else "stft"

    # -- inference ----------------------------------------------------------

    def enhance(self, x):
        """Estimate the target and the residual; both match x in length."""
        s_hat, _ = self.enhance_training(x)
        x = np.asarray(x, dtype=np.float64)
        return s_hat, x - s_hat

    def enhance_training(self, x):
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input signal")
        if self.kind == "lifting":
            return self._enhance_lifting(x)
        return self._enhance_stft(x)

    def _mask_2d(self, n_channels, n_frames):
        if self.mask_source == "ones":
            return np.ones((n_channels, n_frames))
        return binary_mask_generate(self.binary_spec, n_frames)

    def _enhance_lifting(self, x):
        padded, t0 = pad_to_multiple(x, self.transform.config.time_divisor)
        phi, fwd_cache = self.transform.forward_with_cache(padded)
        est_cache = None
        if self.mask_source == "estimator":
            mask, est_cache = self.estimator.forward_with_cache(phi)
        else:
            mask = self._mask_2d(phi.shape[-2], phi.shape[-1])
        masked = phi * mask
        y, inv_cache = self.transform.inverse_with_cache(masked)
        s_hat = y[..., :t0]
        cache = ("lifting", fwd_cache, inv_cache, est_cache, phi, mask,
                 padded.shape, t0)
        return s_hat, cache

    def _enhance_stft(self, x):
        t0 = x.shape[-1]
        spec = stft_forward(x, self.stft_config)
        est_cache = None
        if self.mask_source == "estimator":
            psi = log_magnitude_feature(spec)
            mask, est_cache = self.estimator.forward_with_cache(psi)
        else:
            mask = self._mask_2d(self.stft_config.n_bins, spec.n_frames)
        masked = Spectrogram(spec.real * mask, spec.imag * mask)
        s_hat = istft(masked, self.stft_config, t0)
        cache = ("stft", spec, est_cache, mask, t0)
        return s_hat, cache

    # -- training backward ----------------------------------------------------

    def backward(self, cache, grad_s_hat):
        """Accumulate parameter gradients for d(loss)/d(s_hat)."""
        if cache[0] == "lifting":
            _, fwd_cache, inv_cache, est_cache, phi, mask, padded_shape, t0 = cache
            grad_y = np.zeros(padded_shape)
            grad_y[..., :t0] = grad_s_hat
            grad_masked = self.transform.inverse_vjp(inv_cache, grad_y)
            grad_phi = mask * grad_masked
            if est_cache is not None:
                grad_mask = phi * grad_masked
                grad_phi = grad_phi + self.estimator.backward(est_cache, grad_mask)
            self.transform.forward_vjp(fwd_cache, grad_phi)
            return
        _, spec, est_cache, mask, t0 = cache
        gspec = istft_vjp(grad_s_hat, self.stft_config, spec.n_frames, t0)
        if est_cache is not None:
            grad_mask = gspec.real * spec.real + gspec.imag * spec.imag
            self.estimator.backward(est_cache, grad_mask)

    # -- parameter plumbing ----------------------------------------------------

    def named_parameters(self, group="both"):
        if group not in ("transform", "mask", "both"):
            raise ValueError(f"unknown parameter group {group!r}")
        if group in ("transform", "both") and self.transform is not None:
            yield from self.transform.named_parameters()
        if group in ("mask", "both") and self.estimator is not None:
            yield from self.estimator.named_parameters()

    def named_state(self):
        if self.transform is not None:
            yield from self.transform.named_state()
        if self.estimator is not None:
            yield from self.estimator.named_state()

    def zero_grad(self):
        for _, p in self.named_parameters("both"):
            p.zero_grad()

    def update_spectral_state(self, iters=1):
        if self.transform is not None:
            self.transform.update_spectral_state(iters)
        if self.estimator is not None:
            self.estimator.update_spectral_state(iters)

    def state_dict(self):
        out = {name: p.data for name, p in self.named_parameters("both")}
        out.update({name: arr for name, arr in self.named_state()})
        return out

    def load_state_dict(self, mapping):
        own = self.state_dict()
        if set(own) != set(mapping):
            missing = sorted(set(own) - set(mapping))
            extra = sorted(set(mapping) - set(own))
            raise ValueError(f"checkpoint mismatch: missing={missing} extra={extra}")
        for name, arr in own.items():
            incoming = np.asarray(mapping[name], dtype=np.float64)
            if incoming.shape != arr.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}: "
                                 f"{incoming.shape} vs {arr.shape}")
            arr[...] = incoming

    # -- evaluation helper -------------------------------------------------

    def metric_improvement(self, clean, mixture):
        """Mean SI-SDR improvement of this pipeline over given pairs."""
        s_hat, _ = self.enhance(mixture)
        if mixture.ndim == 1:
            return si_sdr_improvement(clean, s_hat, mixture)
        vals = [si_sdr_improvement(clean[i], s_hat[i], mixture[i])
                for i in range(mixture.shape[0])]
        return float(np.mean(vals))
