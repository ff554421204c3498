"""Property suites behind the ``check`` command and the acceptance tests.

Each suite returns its worst-case error so callers can print it and compare
against the pinned tolerance. The ``corrupt`` flags are negative controls:
they deliberately break one ingredient so a healthy suite must fail.
"""

from __future__ import annotations

import numpy as np

from .lifting import LiftingConfig, LiftingTransform
from .masking import EnhancementPipeline
from .numerics import Rng
from .objective import LossConfig, sdr_loss_and_grad
from .stft import StftConfig, istft, stft_forward

__all__ = [
    "PR_TOLERANCE",
    "GRAD_TOLERANCE",
    "STFT_PR_TOLERANCE",
    "relative_error",
    "reconstruction_suite",
    "gradient_suite",
    "stft_reconstruction_suite",
]

PR_TOLERANCE = 1e-9
GRAD_TOLERANCE = 1e-4
STFT_PR_TOLERANCE = 1e-10


def relative_error(a, b, floor=1e-8):
    """Elementwise |a - b| / max(|a|, |b|, floor), reduced to the maximum."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def reconstruction_suite(config=None, trials=100, length=None, seed=0,
                         corrupt=False):
    """Max |inverse(forward(x)) - x| over fresh random transforms and inputs."""
    config = config if config is not None else LiftingConfig()
    if length is None:
        length = config.time_divisor * max(4, 2048 // config.time_divisor)
    rng = Rng(seed)
    worst = 0.0
    for _ in range(trials):
        transform = LiftingTransform(config, rng.fork())
        x = rng.normal((int(length),))
        phi = transform.forward(x)
        if corrupt:
            transform.blocks[0].convs[0].weight.data += 0.05
        err = float(np.max(np.abs(transform.inverse(phi) - x)))
        worst = max(worst, err)
    return worst


def _pipeline_loss(pipeline, clean, noise, mixture, loss_cfg):
    s_hat, _ = pipeline.enhance_training(mixture)
    loss, _ = sdr_loss_and_grad(s_hat, clean, mixture, noise, loss_cfg)
    return loss


def gradient_suite(seed=0, corrupt=False, h=1e-5, include_input=True):
    """Finite-difference check of the full training gradient.

    Tiny configuration (two lifting stages, 32 samples, fixed binary mask,
    clipped-SDR loss); compares the hand-written backward pass against
    central differences for every parameter, and optionally for the input.
    """
    rng = Rng(seed)
    config = LiftingConfig(num_stages=2)
    transform = LiftingTransform(config, rng.fork())
    pipeline = EnhancementPipeline(transform=transform, mask_source="binary")
    loss_cfg = LossConfig()
    clean = 0.5 * rng.normal((32,))
    noise = 0.3 * rng.normal((32,))
    mixture = clean + noise

    pipeline.zero_grad()
    s_hat, cache = pipeline.enhance_training(mixture)
    _, grad_out = sdr_loss_and_grad(s_hat, clean, mixture, noise, loss_cfg)
    pipeline.backward(cache, grad_out)

    worst = 0.0
    for _, p in pipeline.named_parameters("both"):
        analytic = p.grad.copy()
        if corrupt:
            analytic = 2.0 * analytic + 0.01
        numeric = np.zeros_like(analytic)
        for idx in np.ndindex(*p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = _pipeline_loss(pipeline, clean, noise, mixture, loss_cfg)
            p.data[idx] = orig - h
            fm = _pipeline_loss(pipeline, clean, noise, mixture, loss_cfg)
            p.data[idx] = orig
            numeric[idx] = (fp - fm) / (2.0 * h)
        worst = max(worst, relative_error(analytic, numeric))

    if include_input:
        def loss_of_input(x):
            return _pipeline_loss(pipeline, clean, noise, x, loss_cfg)

        numeric = np.zeros_like(mixture)
        for i in range(mixture.size):
            xp = mixture.copy()
            xp[i] += h
            fp = loss_of_input(xp)
            xp[i] -= 2 * h
            fm = loss_of_input(xp)
            numeric[i] = (fp - fm) / (2.0 * h)
        pipeline.zero_grad()
        s_hat, cache = pipeline.enhance_training(mixture)
        loss, grad_out = sdr_loss_and_grad(s_hat, clean, mixture, noise, loss_cfg)
        # d loss / d mixture has a direct term (x enters the loss residual)
        # plus the path through the transform
        _, fwd_cache, inv_cache, _, _, mask, padded_shape, t0 = cache
        grad_y = np.zeros(padded_shape)
        grad_y[..., :t0] = grad_out
        grad_masked = transform.inverse_vjp(inv_cache, grad_y)
        analytic = transform.forward_vjp(fwd_cache, mask * grad_masked)[..., :t0]
        analytic = analytic + _loss_direct_mixture_grad(
            s_hat, clean, mixture, noise, loss_cfg)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _loss_direct_mixture_grad(s_hat, clean, mixture, noise, cfg):
    """Partial derivative of the loss in its explicit mixture argument."""
    beta, eps = cfg.beta_clip, cfg.eps
    resid = mixture - s_hat
    num = np.sum(resid * resid, axis=-1) + eps
    den = np.sum((resid - noise) ** 2, axis=-1) + eps
    t2 = (10.0 / np.log(10.0)) * (np.log(num) - np.log(den))
    th2 = np.tanh(t2 / beta)
    dt2 = (20.0 / np.log(10.0)) * (resid / num - (resid - noise) / den)
    count = int(np.asarray(t2).size)
    return -0.5 * (1.0 - th2 * th2) * dt2 / count


def stft_reconstruction_suite(cfg=None, lengths=(129, 512, 2048, 16000), seed=0,
                              corrupt=False):
    """Max |istft(stft(x)) - x| over the given signal lengths."""
    cfg = cfg if cfg is not None else StftConfig()
    rng = Rng(seed)
    worst = 0.0
    for t in lengths:
        x = rng.normal((int(t),))
        spec = stft_forward(x, cfg)
        if corrupt:
            spec.real = spec.real * 1.001
        y = istft(spec, cfg, int(t))
        worst = max(worst, float(np.max(np.abs(y - x))))
    return worst
