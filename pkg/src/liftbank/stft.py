"""Perfectly reconstructing STFT baseline.

Analysis windows a centered, zero-padded signal and takes a one-sided real
DFT per frame. Synthesis applies the canonical dual window

    d[t] = w[t] / sum_k w[t - k * hop]^2

and overlap-adds. The dual sum makes windowed overlap-add the exact inverse
wherever frames fully overlap; near the signal ends a few shifted copies of
the window fall outside the analyzed frame set, so synthesis additionally
divides by the realized overlap of w * d (identically 1 in the interior),
which restores exactness for every sample of the original signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "StftConfig",
    "Spectrogram",
    "hann_window",
    "canonical_dual_window",
    "frame_count",
    "stft_forward",
    "istft",
    "istft_vjp",
    "log_magnitude_feature",
]

_TINY = 1e-300


def hann_window(n):
    """Periodic Hann window w[t] = 0.5 * (1 - cos(2 pi t / n))."""
    if n < 2:
        raise ValueError("window length must be at least 2")
    t = np.arange(n, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * t / n))


@dataclass
class StftConfig:
    window_length: int = 512
    hop: int = 128
    dft_length: int = 512
    window: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.hop < 1 or self.window_length < 2:
            raise ValueError("need hop >= 1 and window_length >= 2")
        if self.window_length % self.hop != 0:
            raise ValueError("window_length must be divisible by hop")
        if self.dft_length < self.window_length:
            raise ValueError("dft_length must be at least window_length")
        if self.window is None:
            self.window = hann_window(self.window_length)
        self.window = np.asarray(self.window, dtype=np.float64)
        if self.window.shape != (self.window_length,):
            raise ValueError("window length does not match window_length")

    @property
    def n_bins(self):
        return self.dft_length // 2 + 1


@dataclass
class Spectrogram:
    """One-sided spectrogram as separate real and imaginary parts (F, M)."""

    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        self.real = np.asarray(self.real, dtype=np.float64)
        self.imag = np.asarray(self.imag, dtype=np.float64)
        if self.real.shape != self.imag.shape:
            raise ValueError("real/imag parts must share a shape")

    @property
    def shape(self):
        return self.real.shape

    @property
    def n_frames(self):
        return self.real.shape[-1]

    def magnitude(self):
        return np.hypot(self.real, self.imag)


def canonical_dual_window(w, hop):
    """Canonical dual of an analysis window under periodic hop shifts.

    d[t] = w[t] / sum_k w[t - k*hop]^2 ; requires hop to divide len(w) and a
    strictly positive overlap sum.
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    hop = int(hop)
    if hop < 1 or n % hop != 0:
        raise ValueError("hop must divide the window length")
    wsq = (w * w).reshape(n // hop, hop)
    denom_base = wsq.sum(axis=0)                 # length hop, one value per phase
    if np.any(denom_base <= 0.0):
        raise ValueError("window/hop pair not invertible")
    return w / np.tile(denom_base, n // hop)


def frame_count(t, hop):
    return t // hop + 1


def _frame_starts(n_frames, hop):
    return np.arange(n_frames) * hop


def stft_forward(x, cfg):
    """Analysis: center-pad, window, one-sided real DFT per frame.

    Accepts (..., T); frame m covers original samples
    [m*hop - window_length/2, m*hop + window_length/2) and there are
    floor(T / hop) + 1 frames.
    """
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[-1]
    if t < 1:
        raise ValueError("empty signal")
    wl = cfg.window_length
    pad = wl // 2
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, wl - pad)])
    m = frame_count(t, cfg.hop)
    idx = _frame_starts(m, cfg.hop)[:, None] + np.arange(wl)[None, :]
    frames = xp[..., idx] * cfg.window           # (..., M, wl)
    spec = np.fft.rfft(frames, n=cfg.dft_length, axis=-1)
    spec = np.moveaxis(spec, -1, -2)             # (..., F, M)
    return Spectrogram(spec.real.copy(), spec.imag.copy())


def _coverage(m, cfg):
    """Realized overlap-add of w * d over the frame set; 1 in the interior."""
    wl, hop = cfg.window_length, cfg.hop
    wd = cfg.window * canonical_dual_window(cfg.window, hop)
    cov = np.zeros((m - 1) * hop + wl)
    for i in range(m):
        cov[i * hop:i * hop + wl] += wd
    return cov


def istft(spec, cfg, out_length):
    """Synthesis: inverse DFT per frame, dual window, overlap-add, trim."""
    wl, hop = cfg.window_length, cfg.hop
    real = np.asarray(spec.real, dtype=np.float64)
    imag = np.asarray(spec.imag, dtype=np.float64)
    m = real.shape[-1]
    dual = canonical_dual_window(cfg.window, hop)
    frames = np.fft.irfft(np.moveaxis(real + 1j * imag, -2, -1),
                          n=cfg.dft_length, axis=-1)[..., :wl]
    full_len = max((m - 1) * hop + wl, wl // 2 + out_length)
    y = np.zeros(real.shape[:-2] + (full_len,))
    for i in range(m):
        y[..., i * hop:i * hop + wl] += frames[..., i, :] * dual
    cov = np.ones(full_len)
    cov[:(m - 1) * hop + wl] = np.maximum(_coverage(m, cfg), _TINY)
    y = y / cov
    pad = wl // 2
    return y[..., pad:pad + out_length]


def istft_vjp(grad_y, cfg, n_frames, out_length):
    """Adjoint of ``istft`` as a real-linear map; returns a gradient Spectrogram.

    Needed to push training gradients from the waveform back onto a masked
    spectrogram.
    """
    wl, hop, nfft = cfg.window_length, cfg.hop, cfg.dft_length
    grad_y = np.asarray(grad_y, dtype=np.float64)
    m = n_frames
    dual = canonical_dual_window(cfg.window, hop)
    full_len = max((m - 1) * hop + wl, wl // 2 + out_length)
    gy = np.zeros(grad_y.shape[:-1] + (full_len,))
    pad = wl // 2
    gy[..., pad:pad + out_length] = grad_y
    cov = np.ones(full_len)
    cov[:(m - 1) * hop + wl] = np.maximum(_coverage(m, cfg), _TINY)
    gy = gy / cov
    gframes = np.zeros(grad_y.shape[:-1] + (m, nfft))
    for i in range(m):
        gframes[..., i, :wl] = gy[..., i * hop:i * hop + wl] * dual
    # adjoint of the one-sided inverse real DFT
    f = np.fft.rfft(gframes, n=nfft, axis=-1)
    scale = np.full(nfft // 2 + 1, 2.0 / nfft)
    scale[0] = 1.0 / nfft
    if nfft % 2 == 0:
        scale[-1] = 1.0 / nfft
    g = f * scale
    g = np.moveaxis(g, -1, -2)
    return Spectrogram(g.real.copy(), g.imag.copy())


def log_magnitude_feature(spec, eps=1e-8):
    """Log-magnitude input feature with an eps floor inside the logarithm."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    return np.log(np.maximum(spec.magnitude(), eps))
