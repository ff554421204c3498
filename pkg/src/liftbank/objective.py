"""Signal-to-distortion objectives: clipped SDR training loss and SI-SDR.

The training loss is the negated mean of

    0.5 * ( clip_b[SDR(s_hat, s)] + clip_b[SDR(x - s_hat, n)] )

with SDR(u, v) = 10 log10(|u|^2 / |u - v|^2) and clip_b[v] = b * tanh(v / b),
so "minimize" is uniform across the codebase and the optimum saturates at
-beta. Both terms are eps-guarded so ratios stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LossConfig",
    "MetricReport",
    "sdr",
    "clip",
    "sdr_loss",
    "sdr_loss_and_grad",
    "si_sdr",
    "si_sdr_improvement",
]

_LOG10 = math.log(10.0)
_SI_SDR_CAP_DB = 100.0


@dataclass(frozen=True)
class LossConfig:
    beta_clip: float = 20.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.beta_clip <= 0.0:
            raise ValueError("clipping parameter must be positive")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")


@dataclass
class MetricReport:
    utterance_id: str
    si_sdr_in: float
    si_sdr_out: float
    improvement: float

    CSV_HEADER = "utterance_id,si_sdr_in,si_sdr_out,improvement"

    def csv_row(self):
        return (f"{self.utterance_id},{self.si_sdr_in:.6f},"
                f"{self.si_sdr_out:.6f},{self.improvement:.6f}")


def sdr(reference, estimate, eps=1e-8):
    """10 log10((|ref|^2 + eps) / (|ref - est|^2 + eps)) in dB."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if not np.any(reference):
        raise ValueError("undefined SDR: reference is all-zero")
    num = float(np.sum(reference * reference)) + eps
    den = float(np.sum((reference - estimate) ** 2)) + eps
    return 10.0 * math.log10(num / den)


def clip(v, beta):
    """Soft clip beta * tanh(v / beta): odd, bounded by beta, slope 1 at 0."""
    if beta <= 0.0:
        raise ValueError("clipping parameter must be positive")
    return beta * np.tanh(np.asarray(v, dtype=np.float64) / beta)


def _term_stats(u, v, eps):
    """Per-sample SDR(u, v) over the last axis plus the pieces its grad needs."""
    num = np.sum(u * u, axis=-1) + eps
    den = np.sum((u - v) ** 2, axis=-1) + eps
    db = (10.0 / _LOG10) * (np.log(num) - np.log(den))
    return db, num, den


def sdr_loss(s_hat, s, x, n, cfg=None):
    """Negated clipped two-term SDR quality score, averaged over the batch."""
    loss, _ = sdr_loss_and_grad(s_hat, s, x, n, cfg)
    return loss


def sdr_loss_and_grad(s_hat, s, x, n, cfg=None):
    """Loss plus its gradient with respect to the estimate.

    Signals are (..., T); the loss is the mean over leading axes of the
    per-sample loss, and the gradient matches that reduction. Training data
    must satisfy x = s + n.
    """
    cfg = cfg if cfg is not None else LossConfig()
    s_hat = np.asarray(s_hat, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if not (s_hat.shape == s.shape == x.shape == n.shape):
        raise ValueError("signal shapes must agree")
    # exact-zero comparisons: non-finite estimates must fall through to the
    # loss value so the trainer can flag divergence instead
    if np.any(np.abs(s_hat).sum(axis=-1) == 0.0):
        raise ValueError("undefined SDR: estimate is all-zero")
    if np.any(np.abs(x - s_hat).sum(axis=-1) == 0.0):
        raise ValueError("undefined SDR: residual is all-zero")
    beta, eps = cfg.beta_clip, cfg.eps

    # divergence shows up as non-finite values here; the caller checks the
    # loss, so the intermediate overflow warnings are just noise
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        t1, num1, den1 = _term_stats(s_hat, s, eps)
        resid = x - s_hat
        t2, num2, den2 = _term_stats(resid, n, eps)

        th1 = np.tanh(t1 / beta)
        th2 = np.tanh(t2 / beta)
        per_sample = -0.5 * (beta * th1 + beta * th2)
        count = per_sample.size
        loss = float(per_sample.mean())

        c = 20.0 / _LOG10
        dt1 = c * (s_hat / num1[..., None] - (s_hat - s) / den1[..., None])
        dt2 = -c * (resid / num2[..., None] - (resid - n) / den2[..., None])
        g1 = (1.0 - th1 * th1)[..., None] * dt1
        g2 = (1.0 - th2 * th2)[..., None] * dt2
        grad = -0.5 * (g1 + g2) / count
    return loss, grad


def si_sdr(s, s_hat):
    """Scale-invariant SDR in dB, clamped to +/-100 dB at the degeneracies.

    The estimate is projected onto the reference (gamma = <s, s_hat> / |s|^2)
    before the ratio, which makes the value invariant to any nonzero scaling
    of the estimate.
    """
    s = np.asarray(s, dtype=np.float64).ravel()
    s_hat = np.asarray(s_hat, dtype=np.float64).ravel()
    if s.shape != s_hat.shape:
        raise ValueError("signal shapes must agree")
    energy = float(s @ s)
    if energy == 0.0:
        raise ValueError("undefined SI-SDR: reference is all-zero")
    gamma = float(s @ s_hat) / energy
    num = gamma * gamma * energy
    den = float(np.sum((gamma * s - s_hat) ** 2))
    if num == 0.0:
        return -_SI_SDR_CAP_DB
    if den == 0.0 or 10.0 * math.log10(num / den) > _SI_SDR_CAP_DB:
        return _SI_SDR_CAP_DB
    return max(10.0 * math.log10(num / den), -_SI_SDR_CAP_DB)


def si_sdr_improvement(s, s_hat, x):
    """SI-SDR gain of the estimate over the unprocessed mixture."""
    return si_sdr(s, s_hat) - si_sdr(s, x)
