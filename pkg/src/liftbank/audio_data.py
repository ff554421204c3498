"""WAV ingestion/emission, synthetic mixture generation, dataset batching.

Real corpora load through 16-bit mono PCM WAV files and a plain-text
manifest of "clean<TAB>noisy" path pairs. Desk-scale experiments instead use
a synthetic proxy: a harmonic tone complex with a slowly varying pitch and
amplitude envelope stands in for speech (energy concentrated below about
3 kHz), and high-tilted filtered noise stands in for interference, so a
learned filterbank has something it can actually separate.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng

__all__ = [
    "WavClip",
    "wav_read",
    "wav_write",
    "MixtureTriple",
    "synth_mixture",
    "synth_dataset",
    "read_manifest",
    "load_manifest_triples",
    "batch_iter",
]

_PCM_SCALE = 32767.0


@dataclass
class WavClip:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("clips are mono 1-D signals")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("clip contains non-finite samples")


def wav_read(path):
    """Read 16-bit mono PCM; other formats are rejected."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise ValueError(f"{path}: mono required")
            if fh.getsampwidth() != 2:
                raise ValueError(f"{path}: 16-bit PCM required")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: not a readable WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _PCM_SCALE
    return WavClip(samples, rate)


def wav_write(clip, path):
    """Write 16-bit mono PCM; samples outside [-1, 1] are clamped."""
    clamped = np.clip(clip.samples, -1.0, 1.0)
    quantized = np.round(clamped * _PCM_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(clip.sample_rate))
        fh.writeframes(quantized.tobytes())


@dataclass
class MixtureTriple:
    """Training triple with mixture = clean + noise holding exactly."""

    clean: np.ndarray
    noise: np.ndarray
    mixture: np.ndarray
    snr_db: float
    name: str = ""

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float64)
        self.noise = np.asarray(self.noise, dtype=np.float64)
        self.mixture = np.asarray(self.mixture, dtype=np.float64)
        if not (self.clean.shape == self.noise.shape == self.mixture.shape):
            raise ValueError("triple members must share a length")


def _harmonic_tone(rng, n, sample_rate):
    """Speech proxy: pitched harmonic complex with pitch drift and envelope."""
    t = np.arange(n) / sample_rate
    f0 = rng.uniform((), 90.0, 300.0)[()]
    drift_rate = rng.uniform((), 0.5, 3.0)[()]
    drift_phase = rng.uniform((), 0.0, 2.0 * np.pi)[()]
    inst_freq = f0 * (1.0 + 0.04 * np.sin(2.0 * np.pi * drift_rate * t + drift_phase))
    phase = 2.0 * np.pi * np.cumsum(inst_freq) / sample_rate
    limit = min(3000.0, 0.45 * sample_rate)
    n_harm = max(1, int(limit / f0))
    tone = np.zeros(n)
    for h in range(1, n_harm + 1):
        amp = 1.0 / h
        tone += amp * np.sin(h * phase + rng.uniform((), 0.0, 2.0 * np.pi)[()])
    env_rate = rng.uniform((), 1.0, 4.0)[()]
    env_phase = rng.uniform((), 0.0, 2.0 * np.pi)[()]
    envelope = 0.25 + 0.75 * (0.5 - 0.5 * np.cos(2.0 * np.pi * env_rate * t + env_phase)) ** 2
    tone *= envelope
    rms = np.sqrt(np.mean(tone * tone))
    return 0.1 * tone / max(rms, 1e-12)


def _tilted_noise(rng, n):
    """Interference proxy: first-difference of white noise (high-shelf tilt)."""
    white = rng.normal((n + 1,))
    return np.diff(white)


def synth_mixture(rng, duration_s, snr_db, sample_rate=16000):
    """Deterministic synthetic triple at an exact target SNR.

    The noise is rescaled so 10*log10(|clean|^2 / |noise|^2) equals snr_db,
    and mixture = clean + noise holds bitwise.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration_s * sample_rate))
    clean = _harmonic_tone(rng, n, sample_rate)
    noise = _tilted_noise(rng, n)
    target = np.sum(clean * clean) / (10.0 ** (snr_db / 10.0))
    noise *= np.sqrt(target / np.sum(noise * noise))
    mixture = clean + noise
    # one rounding consistency pass so BOTH identities hold bitwise:
    # mixture == clean + noise and mixture - clean == noise
    for _ in range(4):
        noise = mixture - clean
        mixture = clean + noise
        if np.array_equal(mixture - clean, noise):
            break
    return MixtureTriple(clean, noise, mixture, float(snr_db))


def synth_dataset(seed, count, duration_s, snr_lo, snr_hi, sample_rate=16000):
    """Eagerly generate ``count`` triples, reproducible from the seed alone."""
    if count < 1:
        raise ValueError("need at least one clip")
    rng = Rng(seed)
    out = []
    for i in range(count):
        snr = rng.uniform((), snr_lo, snr_hi)[()] if snr_hi > snr_lo else float(snr_lo)
        triple = synth_mixture(rng, duration_s, snr, sample_rate)
        triple.name = f"synth{i:04d}"
        out.append(triple)
    return out


def read_manifest(path):
    """Parse "clean<TAB>noisy" lines; '#' starts a comment."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'clean<TAB>noisy'")
        pairs.append((parts[0], parts[1]))
    return pairs


def load_manifest_triples(path):
    """Load manifest pairs as triples with noise = mixture - clean.

    Pairs whose members differ in length are skipped; returns
    (triples, skipped_names).
    """
    triples = []
    skipped = []
    for clean_path, noisy_path in read_manifest(path):
        clean = wav_read(clean_path)
        noisy = wav_read(noisy_path)
        name = Path(noisy_path).stem
        if clean.samples.shape != noisy.samples.shape:
            skipped.append(name)
            continue
        triples.append(MixtureTriple(clean.samples, noisy.samples - clean.samples,
                                     noisy.samples, float("nan"), name=name))
    return triples, skipped


def batch_iter(dataset, batch_size, seed, crop_len=16384):
    """Seeded shuffle into batches of fixed-length crops.

    Every utterance appears exactly once per pass; utterances longer than
    crop_len get a seeded random crop, shorter ones are zero-padded at the
    end. Yields (clean, noise, mixture) arrays of shape (B, crop_len).
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = Rng(seed)
    order = rng.permutation(len(dataset))
    for lo in range(0, len(dataset), batch_size):
        chunk = order[lo:lo + batch_size]
        clean = np.empty((len(chunk), crop_len))
        noise = np.empty((len(chunk), crop_len))
        mixture = np.empty((len(chunk), crop_len))
        for row, idx in enumerate(chunk):
            triple = dataset[int(idx)]
            length = triple.clean.shape[-1]
            if length > crop_len:
                start = int(rng.raw(1)[0] % np.uint64(length - crop_len + 1))
                sl = slice(start, start + crop_len)
                clean[row] = triple.clean[sl]
                noise[row] = triple.noise[sl]
                mixture[row] = triple.mixture[sl]
            else:
                pad = crop_len - length
                clean[row] = np.pad(triple.clean, (0, pad))
                noise[row] = np.pad(triple.noise, (0, pad))
                mixture[row] = np.pad(triple.mixture, (0, pad))
        yield clean, noise, mixture
