"""Seeded synthetic signals for experiments and tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import AudioClip, write_wav


def tone(freq: float, duration_s: float, sample_rate: int = 16000, amplitude: float = 0.5, phase: float = 0.0) -> AudioClip:
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    return AudioClip(amplitude * np.sin(2 * np.pi * freq * t + phase), sample_rate)


def white_noise(duration_s: float, sample_rate: int = 16000, rms: float = 0.1, seed: int = 0) -> AudioClip:
    rng = np.random.default_rng(seed)
    return AudioClip(rms * rng.standard_normal(int(round(duration_s * sample_rate))), sample_rate)


def band_noise(
    low_hz: float, high_hz: float, duration_s: float, sample_rate: int = 16000, rms: float = 0.1, seed: int = 0
) -> AudioClip:
    """White noise band-passed to ``[low_hz, high_hz]`` with a zero-phase Butterworth filter."""
    x = white_noise(duration_s + 0.1, sample_rate, 1.0, seed).samples
    sos = signal.butter(8, [low_hz, high_hz], btype="bandpass", fs=sample_rate, output="sos")
    y = signal.sosfiltfilt(sos, x)[: int(round(duration_s * sample_rate))]
    return AudioClip(y * rms / np.sqrt(np.mean(y**2)), sample_rate)


def two_tone_mixture(
    freqs=(500.0, 3000.0), duration_s: float = 1.0, sample_rate: int = 16000, seed: int = 0
) -> tuple[AudioClip, list[AudioClip]]:
    """Two sines far apart in frequency, with seeded phases; returns (mixture, sources)."""
    rng = np.random.default_rng(seed)
    sources = [tone(f, duration_s, sample_rate, 0.3, rng.uniform(0, 2 * np.pi)) for f in freqs]
    mixture = AudioClip(sources[0].samples + sources[1].samples, sample_rate)
    return mixture, sources


def write_tone_noise_corpus(
    root: str | Path,
    n_tones: int = 8,
    n_noises: int = 4,
    duration_s: float = 1.0,
    sample_rate: int = 16000,
    seed: int = 0,
    freq_range=(300.0, 3000.0),
) -> tuple[Path, Path]:
    """Write ``root/fg/*.wav`` sine tones and ``root/bg/*.wav`` noises.

    Tones are labelled ``sine tone`` and noises ``noise``, so a dataset built
    from the corpus has two query texts.  Returns ``(fg_dir, bg_dir)``.
    """
    root = Path(root)
    fg_dir, bg_dir = root / "fg", root / "bg"
    fg_dir.mkdir(parents=True, exist_ok=True)
    bg_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    freqs = np.geomspace(*freq_range, n_tones) * rng.uniform(0.97, 1.03, n_tones)
    for i, f in enumerate(freqs):
        write_wav(fg_dir / f"sine_tone-{i:02d}.wav", tone(f, duration_s, sample_rate, 0.5, rng.uniform(0, 2 * np.pi)))
    for j in range(n_noises):
        write_wav(bg_dir / f"noise-{j:02d}.wav", white_noise(duration_s, sample_rate, 0.1, seed * 1000 + j))
    return fg_dir, bg_dir
