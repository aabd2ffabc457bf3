"""Time-frequency analysis and synthesis.

Frames are centered: the signal is reflect-padded by ``window_size // 2`` on
both sides, so frame ``t`` is centered on sample ``t * hop_size`` and a clip of
``L`` samples yields ``T = 1 + L // hop_size`` frames.  Clips shorter than one
window are zero-padded at the end to ``window_size`` samples first.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal
from scipy.io import wavfile

__all__ = [
    "AudioClip",
    "StftConfig",
    "ComplexSpectrogram",
    "MagnitudeSpectrogram",
    "LogFreqWarp",
    "stft",
    "istft",
    "magnitude",
    "log_compress",
    "log_freq_warp",
    "apply_mask",
    "energy_gain",
    "read_wav",
    "write_wav",
]


@dataclass(frozen=True)
class AudioClip:
    """Mono PCM signal."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"AudioClip expects 1-D samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples contain NaN or Inf")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2))) if len(self) else 0.0


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 512
    hop_size: int = 256
    window: str = "hann"
    log_epsilon: float = 1e-10

    def __post_init__(self):
        if self.window_size <= 0 or self.window_size % 2:
            raise ValueError(f"window_size must be a positive even integer, got {self.window_size}")
        if not 0 < self.hop_size <= self.window_size:
            raise ValueError(f"hop_size must satisfy 0 < hop <= window_size, got {self.hop_size}")
        if not self.log_epsilon > 0:
            raise ValueError(f"log_epsilon must be positive, got {self.log_epsilon}")
        win = self.window_array()
        if not signal.check_COLA(win, self.window_size, self.window_size - self.hop_size):
            raise ValueError(
                f"window {self.window!r} is not constant-overlap-add at hop {self.hop_size}"
            )

    @property
    def n_freq(self) -> int:
        return self.window_size // 2 + 1

    def window_array(self) -> np.ndarray:
        return signal.get_window(self.window, self.window_size, fftbins=True).astype(np.float64)

    def n_frames(self, n_samples: int) -> int:
        return 1 + max(n_samples, self.window_size) // self.hop_size

    def to_dict(self) -> dict:
        return {
            "window_size": self.window_size,
            "hop_size": self.hop_size,
            "window": self.window,
            "log_epsilon": self.log_epsilon,
        }


@dataclass(frozen=True)
class ComplexSpectrogram:
    """One-sided STFT, shape ``(F, T)``.

    ``length`` is the sample count of the analysed clip, kept so synthesis can
    return a clip of the original length.
    """

    bins: np.ndarray
    config: StftConfig
    sample_rate: int
    length: int

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 2 or bins.shape[0] != self.config.n_freq:
            raise ValueError(
                f"expected {self.config.n_freq} frequency rows, got shape {bins.shape}"
            )
        if not np.all(np.isfinite(bins)):
            raise ValueError("spectrogram contains non-finite entries")
        object.__setattr__(self, "bins", bins)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bins.shape


@dataclass(frozen=True)
class MagnitudeSpectrogram:
    bins: np.ndarray
    config: StftConfig
    sample_rate: int

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64)
        if bins.ndim != 2:
            raise ValueError(f"magnitude spectrogram must be 2-D, got shape {bins.shape}")
        if not np.all(np.isfinite(bins)) or np.any(bins < 0):
            raise ValueError("magnitude spectrogram entries must be finite and nonnegative")
        object.__setattr__(self, "bins", bins)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bins.shape


def _pad_for_analysis(x: np.ndarray, config: StftConfig) -> np.ndarray:
    if x.shape[0] < config.window_size:
        x = np.pad(x, (0, config.window_size - x.shape[0]))
    half = config.window_size // 2
    return np.pad(x, half, mode="reflect")


def stft(clip: AudioClip, config: StftConfig = StftConfig()) -> ComplexSpectrogram:
    if len(clip) == 0:
        raise ValueError("cannot analyse an empty clip")
    padded = _pad_for_analysis(clip.samples, config)
    n_frames = config.n_frames(len(clip))
    frames = sliding_window_view(padded, config.window_size)[:: config.hop_size][:n_frames]
    bins = np.fft.rfft(frames * config.window_array(), axis=1).T
    return ComplexSpectrogram(bins, config, clip.sample_rate, len(clip))


def istft(spec: ComplexSpectrogram, config: StftConfig | None = None) -> AudioClip:
    """Weighted overlap-add synthesis, normalised by the summed squared window."""
    if config is not None and config != spec.config:
        raise ValueError(f"synthesis config {config} does not match analysis config {spec.config}")
    cfg = spec.config
    n_freq, n_frames = spec.shape
    if n_frames != cfg.n_frames(spec.length):
        raise ValueError(
            f"spectrogram has {n_frames} frames, expected {cfg.n_frames(spec.length)} "
            f"for length {spec.length}"
        )
    win = cfg.window_array()
    frames = np.fft.irfft(spec.bins.T, n=cfg.window_size, axis=1) * win
    half = cfg.window_size // 2
    total = max((n_frames - 1) * cfg.hop_size + cfg.window_size, half + spec.length)
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = win**2
    for t in range(n_frames):
        start = t * cfg.hop_size
        out[start : start + cfg.window_size] += frames[t]
        norm[start : start + cfg.window_size] += win_sq
    nonzero = norm > 1e-10
    out[nonzero] /= norm[nonzero]
    return AudioClip(out[half : half + spec.length], spec.sample_rate)


def energy_gain(config: StftConfig) -> float:
    """Ratio of two-sided STFT energy to signal energy for a COLA window."""
    win = config.window_array()
    return config.window_size * float(np.sum(win**2)) / config.hop_size


def magnitude(spec: ComplexSpectrogram) -> MagnitudeSpectrogram:
    return MagnitudeSpectrogram(np.abs(spec.bins), spec.config, spec.sample_rate)


def log_compress(mag: MagnitudeSpectrogram | np.ndarray, eps: float | None = None) -> np.ndarray:
    """``log(m + eps)``; ``eps`` defaults to the spectrogram's configured epsilon."""
    if eps is None:
        if not isinstance(mag, MagnitudeSpectrogram):
            raise ValueError("eps is required when passing a bare array")
        eps = mag.config.log_epsilon
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    bins = mag.bins if isinstance(mag, MagnitudeSpectrogram) else np.asarray(mag, dtype=np.float64)
    return np.log(bins + eps)


@dataclass(frozen=True)
class LogFreqWarp:
    """Mapping tables between the linear STFT grid and a log-frequency grid.

    ``forward`` has shape ``(out_bins, F)`` and ``inverse`` shape
    ``(F, out_bins)``; both have rows summing to one.  ``bandwidths`` holds
    the Hz width each log bin represents, used for energy bookkeeping.
    """

    forward: np.ndarray
    inverse: np.ndarray
    centers: np.ndarray
    linear_freqs: np.ndarray
    bandwidths: np.ndarray = field(repr=False)

    def warp(self, bins: np.ndarray) -> np.ndarray:
        return self.forward @ bins

    def unwarp(self, bins: np.ndarray) -> np.ndarray:
        return self.inverse @ bins


def build_log_freq_warp(
    n_freq: int, sample_rate: int, out_bins: int, f_min: float = 32.0
) -> LogFreqWarp:
    if out_bins < 2:
        raise ValueError(f"out_bins must be >= 2, got {out_bins}")
    nyquist = sample_rate / 2
    if not 0 < f_min < nyquist:
        raise ValueError(f"f_min must lie in (0, {nyquist}), got {f_min}")
    lin = np.linspace(0.0, nyquist, n_freq)
    spacing = lin[1] - lin[0]
    centers = np.geomspace(f_min, nyquist, out_bins)
    ratio = centers[1] / centers[0]
    lower = np.concatenate([[centers[0] / ratio], centers[:-1]])
    upper = np.concatenate([centers[1:], [centers[-1] * ratio]])
    left = np.maximum(centers - lower, spacing)
    right = np.maximum(upper - centers, spacing)

    # Triangles at least one linear bin wide: averaging where the log grid is
    # coarse, plain linear interpolation where it is finer than the STFT grid.
    d = lin[None, :] - centers[:, None]
    fwd = np.where(d <= 0, 1 + d / left[:, None], 1 - d / right[:, None])
    fwd = np.clip(fwd, 0.0, None)
    fwd[0, lin <= centers[0]] = 1.0
    fwd[-1, lin >= centers[-1]] = 1.0
    fwd /= fwd.sum(axis=1, keepdims=True)

    inv = np.empty((n_freq, out_bins))
    eye = np.eye(out_bins)
    for j in range(out_bins):
        inv[:, j] = np.interp(lin, centers, eye[j])

    edges = np.concatenate([[0.0], (centers[:-1] + centers[1:]) / 2, [nyquist]])
    return LogFreqWarp(fwd, inv, centers, lin, np.diff(edges))


def log_freq_warp(
    mag: MagnitudeSpectrogram, out_bins: int, f_min: float = 32.0
) -> tuple[MagnitudeSpectrogram, LogFreqWarp]:
    """Resample the frequency axis onto ``out_bins`` log-spaced bins in ``[f_min, Nyquist]``."""
    table = build_log_freq_warp(mag.shape[0], mag.sample_rate, out_bins, f_min)
    warped = MagnitudeSpectrogram(table.warp(mag.bins), mag.config, mag.sample_rate)
    return warped, table


def apply_mask(mix: ComplexSpectrogram, mask) -> ComplexSpectrogram:
    """Scale mixture magnitudes by ``mask`` and keep the mixture phase."""
    values = getattr(mask, "values", mask)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != mix.shape:
        raise ValueError(f"mask shape {values.shape} does not match spectrogram shape {mix.shape}")
    return ComplexSpectrogram(mix.bins * values, mix.config, mix.sample_rate, mix.length)


def read_wav(path: str | Path) -> AudioClip:
    """Read a WAV file as mono float samples in [-1, 1).

    Multichannel input is averaged to mono with a warning.
    """
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        warnings.warn(f"{path}: averaging {x.shape[1]} channels to mono", stacklevel=2)
        x = x.mean(axis=1)
    return AudioClip(x, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype(np.int16)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write 16-bit PCM little-endian mono."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), clip.sample_rate, to_pcm16(clip.samples))
