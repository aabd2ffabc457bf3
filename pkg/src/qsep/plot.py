"""Log-magnitude spectrogram images.

Images are ``n_freq`` pixels tall and ``n_frames`` wide, one pixel per STFT
bin, with frequency bin 0 on the bottom row.  Magnitudes are expressed in dB
relative to a full-scale sine (amplitude 1), clipped to ``[-80, 0]`` dB and
mapped through a 256-entry viridis table shipped with the package.
"""

from __future__ import annotations

import io
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .dsp import AudioClip, StftConfig, magnitude, stft

DB_FLOOR = -80.0


@lru_cache(maxsize=1)
def colormap() -> np.ndarray:
    raw = resources.files("qsep").joinpath("data", "viridis.json").read_text(encoding="utf-8")
    table = np.array(json.loads(raw)["entries"], dtype=np.uint8)
    if table.shape != (256, 3):
        raise ValueError(f"colormap table has shape {table.shape}, expected (256, 3)")
    return table


def spectrogram_db(clip: AudioClip, config: StftConfig = StftConfig()) -> np.ndarray:
    """``(F, T)`` magnitudes in dB re a full-scale sine, clipped at the floor."""
    mag = magnitude(stft(clip, config)).bins
    full_scale = config.window_array().sum() / 2.0
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag / full_scale)
    return np.clip(db, DB_FLOOR, 0.0)


def spectrogram_rgb(clip: AudioClip, config: StftConfig = StftConfig()) -> np.ndarray:
    db = spectrogram_db(clip, config)
    index = np.round((db - DB_FLOOR) / -DB_FLOOR * 255.0).astype(np.intp)
    return colormap()[index[::-1]]


def png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_spectrogram_png(path: str | Path, clip: AudioClip, config: StftConfig = StftConfig()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(spectrogram_rgb(clip, config)))
    return path
