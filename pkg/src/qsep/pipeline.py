"""Glue between manifests, query embeddings, training and separation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import AudioClip, StftConfig, read_wav
from .metrics import si_sdr
from .mixer import ManifestEntry, MixtureManifest
from .querygen import text_to_embedding
from .separator import ModelParams, separate
from .trainer import TrainSample, make_sample


@dataclass
class LoadedEntry:
    entry: ManifestEntry
    mixture: AudioClip
    sources: list[AudioClip]


def load_entries(manifest: MixtureManifest, split: str | None = None) -> list[LoadedEntry]:
    out = []
    for e in manifest:
        if split is not None and e.split_tag != split:
            continue
        mixture = read_wav(manifest.resolve(e.mixture_path))
        sources = [read_wav(manifest.resolve(p)) for p in e.source_paths]
        out.append(LoadedEntry(e, mixture, sources))
    return out


def training_samples(
    entries: list[LoadedEntry],
    stft_config: StftConfig = StftConfig(),
    embed_dim: int = 16,
    embed_seed: int = 0,
    threshold: float = 0.5,
) -> list[TrainSample]:
    """One sample per entry: every source paired with its hashed query text."""
    samples = []
    for le in entries:
        queries = [text_to_embedding(t, embed_dim, embed_seed) for t in le.entry.query_texts]
        samples.append(make_sample(le.mixture, le.sources, queries, stft_config, threshold))
    return samples


def separation_gains(
    entries: list[LoadedEntry],
    params: ModelParams,
    stft_config: StftConfig = StftConfig(),
    source_index: int = 0,
    embed_seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """SI-SDR of separated sources and of the unprocessed mixture, per entry."""
    separated, unprocessed = [], []
    for le in entries:
        text = le.entry.query_texts[source_index]
        q = text_to_embedding(text, params.config.embed_dim, embed_seed)
        est = separate(le.mixture, [q], params, stft_config)[0]
        ref = le.sources[source_index]
        separated.append(si_sdr(est, ref))
        unprocessed.append(si_sdr(le.mixture, ref))
    return np.array(separated), np.array(unprocessed)


def estimate_path(out_dir: str | Path, entry_id: str, source_index: int) -> Path:
    """Naming contract for per-entry estimates: ``<out>/<id>_s<k>.wav``."""
    return Path(out_dir) / f"{entry_id}_s{source_index}.wav"
