"""Foreground-over-background mixture datasets.

Each entry stores the mixture and its sources as 16-bit WAVs.  Sources are
quantised first and the mixture written as their integer sum, so the stored
mixture equals the sum of the stored sources sample for sample.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from math import gcd
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .dsp import AudioClip, read_wav, to_pcm16

PEAK_LIMIT = 0.99


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling to ``target_rate``.

    Output length is ``round(len(clip) * target_rate / clip.sample_rate)``.
    """
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise ValueError(f"target_rate must be a positive integer, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == clip.sample_rate:
        return clip
    g = gcd(target_rate, clip.sample_rate)
    up, down = target_rate // g, clip.sample_rate // g
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))
    y = signal.resample_poly(clip.samples, up, down, padtype="line")
    if y.shape[0] >= n_out:
        y = y[:n_out]
    else:
        y = np.pad(y, (0, n_out - y.shape[0]), mode="edge")
    return AudioClip(y, target_rate)


def normalize_rms(clip: AudioClip, target_rms: float) -> AudioClip:
    if not target_rms > 0:
        raise ValueError(f"target_rms must be positive, got {target_rms}")
    current = clip.rms()
    if current == 0:
        raise ValueError("cannot normalise a silent clip")
    if current == target_rms:
        return clip
    return AudioClip(clip.samples * (target_rms / current), clip.sample_rate)


def fit_length(clip: AudioClip, n: int, rng: np.random.Generator | None = None) -> AudioClip:
    """Loop short clips, crop long ones (at a random offset when ``rng`` is given)."""
    x = clip.samples
    if x.shape[0] == 0:
        raise ValueError("zero-length clip")
    if x.shape[0] < n:
        return AudioClip(np.resize(x, n), clip.sample_rate)
    start = int(rng.integers(0, x.shape[0] - n + 1)) if rng is not None else 0
    return AudioClip(x[start : start + n], clip.sample_rate)


@dataclass(frozen=True)
class MixSpec:
    foreground_path: str
    background_path: str
    snr_db: float = 0.0
    target_rate: int = 16000
    duration_s: float = 4.0
    seed: int = 0
    target_rms: float = 0.1

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")
        if not self.target_rate > 0:
            raise ValueError("target_rate must be positive")


def mix(spec: MixSpec) -> tuple[AudioClip, list[AudioClip]]:
    """Return ``(mixture, [foreground, background])`` with mixture the exact sum.

    Both sources are RMS-normalised to ``target_rms``, then the background is
    scaled by ``10 ** (-snr_db / 20)``.  If the mixture would clip, mixture
    and sources are scaled down by the same factor.
    """
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration_s * spec.target_rate))
    clips = []
    for path in (spec.foreground_path, spec.background_path):
        clip = read_wav(path)
        if len(clip) == 0:
            raise ValueError(f"{path}: zero-length audio")
        clip = fit_length(resample(clip, spec.target_rate), n, rng)
        clips.append(normalize_rms(clip, spec.target_rms))
    fg = clips[0].samples
    bg = clips[1].samples * 10.0 ** (-spec.snr_db / 20.0)
    mixture = fg + bg
    peak = np.max(np.abs(mixture))
    if peak > PEAK_LIMIT:
        gain = PEAK_LIMIT / peak
        fg, bg = fg * gain, bg * gain
        mixture = fg + bg
    rate = spec.target_rate
    return AudioClip(mixture, rate), [AudioClip(fg, rate), AudioClip(bg, rate)]


@dataclass
class ManifestEntry:
    id: str
    mixture_path: str
    source_paths: list[str]
    query_texts: list[str]
    snr_db: float
    seed: int
    split_tag: str


@dataclass
class MixtureManifest:
    entries: list[ManifestEntry]
    root: Path = field(default=Path("."))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def validate(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids are not unique")
        for e in self.entries:
            if len(e.source_paths) < 2 or len(e.source_paths) != len(e.query_texts):
                raise ValueError(f"{e.id}: need N >= 2 sources with one query text each")
            for rel in [e.mixture_path, *e.source_paths]:
                if not self.resolve(rel).is_file():
                    raise FileNotFoundError(f"{e.id}: missing {rel}")

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), ensure_ascii=False) + "\n" for e in self.entries)

    def write(self, path: str | Path) -> None:
        _atomic_write(Path(path), self.to_jsonl().encode("utf-8"))

    @classmethod
    def read(cls, path: str | Path) -> "MixtureManifest":
        path = Path(path)
        entries = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    entries.append(ManifestEntry(**json.loads(line)))
                except (json.JSONDecodeError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
        return cls(entries, path.parent)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _wav_bytes(pcm: np.ndarray, rate: int) -> bytes:
    import io

    buf = io.BytesIO()
    wavfile.write(buf, rate, pcm)
    return buf.getvalue()


def default_label(path: Path) -> str:
    """Query text derived from a filename: ``acoustic_guitar-01.wav`` -> ``acoustic guitar``.

    Purely numeric tokens are dropped so numbered takes share one label.
    """
    tokens = path.stem.replace("_", " ").replace("-", " ").split()
    words = [t for t in tokens if not t.isdigit()]
    return " ".join(words or tokens)


def split_tag(entry_id: str, val_fraction: float) -> str:
    h = int.from_bytes(hashlib.blake2b(entry_id.encode(), digest_size=8).digest(), "big")
    return "val" if h / 2**64 < val_fraction else "train"


@dataclass(frozen=True)
class DatasetConfig:
    pairs: str = "exhaustive"
    n_entries: int | None = None
    seed: int = 0
    snr_db: float | None = None
    snr_range: tuple[float, float] = (-5.0, 5.0)
    duration_s: float = 4.0
    target_rate: int = 16000
    target_rms: float = 0.1
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.pairs not in ("exhaustive", "random"):
            raise ValueError(f"pairs must be 'exhaustive' or 'random', got {self.pairs!r}")
        if self.pairs == "random" and not self.n_entries:
            raise ValueError("random pairing needs n_entries")


def _list_wavs(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise ValueError(f"{directory}: no WAV files")
    return files


def build_dataset(
    fg_dir: str | Path,
    bg_dir: str | Path,
    out_dir: str | Path,
    config: DatasetConfig = DatasetConfig(),
    label: Callable[[Path], str] = default_label,
    jobs: int = 1,
) -> MixtureManifest:
    """Mix every (or a seeded random selection of) foreground/background pair.

    Writes ``out_dir/audio/<id>_{mix,s0,s1}.wav`` and ``out_dir/manifest.jsonl``.
    """
    out_dir = Path(out_dir)
    fgs, bgs = _list_wavs(Path(fg_dir)), _list_wavs(Path(bg_dir))
    if config.pairs == "exhaustive":
        pairs = [(f, b) for f in fgs for b in bgs]
    else:
        rng = np.random.default_rng(config.seed)
        pairs = [
            (fgs[rng.integers(len(fgs))], bgs[rng.integers(len(bgs))]) for _ in range(config.n_entries)
        ]

    def make_entry(index: int) -> ManifestEntry:
        fg, bg = pairs[index]
        entry_seed = int(np.random.SeedSequence([config.seed, index]).generate_state(1)[0])
        rng = np.random.default_rng(entry_seed)
        snr = config.snr_db if config.snr_db is not None else float(rng.uniform(*config.snr_range))
        spec = MixSpec(str(fg), str(bg), snr, config.target_rate, config.duration_s, entry_seed, config.target_rms)
        _, sources = mix(spec)
        pcm = [to_pcm16(s.samples) for s in sources]
        total = np.sum([p.astype(np.int32) for p in pcm], axis=0)
        if np.any(total > 32767) or np.any(total < -32768):
            raise ValueError(f"entry {index}: quantised mixture overflows 16 bits")
        entry_id = f"mix{index:05d}"
        rel = {name: f"audio/{entry_id}_{name}.wav" for name in ("mix", "s0", "s1")}
        _atomic_write(out_dir / rel["mix"], _wav_bytes(total.astype(np.int16), config.target_rate))
        for k, p in enumerate(pcm):
            _atomic_write(out_dir / rel[f"s{k}"], _wav_bytes(p, config.target_rate))
        return ManifestEntry(
            id=entry_id,
            mixture_path=rel["mix"],
            source_paths=[rel["s0"], rel["s1"]],
            query_texts=[label(fg), label(bg)],
            snr_db=snr,
            seed=entry_seed,
            split_tag=split_tag(entry_id, config.val_fraction),
        )

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            entries = list(pool.map(make_entry, range(len(pairs))))
    else:
        entries = [make_entry(i) for i in range(len(pairs))]
    manifest = MixtureManifest(entries, out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest
