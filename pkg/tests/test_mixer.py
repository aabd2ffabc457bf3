import json
from pathlib import Path

import numpy as np
import pytest

from qsep.dsp import AudioClip, StftConfig, magnitude, read_wav, stft, write_wav
from qsep.mixer import (
    DatasetConfig,
    MixSpec,
    MixtureManifest,
    build_dataset,
    default_label,
    fit_length,
    mix,
    normalize_rms,
    resample,
    split_tag,
)
from qsep.synth import tone, white_noise


def db(x):
    return 20 * np.log10(x)


@pytest.fixture
def wavs(tmp_path):
    paths = {
        "tone": tmp_path / "violin-01.wav",
        "noise": tmp_path / "rain-01.wav",
        "short": tmp_path / "short.wav",
        "tone48": tmp_path / "tone48.wav",
    }
    write_wav(paths["tone"], tone(440.0, 1.0, 16000, 0.5))
    write_wav(paths["noise"], white_noise(1.0, 16000, 0.2, seed=1))
    write_wav(paths["short"], tone(300.0, 0.3, 16000, 0.5))
    write_wav(paths["tone48"], tone(1000.0, 1.0, 48000, 0.5))
    return paths


def corpus(root, n_fg, n_bg):
    fg, bg = root / "fg", root / "bg"
    fg.mkdir()
    bg.mkdir()
    for i in range(n_fg):
        write_wav(fg / f"flute-{i}.wav", tone(400.0 + 300 * i, 0.4, 16000, 0.4))
    for j in range(n_bg):
        write_wav(bg / f"crowd-{j}.wav", white_noise(0.4, 16000, 0.1, seed=j))
    return fg, bg


# --- resample / normalize_rms / fit_length --------------------------------


def test_resample_same_rate_is_identity():
    clip = white_noise(0.1, seed=0)
    assert np.array_equal(resample(clip, 16000).samples, clip.samples)


def test_resample_preserves_tone_frequency():
    out = resample(tone(440.0, 1.0, 48000), 16000)
    assert out.sample_rate == 16000 and len(out) == 16000
    mag = magnitude(stft(out, StftConfig())).bins.mean(axis=1)
    bin_hz = 16000 / 512
    assert abs(np.argmax(mag) * bin_hz - 440.0) <= bin_hz
    fine = np.abs(np.fft.rfft(out.samples * np.hanning(len(out)), 16 * len(out)))
    peak_hz = np.argmax(fine) * 16000 / (16 * len(out))
    assert abs(peak_hz - 440.0) <= 0.44


def test_resample_preserves_dc():
    out = resample(AudioClip(np.full(4800, 0.25), 48000), 16000)
    assert np.max(np.abs(out.samples - 0.25)) < 1e-3


@pytest.mark.parametrize("n,src,dst", [(1000, 44100, 16000), (333, 16000, 22050), (16000, 16000, 8000)])
def test_resample_length(n, src, dst):
    out = resample(AudioClip(np.zeros(n), src), dst)
    assert len(out) == round(n * dst / src)


def test_resample_rejects_bad_rate():
    with pytest.raises(ValueError):
        resample(white_noise(0.1), 0)


def test_normalize_rms_examples():
    clip = AudioClip(np.array([0.1, -0.1, 0.1, -0.1]), 16000)
    assert normalize_rms(clip, 0.1) is clip
    doubled = normalize_rms(clip, 0.2)
    assert np.array_equal(doubled.samples, 2 * clip.samples)
    rand = white_noise(0.3, seed=4, rms=0.37)
    assert abs(normalize_rms(rand, 0.05).rms() - 0.05) <= 1e-9 * 0.05


def test_normalize_rms_errors():
    with pytest.raises(ValueError):
        normalize_rms(AudioClip(np.zeros(10), 16000), 0.1)
    with pytest.raises(ValueError):
        normalize_rms(white_noise(0.1), 0.0)


def test_fit_length_loops_and_crops():
    clip = AudioClip(np.arange(5, dtype=float), 16000)
    assert fit_length(clip, 12).samples.tolist() == [0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1]
    cropped = fit_length(clip, 3, np.random.default_rng(0)).samples
    assert len(cropped) == 3 and np.all(np.diff(cropped) == 1)


# --- mix ------------------------------------------------------------------


def test_high_snr_mixture_is_foreground(wavs):
    mixture, (fg, bg) = mix(MixSpec(str(wavs["tone"]), str(wavs["noise"]), snr_db=60.0, duration_s=0.5))
    rel = np.sqrt(np.mean((mixture.samples - fg.samples) ** 2)) / fg.rms()
    assert rel <= 1e-3 + 1e-12


def test_zero_snr_balances_sources(wavs):
    _, (fg, bg) = mix(MixSpec(str(wavs["tone"]), str(wavs["noise"]), snr_db=0.0, duration_s=0.5))
    assert fg.rms() == pytest.approx(bg.rms(), rel=1e-12)


@pytest.mark.parametrize("snr", [-5.0, 0.0, 3.3, 20.0])
def test_mixture_is_sum_of_sources(wavs, snr):
    mixture, sources = mix(MixSpec(str(wavs["tone"]), str(wavs["noise"]), snr_db=snr, duration_s=0.5))
    assert np.max(np.abs(mixture.samples - sources[0].samples - sources[1].samples)) <= 1e-12


def test_loud_mixture_is_rescaled_consistently(wavs):
    spec = MixSpec(str(wavs["tone"]), str(wavs["noise"]), snr_db=-10.0, duration_s=0.5, target_rms=0.6)
    mixture, (fg, bg) = mix(spec)
    assert np.max(np.abs(mixture.samples)) <= 0.99 + 1e-12
    assert db(fg.rms() / bg.rms()) == pytest.approx(-10.0, abs=1e-9)


def test_short_clip_is_looped_and_rates_aligned(wavs):
    mixture, (fg, bg) = mix(MixSpec(str(wavs["short"]), str(wavs["tone48"]), duration_s=1.0))
    assert len(mixture) == len(fg) == len(bg) == 16000
    assert mixture.sample_rate == 16000


def test_mix_errors(wavs, tmp_path):
    with pytest.raises(FileNotFoundError):
        mix(MixSpec(str(tmp_path / "nope.wav"), str(wavs["noise"])))
    empty = tmp_path / "empty.wav"
    write_wav(empty, AudioClip(np.zeros(0), 16000))
    with pytest.raises(ValueError):
        mix(MixSpec(str(empty), str(wavs["noise"])))
    with pytest.raises(ValueError):
        MixSpec("a", "b", duration_s=0.0)


# --- build_dataset --------------------------------------------------------


def test_single_pair_gives_one_entry(tmp_path):
    fg, bg = corpus(tmp_path, 1, 1)
    manifest = build_dataset(fg, bg, tmp_path / "out", DatasetConfig(duration_s=0.4))
    assert len(manifest) == 1
    entry = manifest.entries[0]
    assert len(entry.source_paths) == 2 and entry.query_texts == ["flute", "crowd"]
    manifest.validate()


def test_exhaustive_pairing_counts(tmp_path):
    fg, bg = corpus(tmp_path, 3, 2)
    manifest = build_dataset(fg, bg, tmp_path / "out", DatasetConfig(duration_s=0.4))
    ids = [e.id for e in manifest]
    assert len(ids) == 6 and len(set(ids)) == 6


def test_random_pairing_counts(tmp_path):
    fg, bg = corpus(tmp_path, 3, 2)
    manifest = build_dataset(fg, bg, tmp_path / "out", DatasetConfig(pairs="random", n_entries=5, duration_s=0.4))
    assert len(manifest) == 5


def test_dataset_is_reproducible(tmp_path):
    fg, bg = corpus(tmp_path, 2, 2)
    cfg = DatasetConfig(duration_s=0.4, seed=7)
    a = build_dataset(fg, bg, tmp_path / "a", cfg)
    b = build_dataset(fg, bg, tmp_path / "b", cfg, jobs=3)
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    for ea in a:
        for rel in [ea.mixture_path, *ea.source_paths]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_stored_files_keep_exact_sum_and_snr(tmp_path):
    fg, bg = corpus(tmp_path, 2, 2)
    manifest = build_dataset(fg, bg, tmp_path / "out", DatasetConfig(duration_s=0.4, seed=3))
    for e in manifest:
        raw = [np.round(read_wav(manifest.resolve(p)).samples * 32768).astype(int)
               for p in [e.mixture_path, *e.source_paths]]
        assert np.array_equal(raw[0], raw[1] + raw[2])
        s0, s1 = (read_wav(manifest.resolve(p)) for p in e.source_paths)
        assert abs(db(s0.rms() / s1.rms()) - e.snr_db) <= 0.01
        assert -5.0 <= e.snr_db <= 5.0


def test_manifest_round_trip(tmp_path):
    fg, bg = corpus(tmp_path, 2, 1)
    manifest = build_dataset(fg, bg, tmp_path / "out", DatasetConfig(duration_s=0.4))
    again = MixtureManifest.read(tmp_path / "out" / "manifest.jsonl")
    assert again.entries == manifest.entries
    line = json.loads((tmp_path / "out" / "manifest.jsonl").read_text().splitlines()[0])
    assert set(line) == {"id", "mixture_path", "source_paths", "query_texts", "snr_db", "seed", "split_tag"}


def test_manifest_validation_catches_problems(tmp_path):
    fg, bg = corpus(tmp_path, 1, 1)
    manifest = build_dataset(fg, bg, tmp_path / "out", DatasetConfig(duration_s=0.4))
    (tmp_path / "out" / manifest.entries[0].source_paths[1]).unlink()
    with pytest.raises(FileNotFoundError):
        manifest.validate()
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "x"}\n')
    with pytest.raises(ValueError):
        MixtureManifest.read(bad)


def test_dataset_errors(tmp_path):
    fg, _ = corpus(tmp_path, 1, 1)
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        build_dataset(fg, tmp_path / "empty", tmp_path / "out")
    with pytest.raises(FileNotFoundError):
        build_dataset(fg, tmp_path / "missing", tmp_path / "out")
    with pytest.raises(ValueError):
        DatasetConfig(pairs="random")


def test_labels_and_split():
    assert default_label(Path("acoustic_guitar-01.wav")) == "acoustic guitar"
    assert default_label(Path("007.wav")) == "007"
    assert split_tag("mix00001", 0.0) == "train"
    assert split_tag("mix00001", 1.0) == "val"
    assert split_tag("mix00001", 0.3) == split_tag("mix00001", 0.3)
