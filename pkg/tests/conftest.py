import time
from dataclasses import dataclass

import pytest

from qsep.mixer import DatasetConfig, build_dataset
from qsep.pipeline import LoadedEntry, load_entries, training_samples
from qsep.separator import ModelParams
from qsep.synth import write_tone_noise_corpus
from qsep.trainer import TrainConfig, train

# Toy experiment: 8 tones x 4 noises = 32 half-second mixtures, 200 epochs.
TOY_TRAIN = TrainConfig(batch_size=8, learning_rate=1e-3, epochs=200, seed=0)


@dataclass
class TrainedToy:
    params: ModelParams
    entries: list[LoadedEntry]
    history: list[float]
    seconds: float


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    fg, bg = write_tone_noise_corpus(root / "corpus", n_tones=8, n_noises=4, duration_s=0.5)
    manifest = build_dataset(fg, bg, root / "data", DatasetConfig(duration_s=0.5, seed=1))
    return load_entries(manifest)


@pytest.fixture(scope="session")
def trained_toy(toy_dataset):
    samples = training_samples(toy_dataset)
    history: list[float] = []
    start = time.perf_counter()
    params = train(samples, TOY_TRAIN, init_seed=0, history=history)
    return TrainedToy(params, toy_dataset, history, time.perf_counter() - start)


# Acceptance verdicts, one line per criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
