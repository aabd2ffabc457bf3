"""Train the query-conditioned separator on synthetic tone-in-noise mixtures.

Eight sine tones are mixed over four noise beds, giving 32 half-second
mixtures.  Every mixture has two sources, labelled "sine tone" and "noise".
The model learns to return whichever one the query names.

    python3 demos/train_tone_noise.py [epochs] [out_dir]

With the default 200 epochs this runs for a few minutes on a laptop CPU.
Even 20 epochs already shows a clear gain.
"""

import sys
import time
from pathlib import Path

import numpy as np

from qsep.dsp import StftConfig, write_wav
from qsep.metrics import si_sdr
from qsep.mixer import DatasetConfig, build_dataset
from qsep.pipeline import load_entries, separation_gains, training_samples
from qsep.querygen import text_to_embedding
from qsep.separator import save_checkpoint, separate
from qsep.synth import write_tone_noise_corpus
from qsep.trainer import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 200
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out/toy")

fg, bg = write_tone_noise_corpus(out / "corpus", n_tones=8, n_noises=4, duration_s=0.5)
manifest = build_dataset(fg, bg, out / "data", DatasetConfig(duration_s=0.5, seed=1))
entries = load_entries(manifest)
print(f"{len(entries)} mixtures, queries {entries[0].entry.query_texts}")

samples = training_samples(entries)
history: list[float] = []
start = time.perf_counter()
params = train(samples, TrainConfig(epochs=epochs), init_seed=0, history=history)
print(f"trained {epochs} epochs in {time.perf_counter() - start:.0f} s; "
      f"loss {history[0]:.4f} -> {history[-1]:.4f}")
save_checkpoint(out / "model.npz", params, StftConfig(), {"embed_seed": 0})

sep, raw = separation_gains(entries, params, source_index=0)
print(f"tone SI-SDR: mixture {raw.mean():.2f} dB -> separated {sep.mean():.2f} dB "
      f"(gain {sep.mean() - raw.mean():.2f} dB)")

# The query decides which source comes out: ask for each one in turn.
example = entries[0]
for text in ("sine tone", "noise"):
    est = separate(example.mixture, [text_to_embedding(text)], params)[0]
    scores = [si_sdr(est, s) for s in example.sources]
    print(f"query {text!r:12}: SI-SDR vs tone {scores[0]:7.2f} dB, vs noise {scores[1]:7.2f} dB "
          f"-> closest source {int(np.argmax(scores))}")
    write_wav(out / f"query_{text.replace(' ', '_')}.wav", est)
print(f"checkpoint and audio in {out}/")
