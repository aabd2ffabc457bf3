"""Text-queried spectrogram-mask source separation at desk scale.

Submodules:

- :mod:`qsep.dsp` -- STFT analysis/synthesis, log compression, log-frequency
  warping, mask application, WAV I/O.
- :mod:`qsep.unet` -- small encoder-decoder with hand-written backprop.
- :mod:`qsep.separator` -- query-conditioned mask prediction and separation.
- :mod:`qsep.trainer` -- weighted BCE objective, exact gradients, Adam.
- :mod:`qsep.metrics` -- Frechet distance, binary KLD, SI-SDR, SDR.
- :mod:`qsep.mixer` -- synthetic foreground/background mixture datasets.
- :mod:`qsep.querygen` -- scene/region descriptions and textual subtraction.
- :mod:`qsep.cli` -- command line entry point (``python -m qsep``).
"""

__version__ = "0.1.0"
