"""Separation quality metrics.

Logarithms: natural for KLD, base 10 (dB) for SI-SDR and SDR.  The dB
metrics saturate at +/-100 dB for degenerate inputs.

FD and KLD need an embedding network and a classifier.  No pretrained model
is used here: :func:`embed_audio` computes band log-energy statistics and
:func:`classify_probs` scores them against seeded random prototypes.  Values
are self-consistent and deterministic but not comparable to numbers produced
with learned audio embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .dsp import AudioClip, StftConfig, stft

DB_CAP = 100.0
PROB_CLAMP = 1e-6


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class EmbedderConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    n_bands: int = 20
    log_floor: float = 1e-10
    n_classes: int = 16
    prototype_seed: int = 0
    logit_scale: float = 1.0

    @property
    def dim(self) -> int:
        return 2 * self.n_bands


def fit_gaussian(emb: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased, symmetrised sample covariance of an ``(M, K)`` set."""
    x = np.asarray(emb, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an (M, K) embedding set with M >= 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings contain non-finite values")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mean, (cov + cov.T) / 2)


def _check_symmetric_psd(a: np.ndarray, sym_tol=1e-10, eig_tol=1e-8):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    evals, evecs = np.linalg.eigh((a + a.T) / 2)
    if evals.size and evals.min() < -eig_tol * scale:
        raise ValueError(f"matrix has a negative eigenvalue {evals.min():.3e}")
    return np.clip(evals, 0.0, None), evecs


def matrix_sqrt_psd(a: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition."""
    evals, evecs = _check_symmetric_psd(a)
    return (evecs * np.sqrt(evals)) @ evecs.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """``Tr((A B)^{1/2})`` computed as ``Tr((A^{1/2} B A^{1/2})^{1/2})``."""
    root_a = matrix_sqrt_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    evals, _ = _check_symmetric_psd((inner + inner.T) / 2, sym_tol=1e-8, eig_tol=1e-6)
    return float(np.sum(np.sqrt(evals)))


def frechet_distance(g: GaussianStats, t: GaussianStats) -> float:
    if g.mean.shape != t.mean.shape or g.cov.shape != t.cov.shape:
        raise ValueError(f"dimension mismatch: {g.mean.shape} vs {t.mean.shape}")
    if np.array_equal(g.mean, t.mean) and np.array_equal(g.cov, t.cov):
        return 0.0
    diff = g.mean - t.mean
    value = diff @ diff + np.trace(g.cov) + np.trace(t.cov) - 2.0 * trace_sqrt_product(g.cov, t.cov)
    return max(float(value), 0.0)


def kld_binary(p, q, clamp: float = PROB_CLAMP) -> float:
    """Sum over classes of Bernoulli KL(p_i || q_i), natural log."""
    p = np.clip(np.asarray(p, dtype=np.float64), clamp, 1.0 - clamp)
    q = np.clip(np.asarray(q, dtype=np.float64), clamp, 1.0 - clamp)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    terms = p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))
    return max(float(np.sum(terms)), 0.0)


def _as_samples(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def _db_ratio(num: float, den: float) -> float:
    if den <= 1e-20 * num:
        return DB_CAP
    if num <= 1e-20 * den:
        return -DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def si_sdr(s_g, s_t) -> float:
    """Scale-invariant SDR of estimate ``s_g`` against reference ``s_t`` (dB)."""
    est, ref = _as_samples(s_g), _as_samples(s_t)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = ref @ ref
    if ref_energy == 0:
        raise ValueError("reference signal is all zeros")
    alpha = (est @ ref) / ref_energy
    target = alpha * ref
    err = est - target
    return _db_ratio(float(target @ target), float(err @ err))


def sdr(s_g, s_t) -> float:
    """Plain SDR, ``10 log10(|s_t|^2 / |s_g - s_t|^2)`` (dB)."""
    est, ref = _as_samples(s_g), _as_samples(s_t)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    err = est - ref
    return _db_ratio(float(ref @ ref), float(err @ err))


def band_log_energies(clip: AudioClip, cfg: EmbedderConfig = EmbedderConfig()) -> np.ndarray:
    """``(T, n_bands)`` log band energies over an even linear split of the STFT bins."""
    power = np.abs(stft(clip, cfg.stft).bins) ** 2
    bands = np.array_split(np.arange(power.shape[0]), cfg.n_bands)
    energy = np.stack([power[idx].sum(axis=0) for idx in bands], axis=1)
    return np.log(energy + cfg.log_floor)


def embed_audio(clip: AudioClip, cfg: EmbedderConfig = EmbedderConfig()) -> np.ndarray:
    """Per-band means then per-band standard deviations of frame log energies."""
    frames = band_log_energies(clip, cfg)
    return np.concatenate([frames.mean(axis=0), frames.std(axis=0)])


def _prototypes(cfg: EmbedderConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.prototype_seed)
    protos = rng.standard_normal((cfg.n_classes, cfg.dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def classify_probs(clip: AudioClip, cfg: EmbedderConfig = EmbedderConfig()) -> np.ndarray:
    """Sigmoid of scaled cosine similarity to each seeded prototype."""
    e = embed_audio(clip, cfg)
    cos = _prototypes(cfg) @ (e / np.linalg.norm(e))
    return expit(cfg.logit_scale * cos)


def clip_frechet_distance(estimate: AudioClip, reference: AudioClip, cfg: EmbedderConfig = EmbedderConfig()) -> float:
    """FD between Gaussians fitted to the frame-level band energies of two clips."""
    return frechet_distance(
        fit_gaussian(band_log_energies(estimate, cfg)),
        fit_gaussian(band_log_energies(reference, cfg)),
    )


def evaluate_pair(
    pair_id: str, estimate: AudioClip, reference: AudioClip, cfg: EmbedderConfig = EmbedderConfig()
) -> dict:
    """One report row: ``{id, fd, kld, si_sdr, sdr}``."""
    return {
        "id": pair_id,
        "fd": clip_frechet_distance(estimate, reference, cfg),
        "kld": kld_binary(classify_probs(reference, cfg), classify_probs(estimate, cfg)),
        "si_sdr": si_sdr(estimate, reference),
        "sdr": sdr(estimate, reference),
    }


REPORT_KEYS = ("id", "fd", "kld", "si_sdr", "sdr")


def build_report(rows: list[dict], dataset_fd: float | None = None) -> dict:
    """Wrap per-pair rows with aggregate means (and optionally a set-level FD)."""
    aggregate = {k: float(np.mean([r[k] for r in rows])) if rows else None for k in REPORT_KEYS[1:]}
    aggregate["count"] = len(rows)
    report = {"entries": rows, "aggregate": aggregate}
    if dataset_fd is not None:
        report["dataset_fd"] = dataset_fd
    return report


REPORT_SCHEMA = {
    "type": "object",
    "required": ["entries", "aggregate"],
    "properties": {
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": list(REPORT_KEYS),
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"},
                    "fd": {"type": "number", "minimum": 0},
                    "kld": {"type": "number", "minimum": 0},
                    "si_sdr": {"type": "number", "minimum": -DB_CAP, "maximum": DB_CAP},
                    "sdr": {"type": "number", "minimum": -DB_CAP, "maximum": DB_CAP},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "required": ["fd", "kld", "si_sdr", "sdr", "count"],
            "properties": {
                "fd": {"type": ["number", "null"]},
                "kld": {"type": ["number", "null"]},
                "si_sdr": {"type": ["number", "null"]},
                "sdr": {"type": ["number", "null"]},
                "count": {"type": "integer", "minimum": 0},
            },
        },
        "dataset_fd": {"type": "number", "minimum": 0},
    },
}
