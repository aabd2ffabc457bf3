"""Query-conditioned spectrogram mask prediction.

For a mixture magnitude ``m`` and query embedding ``e``::

    f_s = unet(log(m + eps))                 # (C, F, T)
    f_e = sigmoid(W_e @ e + b_e)             # (C,)
    p   = sigmoid(sum_c s[c] f_e[c] f_s[c] + b)

and the separated source is ``p * m`` resynthesised with the mixture phase.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import unet
from .dsp import (
    AudioClip,
    ComplexSpectrogram,
    MagnitudeSpectrogram,
    StftConfig,
    apply_mask,
    build_log_freq_warp,
    istft,
    magnitude,
    stft,
)
from .unet import UNetConfig

CHECKPOINT_FORMAT = "qsep-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class QueryEmbedding:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError(f"query embedding must be a nonempty vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("query embedding has non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SeparationMask:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {values.shape}")
        if not np.all((values >= 0) & (values <= 1)):
            raise ValueError("mask entries must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ModelConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    embed_dim: int = 16
    warp_bins: int | None = None
    warp_f_min: float = 32.0

    @property
    def channels(self) -> int:
        return self.unet.out_channels

    def to_dict(self) -> dict:
        return {
            "unet": self.unet.to_dict(),
            "embed_dim": self.embed_dim,
            "warp_bins": self.warp_bins,
            "warp_f_min": self.warp_f_min,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            unet=UNetConfig(**d["unet"]),
            embed_dim=d["embed_dim"],
            warp_bins=d.get("warp_bins"),
            warp_f_min=d.get("warp_f_min", 32.0),
        )


@dataclass(frozen=True)
class ModelParams:
    """All learnable tensors.  Treated as immutable; updates build new instances."""

    config: ModelConfig
    unet_weights: dict
    embed_weight: np.ndarray
    embed_bias: np.ndarray
    channel_scale: np.ndarray
    mask_bias: float

    def __post_init__(self):
        c, d = self.config.channels, self.config.embed_dim
        expected = self.config.unet.shapes()
        if set(self.unet_weights) != set(expected):
            raise ValueError("unet weight names do not match the configured architecture")
        for name, shape in expected.items():
            if np.shape(self.unet_weights[name]) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {np.shape(self.unet_weights[name])}")
        for name, shape in (("embed_weight", (c, d)), ("embed_bias", (c,)), ("channel_scale", (c,))):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {np.shape(getattr(self, name))}")
        object.__setattr__(self, "mask_bias", float(self.mask_bias))
        if not all(np.all(np.isfinite(v)) for v in self.tensors().values()):
            raise ValueError("model parameters contain non-finite values")

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> array view, in a fixed order."""
        out = {f"unet.{k}": np.asarray(v) for k, v in sorted(self.unet_weights.items())}
        out["embed_weight"] = np.asarray(self.embed_weight)
        out["embed_bias"] = np.asarray(self.embed_bias)
        out["channel_scale"] = np.asarray(self.channel_scale)
        out["mask_bias"] = np.asarray(self.mask_bias)
        return out

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict) -> "ModelParams":
        weights = {k[len("unet."):]: np.array(v, dtype=np.float64) for k, v in tensors.items() if k.startswith("unet.")}
        return cls(
            config=config,
            unet_weights=weights,
            embed_weight=np.array(tensors["embed_weight"], dtype=np.float64),
            embed_bias=np.array(tensors["embed_bias"], dtype=np.float64),
            channel_scale=np.array(tensors["channel_scale"], dtype=np.float64),
            mask_bias=float(tensors["mask_bias"]),
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_tensors(self.config, self.tensors())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, unit channel scale."""
    rng = np.random.default_rng(seed)
    weights = unet.init_weights(config.unet, rng)
    bound = np.sqrt(6.0 / config.embed_dim)
    return ModelParams(
        config=config,
        unet_weights=weights,
        embed_weight=rng.uniform(-bound, bound, size=(config.channels, config.embed_dim)),
        embed_bias=np.zeros(config.channels),
        channel_scale=np.ones(config.channels),
        mask_bias=0.0,
    )


def unet_forward(log_mag: np.ndarray, params: ModelParams) -> FeatureMap:
    return FeatureMap(unet.forward(log_mag, params.unet_weights, params.config.unet))


def embed_project(e: QueryEmbedding | np.ndarray, params: ModelParams) -> np.ndarray:
    values = getattr(e, "values", e)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (params.config.embed_dim,):
        raise ValueError(f"embedding dimension {values.shape} != configured {params.config.embed_dim}")
    return expit(params.embed_weight @ values + params.embed_bias)


def predict_mask(f_s: FeatureMap | np.ndarray, f_e: np.ndarray, params: ModelParams) -> SeparationMask:
    feats = getattr(f_s, "values", f_s)
    f_e = np.asarray(f_e, dtype=np.float64)
    if feats.shape[0] != f_e.shape[0] or f_e.shape[0] != params.channel_scale.shape[0]:
        raise ValueError(
            f"channel mismatch: features {feats.shape[0]}, query {f_e.shape[0]}, "
            f"scale {params.channel_scale.shape[0]}"
        )
    logits = np.tensordot(params.channel_scale * f_e, feats, axes=(0, 0)) + params.mask_bias
    return SeparationMask(expit(logits))


def ideal_binary_mask(
    source_mag: MagnitudeSpectrogram | np.ndarray,
    mixture_mag: MagnitudeSpectrogram | np.ndarray,
    threshold: float = 0.5,
) -> SeparationMask:
    """1 where the source magnitude reaches ``threshold`` times the mixture magnitude."""
    src = getattr(source_mag, "bins", source_mag)
    mix = getattr(mixture_mag, "bins", mixture_mag)
    if np.shape(src) != np.shape(mix):
        raise ValueError(f"shape mismatch: source {np.shape(src)} vs mixture {np.shape(mix)}")
    return SeparationMask((np.asarray(src) >= threshold * np.asarray(mix)).astype(np.float64))


def _embedding_matrix(queries, dim: int) -> np.ndarray:
    rows = [np.asarray(getattr(q, "values", q), dtype=np.float64) for q in queries]
    if not rows:
        raise ValueError("at least one query is required")
    emb = np.stack(rows)
    if emb.shape[1] != dim:
        raise ValueError(f"embedding dimension {emb.shape[1]} != configured {dim}")
    return emb


def model_forward(
    params: ModelParams,
    mix_bins: np.ndarray,
    embeddings: np.ndarray,
    eps: float,
    sample_rate: int = 16000,
):
    """Masks for every query plus the cache needed by :func:`model_backward`.

    ``mix_bins`` is the ``(F, T)`` mixture magnitude and ``embeddings`` an
    ``(N, D)`` matrix; returns ``(N, F, T)`` masks.  ``sample_rate`` only
    matters when log-frequency warping is enabled.
    """
    cfg = params.config
    warp = None
    if cfg.warp_bins:
        warp = _warp_table(mix_bins.shape[0], sample_rate, cfg.warp_bins, cfg.warp_f_min)
        net_in = np.log(warp.forward @ mix_bins + eps)
    else:
        net_in = np.log(mix_bins + eps)
    feats, ucache = unet.forward(net_in, params.unet_weights, cfg.unet, keep_cache=True)
    pre_e = embeddings @ params.embed_weight.T + params.embed_bias
    f_e = expit(pre_e)
    gates = params.channel_scale * f_e
    logits = np.einsum("nc,cft->nft", gates, feats) + params.mask_bias
    probs = expit(logits)
    masks = np.einsum("gk,nkt->ngt", warp.inverse, probs) if warp is not None else probs
    cache = {
        "ucache": ucache,
        "feats": feats,
        "f_e": f_e,
        "emb": embeddings,
        "probs": probs,
        "warp": warp,
    }
    return masks, cache


def model_backward(params: ModelParams, cache: dict, dmasks: np.ndarray) -> ModelParams:
    """Reverse-mode gradient of a scalar loss, given dL/dmasks of shape ``(N, F, T)``."""
    warp = cache["warp"]
    if warp is not None:
        dmasks = np.einsum("gk,ngt->nkt", warp.inverse, dmasks)
    probs, feats, f_e = cache["probs"], cache["feats"], cache["f_e"]
    dlogits = dmasks * probs * (1.0 - probs)
    d_bias = dlogits.sum()
    d_gates = np.einsum("nft,cft->nc", dlogits, feats)
    d_feats = np.einsum("nc,nft->cft", params.channel_scale * f_e, dlogits)
    d_scale = (d_gates * f_e).sum(axis=0)
    d_pre_e = d_gates * params.channel_scale * f_e * (1.0 - f_e)
    d_embed_w = d_pre_e.T @ cache["emb"]
    d_embed_b = d_pre_e.sum(axis=0)
    d_unet = unet.backward(d_feats, cache["ucache"], params.unet_weights, params.config.unet)
    return ModelParams(
        config=params.config,
        unet_weights=d_unet,
        embed_weight=d_embed_w,
        embed_bias=d_embed_b,
        channel_scale=d_scale,
        mask_bias=d_bias,
    )


_WARP_CACHE: dict = {}


def _warp_table(n_freq: int, sample_rate: int, out_bins: int, f_min: float):
    key = (n_freq, sample_rate, out_bins, f_min)
    if key not in _WARP_CACHE:
        _WARP_CACHE[key] = build_log_freq_warp(n_freq, sample_rate, out_bins, f_min)
    return _WARP_CACHE[key]


def predict_masks(
    mix_mag: MagnitudeSpectrogram, queries, params: ModelParams
) -> list[SeparationMask]:
    emb = _embedding_matrix(queries, params.config.embed_dim)
    masks, _ = model_forward(
        params, mix_mag.bins, emb, mix_mag.config.log_epsilon, mix_mag.sample_rate
    )
    return [SeparationMask(m) for m in masks]


def separate_with_masks(mix_spec: ComplexSpectrogram, masks) -> list[AudioClip]:
    return [istft(apply_mask(mix_spec, m)) for m in masks]


def separate(
    mix: AudioClip,
    queries,
    params: ModelParams,
    stft_config: StftConfig = StftConfig(),
) -> list[AudioClip]:
    """One resynthesised clip per query, each the length of ``mix``."""
    spec = stft(mix, stft_config)
    masks = predict_masks(magnitude(spec), queries, params)
    return separate_with_masks(spec, masks)


def save_checkpoint(
    path: str | Path, params: ModelParams, stft_config: StftConfig, extra: dict | None = None
) -> None:
    """Write an ``.npz`` checkpoint.  Layout is documented in docs/checkpoint.md."""
    tensors = params.tensors()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": params.config.to_dict(),
        "stft": stft_config.to_dict(),
        "tensors": {k: list(v.shape) for k, v in tensors.items()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header, sort_keys=True)), **tensors)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, StftConfig, dict]:
    with np.load(str(path), allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        tensors = {k: data[k] for k in header["tensors"]}
    for name, shape in header["tensors"].items():
        if list(tensors[name].shape) != shape:
            raise ValueError(f"{path}: tensor {name} has shape {tensors[name].shape}, header says {shape}")
    config = ModelConfig.from_dict(header["model"])
    params = ModelParams.from_tensors(config, tensors)
    return params, StftConfig(**header["stft"]), header.get("extra", {})


def with_mask_bias(params: ModelParams, bias: float, channel_scale: float | None = None) -> ModelParams:
    """Copy of ``params`` with the mask bias (and optionally a uniform channel scale) overridden."""
    scale = params.channel_scale if channel_scale is None else np.full_like(params.channel_scale, channel_scale)
    return replace(params, mask_bias=bias, channel_scale=scale)
