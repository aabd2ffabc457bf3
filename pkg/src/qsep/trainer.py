"""Weighted binary cross-entropy training of the mask predictor.

The per-sample objective is::

    L = (1/N) sum_n mean_{f,t}[ max(log(1 + m), floor) * BCE(p_n, g_n) ]

with predictions clamped to ``[1e-7, 1 - 1e-7]`` inside the BCE.  Clamped
entries carry zero gradient, which is the derivative of the clamped loss.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from .dsp import AudioClip, ComplexSpectrogram, MagnitudeSpectrogram, StftConfig, magnitude, stft
from .separator import (
    ModelConfig,
    ModelParams,
    QueryEmbedding,
    SeparationMask,
    ideal_binary_mask,
    init_params,
    model_backward,
    model_forward,
)

log = logging.getLogger(__name__)

PRED_CLAMP = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    epochs: int = 100
    seed: int = 0
    weight_floor: float = 1e-3
    optimizer_kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not self.weight_floor > 0:
            raise ValueError("weight_floor must be positive")
        if self.optimizer_kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer_kind!r}")


@dataclass(frozen=True)
class TrainSample:
    mixture: MagnitudeSpectrogram
    queries: Sequence[QueryEmbedding]
    gt_masks: Sequence[SeparationMask]
    mixture_complex: ComplexSpectrogram | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.queries) == 0 or len(self.queries) != len(self.gt_masks):
            raise ValueError(
                f"need N >= 1 queries matching N masks, got {len(self.queries)} and {len(self.gt_masks)}"
            )
        for g in self.gt_masks:
            if g.shape != self.mixture.shape:
                raise ValueError(f"mask shape {g.shape} != mixture shape {self.mixture.shape}")

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([q.values for q in self.queries])

    @property
    def targets(self) -> np.ndarray:
        return np.stack([g.values for g in self.gt_masks])


def make_sample(
    mixture: AudioClip,
    sources: Sequence[AudioClip],
    queries: Sequence[QueryEmbedding],
    stft_config: StftConfig = StftConfig(),
    threshold: float = 0.5,
) -> TrainSample:
    """Build a training sample with ideal-binary-mask targets."""
    spec = stft(mixture, stft_config)
    mix_mag = magnitude(spec)
    masks = [ideal_binary_mask(magnitude(stft(s, stft_config)), mix_mag, threshold) for s in sources]
    return TrainSample(mix_mag, list(queries), masks, spec)


def loss_weight(m, floor: float = 1e-3) -> np.ndarray:
    if not floor > 0:
        raise ValueError(f"floor must be positive, got {floor}")
    bins = getattr(m, "bins", m)
    return np.maximum(np.log1p(np.asarray(bins, dtype=np.float64)), floor)


def _bce_and_grad(pred: np.ndarray, gt: np.ndarray, weight: np.ndarray):
    """Weighted BCE value and dL/dpred for stacked ``(N, F, T)`` predictions."""
    pc = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    inside = (pred > PRED_CLAMP) & (pred < 1.0 - PRED_CLAMP)
    bce = -(gt * np.log(pc) + (1.0 - gt) * np.log1p(-pc))
    scale = 1.0 / pred.size  # (1/N) * mean over F*T
    loss = float(np.sum(weight * bce) * scale)
    dpred = weight * (pc - gt) / (pc * (1.0 - pc)) * inside * scale
    return loss, dpred


def weighted_bce(pred, gt, mix, floor: float = 1e-3) -> float:
    """Mean-over-sources, mean-over-bins weighted BCE."""
    if len(pred) != len(gt) or len(pred) == 0:
        raise ValueError(f"need equal nonempty lists, got {len(pred)} predictions and {len(gt)} targets")
    p = np.stack([np.asarray(getattr(x, "values", x), dtype=np.float64) for x in pred])
    g = np.stack([np.asarray(getattr(x, "values", x), dtype=np.float64) for x in gt])
    w = loss_weight(mix, floor)
    if p.shape != g.shape or p.shape[1:] != w.shape:
        raise ValueError(f"shape mismatch: pred {p.shape}, gt {g.shape}, mixture {w.shape}")
    if np.any((p <= 0) | (p >= 1)):
        warnings.warn("predictions at exactly 0 or 1 were clamped inside BCE", stacklevel=2)
    loss, _ = _bce_and_grad(p, g, w)
    return loss


def sample_loss_and_grad(params: ModelParams, sample: TrainSample, floor: float, need_grad: bool = True):
    mix = sample.mixture
    masks, cache = model_forward(
        params, mix.bins, sample.embeddings, mix.config.log_epsilon, mix.sample_rate
    )
    loss, dmasks = _bce_and_grad(masks, sample.targets, loss_weight(mix.bins, floor))
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    if not need_grad:
        return loss, None
    return loss, model_backward(params, cache, dmasks)


def batch_loss(params: ModelParams, batch: Sequence[TrainSample], floor: float = 1e-3) -> float:
    return float(np.mean([sample_loss_and_grad(params, s, floor, need_grad=False)[0] for s in batch]))


def gradients(params: ModelParams, batch: Sequence[TrainSample], floor: float = 1e-3):
    """Exact gradient of the mean batch loss.  Returns ``(loss, grad)``; grad is ModelParams-shaped."""
    if not batch:
        raise ValueError("batch must be nonempty")
    total = None
    losses = []
    for sample in batch:
        loss, grad = sample_loss_and_grad(params, sample, floor)
        losses.append(loss)
        g = grad.tensors()
        total = g if total is None else {k: total[k] + g[k] for k in total}
    n = len(batch)
    mean = {k: v / n for k, v in total.items()}
    return float(np.mean(losses)), ModelParams.from_tensors(params.config, mean)


def gradient_check(
    params: ModelParams, batch: Sequence[TrainSample], step: float = 1e-4, floor: float = 1e-3
) -> dict[str, float]:
    """Worst relative error of :func:`gradients` against central differences, per tensor.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.  Costs two loss
    evaluations per scalar parameter, so keep the model tiny.
    """
    _, grad = gradients(params, batch, floor)
    analytic = grad.tensors()
    base = params.tensors()
    worst = {}
    for name, value in base.items():
        err = 0.0
        for i in range(value.size):
            losses = []
            for sign in (1.0, -1.0):
                t = {k: v.copy() for k, v in base.items()}
                t[name].reshape(-1)[i] += sign * step
                losses.append(batch_loss(ModelParams.from_tensors(params.config, t), batch, floor))
            numeric = (losses[0] - losses[1]) / (2 * step)
            a = float(analytic[name].reshape(-1)[i])
            err = max(err, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        worst[name] = err
    return worst


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1**self.t)
            vhat = self.v[k] / (1 - self.beta2**self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


class SGD:
    def __init__(self, lr=1e-3):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> dict:
        return {k: p - self.lr * grads[k] for k, p in params.items()}


def _make_optimizer(config: TrainConfig):
    if config.optimizer_kind == "adam":
        return Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    return SGD(config.learning_rate)


def train(
    dataset: Sequence[TrainSample],
    config: TrainConfig = TrainConfig(),
    init_seed: int = 0,
    model_config: ModelConfig | None = None,
    init: ModelParams | None = None,
    history: list | None = None,
    log_file: TextIO | None = None,
) -> ModelParams:
    """Minimise the weighted BCE over ``dataset``.

    ``history`` (if given) receives the initial full-dataset loss followed by
    the mean minibatch loss of every epoch.  ``log_file`` receives one
    tab-separated line per epoch: epoch, mean loss, wall seconds.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    params = init if init is not None else init_params(model_config or ModelConfig(), init_seed)
    rng = np.random.default_rng(config.seed)
    opt = _make_optimizer(config)
    start = time.perf_counter()

    def record(epoch, loss):
        if history is not None:
            history.append(loss)
        line = f"{epoch}\t{loss:.8f}\t{time.perf_counter() - start:.3f}"
        log.info("epoch %s", line)
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()

    record(0, batch_loss(params, dataset, config.weight_floor))
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            batch = [dataset[i] for i in order[lo : lo + config.batch_size]]
            # overflow is caught by the finiteness checks below, not by numpy warnings
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    loss, grad = gradients(params, batch, config.weight_floor)
                except TrainingDivergedError as exc:
                    raise TrainingDivergedError(f"epoch {epoch}, batch at {lo}: {exc}") from exc
                new = opt.step(params.tensors(), grad.tensors())
            losses.append(loss * len(batch))
            if not all(np.all(np.isfinite(v)) for v in new.values()):
                raise TrainingDivergedError(f"epoch {epoch}: parameters became non-finite")
            params = ModelParams.from_tensors(params.config, new)
        record(epoch, float(np.sum(losses) / n))
    return params
