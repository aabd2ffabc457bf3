"""Small 2-D encoder-decoder with skip connections and explicit backprop.

Layout for ``widths = (w0, w1)``::

    x (1ch) -> conv+act -> [skip0] -> avgpool
            -> conv+act -> [skip1] -> avgpool
            -> conv+act (bottleneck)
            -> upsample, concat skip1 -> conv+act
            -> upsample, concat skip0 -> conv+act
            -> 1x1 conv -> C channels (linear)

``widths = ()`` collapses the network to the single 1x1 head convolution, a
per-bin affine map of the input.  Inputs are reflect-padded to a multiple of
``2 ** len(widths)`` and the output is cropped back to the input size.

All tensors are channel-first ``(C, H, W)`` float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class UNetConfig:
    out_channels: int = 16
    widths: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    leaky_slope: float = 0.1
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.out_channels < 1 or any(w < 1 for w in self.widths):
            raise ValueError("channel counts must be positive")

    @property
    def depth(self) -> int:
        return len(self.widths)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel_size
        shapes: dict[str, tuple[int, ...]] = {}
        prev = self.in_channels
        for i, w in enumerate(self.widths):
            shapes[f"enc{i}.w"] = (w, prev, k, k)
            shapes[f"enc{i}.b"] = (w,)
            prev = w
        if self.widths:
            shapes["mid.w"] = (prev, prev, k, k)
            shapes["mid.b"] = (prev,)
        for i in reversed(range(self.depth)):
            w = self.widths[i]
            shapes[f"dec{i}.w"] = (w, prev + w, k, k)
            shapes[f"dec{i}.b"] = (w,)
            prev = w
        shapes["head.w"] = (self.out_channels, prev, 1, 1)
        shapes["head.b"] = (self.out_channels,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "out_channels": self.out_channels,
            "widths": list(self.widths),
            "kernel_size": self.kernel_size,
            "leaky_slope": self.leaky_slope,
            "in_channels": self.in_channels,
        }


def init_weights(config: UNetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases."""
    weights = {}
    for name, shape in config.shapes().items():
        if name.endswith(".b"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            weights[name] = rng.uniform(-bound, bound, size=shape)
    return weights


def conv2d(x, w, b):
    """Same-size zero-padded convolution; returns output and the im2col matrix."""
    cout, cin, k, _ = w.shape
    _, h, wd = x.shape
    p = k // 2
    if k == 1:
        cols = x.reshape(cin, h * wd)
    else:
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        cols = np.empty((cin, k, k, h, wd))
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, i : i + h, j : j + wd]
        cols = cols.reshape(cin * k * k, h * wd)
    y = w.reshape(cout, -1) @ cols + b[:, None]
    return y.reshape(cout, h, wd), cols


def conv2d_backward(dy, cols, w, need_input_grad=True):
    cout, cin, k, _ = w.shape
    _, h, wd = dy.shape
    dy2 = dy.reshape(cout, h * wd)
    dw = (dy2 @ cols.T).reshape(w.shape)
    db = dy2.sum(axis=1)
    if not need_input_grad:
        return None, dw, db
    if k == 1:
        return (w.reshape(cout, cin).T @ dy2).reshape(cin, h, wd), dw, db
    # Input gradient of a same-padded stride-1 correlation is a correlation
    # of dy with the spatially flipped, channel-transposed kernel.
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv2d(dy, w_t, np.zeros(cin))
    return dx, dw, db


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def _leaky_grad(pre, slope):
    return np.where(pre > 0, 1.0, slope)


def _pool(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _pool_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) / 4.0


def _upsample(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample_backward(dy):
    c, h, w = dy.shape
    return dy.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def forward(x: np.ndarray, weights: dict, config: UNetConfig, keep_cache: bool = False):
    """Run the network on an ``(H, W)`` or ``(Cin, H, W)`` grid.

    Returns the ``(C, H, W)`` feature map, plus the activation cache when
    ``keep_cache`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if not np.all(np.isfinite(x)):
        raise ValueError("U-Net input contains non-finite values")
    _, h, wd = x.shape
    mult = 2**config.depth
    if h < max(mult, 1) or wd < max(mult, 1):
        raise ValueError(f"input {h}x{wd} too small for {config.depth} downsampling levels")
    ph, pw = (-h) % mult, (-wd) % mult
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect")

    slope = config.leaky_slope
    cache: dict = {"shape": (h, wd)}
    out = x
    skips = []
    for i in range(config.depth):
        pre, cols = conv2d(out, weights[f"enc{i}.w"], weights[f"enc{i}.b"])
        act = _leaky(pre, slope)
        cache[f"enc{i}"] = (cols, pre)
        skips.append(act)
        out = _pool(act)
    if config.depth:
        pre, cols = conv2d(out, weights["mid.w"], weights["mid.b"])
        cache["mid"] = (cols, pre)
        out = _leaky(pre, slope)
    for i in reversed(range(config.depth)):
        up = _upsample(out)
        cat = np.concatenate([up, skips[i]], axis=0)
        pre, cols = conv2d(cat, weights[f"dec{i}.w"], weights[f"dec{i}.b"])
        cache[f"dec{i}"] = (cols, pre, up.shape[0])
        out = _leaky(pre, slope)
    feats, cols = conv2d(out, weights["head.w"], weights["head.b"])
    cache["head"] = cols
    feats = feats[:, :h, :wd]
    return (feats, cache) if keep_cache else feats


def backward(dfeats: np.ndarray, cache: dict, weights: dict, config: UNetConfig) -> dict:
    """Gradients of a scalar loss with respect to every weight, given dL/dfeatures."""
    slope = config.leaky_slope
    grads = {}
    h, wd = cache["shape"]
    cols = cache["head"]
    full = np.zeros((dfeats.shape[0],) + _padded_shape(h, wd, config.depth))
    full[:, :h, :wd] = dfeats
    dout, grads["head.w"], grads["head.b"] = conv2d_backward(
        full, cols, weights["head.w"], need_input_grad=config.depth > 0
    )
    dskips = {}
    for i in range(config.depth):
        cols, pre, n_up = cache[f"dec{i}"]
        dpre = dout * _leaky_grad(pre, slope)
        dcat, grads[f"dec{i}.w"], grads[f"dec{i}.b"] = conv2d_backward(
            dpre, cols, weights[f"dec{i}.w"]
        )
        dskips[i] = dcat[n_up:]
        dout = _upsample_backward(dcat[:n_up])
    if config.depth:
        cols, pre = cache["mid"]
        dpre = dout * _leaky_grad(pre, slope)
        dout, grads["mid.w"], grads["mid.b"] = conv2d_backward(dpre, cols, weights["mid.w"])
    for i in reversed(range(config.depth)):
        dact = _pool_backward(dout) + dskips[i]
        cols, pre = cache[f"enc{i}"]
        dpre = dact * _leaky_grad(pre, slope)
        dout, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = conv2d_backward(
            dpre, cols, weights[f"enc{i}.w"], need_input_grad=i > 0
        )
    return grads


def _padded_shape(h, wd, depth):
    mult = 2**depth
    return h + (-h) % mult, wd + (-wd) % mult
