"""Parameterized layers for the conversion networks.

The centerpiece is ``AdaptiveNorm``: instance normalization whose elementwise
scale and bias are predicted from the source spectrogram by a small CNN, so
the normalized feature is re-modulated with the source's time-frequency
structure instead of a per-channel constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Conv1d:
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1, padding="same"):
        self.stride = stride
        self.padding = padding
        self.w = Tensor(uniform_init(rng, (c_out, c_in, kernel), c_in * kernel), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self):
        yield "w", self.w
        yield "b", self.b


class Conv2d:
    def __init__(self, rng, c_in: int, c_out: int, kernel, stride=(1, 1), padding="same"):
        kq, kt = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = stride
        self.padding = padding
        self.w = Tensor(
            uniform_init(rng, (c_out, c_in, kq, kt), c_in * kq * kt), requires_grad=True
        )
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self):
        yield "w", self.w
        yield "b", self.b


def instance_norm(x: Tensor) -> Tensor:
    """Plain IN, normalized output only."""
    return ad.instance_norm(x)[0]


def avg_pool_time(x: Tensor, t_out: int) -> Tensor:
    """Average-pool (Q, T) along time down to t_out; T must divide evenly."""
    q, t_in = x.shape
    if t_in % t_out != 0:
        raise ValueError(f"avg_pool_time: {t_in} frames not divisible by {t_out}")
    factor = t_in // t_out
    return x.reshape((q, t_out, factor)).mean(axis=2)


def nearest_resize_2d(x: Tensor, q_out: int, t_out: int) -> Tensor:
    """Nearest-neighbor resize of (Q, T) using floor(i * src / dst) indexing."""
    q_in, t_in = x.shape
    idx_q = (np.arange(q_out) * q_in) // q_out
    idx_t = (np.arange(t_out) * t_in) // t_out
    return ad.index_select(ad.index_select(x, 0, idx_q), 1, idx_t)


@dataclass
class AdaptiveNormConfig:
    """Hyperparameters of one adaptive-norm block.

    depth counts the trunk convolutions; two separate head convolutions
    produce the scale and bias maps.
    """

    depth: int = 3
    hidden_channels: int = 128
    kernel_size: int = 5
    mode: str = "1d"  # '1d' | '2d'

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.hidden_channels < 1:
            raise ValueError("hidden_channels must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.mode not in ("1d", "2d"):
            raise ValueError(f"unknown mode {self.mode!r}")


class AdaptiveNorm:
    """IN followed by elementwise scale/bias computed from the source.

    1d mode: the source (Q, T_x) is average-pooled along time to the
    feature's T and fed to the trunk as a Q-channel 1-D signal.
    2d mode: the source is nearest-neighbor resized to the feature's
    (Q_f, T_f) grid and fed as a single-channel map.
    """

    def __init__(self, rng, cfg: AdaptiveNormConfig, feature_channels: int, source_bins: int):
        self.cfg = cfg
        self.feature_channels = feature_channels
        k = cfg.kernel_size
        ch = cfg.hidden_channels
        if cfg.mode == "1d":
            conv = lambda ci, co: Conv1d(rng, ci, co, k)  # noqa: E731
            c_in = source_bins
        else:
            conv = lambda ci, co: Conv2d(rng, ci, co, (k, k))  # noqa: E731
            c_in = 1
        self.trunk = [conv(c_in if i == 0 else ch, ch) for i in range(cfg.depth)]
        self.scale_head = conv(ch, feature_channels)
        self.bias_head = conv(ch, feature_channels)

    def hidden(self, source: Tensor, f_shape) -> Tensor:
        """Run the resolution match and trunk; returns the shared hidden map."""
        if self.cfg.mode == "1d":
            h = avg_pool_time(source, f_shape[-1])
        else:
            h = nearest_resize_2d(source, f_shape[-2], f_shape[-1])
            h = h.reshape((1, f_shape[-2], f_shape[-1]))
        for conv in self.trunk:
            h = ad.relu(conv(h))
        return h

    def __call__(self, f: Tensor, source: Tensor) -> Tensor:
        h = self.hidden(source, f.shape)
        scale = self.scale_head(h)
        bias = self.bias_head(h)
        if scale.shape != f.shape:
            raise ValueError(
                f"adaptive norm produced {scale.shape} modulation for feature {f.shape}"
            )
        normalized = ad.instance_norm(f)[0]
        return scale * normalized + bias

    def params(self):
        for i, conv in enumerate(self.trunk):
            for name, p in conv.params():
                yield f"trunk{i}.{name}", p
        for name, p in self.scale_head.params():
            yield f"scale_head.{name}", p
        for name, p in self.bias_head.params():
            yield f"bias_head.{name}", p
