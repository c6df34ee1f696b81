"""Layers with explicit forward/backward passes.

Every layer maps an array of shape ``(..., T, C_in)`` to ``(..., T_out, C_out)``;
leading axes are batch axes. ``backward`` takes the cache returned by
``forward`` and returns the input gradient plus a dict of parameter
gradients summed over the batch.
"""

from __future__ import annotations

import math

import numpy as np

from acom.errors import ConfigError, ContractError

ACTIVATIONS = ("linear", "relu", "tanh")


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(grad, z, y, activation):
    if activation == "relu":
        return grad * (z > 0)
    if activation == "tanh":
        return grad * (1.0 - y * y)
    return grad


class Layer:
    kind = "layer"
    time_factor = 1

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)

    def params(self) -> dict:
        return {}

    def out_frames(self, frames: int) -> int:
        return frames

    def macs(self, frames: int) -> int:
        return 0

    def spec(self) -> dict:
        return {"type": self.kind, "in": self.in_dim, "out": self.out_dim}

    def _check(self, x):
        if x.shape[-1] != self.in_dim:
            raise ContractError(f"{self.kind} layer expects {self.in_dim} channels, got {x.shape[-1]}")


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim, out_dim, activation="relu", rng=None):
        super().__init__(in_dim, out_dim)
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.activation = activation
        rng = rng or np.random.default_rng(0)
        gain = 2.0 if activation == "relu" else 1.0
        self.W = rng.normal(0.0, math.sqrt(gain / in_dim), size=(in_dim, out_dim))
        self.b = np.zeros(out_dim)

    def params(self):
        return {"W": self.W, "b": self.b}

    def spec(self):
        return {**super().spec(), "activation": self.activation}

    def macs(self, frames):
        return frames * self.in_dim * self.out_dim

    def forward(self, x):
        self._check(x)
        z = x @ self.W + self.b
        y = _activate(z, self.activation)
        return y, (x, z, y)

    def backward(self, grad, cache):
        x, z, y = cache
        gz = _activation_grad(grad, z, y, self.activation)
        x2 = x.reshape(-1, self.in_dim)
        g2 = gz.reshape(-1, self.out_dim)
        grads = {"W": x2.T @ g2, "b": g2.sum(axis=0)}
        return gz @ self.W.T, grads


class Conv1d(Layer):
    """Strided 1-D convolution over time with 'same'-style zero padding."""

    kind = "conv1d"

    def __init__(self, in_dim, out_dim, kernel=3, stride=1, activation="relu", rng=None):
        super().__init__(in_dim, out_dim)
        if kernel < 1 or stride < 1:
            raise ConfigError("kernel and stride must be >= 1")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.time_factor = self.stride
        self.activation = activation
        rng = rng or np.random.default_rng(0)
        gain = 2.0 if activation == "relu" else 1.0
        fan_in = kernel * in_dim
        self.W = rng.normal(0.0, math.sqrt(gain / fan_in), size=(kernel * in_dim, out_dim))
        self.b = np.zeros(out_dim)

    def params(self):
        return {"W": self.W, "b": self.b}

    def spec(self):
        return {**super().spec(), "kernel": self.kernel, "stride": self.stride, "activation": self.activation}

    def out_frames(self, frames):
        return -(-frames // self.stride)

    def macs(self, frames):
        return self.out_frames(frames) * self.kernel * self.in_dim * self.out_dim

    def _gather_index(self, frames):
        t_out = self.out_frames(frames)
        pad = max((t_out - 1) * self.stride + self.kernel - frames, 0)
        left = pad // 2
        idx = np.arange(t_out)[:, None] * self.stride + np.arange(self.kernel)[None, :]
        return idx, left, pad - left

    def forward(self, x):
        self._check(x)
        frames = x.shape[-2]
        idx, left, right = self._gather_index(frames)
        widths = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
        xp = np.pad(x, widths)
        cols = xp[..., idx, :]  # (..., T_out, kernel, C_in)
        cols = cols.reshape(*cols.shape[:-2], self.kernel * self.in_dim)
        z = cols @ self.W + self.b
        y = _activate(z, self.activation)
        return y, (x.shape, xp.shape, idx, left, cols, z, y)

    def backward(self, grad, cache):
        x_shape, xp_shape, idx, left, cols, z, y = cache
        gz = _activation_grad(grad, z, y, self.activation)
        c2 = cols.reshape(-1, self.kernel * self.in_dim)
        g2 = gz.reshape(-1, self.out_dim)
        grads = {"W": c2.T @ g2, "b": g2.sum(axis=0)}
        gcols = (gz @ self.W.T).reshape(*gz.shape[:-1], self.kernel, self.in_dim)
        gxp = np.zeros(xp_shape)
        lead = gxp.reshape(-1, xp_shape[-2], self.in_dim)
        gc = gcols.reshape(-1, *gcols.shape[-3:])
        for b in range(lead.shape[0]):
            np.add.at(lead[b], idx, gc[b])
        gxp = lead.reshape(xp_shape)
        gx = gxp[..., left : left + x_shape[-2], :]
        return gx, grads


def time_avg_pool(features, factor: int):
    """Average consecutive groups of ``factor`` frames.

    The trailing partial window is averaged over the frames it actually
    holds, so the output has ceil(T / factor) frames.
    """
    if factor < 1:
        raise ContractError(f"pooling factor must be >= 1, got {factor}")
    x = np.asarray(features, dtype=np.float64)
    frames = x.shape[-2]
    t_out = -(-frames // factor)
    pad = t_out * factor - frames
    if pad:
        widths = [(0, 0)] * (x.ndim - 2) + [(0, pad), (0, 0)]
        x = np.pad(x, widths)
    sums = x.reshape(*x.shape[:-2], t_out, factor, x.shape[-1]).sum(axis=-2)
    return sums / _window_counts(frames, factor)[:, None]


def _window_counts(frames, factor):
    t_out = -(-frames // factor)
    counts = np.full(t_out, float(factor))
    if t_out and frames % factor:
        counts[-1] = frames % factor
    return counts


class TimePool(Layer):
    kind = "pool"

    def __init__(self, dim, factor):
        super().__init__(dim, dim)
        if factor < 1:
            raise ConfigError("pool factor must be >= 1")
        self.factor = int(factor)
        self.time_factor = self.factor

    def spec(self):
        return {**super().spec(), "factor": self.factor}

    def out_frames(self, frames):
        return -(-frames // self.factor)

    def forward(self, x):
        self._check(x)
        return time_avg_pool(x, self.factor), x.shape[-2]

    def backward(self, grad, frames):
        counts = _window_counts(frames, self.factor)
        g = np.repeat(grad / counts[:, None], self.factor, axis=-2)
        return g[..., :frames, :], {}


class GlobalPool(Layer):
    """Mean over all frames; the output has a single frame."""

    kind = "global_pool"

    def __init__(self, dim):
        super().__init__(dim, dim)

    def out_frames(self, frames):
        return 1

    def forward(self, x):
        self._check(x)
        return x.mean(axis=-2, keepdims=True), x.shape[-2]

    def backward(self, grad, frames):
        shape = list(grad.shape)
        shape[-2] = frames
        return np.broadcast_to(grad / frames, shape).copy(), {}


def build_layer(spec: dict, rng=None) -> Layer:
    kind = spec.get("type")
    try:
        if kind == "dense":
            return Dense(spec["in"], spec["out"], spec.get("activation", "relu"), rng=rng)
        if kind == "conv1d":
            return Conv1d(
                spec["in"],
                spec["out"],
                spec.get("kernel", 3),
                spec.get("stride", 1),
                spec.get("activation", "relu"),
                rng=rng,
            )
        if kind == "pool":
            return TimePool(spec["in"], spec["factor"])
        if kind == "global_pool":
            return GlobalPool(spec["in"])
    except KeyError as exc:
        raise ConfigError(f"layer spec {spec} is missing {exc}") from None
    raise ConfigError(f"unknown layer type {kind!r}")
