"""Split downstream model: layers 1..M on the device, M+1..L in the cloud."""

from __future__ import annotations

import numpy as np

from acom._hash import fnv1a_64
from acom.errors import ConfigError, ContractError
from acom.model.layers import Layer, build_layer
from acom.rvq import Codebook, dequantize_batch, quantize_batch

TASKS = ("sequence", "classification")


class SplitModel:
    """Ordered layer stack with a split point.

    ``split`` is M, the number of layers run on the device; the quantizer
    sits on the output of layer M. ``input_rate`` is the frame rate of the
    raw input in frames per second.
    """

    def __init__(self, layers, split: int, input_rate: float, task: str = "classification",
                 normalize_dequantized: bool = False):
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        self.layers: list[Layer] = list(layers)
        self.task = task
        self.input_rate = float(input_rate)
        self.normalize_dequantized = normalize_dequantized
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:]), start=1):
            if a.out_dim != b.in_dim:
                raise ConfigError(f"layer {i} outputs {a.out_dim} channels but layer {i + 1} expects {b.in_dim}")
        self.split = split

    @classmethod
    def from_specs(cls, specs, split, input_rate, task="classification", seed=0, **kwargs):
        rng = np.random.default_rng(seed)
        return cls([build_layer(s, rng) for s in specs], split, input_rate, task, **kwargs)

    @property
    def split(self) -> int:
        return self._split

    @split.setter
    def split(self, M: int):
        if not 1 <= M <= len(self.layers) - 1:
            raise ConfigError(f"split point must be in [1, {len(self.layers) - 1}], got {M}")
        self._split = int(M)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def feature_dim(self) -> int:
        """Dimension D of the layer-M output."""
        return self.layers[self.split - 1].out_dim

    def frame_rate(self, M: int | None = None) -> float:
        """Frames per second after layer M (defaults to the split point)."""
        M = self.split if M is None else M
        rate = self.input_rate
        for layer in self.layers[:M]:
            if layer.kind == "global_pool":
                return 0.0
            rate /= layer.time_factor
        return rate

    def specs(self) -> list:
        return [layer.spec() for layer in self.layers]

    def run(self, x, start: int, stop: int, caches: list | None = None):
        """Apply layers ``start+1 .. stop`` (1-based), optionally recording caches."""
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers[start:stop]:
            h, cache = layer.forward(h)
            if caches is not None:
                caches.append(cache)
        return h

    def backprop(self, grad, start: int, stop: int, caches: list):
        """Backward through layers ``start+1 .. stop``; returns (input grad, per-layer grads)."""
        grads = [None] * (stop - start)
        for j in range(stop - start - 1, -1, -1):
            grad, grads[j] = self.layers[start + j].backward(grad, caches[j])
        return grad, grads

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 2 or x.shape[-1] != self.input_dim:
            raise ContractError(f"expected (..., T, {self.input_dim}) input, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractError("input contains non-finite values")
        return x

    def forward_device(self, x, cb: Codebook | None = None, quantize: bool = False):
        """Layers 1..M; with ``quantize`` the (T, K) token array, else the h_M frames."""
        h = self.run(self._check_input(x), 0, self.split)
        if not quantize:
            return h
        if cb is None:
            raise ConfigError("quantization requested without a codebook")
        if cb.dim != h.shape[-1]:
            raise ConfigError(f"layer {self.split} outputs {h.shape[-1]} dims but the codebook has D={cb.dim}")
        if h.ndim != 2:
            raise ContractError("token output is defined for a single (T, C) input")
        return quantize_batch(h, cb, count_usage=False).indices

    def forward_cloud(self, hq):
        """Layers M+1..L on (dequantized) features; returns logits."""
        h = np.asarray(hq, dtype=np.float64)
        if h.shape[-1] != self.feature_dim:
            raise ContractError(f"cloud expects {self.feature_dim}-dim features, got {h.shape[-1]}")
        if self.normalize_dequantized:
            h = _standardize(h)
        return self.run(h, self.split, len(self.layers))

    def forward_full(self, x):
        """Monolithic forward pass through all L layers."""
        if self.normalize_dequantized:
            return self.forward_cloud(self.forward_device(x))
        return self.run(self._check_input(x), 0, len(self.layers))

    def infer_quantized(self, x, cb: Codebook):
        """Local reference for split inference: tokens and the logits they produce."""
        tokens = self.forward_device(x, cb, quantize=True)
        return tokens, self.forward_cloud(dequantize_batch(tokens, cb))

    def parameters(self):
        """(layer index, name, array) for every trainable array, in layer order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out.append((i, name, arr))
        return out

    def param_bytes(self) -> bytes:
        return b"".join(arr.astype("<f8").tobytes() for _, _, arr in self.parameters())

    def hash(self) -> int:
        return fnv1a_64(self.param_bytes())

    def copy(self) -> "SplitModel":
        clone = SplitModel.from_specs(self.specs(), self.split, self.input_rate, self.task,
                                      normalize_dequantized=self.normalize_dequantized)
        for (_, _, dst), (_, _, src) in zip(clone.parameters(), self.parameters()):
            dst[...] = src
        return clone


def _standardize(h, eps=1e-5):
    mu = h.mean(axis=-1, keepdims=True)
    var = h.var(axis=-1, keepdims=True)
    return (h - mu) / np.sqrt(var + eps)


def _standardize_backward(grad, h, eps=1e-5):
    n = h.shape[-1]
    mu = h.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(h.var(axis=-1, keepdims=True) + eps)
    xhat = (h - mu) * inv
    return inv / n * (n * grad - grad.sum(-1, keepdims=True) - xhat * (grad * xhat).sum(-1, keepdims=True))


def sequence_layers(feat_dim: int, num_labels: int, code_dim: int = 16, hidden: int = 32) -> list:
    """Default sequence stack: 2 conv, time pooling, 3 dense; output has num_labels + 1 (blank)."""
    return [
        {"type": "conv1d", "in": feat_dim, "out": hidden, "kernel": 3, "stride": 1, "activation": "relu"},
        {"type": "conv1d", "in": hidden, "out": hidden, "kernel": 3, "stride": 1, "activation": "relu"},
        {"type": "pool", "in": hidden, "out": hidden, "factor": 2},
        {"type": "dense", "in": hidden, "out": code_dim, "activation": "relu"},
        {"type": "dense", "in": code_dim, "out": hidden, "activation": "relu"},
        {"type": "dense", "in": hidden, "out": num_labels + 1, "activation": "linear"},
    ]


def classification_layers(feat_dim: int, num_classes: int, code_dim: int = 16, hidden: int = 64,
                          pool: int = 4) -> list:
    """Default classifier: 4 dense, time pooling by ``pool``, global mean, linear head."""
    return [
        {"type": "dense", "in": feat_dim, "out": hidden, "activation": "relu"},
        {"type": "dense", "in": hidden, "out": hidden, "activation": "relu"},
        {"type": "dense", "in": hidden, "out": hidden, "activation": "relu"},
        {"type": "dense", "in": hidden, "out": code_dim, "activation": "relu"},
        {"type": "pool", "in": code_dim, "out": code_dim, "factor": pool},
        {"type": "global_pool", "in": code_dim, "out": code_dim},
        {"type": "dense", "in": code_dim, "out": num_classes, "activation": "linear"},
    ]


def default_model(task: str, feat_dim: int, num_out: int, code_dim: int = 16, seed: int = 0,
                  input_rate: float | None = None) -> SplitModel:
    if task == "sequence":
        return SplitModel.from_specs(sequence_layers(feat_dim, num_out, code_dim), 4,
                                     input_rate or 100.0, task, seed=seed)
    if task == "classification":
        return SplitModel.from_specs(classification_layers(feat_dim, num_out, code_dim), 5,
                                     input_rate or 160.0, task, seed=seed)
    raise ConfigError(f"unknown task {task!r}")
