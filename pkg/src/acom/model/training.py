"""Baseline training and quantized finetuning with plain SGD.

Batch loss is the mean over samples of the per-sample objective
``task + beta * (code + commit)``. Inside the objective the quantizer
losses of a sample are its squared residuals summed over stages and
averaged over frames and feature dimensions, so ``beta`` keeps its usual
VQ-VAE scale whatever the code dimension. For sequences the task term is
``lam * CTC + (1 - lam) * KL``; for classification it is cross-entropy.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from acom.errors import ConfigError, TrainingDiverged
from acom.model.losses import (
    LossWeights,
    combined_loss,
    cross_entropy,
    ctc_loss,
    kl_label_smooth_loss,
    log_softmax,
    log_softmax_backward,
)
from acom.model.network import SplitModel, _standardize, _standardize_backward
from acom.model.synthetic import ClassificationSet, SequenceSet
from acom.rvq import (
    BatchQuantization,
    Codebook,
    EmaUpdater,
    codebook_grad,
    commit_grad,
    dequantize_batch,
    init_codebook,
    quantize_batch,
    reset_dead_codes,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    steps: int = 300
    batch_size: int = 32
    seed: int = 0
    codebook_update: str = "ema"
    codebook_lr: float | None = None
    ema_decay: float = 0.99
    warmup_frames: int = 512
    kmeans_iters: int = 20
    dead_code_threshold: int = 1
    reset_every: int = 64

    def __post_init__(self):
        if self.codebook_update not in ("gradient", "ema"):
            raise ConfigError(f"unknown codebook update rule {self.codebook_update!r}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("invalid optimizer settings")


@dataclass
class Frozen:
    """Quantizer state held constant to evaluate the straight-through surrogate.

    With these values fixed, the objective becomes a smooth function whose
    exact gradient is what the straight-through estimator computes.
    """

    indices: np.ndarray
    offset: np.ndarray
    stage_inputs: np.ndarray
    chosen: np.ndarray

    @classmethod
    def capture(cls, bq: BatchQuantization, cb: Codebook, h_flat) -> "Frozen":
        chosen = np.stack([cb.codewords[k].astype(np.float64)[bq.indices[:, k]] for k in range(cb.stages)])
        return cls(bq.indices.copy(), bq.reconstruction - h_flat, bq.stage_inputs.copy(), chosen)


@dataclass
class StepResult:
    loss: float
    grads: list
    codebook_grad: np.ndarray | None = None
    quantized: list = field(default_factory=list)
    features: list = field(default_factory=list)
    parts: dict = field(default_factory=dict)


def _quantizer_terms(h_flat, cb: Codebook, frozen: Frozen | None, count_usage=True):
    """Cloud input, summed code/commit losses and their gradients for (N, D) frames."""
    if frozen is None:
        bq = quantize_batch(h_flat, cb, count_usage=count_usage)
        sq = float(bq.frame_losses().sum())
        return bq.reconstruction, sq, sq, commit_grad(bq), codebook_grad(bq, cb), bq
    grad_c = np.zeros(cb.codewords.shape)
    code = 0.0
    commit = 0.0
    grad_h = np.zeros_like(h_flat)
    r = h_flat
    for k in range(cb.stages):
        live = cb.codewords[k].astype(np.float64)[frozen.indices[:, k]]
        diff = live - frozen.stage_inputs[k]
        code += float((diff**2).sum())
        np.add.at(grad_c[k], frozen.indices[:, k], 2.0 * diff)
        r = r - frozen.chosen[k]
        commit += float((r**2).sum())
        grad_h = grad_h + 2.0 * r
    return h_flat + frozen.offset, code, commit, grad_h, grad_c, None


def _cloud(model: SplitModel, h, caches):
    if model.normalize_dequantized:
        return model.run(_standardize(h), model.split, model.num_layers, caches)
    return model.run(h, model.split, model.num_layers, caches)


def _cloud_backward(model: SplitModel, grad, h, caches):
    g, grads = model.backprop(grad, model.split, model.num_layers, caches)
    if model.normalize_dequantized:
        g = _standardize_backward(g, h)
    return g, grads


def _add(acc, grads):
    for i, g in enumerate(grads):
        if g is None:
            continue
        if acc[i] is None:
            acc[i] = {k: v.copy() for k, v in g.items()}
        else:
            for k, v in g.items():
                acc[i][k] += v
    return acc


def output_labels(model: SplitModel, labels) -> np.ndarray:
    """Frame labels resampled to the model's output rate (majority vote, ties to the larger label)."""
    labels = np.asarray(labels, dtype=np.int64)
    factor = 1
    for layer in model.layers:
        factor *= layer.time_factor
    if factor == 1:
        return labels
    out = []
    for lo in range(0, labels.size, factor):
        window = labels[lo : lo + factor]
        counts = np.bincount(window)
        out.append(int(np.flatnonzero(counts == counts.max())[-1]))
    return np.array(out, dtype=np.int64)


def loss_and_grads(model: SplitModel, batch, weights: LossWeights, cb: Codebook | None = None,
                   frozen: Frozen | list | None = None, count_usage: bool = True) -> StepResult:
    """Objective and exact (straight-through) gradients for one batch.

    ``batch`` is ``(x, y)`` arrays for classification or a
    :class:`SequenceSet` for sequences. Gradients in ``grads`` are aligned
    with ``model.layers``.
    """
    if model.task == "classification":
        return _classification_step(model, batch, weights, cb, frozen, count_usage)
    return _sequence_step(model, batch, weights, cb, frozen, count_usage)


def _device_and_quantizer(model, x, cb, frozen, count_usage):
    dev_caches = []
    h = model.run(x, 0, model.split, dev_caches)
    if cb is None:
        return h, dev_caches, h, 0.0, 0.0, None, None, None
    flat = h.reshape(-1, h.shape[-1])
    if not np.all(np.isfinite(flat)):
        raise TrainingDiverged(f"non-finite activations at layer {model.split}")
    cloud_in, code, commit, g_commit, g_c, bq = _quantizer_terms(flat, cb, frozen, count_usage)
    scale = 1.0 / (h.shape[-2] * h.shape[-1])
    return (h, dev_caches, cloud_in.reshape(h.shape), code * scale, commit * scale,
            g_commit.reshape(h.shape) * scale, g_c * scale, bq)


def _classification_step(model, batch, weights, cb, frozen, count_usage):
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    B = x.shape[0]
    h, dev_caches, cloud_in, code, commit, g_commit, g_c, bq = _device_and_quantizer(
        model, x, cb, frozen, count_usage
    )
    cloud_caches = []
    logits = _cloud(model, cloud_in, cloud_caches)[:, 0, :]
    logp = log_softmax(logits)
    ce, g_logp = cross_entropy(logp, y)
    loss = combined_loss(ce / B, (code / B, commit / B), weights)
    g_logits = log_softmax_backward(g_logp / B, logp)[:, None, :]
    g_h, cloud_grads = _cloud_backward(model, g_logits, cloud_in, cloud_caches)
    if cb is not None:
        g_h = g_h + weights.beta * g_commit / B
    _, dev_grads = model.backprop(g_h, 0, model.split, dev_caches)
    parts = {"task": ce / B, "code": code / B, "commit": commit / B}
    cbg = weights.beta * g_c / B if g_c is not None else None
    return StepResult(loss, dev_grads + cloud_grads, cbg, [bq] if bq else [],
                      [h.reshape(-1, h.shape[-1])], parts)


def _sequence_step(model, batch: SequenceSet, weights, cb, frozen, count_usage):
    B = len(batch)
    grads = [None] * model.num_layers
    g_cb = np.zeros(cb.codewords.shape) if cb is not None else None
    total = 0.0
    parts = {"ctc": 0.0, "kl": 0.0, "code": 0.0, "commit": 0.0}
    quantized, features = [], []
    for i in range(B):
        x = np.asarray(batch.inputs[i], dtype=np.float64)
        fz = frozen[i] if isinstance(frozen, list) else frozen
        h, dev_caches, cloud_in, code, commit, g_commit, g_c, bq = _device_and_quantizer(
            model, x, cb, fz, count_usage
        )
        cloud_caches = []
        logits = _cloud(model, cloud_in, cloud_caches)
        logp = log_softmax(logits)
        ctc, g_ctc = ctc_loss(logp, batch.targets[i], validate=False)
        labels = output_labels(model, batch.frame_labels[i])
        n = min(labels.size, logp.shape[0])
        kl, g_kl_part = kl_label_smooth_loss(logp[:n], labels[:n], weights.epsilon)
        g_kl = np.zeros_like(logp)
        g_kl[:n] = g_kl_part
        total += combined_loss((ctc, kl), (code, commit), weights) / B
        for key, val in zip(("ctc", "kl", "code", "commit"), (ctc, kl, code, commit)):
            parts[key] += val / B
        g_logp = (weights.lam * g_ctc + (1.0 - weights.lam) * g_kl) / B
        g_h, cloud_grads = _cloud_backward(model, log_softmax_backward(g_logp, logp), cloud_in, cloud_caches)
        if cb is not None:
            g_h = g_h + weights.beta * g_commit / B
            g_cb += weights.beta * g_c / B
            if bq is not None:
                quantized.append(bq)
        _, dev_grads = model.backprop(g_h, 0, model.split, dev_caches)
        _add(grads, dev_grads + cloud_grads)
        features.append(h)
    return StepResult(total, grads, g_cb, quantized, features, parts)


def _all_finite(result: StepResult) -> bool:
    if not np.isfinite(result.loss):
        return False
    for g in result.grads:
        for v in (g or {}).values():
            if not np.all(np.isfinite(v)):
                return False
    return result.codebook_grad is None or bool(np.all(np.isfinite(result.codebook_grad)))


def finetune_step(model: SplitModel, cb: Codebook | None, batch, weights: LossWeights, lr: float,
                  codebook_lr: float | None = None, ema: EmaUpdater | None = None) -> StepResult:
    """One SGD step on the combined objective.

    Raises :class:`TrainingDiverged` without touching any parameter when the
    loss or a gradient is non-finite.
    """
    usage_before = cb.usage_count.copy() if cb is not None else None
    result = loss_and_grads(model, batch, weights, cb)
    if not _all_finite(result):
        if cb is not None:
            cb.usage_count[...] = usage_before
        raise TrainingDiverged(f"non-finite loss {result.loss}; parameters left at their last finite state")
    for layer, g in zip(model.layers, result.grads):
        for name, arr in layer.params().items():
            arr -= lr * g[name]
    if cb is not None:
        if ema is not None:
            for bq in result.quantized:
                ema.update(bq)
        else:
            step = lr if codebook_lr is None else codebook_lr
            cb.codewords -= (step * result.codebook_grad).astype(cb.codewords.dtype)
    return result


def sample_batch(data, batch_size: int, rng):
    n = len(data)
    idx = rng.choice(n, size=min(batch_size, n), replace=False)
    if isinstance(data, ClassificationSet):
        return data.x[idx], data.y[idx]
    return data.subset(idx)


class Trainer:
    """Step loop with loss history, dead-code resets and optional EMA codebooks."""

    def __init__(self, model: SplitModel, weights: LossWeights, config: TrainConfig,
                 cb: Codebook | None = None):
        self.model = model
        self.weights = weights
        self.config = config
        self.cb = cb
        self.rng = np.random.default_rng(config.seed)
        self.history: list[float] = []
        self.resets = 0
        self.ema = EmaUpdater(cb, config.ema_decay) if cb is not None and config.codebook_update == "ema" else None
        self._recent = deque(maxlen=16)

    def step(self, batch) -> float:
        result = finetune_step(self.model, self.cb, batch, self.weights, self.config.learning_rate,
                               self.config.codebook_lr, self.ema)
        self.history.append(result.loss)
        if self.cb is not None:
            self._recent.append(np.concatenate([f.reshape(-1, self.cb.dim) for f in result.features]))
            if self.config.reset_every and len(self.history) % self.config.reset_every == 0:
                recent = np.concatenate(list(self._recent))
                self.resets += reset_dead_codes(self.cb, recent, self.config.dead_code_threshold,
                                                seed=self.config.seed + len(self.history))
                if self.ema is not None:
                    self.ema.sync()
        return result.loss

    def fit(self, data, steps: int | None = None) -> list:
        steps = self.config.steps if steps is None else steps
        for _ in range(steps):
            self.step(sample_batch(data, self.config.batch_size, self.rng))
        return self.history


def collect_features(model: SplitModel, data, frames: int, seed: int = 0) -> np.ndarray:
    """Buffer at least ``frames`` continuous layer-M frames from randomly drawn samples."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    out, total = [], 0
    for i in order:
        x = data.x[i] if isinstance(data, ClassificationSet) else data.inputs[i]
        h = model.forward_device(x)
        out.append(h.reshape(-1, h.shape[-1]))
        total += out[-1].shape[0]
        if total >= frames:
            break
    return np.concatenate(out)


def warm_start_codebook(model: SplitModel, data, stages: int, size: int, config: TrainConfig) -> Codebook:
    feats = collect_features(model, data, config.warmup_frames, config.seed)
    return init_codebook(feats, stages, size, config.kmeans_iters, config.seed)


def train_baseline(model: SplitModel, data, weights: LossWeights, config: TrainConfig) -> list:
    return Trainer(model, weights, config).fit(data)


def finetune(model: SplitModel, data, stages: int, size: int, weights: LossWeights,
             config: TrainConfig) -> tuple:
    """Insert an RVQ at the split point, k-means warm start, then finetune end to end."""
    cb = warm_start_codebook(model, data, stages, size, config)
    trainer = Trainer(model, weights, config, cb)
    trainer.fit(data)
    log.info("finetuned M=%d K=%d V=%d: final loss %.4f, %d dead-code resets",
             model.split, stages, size, trainer.history[-1] if trainer.history else float("nan"), trainer.resets)
    return cb, trainer.history


def predict(model: SplitModel, data, cb: Codebook | None = None):
    """Logits per sample; the quantized path uses the same ops as split inference."""
    if isinstance(data, ClassificationSet):
        h = model.forward_device(data.x)
        if cb is not None:
            flat = h.reshape(-1, h.shape[-1])
            h = dequantize_batch(quantize_batch(flat, cb, count_usage=False).indices, cb).reshape(h.shape)
        return model.forward_cloud(h)[:, 0, :]
    out = []
    for x in data.inputs:
        h = model.forward_device(x)
        if cb is not None:
            h = dequantize_batch(quantize_batch(h, cb, count_usage=False).indices, cb)
        out.append(model.forward_cloud(h))
    return out


def greedy_decode(logits) -> list:
    best = np.asarray(logits).argmax(axis=-1)
    out, prev = [], 0
    for s in best:
        if s != prev and s != 0:
            out.append(int(s))
        prev = s
    return out


def edit_distance(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def accuracy(model: SplitModel, data, cb: Codebook | None = None) -> float:
    """Classification accuracy, or 1 - label error rate for sequences."""
    logits = predict(model, data, cb)
    if isinstance(data, ClassificationSet):
        return float((logits.argmax(axis=-1) == data.y).mean())
    errors = sum(edit_distance(greedy_decode(z), t) for z, t in zip(logits, data.targets))
    return 1.0 - errors / max(1, sum(len(t) for t in data.targets))


def token_histogram_input(model: SplitModel, data, cb: Codebook) -> np.ndarray:
    """All (N, K) tokens the device would emit for ``data``."""
    if isinstance(data, ClassificationSet):
        h = model.forward_device(data.x)
        return quantize_batch(h.reshape(-1, h.shape[-1]), cb, count_usage=False).indices
    return np.concatenate([model.forward_device(x, cb, quantize=True) for x in data.inputs])
