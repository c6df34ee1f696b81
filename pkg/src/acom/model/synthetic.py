"""Seeded toy datasets standing in for real speech and audio corpora."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from acom.errors import ContractError


@dataclass
class ClassificationSet:
    x: np.ndarray  # (N, T, F)
    y: np.ndarray  # (N,)
    means: np.ndarray  # (C, F)
    noise: float

    def __len__(self):
        return self.y.size

    def subset(self, idx) -> "ClassificationSet":
        return ClassificationSet(self.x[idx], self.y[idx], self.means, self.noise)


@dataclass
class SequenceSet:
    inputs: list = field(default_factory=list)  # (T_i, F) arrays
    targets: list = field(default_factory=list)  # label lists, symbols in 1..A
    frame_labels: list = field(default_factory=list)  # (T_i,) with 0 = silence
    templates: np.ndarray | None = None  # (A + 1, F); row 0 is silence
    noise: float = 0.0

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "SequenceSet":
        idx = list(np.atleast_1d(idx))
        return SequenceSet(
            [self.inputs[i] for i in idx],
            [self.targets[i] for i in idx],
            [self.frame_labels[i] for i in idx],
            self.templates,
            self.noise,
        )


def make_classification(num_classes=10, num_samples=1000, frames=8, feat_dim=16,
                        separation=4.0, noise=1.0, seed=0) -> ClassificationSet:
    """Gaussian clusters whose means are pairwise ``separation * noise`` apart.

    Means are scaled orthonormal vectors (so every pair is equidistant),
    rotated by a seeded random orthogonal matrix. Every frame of a sample is
    an independent draw around its class mean.
    """
    if num_classes < 1 or num_samples < 0 or frames < 1:
        raise ContractError("invalid dataset sizes")
    if feat_dim < num_classes:
        raise ContractError("feat_dim must be >= num_classes for equidistant means")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(feat_dim, feat_dim)))
    means = basis[:num_classes] * (separation * noise / np.sqrt(2.0))
    y = rng.integers(num_classes, size=num_samples)
    x = means[y][:, None, :] + rng.normal(0.0, noise, size=(num_samples, frames, feat_dim))
    return ClassificationSet(x, y, means, noise)


def nearest_centroid_accuracy(data: ClassificationSet) -> float:
    centroid_in = data.x.mean(axis=1)
    d = ((centroid_in[:, None, :] - data.means[None]) ** 2).sum(-1)
    return float((d.argmin(axis=1) == data.y).mean())


def make_sequence(num_samples=200, alphabet=4, min_len=2, max_len=5, symbol_frames=(4, 6),
                  gap_frames=(0, 2), noise=0.3, amplitude=1.0, seed=0, feat_dim=None) -> SequenceSet:
    """Label strings rendered frame by frame from per-symbol templates.

    Templates are scaled one-hot vectors (index 0 is silence) so that with
    zero noise the per-frame argmax is the frame label. Repeated symbols are
    always separated by silence, keeping every target CTC-feasible after
    pooling by 2.
    """
    feat_dim = feat_dim or alphabet + 1
    if feat_dim < alphabet + 1:
        raise ContractError("feat_dim must hold one template per symbol plus silence")
    if not 1 <= min_len <= max_len:
        raise ContractError("invalid label length range")
    rng = np.random.default_rng(seed)
    templates = np.zeros((alphabet + 1, feat_dim))
    templates[np.arange(alphabet + 1), np.arange(alphabet + 1)] = amplitude
    out = SequenceSet(templates=templates, noise=noise)
    lo_gap, hi_gap = gap_frames
    for _ in range(num_samples):
        length = int(rng.integers(min_len, max_len + 1))
        target = [int(s) for s in rng.integers(1, alphabet + 1, size=length)]
        labels = [0] * int(rng.integers(lo_gap, hi_gap + 1))
        for i, sym in enumerate(target):
            if i and sym == target[i - 1]:
                labels += [0] * max(2, int(rng.integers(lo_gap, hi_gap + 1)))
            elif i:
                labels += [0] * int(rng.integers(lo_gap, hi_gap + 1))
            labels += [sym] * int(rng.integers(symbol_frames[0], symbol_frames[1] + 1))
        labels += [0] * int(rng.integers(lo_gap, hi_gap + 1))
        labels = np.array(labels, dtype=np.int64)
        x = templates[labels] + rng.normal(0.0, noise, size=(labels.size, feat_dim)) if noise else templates[labels].copy()
        out.inputs.append(x)
        out.targets.append(target)
        out.frame_labels.append(labels)
    return out


def train_test_split(data, test_fraction: float = 0.25, seed: int = 0):
    """Seeded random split of a classification or sequence set."""
    n = len(data)
    order = np.random.default_rng(seed).permutation(n)
    cut = n - int(round(n * test_fraction))
    return data.subset(np.sort(order[:cut])), data.subset(np.sort(order[cut:]))
