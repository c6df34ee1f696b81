"""Residual vector quantization.

Codewords live in a ``(K, V, D)`` float32 array (stage, codeword, dimension).
Nearest-neighbour search, residuals and reconstructions are computed in
float64 from those float32 values, so a frame's tokens depend only on the
stored codewords and the input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from acom._hash import fnv1a_64
from acom.errors import ContractError, FramingError

CODEBOOK_MAGIC = b"ACBK"
CODEBOOK_VERSION = 1
_CODEBOOK_HEADER = struct.Struct("<4sBHIH")

# Upper bound on elements of the (chunk, V, D) difference tensor in a search.
_SEARCH_BLOCK = 1 << 22


class Codebook:
    """K stages of V codewords of dimension D, plus per-codeword usage counters.

    Codewords are float32; ``dtype=np.float64`` is meant for gradient checks
    only. Serialization and hashing always use the float32 values.
    """

    def __init__(self, codewords, dtype=np.float32):
        arr = np.array(codewords, dtype=dtype, order="C")
        if arr.ndim != 3 or 0 in arr.shape:
            raise ContractError(f"codewords must have shape (K, V, D), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("codewords contain non-finite values")
        self.codewords = arr
        self.usage_count = np.zeros(arr.shape[:2], dtype=np.int64)

    @property
    def stages(self) -> int:
        return self.codewords.shape[0]

    @property
    def size(self) -> int:
        return self.codewords.shape[1]

    @property
    def dim(self) -> int:
        return self.codewords.shape[2]

    @classmethod
    def random(cls, dim, size, stages, seed=0, scale=1.0) -> "Codebook":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, size=(stages, size, dim)))

    def copy(self) -> "Codebook":
        out = Codebook(self.codewords, dtype=self.codewords.dtype)
        out.usage_count = self.usage_count.copy()
        return out

    def codeword(self, stage: int, index: int) -> np.ndarray:
        return self.codewords[stage, index].astype(np.float64)

    def reset_usage(self) -> None:
        self.usage_count[:] = 0

    def payload_bytes(self) -> bytes:
        return self.codewords.astype("<f4", copy=False).tobytes(order="C")

    def hash(self) -> int:
        """FNV-1a over the little-endian float payload; identifies the codebook on the wire."""
        return fnv1a_64(self.payload_bytes())

    def to_bytes(self) -> bytes:
        K, V, D = self.codewords.shape
        if D > 0xFFFF or K > 0xFFFF or V > 0xFFFFFFFF:
            raise ContractError("codebook too large for the file format")
        body = self.payload_bytes()
        header = _CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, D, V, K)
        return header + body + struct.pack("<Q", fnv1a_64(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codebook":
        if len(data) < _CODEBOOK_HEADER.size:
            raise FramingError("truncated codebook header", offset=len(data))
        magic, version, D, V, K = _CODEBOOK_HEADER.unpack_from(data, 0)
        if magic != CODEBOOK_MAGIC:
            raise FramingError(f"bad codebook magic {magic!r}", offset=0)
        if version != CODEBOOK_VERSION:
            raise FramingError(f"unsupported codebook version {version}", offset=4)
        start = _CODEBOOK_HEADER.size
        end = start + 4 * D * V * K
        if len(data) < end + 8:
            raise FramingError("truncated codebook payload", offset=len(data))
        if len(data) > end + 8:
            raise FramingError("trailing bytes after codebook", offset=end + 8)
        body = data[start:end]
        (stored,) = struct.unpack_from("<Q", data, end)
        if stored != fnv1a_64(body):
            raise FramingError("codebook checksum mismatch", offset=end)
        words = np.frombuffer(body, dtype="<f4").reshape(K, V, D)
        return cls(words)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class QuantizationResult:
    tokens: tuple
    reconstruction: np.ndarray
    residual_norms: list
    code_loss: float
    commit_loss: float


@dataclass
class BatchQuantization:
    """Vectorised RVQ output for N frames.

    ``stage_inputs[k]`` is the residual entering stage k (``stage_inputs[0]``
    is the input itself) and ``residual`` is what is left after the last stage.
    """

    indices: np.ndarray
    reconstruction: np.ndarray
    stage_inputs: np.ndarray
    residual: np.ndarray

    def residual_norms(self) -> np.ndarray:
        """(N, K+1) norms of the input and of every stage residual."""
        norms = np.linalg.norm(self.stage_inputs, axis=-1).T
        return np.concatenate([norms, np.linalg.norm(self.residual, axis=-1)[:, None]], axis=1)

    def frame_losses(self) -> np.ndarray:
        """Per-frame squared error summed over stages; code and commit losses share this value."""
        inner = (self.stage_inputs[1:] ** 2).sum(axis=-1).sum(axis=0)
        return inner + (self.residual**2).sum(axis=-1)


def nearest(points: np.ndarray, words: np.ndarray):
    """Index of the closest row of ``words`` for every row of ``points``.

    Squared Euclidean distance; on ties the smallest index wins.
    Returns ``(indices, squared_distances)``.
    """
    points = np.asarray(points, dtype=np.float64)
    words = np.asarray(words, dtype=np.float64)
    n = points.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    step = max(1, _SEARCH_BLOCK // max(1, words.size))
    for lo in range(0, n, step):
        diff = points[lo : lo + step, None, :] - words[None, :, :]
        d = (diff * diff).sum(axis=-1)
        best = d.argmin(axis=1)
        idx[lo : lo + step] = best
        dist[lo : lo + step] = d[np.arange(best.size), best]
    return idx, dist


def _check_frames(frames, cb: Codebook) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.dim:
        raise ContractError(f"expected frames of dimension {cb.dim}, got shape {x.shape}")
    bad = ~np.isfinite(x)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ContractError(f"non-finite input value {x[row, col]} at frame {row}, dimension {col}")
    return x


def quantize_batch(frames, cb: Codebook, count_usage: bool = True) -> BatchQuantization:
    """Greedy RVQ of an (N, D) array of frames."""
    x = _check_frames(frames, cb)
    n, K = x.shape[0], cb.stages
    indices = np.empty((n, K), dtype=np.int64)
    stage_inputs = np.empty((K, n, cb.dim), dtype=np.float64)
    recon = np.zeros_like(x)
    residual = x
    for k in range(K):
        words = cb.codewords[k].astype(np.float64)
        stage_inputs[k] = residual
        idx, _ = nearest(residual, words)
        indices[:, k] = idx
        chosen = words[idx]
        residual = residual - chosen
        recon = recon + chosen
        if count_usage:
            cb.usage_count[k] += np.bincount(idx, minlength=cb.size)
    return BatchQuantization(indices, recon, stage_inputs, residual)


def dequantize_batch(indices, cb: Codebook) -> np.ndarray:
    """Sum of the selected codewords for an (N, K) index array."""
    idx = np.asarray(indices)
    if idx.ndim != 2 or idx.shape[1] != cb.stages:
        raise ContractError(f"expected (N, {cb.stages}) indices, got shape {idx.shape}")
    recon = np.zeros((idx.shape[0], cb.dim), dtype=np.float64)
    for k in range(cb.stages):
        col = idx[:, k]
        if col.size and (col.min() < 0 or col.max() >= cb.size):
            frame = int(np.flatnonzero((col < 0) | (col >= cb.size))[0])
            raise ContractError(
                f"index {int(col[frame])} out of range [0, {cb.size}) at stage {k}, frame {frame}"
            )
        recon = recon + cb.codewords[k].astype(np.float64)[col]
    return recon


def quantize_frame(h, cb: Codebook) -> QuantizationResult:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1:
        raise ContractError(f"expected a single frame vector, got shape {h.shape}")
    out = quantize_batch(h[None, :], cb)
    loss = float(out.frame_losses()[0])
    return QuantizationResult(
        tokens=tuple(int(i) for i in out.indices[0]),
        reconstruction=out.reconstruction[0],
        residual_norms=[float(v) for v in out.residual_norms()[0]],
        code_loss=loss,
        commit_loss=loss,
    )


def dequantize_frame(tokens, cb: Codebook) -> np.ndarray:
    tokens = list(tokens)
    if len(tokens) != cb.stages:
        raise ContractError(f"expected {cb.stages} indices, got {len(tokens)}")
    for k, v in enumerate(tokens):
        if not 0 <= v < cb.size:
            raise ContractError(f"index {v} out of range [0, {cb.size}) at stage {k}")
    return dequantize_batch(np.array([tokens], dtype=np.int64), cb)[0]


def quantize_sequence(features, cb: Codebook) -> list:
    """Frame-by-frame quantization; errors carry the offending frame index."""
    features = np.asarray(features, dtype=np.float64)
    if features.size == 0:
        return []
    if features.ndim != 2:
        raise ContractError(f"expected (T, D) features, got shape {features.shape}")
    results = []
    for t, frame in enumerate(features):
        try:
            results.append(quantize_frame(frame, cb))
        except ContractError as exc:
            raise ContractError(f"frame {t}: {exc}") from exc
    return results


def vq_losses(h, hq):
    """Codebook and commitment losses, ``(||sg(h) - hq||^2, ||h - sg(hq)||^2)``.

    Both arguments may carry leading axes (e.g. stages of an RVQ); the
    squared errors are summed over everything.
    """
    h = np.asarray(h, dtype=np.float64)
    hq = np.asarray(hq, dtype=np.float64)
    if h.shape != hq.shape:
        raise ContractError(f"shape mismatch {h.shape} vs {hq.shape}")
    sq = float(((h - hq) ** 2).sum())
    return sq, sq


def vq_loss_grads(h, hq):
    """Gradients ``(d code_loss / d hq, d commit_loss / d h)``; the stop-gradient side gets none."""
    h = np.asarray(h, dtype=np.float64)
    hq = np.asarray(hq, dtype=np.float64)
    return 2.0 * (hq - h), 2.0 * (h - hq)


def straight_through(h, hq) -> np.ndarray:
    """Forward value of ``h + sg(hq - h)``: the quantized vector."""
    h = np.asarray(h, dtype=np.float64)
    hq = np.asarray(hq, dtype=np.float64)
    if h.shape != hq.shape:
        raise ContractError(f"shape mismatch {h.shape} vs {hq.shape}")
    return hq.copy()


def straight_through_backward(grad_out) -> np.ndarray:
    # identity: the quantizer is skipped in the backward pass
    return np.array(grad_out, dtype=np.float64, copy=True)


def codebook_grad(batch: BatchQuantization, cb: Codebook) -> np.ndarray:
    """Gradient of the summed code loss w.r.t. every codeword, shape (K, V, D)."""
    grad = np.zeros(cb.codewords.shape, dtype=np.float64)
    for k in range(cb.stages):
        chosen = cb.codewords[k].astype(np.float64)[batch.indices[:, k]]
        np.add.at(grad[k], batch.indices[:, k], 2.0 * (chosen - batch.stage_inputs[k]))
    return grad


def commit_grad(batch: BatchQuantization) -> np.ndarray:
    """Gradient of the summed commitment loss w.r.t. the (N, D) input frames.

    Stage k's input is ``h`` minus constant codewords, so every stage
    contributes ``2 (r_{k-1} - c_k) = 2 r_k`` directly.
    """
    grad = 2.0 * batch.residual
    for k in range(1, batch.stage_inputs.shape[0]):
        grad = grad + 2.0 * batch.stage_inputs[k]
    return grad


def kmeans(samples, V: int, iters: int = 20, seed: int = 0):
    """Lloyd's k-means from a seeded draw of distinct samples.

    Returns ``(centroids, objective_history)`` where the history holds the
    within-cluster squared distance after each assignment step. When there
    are fewer distinct samples than ``V`` the surplus centroids are copies of
    random samples jittered by uniform noise in [-1e-4, 1e-4].
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError("k-means needs a non-empty (N, D) sample array")
    if V < 1:
        raise ContractError(f"V must be >= 1, got {V}")
    rng = np.random.default_rng(seed)
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] >= V:
        centroids = distinct[rng.choice(distinct.shape[0], size=V, replace=False)]
    else:
        extra = distinct[rng.integers(distinct.shape[0], size=V - distinct.shape[0])]
        extra = extra + rng.uniform(-1e-4, 1e-4, size=extra.shape)
        centroids = np.concatenate([distinct, extra])

    history = []
    assign = None
    for _ in range(max(1, iters)):
        new_assign, dist = nearest(x, centroids)
        history.append(float(dist.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=V)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        filled = counts > 0
        # empty clusters keep their previous centroid
        centroids[filled] = sums[filled] / counts[filled, None]
    return centroids, history


def kmeans_init(samples, V: int, iters: int = 20, seed: int = 0) -> np.ndarray:
    return kmeans(samples, V, iters, seed)[0]


def init_codebook(features, stages: int, size: int, iters: int = 20, seed: int = 0) -> Codebook:
    """Stage-wise k-means: stage 1 on the features, later stages on residuals."""
    x = np.asarray(features, dtype=np.float64)
    residual = x
    words = []
    for k in range(stages):
        c = kmeans_init(residual, size, iters, seed + k).astype(np.float32).astype(np.float64)
        idx, _ = nearest(residual, c)
        residual = residual - c[idx]
        words.append(c)
    return Codebook(np.stack(words))


def reset_dead_codes(cb: Codebook, recent_inputs, threshold: int = 1, seed: int = 0) -> int:
    """Replace every codeword used fewer than ``threshold`` times since the last reset.

    Replacements are drawn uniformly from ``recent_inputs`` (the encoder
    outputs) for stage 1 and from their residuals, recomputed with the
    already-refreshed earlier stages, for later stages. All usage counters
    are zeroed afterwards.
    """
    x = np.asarray(recent_inputs, dtype=np.float64).reshape(-1, cb.dim)
    rng = np.random.default_rng(seed)
    resets = 0
    residual = x
    for k in range(cb.stages):
        dead = np.flatnonzero(cb.usage_count[k] < threshold)
        if dead.size:
            if x.shape[0] == 0:
                raise ContractError("dead codes found but no recent inputs to draw replacements from")
            picks = rng.integers(x.shape[0], size=dead.size)
            cb.codewords[k, dead] = residual[picks]
            resets += int(dead.size)
        if x.shape[0]:
            words = cb.codewords[k].astype(np.float64)
            idx, _ = nearest(residual, words)
            residual = residual - words[idx]
    cb.reset_usage()
    return resets


class EmaUpdater:
    """Exponential-moving-average codebook update (alternative to gradient descent)."""

    def __init__(self, cb: Codebook, decay: float = 0.99, eps: float = 1e-5):
        self.cb = cb
        self.decay = decay
        self.eps = eps
        self.cluster_size = np.ones(cb.codewords.shape[:2], dtype=np.float64)
        self.embed_sum = cb.codewords.astype(np.float64).copy()

    def update(self, batch: BatchQuantization) -> None:
        d = self.decay
        K, V, _ = self.cb.codewords.shape
        for k in range(K):
            idx = batch.indices[:, k]
            counts = np.bincount(idx, minlength=V).astype(np.float64)
            sums = np.zeros((V, self.cb.dim))
            np.add.at(sums, idx, batch.stage_inputs[k])
            self.cluster_size[k] = d * self.cluster_size[k] + (1 - d) * counts
            self.embed_sum[k] = d * self.embed_sum[k] + (1 - d) * sums
            self.cb.codewords[k] = self.embed_sum[k] / self._smoothed(k)[:, None]

    def _smoothed(self, k):
        V = self.cb.size
        n = self.cluster_size[k].sum()
        return (self.cluster_size[k] + self.eps) / (n + V * self.eps) * n

    def sync(self) -> None:
        """Re-derive the running sums from the current codewords (after an external edit)."""
        for k in range(self.cb.stages):
            self.embed_sum[k] = self.cb.codewords[k].astype(np.float64) * self._smoothed(k)[:, None]
