"""Codeword histograms, empirical entropy and bitrate accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from acom.errors import ContractError


def index_bits(V: int) -> int:
    """ceil(log2 V) computed exactly on integers."""
    if V < 1:
        raise ContractError(f"codebook size must be positive, got {V}")
    return (int(V) - 1).bit_length()


def raw_bitrate(R, K: int, V: int):
    """Bits per second before entropy coding: R * K * ceil(log2 V)."""
    if R <= 0 or K <= 0:
        raise ContractError("frame rate and number of codebooks must be positive")
    return R * K * index_bits(V)


def entropy_bitrate(R, total_entropy):
    """Entropy-coded rate bound R * H(C), in bits per second."""
    if total_entropy < 0:
        raise ContractError(f"entropy must be non-negative, got {total_entropy}")
    return R * total_entropy


@dataclass
class CodeHistogram:
    counts: np.ndarray
    total_frames: int = 0

    @classmethod
    def empty(cls, stages: int, size: int) -> "CodeHistogram":
        return cls(np.zeros((stages, size), dtype=np.int64), 0)

    @property
    def stages(self) -> int:
        return self.counts.shape[0]

    @property
    def size(self) -> int:
        return self.counts.shape[1]

    def frequencies(self) -> np.ndarray:
        if self.total_frames == 0:
            raise ContractError("frequencies undefined for an empty histogram")
        return self.counts / self.total_frames

    def merge(self, other: "CodeHistogram") -> "CodeHistogram":
        if other.counts.shape != self.counts.shape:
            raise ContractError("histogram shapes differ")
        return CodeHistogram(self.counts + other.counts, self.total_frames + other.total_frames)


def accumulate(hist: CodeHistogram, tokens) -> CodeHistogram:
    """Return a new histogram with the (N, K) ``tokens`` counted in."""
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.size == 0:
        return CodeHistogram(hist.counts.copy(), hist.total_frames)
    tok = tok.reshape(-1, hist.stages) if tok.ndim != 2 else tok
    if tok.shape[1] != hist.stages:
        raise ContractError(f"expected {hist.stages} indices per frame, got {tok.shape[1]}")
    bad = (tok < 0) | (tok >= hist.size)
    if bad.any():
        frame, stage = np.argwhere(bad)[0]
        raise ContractError(
            f"index {tok[frame, stage]} out of range [0, {hist.size}) at stage {stage}, frame {frame}"
        )
    counts = hist.counts.copy()
    for k in range(hist.stages):
        counts[k] += np.bincount(tok[:, k], minlength=hist.size)
    return CodeHistogram(counts, hist.total_frames + tok.shape[0])


def stage_entropy(counts) -> float:
    """Shannon entropy in bits of one count vector (0 log 0 = 0)."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n <= 0:
        raise ContractError("entropy undefined for zero total count")
    p = counts[counts > 0] / n
    return float(-(p * np.log2(p)).sum()) + 0.0  # + 0.0 turns -0.0 into 0.0


def empirical_entropy(hist: CodeHistogram):
    """Per-stage entropies (bits/frame) and their sum."""
    if hist.total_frames == 0:
        raise ContractError("entropy undefined: histogram holds no frames")
    per_stage = np.array([stage_entropy(row) for row in hist.counts])
    return per_stage, float(per_stage.sum())


@dataclass
class RateReport:
    frame_rate: float
    raw_bps: float
    per_stage_entropy: list = field(default_factory=list)
    total_entropy: float = 0.0
    entropy_bps: float = 0.0
    frames: int = 0

    def format_line(self) -> str:
        per = ",".join(f"{h:.6f}" for h in self.per_stage_entropy)
        return (
            f"raw_bps={self.raw_bps:.6f} entropy_per_stage={per} "
            f"entropy_total={self.total_entropy:.6f} entropy_bps={self.entropy_bps:.6f} "
            f"frames={self.frames}"
        )


def rate_report(hist: CodeHistogram, frame_rate) -> RateReport:
    per_stage, total = empirical_entropy(hist)
    return RateReport(
        frame_rate=float(frame_rate),
        raw_bps=float(raw_bitrate(frame_rate, hist.stages, hist.size)),
        per_stage_entropy=[float(h) for h in per_stage],
        total_entropy=total,
        entropy_bps=float(entropy_bitrate(frame_rate, total)),
        frames=hist.total_frames,
    )


def parse_stats_line(line: str) -> dict:
    """Inverse of :meth:`RateReport.format_line`."""
    out = {}
    for item in line.split():
        key, _, value = item.partition("=")
        if key == "entropy_per_stage":
            out[key] = [float(v) for v in value.split(",") if v]
        elif key == "frames":
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out
