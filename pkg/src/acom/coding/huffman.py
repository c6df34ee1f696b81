"""Canonical Huffman codes, one table per RVQ stage."""

from __future__ import annotations

import heapq
import itertools

import numpy as np

from acom.coding.bits import pack_msb
from acom.errors import ContractError, FramingError

# Width of the first-level decode lookup; longer codes take the canonical slow path.
_PEEK_BITS = 11
# Codes are packed through uint64; counts below 2**32 never need more than ~46 bits.
MAX_CODE_LENGTH = 64


def huffman_lengths(counts) -> np.ndarray:
    """Code length per symbol from a standard Huffman merge; zero-count symbols get 0.

    Merges are ordered by (weight, creation order) with leaves created in
    symbol order, so the result is a pure function of ``counts``. A lone
    used symbol gets a 1-bit code.
    """
    counts = np.asarray(counts, dtype=np.int64).ravel()
    if (counts < 0).any():
        raise ContractError("negative symbol count")
    used = np.flatnonzero(counts)
    if used.size == 0:
        raise ContractError("cannot build a Huffman code from an all-zero histogram")
    lengths = np.zeros(counts.size, dtype=np.int64)
    if used.size == 1:
        lengths[used[0]] = 1
        return lengths
    order = itertools.count()
    heap = [(int(counts[s]), next(order), [int(s)]) for s in used]
    heapq.heapify(heap)
    while len(heap) > 1:
        w1, _, a = heapq.heappop(heap)
        w2, _, b = heapq.heappop(heap)
        for s in a:
            lengths[s] += 1
        for s in b:
            lengths[s] += 1
        heapq.heappush(heap, (w1 + w2, next(order), a + b))
    return lengths


def canonical_codes(lengths) -> np.ndarray:
    """Assign codes shortest-first, ties by symbol index."""
    lengths = np.asarray(lengths, dtype=np.int64)
    codes = np.zeros(lengths.size, dtype=np.uint64)
    code = 0
    prev = 0
    for sym in sorted(np.flatnonzero(lengths), key=lambda s: (lengths[s], s)):
        length = int(lengths[sym])
        code <<= length - prev
        codes[sym] = code
        code += 1
        prev = length
    return codes


def kraft_sum(lengths) -> float:
    lengths = np.asarray(lengths)
    used = lengths[lengths > 0]
    return float(np.sum(2.0 ** (-used.astype(np.float64))))


def smooth_counts(counts) -> np.ndarray:
    """Give unseen symbols a count of 1 so every symbol is encodable."""
    counts = np.asarray(counts, dtype=np.int64).copy()
    counts[counts == 0] = 1
    return counts


def mean_code_length(lengths, counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    return float((np.asarray(lengths) * counts).sum() / counts.sum())


class HuffmanTable:
    """Canonical code for one alphabet, reconstructible from its lengths alone."""

    def __init__(self, lengths):
        lengths = np.asarray(lengths, dtype=np.int64).ravel()
        if (lengths < 0).any() or (lengths > MAX_CODE_LENGTH).any():
            raise ContractError(f"code lengths must be in [0, {MAX_CODE_LENGTH}]")
        used = lengths[lengths > 0]
        if used.size and kraft_sum(lengths) > 1.0 + 1e-12:
            raise ContractError("code lengths violate the Kraft inequality")
        self.lengths = lengths
        self.codes = canonical_codes(lengths)
        self.max_length = int(used.max()) if used.size else 0
        self._build_decoder()

    @classmethod
    def from_counts(cls, counts) -> "HuffmanTable":
        return cls(huffman_lengths(counts))

    @property
    def size(self) -> int:
        return self.lengths.size

    def _build_decoder(self):
        lengths = self.lengths
        peek = min(self.max_length, _PEEK_BITS) or 1
        fast_sym = [-1] * (1 << peek)
        fast_len = [0] * (1 << peek)
        for sym in np.flatnonzero((lengths > 0) & (lengths <= peek)):
            length = int(lengths[sym])
            start = int(self.codes[sym]) << (peek - length)
            for w in range(start, start + (1 << (peek - length))):
                fast_sym[w] = int(sym)
                fast_len[w] = length
        # canonical tables for the slow path: first code and symbol offset per length
        count = [0] * (self.max_length + 2)
        for length in lengths[lengths > 0]:
            count[int(length)] += 1
        ordered = sorted(np.flatnonzero(lengths), key=lambda s: (lengths[s], s))
        first = [0] * (self.max_length + 2)
        offset = [0] * (self.max_length + 2)
        code = 0
        pos = 0
        for length in range(1, self.max_length + 1):
            first[length] = code
            offset[length] = pos
            code = (code + count[length]) << 1
            pos += count[length]
        self._decoder = (peek, fast_sym, fast_len, first, count, offset, [int(s) for s in ordered])

    def check_encodable(self, symbols) -> None:
        symbols = np.asarray(symbols, dtype=np.int64)
        if symbols.size == 0:
            return
        if symbols.min() < 0 or symbols.max() >= self.size:
            raise ContractError(f"symbol out of range [0, {self.size})")
        missing = self.lengths[symbols] == 0
        if missing.any():
            raise ContractError(f"symbol {int(symbols[np.argmax(missing)])} has no code in this table")


def encode_symbols(symbols, tables) -> tuple:
    """Huffman-code an (N, K) symbol array, frame-major, stage ``k`` with ``tables[k]``.

    Returns ``(payload, nbits)``.
    """
    sym = np.asarray(symbols, dtype=np.int64)
    if sym.size == 0:
        return b"", 0
    sym = sym.reshape(sym.shape[0], -1)
    if sym.shape[1] != len(tables):
        raise ContractError(f"{sym.shape[1]} stages but {len(tables)} tables")
    codes = np.empty(sym.shape, dtype=np.uint64)
    widths = np.empty(sym.shape, dtype=np.int64)
    for k, table in enumerate(tables):
        table.check_encodable(sym[:, k])
        codes[:, k] = table.codes[sym[:, k]]
        widths[:, k] = table.lengths[sym[:, k]]
    return pack_msb(codes.ravel(), widths.ravel())


def decode_symbols(data: bytes, tables, count: int, base_offset: int = 0):
    """Decode ``count`` symbols cycling through ``tables``.

    Returns ``(symbols, nbits_consumed)``. ``base_offset`` is only used to
    report byte offsets relative to an enclosing buffer.
    """
    decoders = [t._decoder for t in tables]
    K = len(decoders)
    out = [0] * count
    nbytes = len(data)
    acc = 0
    nbits = 0
    pos = 0
    consumed = 0
    k = 0
    need = max(max(t.max_length for t in tables), 32)
    for i in range(count):
        peek, fast_sym, fast_len, first, cnt, offset, ordered = decoders[k]
        while nbits < need and pos < nbytes:
            chunk = data[pos : pos + 8]
            acc = (acc << (8 * len(chunk))) | int.from_bytes(chunk, "big")
            nbits += 8 * len(chunk)
            pos += len(chunk)
        if nbits >= peek:
            w = acc >> (nbits - peek)
        else:
            w = acc << (peek - nbits)
        sym = fast_sym[w]
        if sym >= 0:
            length = fast_len[w]
        else:
            sym, length = _slow_decode(acc, nbits, peek, first, cnt, offset, ordered)
            if sym < 0:
                if length > nbits:
                    raise FramingError("truncated Huffman payload", offset=base_offset + nbytes)
                raise FramingError("invalid Huffman code", offset=base_offset + (consumed // 8))
        if length > nbits:
            raise FramingError("truncated Huffman payload", offset=base_offset + nbytes)
        nbits -= length
        acc &= (1 << nbits) - 1
        consumed += length
        out[i] = sym
        k += 1
        if k == K:
            k = 0
    return out, consumed


def _slow_decode(acc, nbits, peek, first, cnt, offset, ordered):
    max_length = len(first) - 2
    for length in range(peek + 1, max_length + 1):
        if length > nbits:
            return -1, length
        code = acc >> (nbits - length)
        idx = code - first[length]
        if 0 <= idx < cnt[length]:
            return ordered[offset[length] + idx], length
    return -1, 0


def code_lengths_for(counts_per_stage, smooth: bool = True) -> np.ndarray:
    """(K, V) code lengths from per-stage counts, e.g. a training histogram."""
    rows = [smooth_counts(c) if smooth else c for c in np.asarray(counts_per_stage)]
    return np.stack([huffman_lengths(r) for r in rows])
