"""Self-describing container for RVQ token streams.

Layout (little-endian integers)::

    "ACOM" | version u8 | flags u8 | K u16 | V u32 | D u16
    | frame_rate_millihz u32 | num_frames u32 | codebook_hash u64
    | [huffman only: K * V code lengths, u8] | payload | zero padding

Raw payloads hold every index on ceil(log2 V) bits, MSB first, frame-major
then stage order. Huffman payloads use one canonical table per stage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from acom.coding.bits import pack_msb, padding_is_zero, unpack_fixed
from acom.coding.huffman import HuffmanTable, decode_symbols, encode_symbols, huffman_lengths
from acom.coding.rates import index_bits
from acom.errors import CodebookMismatchError, ContractError, FramingError

MAGIC = b"ACOM"
VERSION = 1
FLAG_HUFFMAN = 0x01
HEADER = struct.Struct("<4sBBHIHIIQ")

RAW = "raw"
HUFFMAN = "huffman"


def millihz(frame_rate) -> int:
    return int(round(float(frame_rate) * 1000))


@dataclass
class Bitstream:
    mode: str
    stages: int
    size: int
    dim: int
    frame_rate_millihz: int
    num_frames: int
    codebook_hash: int
    payload: bytes
    code_lengths: np.ndarray | None = None

    @property
    def frame_rate(self) -> float:
        return self.frame_rate_millihz / 1000.0

    def header_bytes(self) -> bytes:
        flags = FLAG_HUFFMAN if self.mode == HUFFMAN else 0
        head = HEADER.pack(
            MAGIC,
            VERSION,
            flags,
            self.stages,
            self.size,
            self.dim,
            self.frame_rate_millihz,
            self.num_frames,
            self.codebook_hash,
        )
        if self.mode == HUFFMAN:
            head += np.asarray(self.code_lengths, dtype=np.uint8).tobytes()
        return head

    def to_bytes(self) -> bytes:
        return self.header_bytes() + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER.size:
            raise FramingError("truncated bitstream header", offset=len(data))
        magic, version, flags, K, V, D, rate, n, cb_hash = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FramingError(f"bad magic {magic!r}", offset=0)
        if version != VERSION:
            raise FramingError(f"unsupported bitstream version {version}", offset=4)
        if flags & ~FLAG_HUFFMAN:
            raise FramingError(f"unknown flags 0x{flags:02x}", offset=5)
        pos = HEADER.size
        lengths = None
        mode = RAW
        if flags & FLAG_HUFFMAN:
            mode = HUFFMAN
            end = pos + K * V
            if len(data) < end:
                raise FramingError("truncated Huffman tables", offset=len(data))
            lengths = np.frombuffer(data[pos:end], dtype=np.uint8).reshape(K, V).astype(np.int64)
            pos = end
        return cls(mode, K, V, D, rate, n, cb_hash, bytes(data[pos:]), lengths)

    def header_size(self) -> int:
        return HEADER.size + (self.stages * self.size if self.mode == HUFFMAN else 0)


def encode_stream(tokens, cb, mode: str = RAW, *, frame_rate, code_lengths=None) -> Bitstream:
    """Serialize an (N, K) token array.

    In Huffman mode the per-stage tables come from ``code_lengths`` when
    given (e.g. built from training statistics), otherwise from the token
    stream's own histogram.
    """
    if mode not in (RAW, HUFFMAN):
        raise ContractError(f"unknown mode {mode!r}")
    K, V = cb.stages, cb.size
    tok = np.asarray(tokens, dtype=np.int64).reshape(-1, K)
    if tok.size and (tok.min() < 0 or tok.max() >= V):
        frame, stage = np.argwhere((tok < 0) | (tok >= V))[0]
        raise ContractError(f"index {tok[frame, stage]} out of range at stage {stage}, frame {frame}")
    n = tok.shape[0]
    lengths = None
    if mode == RAW:
        payload, _ = pack_msb(tok.ravel(), index_bits(V))
    else:
        if code_lengths is not None:
            lengths = np.asarray(code_lengths, dtype=np.int64).reshape(K, V)
        elif n:
            lengths = np.stack([huffman_lengths(np.bincount(tok[:, k], minlength=V)) for k in range(K)])
        else:
            lengths = np.zeros((K, V), dtype=np.int64)
        tables = [HuffmanTable(row) for row in lengths] if n else []
        payload, _ = encode_symbols(tok, tables) if n else (b"", 0)
    return Bitstream(mode, K, V, cb.dim, millihz(frame_rate), n, cb.hash(), payload, lengths)


def decode_stream(stream, cb, *, cb_hash=None) -> np.ndarray:
    """Recover the (N, K) token array; ``cb_hash`` skips rehashing a known codebook."""
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = Bitstream.from_bytes(bytes(stream))
    expected = cb.hash() if cb_hash is None else cb_hash
    if stream.codebook_hash != expected:
        raise CodebookMismatchError(
            f"codebook mismatch: stream references {stream.codebook_hash:016x}, loaded {expected:016x}"
        )
    if (stream.stages, stream.size, stream.dim) != (cb.stages, cb.size, cb.dim):
        raise CodebookMismatchError("codebook mismatch: header shape differs from loaded codebook")
    return read_tokens(stream)


def read_tokens(stream) -> np.ndarray:
    """Payload to (N, K) tokens using only the header; no codebook check."""
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = Bitstream.from_bytes(bytes(stream))
    K, V, n = stream.stages, stream.size, stream.num_frames
    base = stream.header_size()
    data = stream.payload
    if stream.mode == RAW:
        width = index_bits(V)
        nbits = n * K * width
        need = (nbits + 7) // 8
        if len(data) < need:
            raise FramingError(f"truncated payload: need {need} bytes, have {len(data)}", offset=base + len(data))
        if len(data) > need:
            raise FramingError("trailing bytes after payload", offset=base + need)
        tok = unpack_fixed(data, n * K, width).reshape(n, K)
        if tok.size and tok.max() >= V:
            raise FramingError("index out of range in payload", offset=base)
    else:
        if n == 0:
            if data:
                raise FramingError("trailing bytes after payload", offset=base)
            return np.zeros((0, K), dtype=np.int64)
        try:
            tables = [HuffmanTable(row) for row in stream.code_lengths]
        except ContractError as exc:
            raise FramingError(f"invalid Huffman tables: {exc}", offset=HEADER.size) from exc
        symbols, nbits = decode_symbols(data, tables, n * K, base_offset=base)
        need = (nbits + 7) // 8
        if len(data) > need:
            raise FramingError("trailing bytes after payload", offset=base + need)
        tok = np.array(symbols, dtype=np.int64).reshape(n, K)
    if not padding_is_zero(data, nbits):
        raise FramingError("non-zero padding bits", offset=base + len(data) - 1)
    return tok
