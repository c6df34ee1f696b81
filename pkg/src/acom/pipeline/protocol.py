"""Wire protocol v1 for split inference.

Every message is ``type u8 | length u32 LE | payload``. FRAME payloads are
``seq u32 LE`` followed by the frame's indices, MSB first, zero padded to a
byte boundary. In batch mode a FRAME carries ``seq u32 | count u32`` and
``count`` consecutive frames packed back to back, padded once at the end.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from acom.coding.bits import pack_msb, padding_is_zero, unpack_fixed
from acom.coding.huffman import HuffmanTable, decode_symbols, encode_symbols
from acom.coding.rates import index_bits
from acom.errors import ContractError, FramingError

HELLO = 0x01
ACK = 0x02
NACK = 0x03
FRAME = 0x04
END = 0x05
RESULT = 0x06
MESSAGE_TYPES = {HELLO: "HELLO", ACK: "ACK", NACK: "NACK", FRAME: "FRAME", END: "END", RESULT: "RESULT"}

PREFIX = struct.Struct("<BI")
SEQ = struct.Struct("<I")
BATCH = struct.Struct("<II")
HELLO_FIELDS = struct.Struct("<BBHIHIQQ")
PROTOCOL_VERSION = 1

FLAG_HUFFMAN = 0x01
FLAG_BATCH = 0x02

# NACK reason codes
NACK_CODEBOOK = 1
NACK_MODEL = 2
NACK_SHAPE = 3
NACK_VERSION = 4

MAX_SEQ = 2**32 - 1


def encode_message(kind: int, payload: bytes = b"") -> bytes:
    if kind not in MESSAGE_TYPES:
        raise ContractError(f"unknown message type 0x{kind:02x}")
    return PREFIX.pack(kind, len(payload)) + payload


def parse_messages(data: bytes) -> list:
    """Split a complete byte string into ``(type, payload)`` pairs."""
    out, pos = [], 0
    while pos < len(data):
        if len(data) - pos < PREFIX.size:
            raise FramingError("truncated message header", offset=pos)
        kind, length = PREFIX.unpack_from(data, pos)
        if kind not in MESSAGE_TYPES:
            raise FramingError(f"unknown message type 0x{kind:02x}", offset=pos)
        start = pos + PREFIX.size
        if len(data) - start < length:
            raise FramingError(f"message declares {length} payload bytes, {len(data) - start} present", offset=start)
        out.append((kind, bytes(data[start : start + length])))
        pos = start + length
    return out


@dataclass(frozen=True)
class SessionConfig:
    """What both endpoints must agree on before any FRAME is accepted."""

    model_hash: int
    codebook_hash: int
    stages: int
    size: int
    dim: int
    frame_rate_millihz: int
    entropy_mode: bool = False
    batch: bool = False
    code_lengths: np.ndarray | None = None  # (K, V), entropy mode only

    def __post_init__(self):
        if self.entropy_mode:
            if self.code_lengths is None:
                raise ContractError("entropy mode needs per-stage code lengths")
            lengths = np.asarray(self.code_lengths, dtype=np.int64).reshape(self.stages, self.size)
            object.__setattr__(self, "code_lengths", lengths)

    @classmethod
    def for_artifacts(cls, model, cb, *, code_lengths=None, batch=False) -> "SessionConfig":
        return cls(model.hash(), cb.hash(), cb.stages, cb.size, cb.dim,
                   int(round(model.frame_rate() * 1000)), code_lengths is not None, batch, code_lengths)

    def to_payload(self) -> bytes:
        flags = (FLAG_HUFFMAN if self.entropy_mode else 0) | (FLAG_BATCH if self.batch else 0)
        out = HELLO_FIELDS.pack(PROTOCOL_VERSION, flags, self.stages, self.size, self.dim,
                                self.frame_rate_millihz, self.codebook_hash, self.model_hash)
        if self.entropy_mode:
            out += self.code_lengths.astype(np.uint8).tobytes()
        return out

    @classmethod
    def from_payload(cls, payload: bytes) -> "SessionConfig":
        if len(payload) < HELLO_FIELDS.size:
            raise FramingError("truncated HELLO", offset=len(payload))
        version, flags, K, V, D, rate, cb_hash, model_hash = HELLO_FIELDS.unpack_from(payload)
        if version != PROTOCOL_VERSION:
            raise FramingError(f"unsupported protocol version {version}", offset=0)
        if flags & ~(FLAG_HUFFMAN | FLAG_BATCH):
            raise FramingError(f"unknown HELLO flags 0x{flags:02x}", offset=1)
        entropy = bool(flags & FLAG_HUFFMAN)
        expected = HELLO_FIELDS.size + (K * V if entropy else 0)
        if len(payload) != expected:
            raise FramingError(f"HELLO is {len(payload)} bytes, expected {expected}", offset=HELLO_FIELDS.size)
        lengths = None
        if entropy:
            lengths = np.frombuffer(payload[HELLO_FIELDS.size :], dtype=np.uint8).reshape(K, V).astype(np.int64)
        return cls(model_hash, cb_hash, K, V, D, rate, entropy, bool(flags & FLAG_BATCH), lengths)

    def tables(self):
        if not self.entropy_mode:
            return None
        return [HuffmanTable(row) for row in self.code_lengths]


def frame_payload_bytes(stages: int, size: int) -> int:
    return (stages * index_bits(size) + 7) // 8


def wire_bytes_per_frame(stages: int, size: int) -> int:
    """Raw-mode bytes on the wire for one per-frame FRAME message."""
    return PREFIX.size + SEQ.size + frame_payload_bytes(stages, size)


def _check_tokens(tokens, size):
    tok = np.asarray(tokens, dtype=np.int64).ravel()
    if tok.size == 0:
        raise ContractError("a frame needs at least one stage")
    if tok.min() < 0 or tok.max() >= size:
        stage = int(np.argmax((tok < 0) | (tok >= size)))
        raise ContractError(f"index {tok[stage]} out of range at stage {stage}")
    return tok


def _pack_frame(tok, size, tables):
    if tables is None:
        payload, _ = pack_msb(tok, index_bits(size))
    else:
        payload, _ = encode_symbols(tok[None, :], tables)
    return payload


def _unpack_frame(data, pos, stages, size, tables, offset):
    """Decode one padded frame starting at ``data[pos]``; returns (tokens, next pos)."""
    if tables is None:
        need = frame_payload_bytes(stages, size)
        chunk = data[pos : pos + need]
        if len(chunk) < need:
            raise FramingError("truncated frame payload", offset=offset + len(data))
        tok = unpack_fixed(chunk, stages, index_bits(size))
        if tok.max(initial=0) >= size:
            raise FramingError("index out of range in frame", offset=offset + pos)
        nbits = stages * index_bits(size)
    else:
        sym, nbits = decode_symbols(data[pos:], tables, stages, base_offset=offset + pos)
        tok = np.asarray(sym, dtype=np.int64)
        need = (nbits + 7) // 8
        chunk = data[pos : pos + need]
    if not padding_is_zero(chunk, nbits):
        raise FramingError("non-zero padding bits in frame", offset=offset + pos + need - 1)
    return tok, pos + need


def serialize_frame(seq: int, tokens, size: int, tables=None) -> bytes:
    """One FRAME message for a single K-stage token frame."""
    if not 0 <= seq <= MAX_SEQ:
        raise ContractError(f"seq {seq} outside u32 range")
    tok = _check_tokens(tokens, size)
    return encode_message(FRAME, SEQ.pack(seq) + _pack_frame(tok, size, tables))


def deserialize_frame(message: bytes, stages: int, size: int, tables=None):
    """Inverse of :func:`serialize_frame`; returns ``(seq, tokens)``."""
    msgs = parse_messages(message)
    if len(msgs) != 1:
        raise FramingError(f"expected one message, found {len(msgs)}", offset=0)
    kind, payload = msgs[0]
    if kind != FRAME:
        raise FramingError(f"expected FRAME, got {MESSAGE_TYPES[kind]}", offset=0)
    seq, tokens = frame_from_payload(payload, stages, size, tables)
    return seq, tokens


def frame_from_payload(payload: bytes, stages: int, size: int, tables=None):
    if len(payload) < SEQ.size:
        raise FramingError("FRAME payload shorter than its sequence number", offset=PREFIX.size)
    (seq,) = SEQ.unpack_from(payload)
    tok, end = _unpack_frame(payload, SEQ.size, stages, size, tables, PREFIX.size)
    if end != len(payload):
        raise FramingError("FRAME length does not match its contents", offset=PREFIX.size + end)
    return seq, tok


def serialize_batch(seq: int, frames, size: int, tables=None) -> bytes:
    """One FRAME message carrying consecutive frames ``seq .. seq + N - 1``.

    The frames are bit-packed back to back with a single trailing pad.
    """
    frames = np.asarray(frames, dtype=np.int64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ContractError("batch needs a non-empty (N, K) token array")
    if seq + frames.shape[0] - 1 > MAX_SEQ:
        raise ContractError("batch overruns the u32 sequence space")
    for f in frames:
        _check_tokens(f, size)
    if tables is None:
        body, _ = pack_msb(frames.ravel(), index_bits(size))
    else:
        body, _ = encode_symbols(frames, tables)
    return encode_message(FRAME, BATCH.pack(seq, frames.shape[0]) + body)


def batch_from_payload(payload: bytes, stages: int, size: int, tables=None):
    """Returns ``(first seq, (N, K) tokens)``."""
    if len(payload) < BATCH.size:
        raise FramingError("truncated batch header", offset=PREFIX.size)
    seq, count = BATCH.unpack_from(payload)
    body = payload[BATCH.size :]
    base = PREFIX.size + BATCH.size
    if tables is None:
        nbits = count * stages * index_bits(size)
        if len(body) < (nbits + 7) // 8:
            raise FramingError("truncated batch payload", offset=base + len(body))
        tok = unpack_fixed(body, count * stages, index_bits(size))
        if tok.max(initial=0) >= size:
            raise FramingError("index out of range in batch", offset=base)
    else:
        sym, nbits = decode_symbols(body, tables, count * stages, base_offset=base)
        tok = np.asarray(sym, dtype=np.int64)
    need = (nbits + 7) // 8
    if len(body) != need:
        raise FramingError("FRAME length does not match its contents", offset=base + need)
    if not padding_is_zero(body, nbits):
        raise FramingError("non-zero padding bits in batch", offset=base + need - 1)
    return seq, tok.reshape(count, stages)


def encode_result(logits) -> bytes:
    return encode_message(RESULT, np.asarray(logits, dtype="<f4").tobytes())


def decode_result(payload: bytes) -> np.ndarray:
    if len(payload) % 4:
        raise FramingError("RESULT payload is not a whole number of f32 values", offset=PREFIX.size)
    return np.frombuffer(payload, dtype="<f4").copy()
