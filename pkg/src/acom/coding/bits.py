"""MSB-first bit packing helpers built on numpy."""

import numpy as np

_CHUNK = 1 << 16


def _expand(values, widths):
    total = int(widths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.uint8)
    owner = np.repeat(np.arange(values.size), widths)
    starts = np.cumsum(widths) - widths
    shift = (widths[owner] - 1 - (np.arange(total) - starts[owner])).astype(np.uint64)
    return ((values[owner] >> shift) & np.uint64(1)).astype(np.uint8)


def pack_msb(values, widths):
    """Concatenate ``values[i]`` written on ``widths[i]`` bits, MSB first.

    Returns ``(payload, nbits)``; the payload is zero-padded to a byte boundary.
    """
    values = np.asarray(values, dtype=np.uint64).ravel()
    widths = np.broadcast_to(np.asarray(widths, dtype=np.int64), values.shape).ravel()
    out = []
    carry = np.zeros(0, dtype=np.uint8)
    nbits = 0
    for lo in range(0, values.size, _CHUNK):
        bits = _expand(values[lo : lo + _CHUNK], widths[lo : lo + _CHUNK])
        nbits += bits.size
        bits = np.concatenate([carry, bits])
        full = bits.size - bits.size % 8
        out.append(np.packbits(bits[:full]).tobytes())
        carry = bits[full:]
    if carry.size:
        out.append(np.packbits(carry).tobytes())
    return b"".join(out), nbits


def unpack_fixed(data: bytes, count: int, width: int) -> np.ndarray:
    """Read ``count`` unsigned integers of ``width`` bits each, MSB first."""
    if width == 0 or count == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count * width)
    weights = (1 << np.arange(width - 1, -1, -1)).astype(np.int64)
    return bits.reshape(count, width).astype(np.int64) @ weights


def padding_is_zero(data: bytes, nbits: int) -> bool:
    used = nbits % 8
    if used == 0 or not data:
        return True
    return data[-1] & ((1 << (8 - used)) - 1) == 0
