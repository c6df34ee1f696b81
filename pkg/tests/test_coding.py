import heapq
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acom.coding import (
    Bitstream,
    CodeHistogram,
    HuffmanTable,
    accumulate,
    canonical_codes,
    code_lengths_for,
    decode_stream,
    empirical_entropy,
    encode_stream,
    entropy_bitrate,
    huffman_lengths,
    index_bits,
    kraft_sum,
    mean_code_length,
    raw_bitrate,
    rate_report,
    read_tokens,
)
from acom.coding.bits import pack_msb, padding_is_zero, unpack_fixed
from acom.coding.huffman import decode_symbols, encode_symbols
from acom.coding.rates import parse_stats_line, stage_entropy
from acom.errors import CodebookMismatchError, ContractError, FramingError
from acom.rvq import Codebook


def bit_string(values, width):
    return "".join(format(int(v), f"0{width}b") for v in values)


def optimal_cost(counts):
    """Minimum total weighted code length by the classic two-smallest merge."""
    heap = [c for c in counts if c > 0]
    if len(heap) == 1:
        return heap[0]
    heapq.heapify(heap)
    cost = 0
    while len(heap) > 1:
        a, b = heapq.heappop(heap), heapq.heappop(heap)
        cost += a + b
        heapq.heappush(heap, a + b)
    return cost


@pytest.mark.parametrize("V, bits", [(1, 0), (2, 1), (3, 2), (4, 2), (32, 5), (1000, 10), (1024, 10), (1025, 11), (8192, 13)])
def test_index_bits(V, bits):
    assert index_bits(V) == bits


def test_rates_basic():
    assert raw_bitrate(25, 2, 1024) == 500
    assert raw_bitrate(40, 1, 32) == 200
    assert entropy_bitrate(25, 5.2648) == pytest.approx(131.62)
    with pytest.raises(ContractError):
        entropy_bitrate(25, -0.1)
    with pytest.raises(ContractError):
        raw_bitrate(0, 1, 4)


def test_pack_msb_matches_string_oracle(rng):
    for width in (1, 3, 5, 10, 13):
        vals = rng.integers(0, 2**width, size=37)
        payload, nbits = pack_msb(vals, width)
        assert nbits == 37 * width
        bits = bit_string(vals, width)
        bits += "0" * (-len(bits) % 8)
        assert payload == int(bits, 2).to_bytes(len(bits) // 8, "big")
        assert np.array_equal(unpack_fixed(payload, 37, width), vals)


def test_pack_two_tokens_in_three_bytes():
    payload, nbits = pack_msb([1023, 0], 10)
    assert nbits == 20 and payload == bytes([0xFF, 0xC0, 0x00])
    assert padding_is_zero(payload, nbits)
    assert not padding_is_zero(b"\xff\xc0\x01", nbits)


def test_pack_across_chunks(rng):
    vals = rng.integers(0, 8, size=(1 << 16) + 11)
    payload, _ = pack_msb(vals, 3)
    assert np.array_equal(unpack_fixed(payload, vals.size, 3), vals)


def test_histogram_and_entropy():
    hist = accumulate(CodeHistogram.empty(2, 4), [[0, 1], [1, 1], [2, 1], [3, 1]])
    per, total = empirical_entropy(hist)
    assert per.tolist() == [2.0, 0.0]
    assert total == 2.0
    assert hist.frequencies()[0].tolist() == [0.25] * 4
    merged = hist.merge(hist)
    assert merged.total_frames == 8 and merged.counts[1, 1] == 8
    with pytest.raises(ContractError, match="stage 1, frame 0"):
        accumulate(hist, [[0, 4]])
    with pytest.raises(ContractError):
        empirical_entropy(CodeHistogram.empty(1, 4))


def test_uniform_1024_is_ten_bits():
    tok = np.repeat(np.arange(1024), 3)[:, None]
    per, total = empirical_entropy(accumulate(CodeHistogram.empty(1, 1024), tok))
    assert per[0] == pytest.approx(10.0, abs=1e-12)


@given(st.lists(st.integers(0, 50), min_size=1, max_size=40).filter(lambda c: sum(c) > 0))
def test_entropy_bounds(counts):
    h = stage_entropy(counts)
    used = sum(1 for c in counts if c)
    assert -1e-12 <= h <= math.log2(used) + 1e-9


def test_rate_report_line_roundtrip():
    hist = accumulate(CodeHistogram.empty(2, 1024), np.stack([np.arange(1024), np.zeros(1024, int)], 1))
    report = rate_report(hist, 25)
    line = report.format_line()
    assert line.startswith("raw_bps=500.000000 entropy_per_stage=10.000000,0.000000 entropy_total=10.000000")
    parsed = parse_stats_line(line)
    assert parsed["entropy_bps"] == 250.0 and parsed["frames"] == 1024


def test_huffman_textbook_example():
    counts = [45, 13, 12, 16, 9, 5]
    lengths = huffman_lengths(counts)
    assert lengths.tolist() == [1, 3, 3, 3, 4, 4]
    assert int((lengths * counts).sum()) == 224
    codes = canonical_codes(lengths)
    assert [format(int(c), f"0{l}b") for c, l in zip(codes, lengths)] == [
        "0", "100", "101", "110", "1110", "1111"
    ]


def test_huffman_degenerate_histograms():
    assert huffman_lengths([0, 7, 0]).tolist() == [0, 1, 0]
    with pytest.raises(ContractError):
        huffman_lengths([0, 0])
    table = HuffmanTable(huffman_lengths([0, 7, 0]))
    with pytest.raises(ContractError, match="no code"):
        table.check_encodable([0])


def test_huffman_rejects_over_full_lengths():
    with pytest.raises(ContractError, match="Kraft"):
        HuffmanTable([1, 1, 1])


@given(st.lists(st.integers(0, 1000), min_size=2, max_size=64).filter(lambda c: sum(1 for v in c if v) >= 2))
def test_huffman_is_optimal_and_prefix_free(counts):
    lengths = huffman_lengths(counts)
    assert int((lengths * np.array(counts)).sum()) == optimal_cost(counts)
    assert kraft_sum(lengths) == pytest.approx(1.0)
    codes = canonical_codes(lengths)
    words = [format(int(codes[s]), f"0{lengths[s]}b") for s in np.flatnonzero(lengths)]
    for a in words:
        for b in words:
            assert a == b or not b.startswith(a)


@given(st.lists(st.integers(1, 500), min_size=2, max_size=200))
def test_mean_length_within_one_bit_of_entropy(counts):
    lengths = huffman_lengths(counts)
    h = stage_entropy(counts)
    L = mean_code_length(lengths, counts)
    assert h - 1e-9 <= L < h + 1


@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.sampled_from([2, 5, 32, 300]))
def test_symbol_roundtrip(seed, K, V):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(V, 0.3))
    sym = rng.choice(V, size=(int(rng.integers(1, 200)), K), p=p)
    tables = [HuffmanTable.from_counts(np.bincount(sym[:, k], minlength=V)) for k in range(K)]
    payload, nbits = encode_symbols(sym, tables)
    out, used = decode_symbols(payload, tables, sym.size)
    assert used == nbits
    assert np.array_equal(np.array(out).reshape(sym.shape), sym)


def test_long_codes_take_the_slow_path():
    counts = [2**i for i in range(40)]  # Fibonacci-like skew gives lengths up to 39
    table = HuffmanTable.from_counts(counts)
    assert table.max_length == 39
    sym = np.arange(40)[:, None]
    payload, _ = encode_symbols(sym, [table])
    out, _ = decode_symbols(payload, [table], 40)
    assert out == list(range(40))


def test_decode_truncated_huffman_payload():
    table = HuffmanTable.from_counts([5, 1, 1, 1])
    payload, _ = encode_symbols(np.array([[1], [2], [3]]), [table])
    with pytest.raises(FramingError):
        decode_symbols(payload[:-1], [table], 3)


def test_code_lengths_for_smooths_unseen():
    lengths = code_lengths_for([[10, 0, 0, 5]])
    assert (lengths > 0).all()
    assert (code_lengths_for([[10, 0, 0, 5]], smooth=False)[0] == [1, 0, 0, 1]).all()


@pytest.fixture
def cb():
    return Codebook.random(dim=4, size=1024, stages=2, seed=5)


@pytest.mark.parametrize("mode", ["raw", "huffman"])
def test_bitstream_roundtrip(cb, rng, mode):
    tok = rng.integers(0, 1024, size=(300, 2))
    tok[:, 1] = rng.integers(0, 7, size=300)
    stream = encode_stream(tok, cb, mode, frame_rate=25)
    data = stream.to_bytes()
    assert np.array_equal(decode_stream(data, cb), tok)
    assert np.array_equal(read_tokens(data), tok)
    back = Bitstream.from_bytes(data)
    assert (back.mode, back.num_frames, back.frame_rate) == (mode, 300, 25.0)


def test_raw_bitstream_layout(cb):
    data = encode_stream([[1023, 0]], cb, "raw", frame_rate=25).to_bytes()
    assert data[:4] == b"ACOM"
    assert len(data) == 30 + 3
    assert data[30:] == bytes([0xFF, 0xC0, 0x00])
    assert int.from_bytes(data[22:30], "little") == cb.hash()


def test_empty_bitstreams(cb):
    for mode in ("raw", "huffman"):
        data = encode_stream(np.zeros((0, 2), int), cb, mode, frame_rate=25).to_bytes()
        assert decode_stream(data, cb).shape == (0, 2)


def test_bitstream_errors(cb, rng):
    tok = rng.integers(0, 1024, size=(10, 2))
    data = encode_stream(tok, cb, "raw", frame_rate=25).to_bytes()
    other = Codebook.random(dim=4, size=1024, stages=2, seed=6)
    with pytest.raises(CodebookMismatchError, match="codebook mismatch"):
        decode_stream(data, other)
    with pytest.raises(FramingError, match="truncated"):
        decode_stream(data[:-1], cb)
    with pytest.raises(FramingError, match="trailing"):
        decode_stream(data + b"\0", cb)
    with pytest.raises(FramingError, match="header"):
        decode_stream(data[:10], cb)
    with pytest.raises(FramingError, match="magic"):
        decode_stream(b"XCOM" + data[4:], cb)
    odd = encode_stream(tok[:1], cb, "raw", frame_rate=25).to_bytes()
    with pytest.raises(FramingError, match="padding"):
        decode_stream(odd[:-1] + bytes([odd[-1] | 1]), cb)
    with pytest.raises(ContractError, match="stage 1, frame 0"):
        encode_stream([[0, 1024]], cb, frame_rate=25)


def test_huffman_stream_with_supplied_tables(cb, rng):
    train = rng.integers(0, 16, size=(500, 2))
    lengths = code_lengths_for([np.bincount(train[:, k], minlength=1024) for k in range(2)])
    tok = rng.integers(0, 1024, size=(40, 2))
    stream = encode_stream(tok, cb, "huffman", frame_rate=25, code_lengths=lengths)
    assert np.array_equal(decode_stream(stream.to_bytes(), cb), tok)
