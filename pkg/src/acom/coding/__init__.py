"""Rate accounting and entropy coding of RVQ tokens."""

from acom.coding.bitstream import HUFFMAN, RAW, Bitstream, decode_stream, encode_stream, read_tokens
from acom.coding.huffman import (
    HuffmanTable,
    canonical_codes,
    code_lengths_for,
    huffman_lengths,
    kraft_sum,
    mean_code_length,
    smooth_counts,
)
from acom.coding.rates import (
    CodeHistogram,
    RateReport,
    accumulate,
    empirical_entropy,
    entropy_bitrate,
    index_bits,
    raw_bitrate,
    rate_report,
)

__all__ = [
    "HUFFMAN",
    "RAW",
    "Bitstream",
    "CodeHistogram",
    "HuffmanTable",
    "RateReport",
    "accumulate",
    "canonical_codes",
    "code_lengths_for",
    "decode_stream",
    "empirical_entropy",
    "encode_stream",
    "entropy_bitrate",
    "huffman_lengths",
    "index_bits",
    "kraft_sum",
    "mean_code_length",
    "raw_bitrate",
    "rate_report",
    "read_tokens",
    "smooth_counts",
]
