import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acom.coding import code_lengths_for
from acom.errors import CodebookMismatchError, ContractError, FramingError, ProtocolError, ProtocolTimeout
from acom.model import default_model
from acom.pipeline import (
    LoopbackTransport,
    SessionConfig,
    deserialize_frame,
    encode_message,
    local_reference,
    parse_messages,
    recv_message,
    run_cloud_session,
    run_device_session,
    serialize_batch,
    serialize_frame,
    simulate,
    wire_bytes_per_frame,
)
from acom.pipeline import protocol as P
from acom.rvq import Codebook, init_codebook


@pytest.fixture(scope="module")
def artifacts():
    model = default_model("classification", 16, 10, seed=2)
    h = model.forward_device(np.random.default_rng(0).normal(size=(40, 16, 16)))
    cb = init_codebook(h.reshape(-1, 16), 2, 32, 5, 0)
    return model, cb


def run_cloud_in_thread(end, model, cb, timeout=5.0):
    box = {}

    def target():
        try:
            box["logits"] = run_cloud_session(end, model, cb, timeout=timeout)
        except Exception as exc:
            box["error"] = exc

    t = threading.Thread(target=target, daemon=True)
    t.start()
    return t, box


def test_frame_packing_arithmetic():
    msg = serialize_frame(0, [1023, 0], 1024)
    assert msg[0] == P.FRAME
    assert int.from_bytes(msg[1:5], "little") == 4 + 3
    assert msg[9:] == bytes([0xFF, 0xC0, 0x00])
    assert len(msg) == wire_bytes_per_frame(2, 1024) == 12


@pytest.mark.parametrize("seq", [0, 2**32 - 1])
def test_seq_boundaries(seq):
    assert deserialize_frame(serialize_frame(seq, [5, 6], 8), 2, 8)[0] == seq


def test_frame_roundtrip_many(rng):
    frames = rng.integers(0, 1024, size=(10_000, 2))
    for seq, frame in enumerate(frames):
        s, tok = deserialize_frame(serialize_frame(seq, frame, 1024), 2, 1024)
        assert s == seq and np.array_equal(tok, frame)


@given(st.lists(st.integers(0, 99), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_frame_roundtrip_huffman(tokens, seq):
    lengths = code_lengths_for(np.ones((len(tokens), 100), dtype=int) + np.arange(100))
    tables = [P.HuffmanTable(row) for row in lengths]
    msg = serialize_frame(seq, tokens, 100, tables)
    s, back = deserialize_frame(msg, len(tokens), 100, tables)
    assert s == seq and back.tolist() == tokens


def test_batch_roundtrip(rng):
    frames = rng.integers(0, 64, size=(17, 3))
    msg = serialize_batch(5, frames, 64)
    (kind, payload), = parse_messages(msg)
    seq, back = P.batch_from_payload(payload, 3, 64)
    assert seq == 5 and np.array_equal(back, frames)


def test_framing_errors():
    msg = serialize_frame(3, [1, 2], 16)
    with pytest.raises(FramingError, match="declares"):
        deserialize_frame(msg[:-1], 2, 16)
    with pytest.raises(FramingError, match="unknown message type"):
        deserialize_frame(b"\x09" + msg[1:], 2, 16)
    bad_len = msg[:1] + (len(msg) - 4).to_bytes(4, "little") + msg[5:] + b"\0"
    with pytest.raises(FramingError, match="length does not match"):
        deserialize_frame(bad_len, 2, 16)
    with pytest.raises(FramingError, match="truncated message header"):
        parse_messages(b"\x04\x00")
    with pytest.raises(ContractError):
        serialize_frame(2**32, [1, 2], 16)
    with pytest.raises(ContractError, match="stage 1"):
        serialize_frame(0, [1, 16], 16)


@given(st.lists(st.tuples(st.sampled_from(sorted(P.MESSAGE_TYPES)), st.binary(max_size=20)), max_size=8))
def test_message_stream_parses_uniquely(msgs):
    data = b"".join(encode_message(k, p) for k, p in msgs)
    assert parse_messages(data) == list(msgs)


def test_hello_roundtrip(artifacts):
    model, cb = artifacts
    lengths = code_lengths_for(np.ones((2, 32), dtype=int))
    for cfg in (SessionConfig.for_artifacts(model, cb),
                SessionConfig.for_artifacts(model, cb, code_lengths=lengths, batch=True)):
        back = SessionConfig.from_payload(cfg.to_payload())
        assert back.to_payload() == cfg.to_payload()
        assert back.model_hash == model.hash() and back.frame_rate_millihz == 40_000


def test_loopback_matches_local(artifacts, rng):
    model, cb = artifacts
    x = rng.normal(size=(40, 16))
    tokens, result = local_reference(x, model, cb)
    out = simulate(x, model, cb)
    assert out["result"] == result
    assert np.array_equal(out["tokens"], tokens)
    assert out["frames_sent"] == len(tokens) == 10


def test_socket_matches_loopback(artifacts, rng):
    model, cb = artifacts
    x = rng.normal(size=(33, 16))
    a = simulate(x, model, cb, "loopback")
    b = simulate(x, model, cb, "127.0.0.1:0")
    assert a["result"] == b["result"]
    assert a["bytes_sent"] == b["bytes_sent"]


@pytest.mark.parametrize("batch", [False, True])
def test_entropy_and_batch_modes_agree(artifacts, rng, batch):
    model, cb = artifacts
    x = rng.normal(size=(24, 16))
    lengths = code_lengths_for(np.ones((2, 32), dtype=int))
    ref = local_reference(x, model, cb)[1]
    assert simulate(x, model, cb, code_lengths=lengths, batch=batch)["result"] == ref
    assert simulate(x, model, cb, batch=batch)["result"] == ref


def test_empty_input_session(artifacts):
    model, cb = artifacts
    device, cloud = LoopbackTransport.pair()
    t, box = run_cloud_in_thread(cloud, model, cb)
    sent = run_device_session(np.zeros((0, 16)), model, cb, device)
    t.join(5)
    assert sent == 0 and box["logits"].size == 0
    assert recv_message(device) == (P.RESULT, b"")


def test_wire_bytes_per_frame(artifacts, rng):
    model, cb = artifacts
    out = simulate(rng.normal(size=(64, 16)), model, cb)
    hello = P.PREFIX.size + P.HELLO_FIELDS.size
    assert out["bytes_sent"] == hello + out["frames_sent"] * wire_bytes_per_frame(2, 32) + P.PREFIX.size


def index_bits_on_wire(messages, stages, size, batch):
    """Bits carrying indices: payload bits after the header minus the zero padding."""
    head = P.BATCH if batch else P.SEQ
    total = 0
    for kind, payload in messages:
        assert kind == P.FRAME
        body = payload[head.size :]
        frames = head.unpack_from(payload)[1] if batch else 1
        used = frames * stages * P.index_bits(size)
        assert 0 <= len(body) * 8 - used < 8 and P.padding_is_zero(body, used)
        total += used
    return total


@pytest.mark.parametrize("batch", [False, True])
def test_one_second_at_25_fps_carries_500_index_bits(rng, batch):
    tokens = rng.integers(0, 1024, size=(25, 2))
    if batch:
        msgs = parse_messages(serialize_batch(0, tokens, 1024))
    else:
        msgs = parse_messages(b"".join(serialize_frame(i, t, 1024) for i, t in enumerate(tokens)))
    assert index_bits_on_wire(msgs, 2, 1024, batch) == 500
    if not batch:
        assert sum(P.PREFIX.size + len(p) for _, p in msgs) == 25 * 12


def test_codebook_mismatch_nack_before_frames(artifacts, rng):
    model, cb = artifacts
    other = Codebook(cb.codewords + 1.0)
    device, cloud = LoopbackTransport.pair()
    t, box = run_cloud_in_thread(cloud, model, other)
    with pytest.raises(CodebookMismatchError, match="codebook mismatch"):
        run_device_session(rng.normal(size=(16, 16)), model, cb, device)
    t.join(5)
    assert isinstance(box["error"], CodebookMismatchError)
    assert device.bytes_sent == P.PREFIX.size + P.HELLO_FIELDS.size  # HELLO only


def test_model_mismatch_is_rejected(artifacts, rng):
    model, cb = artifacts
    other = model.copy()
    other.layers[-1].b[0] += 1.0
    device, cloud = LoopbackTransport.pair()
    t, box = run_cloud_in_thread(cloud, other, cb)
    with pytest.raises(CodebookMismatchError, match="model mismatch"):
        run_device_session(rng.normal(size=(16, 16)), model, cb, device)
    t.join(5)


def test_unsupported_hello_gets_version_nack(artifacts):
    model, cb = artifacts
    device, cloud = LoopbackTransport.pair()
    t, box = run_cloud_in_thread(cloud, model, cb)
    hello = bytearray(SessionConfig.for_artifacts(model, cb).to_payload())
    hello[0] = 2  # protocol version
    device.send(encode_message(P.HELLO, bytes(hello)))
    assert recv_message(device) == (P.NACK, bytes([P.NACK_VERSION]))
    t.join(5)
    assert isinstance(box["error"], ProtocolError) and "version" in str(box["error"])


def _handshake(device, model, cb):
    device.send(encode_message(P.HELLO, SessionConfig.for_artifacts(model, cb).to_payload()))
    assert recv_message(device)[0] == P.ACK


@pytest.mark.parametrize("seqs, word", [([0, 1, 1], "duplicate"), ([0, 2], "out-of-order")])
def test_bad_sequence_numbers_rejected(artifacts, seqs, word):
    model, cb = artifacts
    device, cloud = LoopbackTransport.pair()
    t, box = run_cloud_in_thread(cloud, model, cb)
    _handshake(device, model, cb)
    for s in seqs:
        device.send(serialize_frame(s, [0, 0], cb.size))
    device.send(encode_message(P.END))
    t.join(5)
    assert isinstance(box["error"], ProtocolError)
    assert word in str(box["error"])


def test_missing_end_times_out(artifacts):
    model, cb = artifacts
    device, cloud = LoopbackTransport.pair()
    t, box = run_cloud_in_thread(cloud, model, cb, timeout=0.3)
    _handshake(device, model, cb)
    device.send(serialize_frame(0, [0, 0], cb.size))
    t.join(5)
    assert isinstance(box["error"], ProtocolTimeout)


def test_transport_failure_reports_partial_count(artifacts, rng):
    model, cb = artifacts

    class Flaky(LoopbackTransport):
        limit = 3

        def _send(self, data):
            if data[0] == P.FRAME:
                if self.limit == 0:
                    raise ProtocolError("link down")
                self.limit -= 1
            super()._send(data)

    a, b = LoopbackTransport.pair()
    device = Flaky(a._in, a._out)
    t, box = run_cloud_in_thread(b, model, cb, timeout=0.3)
    with pytest.raises(ProtocolError) as info:
        run_device_session(rng.normal(size=(40, 16)), model, cb, device)
    assert info.value.frames_sent == 3
    t.join(5)


def test_socket_peer_close_is_protocol_error():
    from acom.pipeline import Listener, SocketTransport

    with Listener() as listener:
        client = SocketTransport.connect(*listener.address)
        server = listener.accept()
        client.close()
        with pytest.raises(ProtocolError, match="closed"):
            server.recv_exact(1, timeout=1.0)
        server.close()
