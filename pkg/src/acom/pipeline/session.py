"""Device and cloud endpoints of a split-inference session."""

from __future__ import annotations

import logging
import threading

import numpy as np

from acom.errors import CodebookMismatchError, ContractError, FramingError, ProtocolError
from acom.pipeline import protocol as P
from acom.pipeline.transport import DEFAULT_TIMEOUT, Listener, LoopbackTransport, SocketTransport, recv_message
from acom.rvq import dequantize_batch

log = logging.getLogger(__name__)

_NACK_TEXT = {
    P.NACK_CODEBOOK: "codebook mismatch",
    P.NACK_MODEL: "model mismatch",
    P.NACK_SHAPE: "codebook mismatch: shape differs",
    P.NACK_VERSION: "unsupported session parameters",
}


def device_tokens(x, model, cb) -> np.ndarray:
    """(N, K) tokens for a (T, F) input; an empty input yields no frames."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and x.shape[0] == 0:
        return np.zeros((0, cb.stages), dtype=np.int64)
    return model.forward_device(x, cb, quantize=True)


def run_device_session(x, model, cb, transport, *, code_lengths=None, batch=False,
                       config: P.SessionConfig | None = None, timeout=DEFAULT_TIMEOUT) -> int:
    """HELLO, wait for ACK, one FRAME per quantized frame, END.

    Returns the number of frames sent. A NACK raises
    :class:`CodebookMismatchError` before any FRAME goes out; a transport
    failure raises :class:`ProtocolError` whose ``frames_sent`` attribute
    holds the partial count.
    """
    config = config or P.SessionConfig.for_artifacts(model, cb, code_lengths=code_lengths, batch=batch)
    tokens = device_tokens(x, model, cb)
    tables = config.tables()
    transport.send(P.encode_message(P.HELLO, config.to_payload()))
    kind, payload = recv_message(transport, timeout)
    if kind == P.NACK:
        reason = payload[0] if payload else 0
        raise CodebookMismatchError(_NACK_TEXT.get(reason, "codebook mismatch"))
    if kind != P.ACK:
        raise ProtocolError(f"expected ACK, got {P.MESSAGE_TYPES[kind]}")
    sent = 0
    try:
        if batch and len(tokens):
            transport.send(P.serialize_batch(0, tokens, cb.size, tables))
            sent = len(tokens)
        else:
            for seq, frame in enumerate(tokens):
                transport.send(P.serialize_frame(seq, frame, cb.size, tables))
                sent += 1
        transport.send(P.encode_message(P.END))
    except ProtocolError as exc:
        exc.frames_sent = sent
        raise
    log.debug("device sent %d frames", sent)
    return sent


def await_result(transport, timeout=DEFAULT_TIMEOUT) -> bytes:
    """Block for the RESULT message; returns its raw f32 payload."""
    kind, payload = recv_message(transport, timeout)
    if kind != P.RESULT:
        raise ProtocolError(f"expected RESULT, got {P.MESSAGE_TYPES[kind]}")
    P.decode_result(payload)
    return payload


def _check_hello(config: P.SessionConfig, model, cb):
    if (config.stages, config.size, config.dim) != (cb.stages, cb.size, cb.dim):
        return P.NACK_SHAPE
    if config.codebook_hash != cb.hash():
        return P.NACK_CODEBOOK
    if config.model_hash != model.hash():
        return P.NACK_MODEL
    return 0


def run_cloud_session(transport, model, cb, *, timeout=DEFAULT_TIMEOUT,
                      received: list | None = None) -> np.ndarray:
    """Serve one session: validate HELLO, collect frames in order, reply RESULT.

    Returns the cloud logits as float32, exactly the values sent in RESULT.
    If ``received`` is given, the (N, K) tokens decoded from the wire are
    appended to it.
    """
    kind, payload = recv_message(transport, timeout)
    if kind != P.HELLO:
        raise ProtocolError(f"expected HELLO, got {P.MESSAGE_TYPES[kind]}")
    try:
        config = P.SessionConfig.from_payload(payload)
    except FramingError as exc:
        transport.send(P.encode_message(P.NACK, bytes([P.NACK_VERSION])))
        raise ProtocolError(f"{_NACK_TEXT[P.NACK_VERSION]}: {exc}") from exc
    reason = _check_hello(config, model, cb)
    if reason:
        transport.send(P.encode_message(P.NACK, bytes([reason])))
        raise CodebookMismatchError(_NACK_TEXT[reason])
    tables = config.tables()
    transport.send(P.encode_message(P.ACK))

    frames, expected = [], 0
    while True:
        kind, payload = recv_message(transport, timeout)
        if kind == P.END:
            break
        if kind != P.FRAME:
            raise ProtocolError(f"unexpected {P.MESSAGE_TYPES[kind]} during a session")
        if config.batch:
            seq, tok = P.batch_from_payload(payload, cb.stages, cb.size, tables)
        else:
            seq, tok = P.frame_from_payload(payload, cb.stages, cb.size, tables)
            tok = tok[None, :]
        if seq != expected:
            what = "duplicate" if seq < expected else "out-of-order"
            raise ProtocolError(f"{what} frame: got seq {seq}, expected {expected}")
        frames.append(tok)
        expected += len(tok)

    tokens = np.concatenate(frames) if frames else np.zeros((0, cb.stages), np.int64)
    if received is not None:
        received.append(tokens)
    logits = cloud_logits(tokens, model, cb)
    transport.send(P.encode_result(logits))
    return logits


def cloud_logits(tokens, model, cb) -> np.ndarray:
    """Dequantize, run layers M+1..L, and round to the f32 wire precision."""
    if len(tokens) == 0:
        return np.zeros(0, dtype=np.float32)
    out = model.forward_cloud(dequantize_batch(tokens, cb))
    return np.asarray(out, dtype="<f4").ravel()


def local_reference(x, model, cb):
    """Tokens and RESULT payload of split inference computed in one process."""
    tokens = device_tokens(x, model, cb)
    return tokens, cloud_logits(tokens, model, cb).tobytes()


def _parse_endpoint(spec: str):
    host, _, port = spec.rpartition(":")
    if not host or not port.isdigit():
        raise ContractError(f"expected host:port, got {spec!r}")
    return host, int(port)


def simulate(x, model, cb, transport: str = "loopback", *, code_lengths=None, batch=False,
             timeout=DEFAULT_TIMEOUT) -> dict:
    """Run device and cloud endpoints concurrently over ``transport``.

    ``transport`` is ``"loopback"`` or ``"host:port"`` (the cloud listens
    there; port 0 picks a free one). Returns the tokens, frames sent, RESULT
    payload and device-side wire bytes; ``tokens`` are the ones the cloud
    decoded from the wire.
    """
    outcome: dict = {}
    errors: list = []
    received: list = []

    def cloud(end):
        try:
            run_cloud_session(end, model, cb, timeout=timeout, received=received)
        except Exception as exc:  # surfaced to the caller below
            errors.append(exc)
        finally:
            end.close()

    listener = None
    if transport == "loopback":
        device_end, cloud_end = LoopbackTransport.pair()
        worker = threading.Thread(target=cloud, args=(cloud_end,), daemon=True)
        worker.start()
    else:
        listener = Listener(*_parse_endpoint(transport))

        def serve():
            try:
                end = listener.accept(timeout)
            except Exception as exc:
                errors.append(exc)
                return
            cloud(end)

        worker = threading.Thread(target=serve, daemon=True)
        worker.start()
        device_end = SocketTransport.connect(*listener.address, timeout=timeout)
    try:
        outcome["frames_sent"] = run_device_session(x, model, cb, device_end, code_lengths=code_lengths,
                                                    batch=batch, timeout=timeout)
        outcome["result"] = await_result(device_end, timeout)
        outcome["bytes_sent"] = device_end.bytes_sent
    except Exception:
        device_end.close()
        worker.join(timeout)
        if errors:
            raise errors[0]
        raise
    finally:
        device_end.close()
        worker.join(timeout)
        if listener is not None:
            listener.close()
    if errors:
        raise errors[0]
    outcome["tokens"] = received[0]
    return outcome
