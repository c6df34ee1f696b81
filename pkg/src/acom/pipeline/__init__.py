"""Split-inference transport: framed protocol, transports and session endpoints."""

from acom.pipeline.protocol import (
    SessionConfig,
    deserialize_frame,
    encode_message,
    parse_messages,
    serialize_batch,
    serialize_frame,
    wire_bytes_per_frame,
)
from acom.pipeline.session import (
    await_result,
    local_reference,
    run_cloud_session,
    run_device_session,
    simulate,
)
from acom.pipeline.transport import Listener, LoopbackTransport, SocketTransport, recv_message

__all__ = [
    "Listener",
    "LoopbackTransport",
    "SessionConfig",
    "SocketTransport",
    "await_result",
    "deserialize_frame",
    "encode_message",
    "local_reference",
    "parse_messages",
    "recv_message",
    "run_cloud_session",
    "run_device_session",
    "serialize_batch",
    "serialize_frame",
    "simulate",
    "wire_bytes_per_frame",
]
