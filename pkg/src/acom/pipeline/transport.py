"""Reliable ordered byte-stream transports: in-process loopback and TCP."""

from __future__ import annotations

import socket
import threading

from acom.errors import ProtocolError, ProtocolTimeout
from acom.pipeline.protocol import MESSAGE_TYPES, PREFIX

DEFAULT_TIMEOUT = 10.0


class Transport:
    """Byte pipe with blocking exact reads.

    ``bytes_sent`` counts everything written, for wire-rate measurements.
    """

    def __init__(self):
        self.bytes_sent = 0

    def send(self, data: bytes) -> None:
        self._send(bytes(data))
        self.bytes_sent += len(data)

    def recv_exact(self, n: int, timeout: float | None = DEFAULT_TIMEOUT) -> bytes:
        raise NotImplementedError

    def _send(self, data: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _Pipe:
    def __init__(self):
        self.buf = bytearray()
        self.closed = False
        self.cond = threading.Condition()


class LoopbackTransport(Transport):
    """One end of an in-process duplex pipe; build both ends with :meth:`pair`."""

    def __init__(self, inbox: _Pipe, outbox: _Pipe):
        super().__init__()
        self._in = inbox
        self._out = outbox

    @classmethod
    def pair(cls):
        a, b = _Pipe(), _Pipe()
        return cls(a, b), cls(b, a)

    def _send(self, data):
        with self._out.cond:
            if self._out.closed:
                raise ProtocolError("send on a closed loopback pipe")
            self._out.buf += data
            self._out.cond.notify_all()

    def recv_exact(self, n, timeout=DEFAULT_TIMEOUT):
        with self._in.cond:
            ok = self._in.cond.wait_for(lambda: len(self._in.buf) >= n or self._in.closed, timeout)
            if len(self._in.buf) >= n:
                out = bytes(self._in.buf[:n])
                del self._in.buf[:n]
                return out
            if not ok:
                raise ProtocolTimeout(f"no data for {timeout} s")
            raise ProtocolError("peer closed the connection")

    def close(self):
        for pipe in (self._in, self._out):
            with pipe.cond:
                pipe.closed = True
                pipe.cond.notify_all()


class SocketTransport(Transport):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> "SocketTransport":
        return cls(socket.create_connection((host, port), timeout=timeout))

    def _send(self, data):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ProtocolError(f"send failed: {exc}") from exc

    def recv_exact(self, n, timeout=DEFAULT_TIMEOUT):
        self.sock.settimeout(timeout)
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(n - got)
            except socket.timeout as exc:
                raise ProtocolTimeout(f"no data for {timeout} s") from exc
            except OSError as exc:
                raise ProtocolError(f"receive failed: {exc}") from exc
            if not chunk:
                raise ProtocolError("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Listener:
    """Accepts one cloud-side connection at a time."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.create_server((host, port))

    @property
    def address(self):
        return self.sock.getsockname()[:2]

    def accept(self, timeout: float | None = DEFAULT_TIMEOUT) -> SocketTransport:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout as exc:
            raise ProtocolTimeout("no device connected") from exc
        return SocketTransport(conn)

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def recv_message(transport: Transport, timeout: float | None = DEFAULT_TIMEOUT):
    """Read one ``(type, payload)`` message."""
    head = transport.recv_exact(PREFIX.size, timeout)
    kind, length = PREFIX.unpack(head)
    if kind not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type 0x{kind:02x}")
    return kind, transport.recv_exact(length, timeout) if length else b""
