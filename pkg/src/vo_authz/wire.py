"""Message framing shared by both services and the client.

Every message is a 4-byte big-endian unsigned length (at most 1 MiB)
followed by that many bytes of UTF-8 JSON with a top-level ``type``
field. File payloads are the sole exception: raw bytes of a
pre-declared size follow a ``data_header`` frame (downloads) or a
``command`` frame (uploads).
"""

from __future__ import annotations

import json
import socket
import struct

MAX_FRAME_BYTES = 1_048_576
_CHUNK = 65536


class WireError(Exception):
    """Base class for transport errors."""


class ProtocolError(WireError):
    """The peer violated the framing or message rules."""


class FrameTooLarge(ProtocolError):
    """A frame exceeded the 1 MiB limit."""


class ConnectionClosedError(WireError):
    """The peer closed the connection mid-message."""


class ChannelTimeout(WireError):
    """No data arrived within the channel's timeout."""


class Channel:
    """A framed duplex channel over a connected socket."""

    def __init__(self, sock: socket.socket, timeout: float | None = None):
        self._sock = sock
        if timeout is not None:
            sock.settimeout(timeout)

    def send_frame(self, message: dict) -> None:
        data = json.dumps(message, sort_keys=True, separators=(",", ":")).encode("utf-8")
        if len(data) > MAX_FRAME_BYTES:
            raise FrameTooLarge("outgoing frame of %d bytes" % len(data))
        self._sock.sendall(struct.pack(">I", len(data)) + data)

    def recv_frame(self) -> dict:
        header = self._recv_exact(4)
        (length,) = struct.unpack(">I", header)
        if length > MAX_FRAME_BYTES:
            raise FrameTooLarge("peer declared a frame of %d bytes" % length)
        data = self._recv_exact(length)
        try:
            message = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError("frame is not valid JSON: %s" % exc) from exc
        if not isinstance(message, dict) or not isinstance(message.get("type"), str):
            raise ProtocolError("frame lacks a string 'type' field")
        return message

    def send_bytes(self, data: bytes) -> None:
        self._sock.sendall(data)

    def recv_bytes(self, size: int) -> bytes:
        return self._recv_exact(size)

    def recv_bytes_to(self, size: int, writer) -> None:
        """Stream exactly ``size`` payload bytes into ``writer.write``."""
        remaining = size
        while remaining > 0:
            chunk = self._recv_some(min(_CHUNK, remaining))
            writer.write(chunk)
            remaining -= len(chunk)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def _recv_some(self, limit: int) -> bytes:
        try:
            chunk = self._sock.recv(limit)
        except socket.timeout as exc:
            raise ChannelTimeout(str(exc)) from exc
        if not chunk:
            raise ConnectionClosedError("peer closed the connection")
        return chunk

    def _recv_exact(self, size: int) -> bytes:
        buf = bytearray()
        while len(buf) < size:
            buf.extend(self._recv_some(min(_CHUNK, size - len(buf))))
        return bytes(buf)


def connect(address: tuple[str, int], timeout: float | None = 10.0) -> Channel:
    sock = socket.create_connection(address, timeout=timeout)
    return Channel(sock, timeout=timeout)


def parse_address(text: str) -> tuple[str, int]:
    """Parse ``host:port`` (bare ``:port`` binds all interfaces)."""
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError("expected host:port, got %r" % text)
    return host or "0.0.0.0", int(port)
