"""Client transports linking agents to the consolidation server.

Both transports serialize every message through the framed codec so the
byte accounting (and therefore the metrics table) is identical:

* inproc — encode, decode, dispatch to the server in memory.
* stream — the same frames travel over a pair of reliable in-process byte
  pipes; the server consumes its inbound stream frame by frame.

A fault hook may drop outgoing messages to model transport failure; the
affected call raises TransportFailure and the agent applies its degraded-
mode contract.
"""

from __future__ import annotations

from ..errors import AdaptflyError, ProtocolError
from .messages import FleetMessage, decode_message, encode_message, read_frame

__all__ = ["TransportFailure", "BytePipe", "InprocClient", "StreamClient"]


class TransportFailure(AdaptflyError):
    """The transport dropped a message (injected fault)."""


class BytePipe:
    """Reliable in-process byte stream with read-exactly semantics."""

    def __init__(self):
        self._buf = bytearray()

    def write(self, data: bytes) -> None:
        self._buf.extend(data)

    def read(self, n: int) -> bytes:
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def __len__(self) -> int:
        return len(self._buf)


class _BaseClient:
    """Shared fault handling and byte accounting."""

    def __init__(self, fault_hook=None):
        self._fault_hook = fault_hook
        self.bytes_sent = 0
        self.bytes_received = 0

    def _outgoing(self, msg: FleetMessage) -> bytes:
        frame = encode_message(msg)
        if self._fault_hook is not None and self._fault_hook(msg):
            raise TransportFailure(f"dropped {type(msg).__name__}")
        self.bytes_sent += len(frame)
        return frame


class InprocClient(_BaseClient):
    """Direct dispatch; messages still round-trip the codec."""

    def __init__(self, server, fault_hook=None):
        super().__init__(fault_hook)
        self._server = server

    def send(self, msg: FleetMessage) -> None:
        frame = self._outgoing(msg)
        self._server.handle(decode_message(frame))

    def request(self, msg: FleetMessage) -> FleetMessage:
        frame = self._outgoing(msg)
        response = self._server.handle(decode_message(frame))
        if response is None:
            raise ProtocolError(f"{type(msg).__name__} expected a response")
        reply = encode_message(response)
        self.bytes_received += len(reply)
        return decode_message(reply)


class StreamClient(_BaseClient):
    """Framed protocol over two byte pipes, pumped in lockstep."""

    def __init__(self, server, fault_hook=None):
        super().__init__(fault_hook)
        self._server = server
        self.to_server = BytePipe()
        self.from_server = BytePipe()

    def _pump_server(self) -> None:
        # Lockstep: the server drains everything we just wrote.
        while len(self.to_server):
            frame = read_frame(self.to_server.read)
            response = self._server.handle(decode_message(frame))
            if response is not None:
                self.from_server.write(encode_message(response))

    def send(self, msg: FleetMessage) -> None:
        self.to_server.write(self._outgoing(msg))
        self._pump_server()

    def request(self, msg: FleetMessage) -> FleetMessage:
        self.to_server.write(self._outgoing(msg))
        self._pump_server()
        if not len(self.from_server):
            raise ProtocolError(f"{type(msg).__name__} expected a response")
        frame = read_frame(self.from_server.read)
        self.bytes_received += len(frame)
        return decode_message(frame)
