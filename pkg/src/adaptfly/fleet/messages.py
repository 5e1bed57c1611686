"""Wire protocol between agents and the consolidation server.

Every message travels as a frame: a 4-byte big-endian unsigned payload
length followed by a UTF-8 JSON payload carrying a "type" discriminator.
decode_message(encode_message(m)) == m for every variant.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ProtocolError
from ..prompts import TokenPrompt

__all__ = [
    "UploadPrompt",
    "RegisterDeferred",
    "Query",
    "QueryResponse",
    "RefineTick",
    "FleetMessage",
    "encode_message",
    "decode_message",
    "read_frame",
]

HEADER_SIZE = 4


@dataclass(frozen=True)
class UploadPrompt:
    """A freshly distilled prompt headed for the global pool."""

    key: tuple[float, ...]
    value: TokenPrompt
    timestamp: int
    agent_id: str
    domain_tag: str | None = None


@dataclass(frozen=True)
class RegisterDeferred:
    """Key-only registration; the prompt is distilled on demand later."""

    query: tuple[float, ...]
    agent_id: str
    timestamp: int
    domain_tag: str | None = None


@dataclass(frozen=True)
class Query:
    """Top-N retrieval request against the pool."""

    query: tuple[float, ...]
    n: int
    request_id: int


@dataclass(frozen=True)
class QueryResponse:
    """Ordered retrieval results as serialized pool entries."""

    request_id: int
    entries: tuple[dict, ...]


@dataclass(frozen=True)
class RefineTick:
    """Consolidation trigger; carries no payload."""


FleetMessage = UploadPrompt | RegisterDeferred | Query | QueryResponse | RefineTick


def _floats(xs) -> tuple[float, ...]:
    return tuple(float(x) for x in np.asarray(xs, dtype=np.float64).ravel())


def _payload(msg: FleetMessage) -> dict:
    if isinstance(msg, UploadPrompt):
        return {
            "type": "upload_prompt",
            "key": list(msg.key),
            "value": msg.value.to_dict(),
            "timestamp": msg.timestamp,
            "agent_id": msg.agent_id,
            "domain_tag": msg.domain_tag,
        }
    if isinstance(msg, RegisterDeferred):
        return {
            "type": "register_deferred",
            "query": list(msg.query),
            "agent_id": msg.agent_id,
            "timestamp": msg.timestamp,
            "domain_tag": msg.domain_tag,
        }
    if isinstance(msg, Query):
        return {
            "type": "query",
            "query": list(msg.query),
            "n": msg.n,
            "request_id": msg.request_id,
        }
    if isinstance(msg, QueryResponse):
        return {
            "type": "query_response",
            "request_id": msg.request_id,
            "entries": list(msg.entries),
        }
    if isinstance(msg, RefineTick):
        return {"type": "refine_tick"}
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def encode_message(msg: FleetMessage) -> bytes:
    """Frame a message: length header plus compact JSON payload."""
    payload = json.dumps(_payload(msg), separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(payload)) + payload


def _from_payload(d: dict) -> FleetMessage:
    kind = d.get("type")
    if kind == "upload_prompt":
        return UploadPrompt(
            key=_floats(d["key"]),
            value=TokenPrompt.from_dict(d["value"]),
            timestamp=int(d["timestamp"]),
            agent_id=d["agent_id"],
            domain_tag=d.get("domain_tag"),
        )
    if kind == "register_deferred":
        return RegisterDeferred(
            query=_floats(d["query"]),
            agent_id=d["agent_id"],
            timestamp=int(d["timestamp"]),
            domain_tag=d.get("domain_tag"),
        )
    if kind == "query":
        return Query(query=_floats(d["query"]), n=int(d["n"]), request_id=int(d["request_id"]))
    if kind == "query_response":
        return QueryResponse(request_id=int(d["request_id"]), entries=tuple(d["entries"]))
    if kind == "refine_tick":
        return RefineTick()
    raise ProtocolError(f"unknown message type {kind!r}", offset=HEADER_SIZE)


def decode_message(frame: bytes) -> FleetMessage:
    """Parse a single complete frame back into a message."""
    if len(frame) < HEADER_SIZE:
        raise ProtocolError("frame shorter than length header", offset=len(frame))
    (declared,) = struct.unpack(">I", frame[:HEADER_SIZE])
    body = frame[HEADER_SIZE:]
    if len(body) < declared:
        raise ProtocolError(
            f"payload truncated: header declares {declared} bytes, got {len(body)}",
            offset=len(frame),
        )
    if len(body) > declared:
        raise ProtocolError("trailing bytes after payload", offset=HEADER_SIZE + declared)
    try:
        payload = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"invalid JSON payload: {exc}", offset=HEADER_SIZE) from exc
    if not isinstance(payload, dict):
        raise ProtocolError("payload must be a JSON object", offset=HEADER_SIZE)
    return _from_payload(payload)


def read_frame(read) -> bytes:
    """Pull one complete frame from ``read(n) -> bytes`` (a byte stream)."""
    header = read(HEADER_SIZE)
    if len(header) < HEADER_SIZE:
        raise ProtocolError("stream ended inside length header", offset=len(header))
    (declared,) = struct.unpack(">I", header)
    body = read(declared)
    if len(body) < declared:
        raise ProtocolError(
            f"stream ended inside payload ({len(body)}/{declared} bytes)",
            offset=HEADER_SIZE + len(body),
        )
    return header + body
