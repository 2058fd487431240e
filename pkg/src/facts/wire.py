"""Length-prefixed binary framing for the client/server protocol.

Each frame is ``[length: u32 BE][type: u8][payload]`` where ``length``
counts the type byte plus the payload.  Multi-byte integers on the wire are
big-endian; the table snapshot keeps its own little-endian header.
"""

from __future__ import annotations

import hashlib
import socket
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

__all__ = [
    "ABORT_INDEX",
    "AuditCode",
    "ComplaintCode",
    "ComplaintRejected",
    "EpochInfo",
    "FrameStream",
    "MsgType",
    "ProtocolError",
    "decode_hello",
    "encode_hello",
    "pack_frame",
]

MAX_FRAME = 64 << 20
ABORT_INDEX = 0xFFFFFFFFFFFFFFFF
ID_FIELD = 32
HELLO_LEN = 1 + ID_FIELD + 32

_LEN = struct.Struct(">I")


class ProtocolError(Exception):
    """Malformed, unexpected, or oversized frame."""


class ComplaintRejected(Exception):
    """The server refused a complaint (quota, epoch cap, or timeout)."""

    def __init__(self, code: "ComplaintCode") -> None:
        super().__init__(code.name)
        self.code = code


class MsgType(IntEnum):
    HELLO = 0x00
    ORIGINATE_REQ = 0x01
    ORIGINATE_RESP = 0x02
    COMPLAIN_BEGIN = 0x03
    COMPLAIN_SNAPSHOT = 0x04
    COMPLAIN_INDEX = 0x05
    COMPLAIN_RESULT = 0x06
    AUDIT_REQ = 0x07
    AUDIT_RESP = 0x08
    TABLE_SYNC_REQ = 0x09
    TABLE_SYNC_RESP = 0x0A
    EPOCH_INFO = 0x0B


class ComplaintCode(IntEnum):
    ACCEPTED = 0
    REJECTED = 1
    ABORTED = 2
    QUOTA = 3
    EPOCH_FULL = 4
    TIMEOUT = 5
    NO_SESSION = 6


class AuditCode(IntEnum):
    OK = 0
    REJECTED = 1


def pack_frame(mtype: int, payload: bytes = b"") -> bytes:
    if 1 + len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds limit")
    return _LEN.pack(1 + len(payload)) + bytes([mtype]) + payload


def token_digest(token: bytes) -> bytes:
    return hashlib.sha3_256(token).digest()


def encode_hello(user_id: str, token: bytes) -> bytes:
    raw = user_id.encode("utf-8")
    if not 0 < len(raw) <= ID_FIELD:
        raise ProtocolError(f"user id must encode to 1..{ID_FIELD} bytes")
    return bytes([len(raw)]) + raw.ljust(ID_FIELD, b"\0") + token_digest(token)


def decode_hello(payload: bytes) -> tuple[str, bytes]:
    if len(payload) != HELLO_LEN:
        raise ProtocolError(f"hello must be {HELLO_LEN} bytes, got {len(payload)}")
    n = payload[0]
    if not 0 < n <= ID_FIELD:
        raise ProtocolError("bad user id length in hello")
    return payload[1:1 + n].decode("utf-8"), payload[1 + ID_FIELD:]


@dataclass(frozen=True)
class EpochInfo:
    """Per-connection epoch configuration sent after a successful hello."""

    epoch_id: int
    s: int
    u: int
    v: int
    n: int
    t: int
    quota: int
    lambda_stat: int
    user_key: bytes
    server_pubkey: bytes

    _FMT = struct.Struct(">QQQQQQII32s32s")

    def pack(self) -> bytes:
        return self._FMT.pack(
            self.epoch_id, self.s, self.u, self.v, self.n, self.t,
            self.quota, self.lambda_stat, self.user_key, self.server_pubkey,
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "EpochInfo":
        if len(payload) != cls._FMT.size:
            raise ProtocolError(f"epoch info must be {cls._FMT.size} bytes")
        return cls(*cls._FMT.unpack(payload))


class FrameStream:
    """Frame reader/writer over a connected socket.

    Reads keep partial data across calls, so a socket timeout never loses
    bytes.  When ``transcript`` is a list, every frame is appended to it as
    ``(direction, type, frame_length)``.
    """

    def __init__(self, sock: socket.socket, transcript: Optional[list] = None) -> None:
        self.sock = sock
        self._buf = bytearray()
        self.transcript = transcript

    def send(self, mtype: int, payload: bytes = b"") -> None:
        frame = pack_frame(mtype, payload)
        self.sock.sendall(frame)
        if self.transcript is not None:
            self.transcript.append(("out", int(mtype), len(frame)))

    def _fill(self, n: int) -> None:
        while len(self._buf) < n:
            chunk = self.sock.recv(max(65536, n - len(self._buf)))
            if not chunk:
                raise ConnectionError("peer closed the connection")
            self._buf += chunk

    def recv(self) -> tuple[MsgType, bytes]:
        self._fill(_LEN.size)
        (length,) = _LEN.unpack_from(self._buf)
        if not 1 <= length <= MAX_FRAME:
            raise ProtocolError(f"frame length {length} out of range")
        self._fill(_LEN.size + length)
        mtype = self._buf[_LEN.size]
        payload = bytes(self._buf[_LEN.size + 1:_LEN.size + length])
        del self._buf[:_LEN.size + length]
        try:
            kind = MsgType(mtype)
        except ValueError as exc:
            raise ProtocolError(f"unknown message type 0x{mtype:02x}") from exc
        if self.transcript is not None:
            self.transcript.append(("in", int(kind), _LEN.size + length))
        return kind, payload

    def expect(self, *types: MsgType) -> tuple[MsgType, bytes]:
        kind, payload = self.recv()
        if kind not in types:
            raise ProtocolError(f"expected {[t.name for t in types]}, got {kind.name}")
        return kind, payload

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def pack_index(i: Optional[int]) -> bytes:
    return struct.pack(">Q", ABORT_INDEX if i is None or i < 0 else i)


def unpack_index(payload: bytes) -> Optional[int]:
    if len(payload) != 8:
        raise ProtocolError("complaint index payload must be 8 bytes")
    (i,) = struct.unpack(">Q", payload)
    return None if i == ABORT_INDEX else i


def pack_originate_resp(e: bytes, sigma: bytes) -> bytes:
    return struct.pack(">H", len(e)) + e + sigma


def unpack_originate_resp(payload: bytes) -> tuple[bytes, bytes]:
    if len(payload) < 2:
        raise ProtocolError("originate response too short")
    (elen,) = struct.unpack_from(">H", payload)
    if len(payload) != 2 + elen + 64:
        raise ProtocolError("originate response length mismatch")
    return payload[2:2 + elen], payload[2 + elen:]


def pack_audit_req(tag_bytes: bytes, x: bytes) -> bytes:
    return struct.pack(">H", len(tag_bytes)) + tag_bytes + x


def unpack_audit_req(payload: bytes) -> tuple[bytes, bytes]:
    if len(payload) < 2:
        raise ProtocolError("audit request too short")
    (tlen,) = struct.unpack_from(">H", payload)
    if len(payload) < 2 + tlen:
        raise ProtocolError("audit request truncated")
    return payload[2:2 + tlen], payload[2 + tlen:]
