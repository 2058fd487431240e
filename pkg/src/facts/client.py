"""User side of the protocol: originate, forward, verify, complain, audit.

Client-to-client delivery goes through :class:`LoopbackEEMS`, a stand-in
for an end-to-end encrypted messenger that carries ``(tag, x)`` verbatim
and records only the metadata a real platform would leak (who, to whom,
how many bytes).
"""

from __future__ import annotations

import socket
import threading
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from . import wire
from .ccbf import BitTable, CcbfParams, IndexSet, choose_index, derive_item_set, derive_user_set, item_count
from .tags import Tag, TagError, hash_message, new_salt, verify_tag
from .tipping import TippingCalculator
from .wire import (
    AuditCode,
    ComplaintCode,
    ComplaintRejected,
    EpochInfo,
    FrameStream,
    MsgType,
    ProtocolError,
)

__all__ = [
    "AuditCheck",
    "ComplaintResult",
    "FactsClient",
    "InboxEntry",
    "LoopbackEEMS",
]


class LoopbackEEMS:
    """In-process authenticated messenger stub."""

    def __init__(self) -> None:
        self._boxes: dict[str, deque] = defaultdict(deque)
        self._lock = threading.Lock()
        self.transcript: list[tuple[str, str, int]] = []

    def send(self, sender: str, recipient: str, tag_bytes: bytes, x: bytes) -> None:
        with self._lock:
            self._boxes[recipient].append((sender, tag_bytes, x))
            self.transcript.append((sender, recipient, len(tag_bytes) + len(x)))

    def receive(self, recipient: str) -> list[tuple[str, bytes, bytes]]:
        with self._lock:
            box = self._boxes[recipient]
            items = list(box)
            box.clear()
        return items


@dataclass(frozen=True)
class InboxEntry:
    sender: str
    tag: Tag
    x: bytes

    @property
    def tag_bytes(self) -> bytes:
        return self.tag.to_bytes()


@dataclass(frozen=True)
class ComplaintResult:
    code: ComplaintCode
    index: Optional[int]
    hit_item: bool
    audit: Optional["AuditCheck"] = None

    @property
    def status(self) -> str:
        return {
            ComplaintCode.ACCEPTED: "complained",
            ComplaintCode.ABORTED: "aborted",
        }.get(self.code, "rejected")


@dataclass(frozen=True)
class AuditCheck:
    fired: bool
    count: int
    tau: int
    originator: Optional[str] = None
    audit_ok: Optional[bool] = None


class FactsClient:
    """One user's connection to the server.  Not thread-safe; use one per thread."""

    def __init__(
        self,
        user_id: str,
        token: bytes,
        address: tuple[str, int],
        *,
        server_pubkey: Optional[bytes] = None,
        eems: Optional[LoopbackEEMS] = None,
        rng: Optional[np.random.Generator] = None,
        transcript: Optional[list] = None,
        timeout: Optional[float] = 30.0,
    ) -> None:
        self.id = user_id
        self.token = token
        self.address = address
        self.pinned_pubkey = server_pubkey
        self.eems = eems
        self.rng = rng or np.random.default_rng()
        self.transcript = transcript
        self.timeout = timeout
        self.inbox: list[InboxEntry] = []
        self.info: Optional[EpochInfo] = None
        self.params: Optional[CcbfParams] = None
        self.table: Optional[BitTable] = None
        self._stream: Optional[FrameStream] = None
        self._user_set: Optional[IndexSet] = None
        self._pubkey: Optional[Ed25519PublicKey] = None
        self._tipping: Optional[TippingCalculator] = None
        self._items: dict[bytes, IndexSet] = {}

    # -- connection ------------------------------------------------------------
    def connect(self) -> "FactsClient":
        sock = socket.create_connection(self.address, timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._stream = FrameStream(sock, self.transcript)
        self._stream.send(MsgType.HELLO, wire.encode_hello(self.id, self.token))
        _, payload = self._stream.expect(MsgType.EPOCH_INFO)
        self._apply_epoch(EpochInfo.unpack(payload))
        return self

    def close(self) -> None:
        if self._stream is not None:
            self._stream.close()
            self._stream = None

    def __enter__(self) -> "FactsClient":
        return self.connect() if self._stream is None else self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def stream(self) -> FrameStream:
        if self._stream is None:
            raise ConnectionError("client is not connected")
        return self._stream

    def _apply_epoch(self, info: EpochInfo) -> None:
        if self.pinned_pubkey is not None and info.server_pubkey != self.pinned_pubkey:
            raise ProtocolError("server public key does not match the pinned key")
        params = CcbfParams(info.s, info.u, info.v, info.n, info.t, info.lambda_stat)
        if self.params != params:
            self._tipping = None
            self._items.clear()
        if self.info is None or self.info.user_key != info.user_key or self.params != params:
            self._user_set = None
        self.info = info
        self.params = params
        self._pubkey = Ed25519PublicKey.from_public_bytes(info.server_pubkey)

    def refresh_epoch(self) -> EpochInfo:
        self.stream.send(MsgType.EPOCH_INFO)
        _, payload = self.stream.expect(MsgType.EPOCH_INFO)
        self._apply_epoch(EpochInfo.unpack(payload))
        return self.info

    @property
    def server_pubkey(self) -> Ed25519PublicKey:
        if self._pubkey is None:
            raise ConnectionError("no epoch information yet; call connect()")
        return self._pubkey

    @property
    def user_set(self) -> IndexSet:
        if self._user_set is None:
            self._user_set = derive_user_set(self.id, self.info.user_key, self.params)
        return self._user_set

    def _item_set(self, tag_bytes: bytes) -> IndexSet:
        item = self._items.get(tag_bytes)
        if item is None:
            item = self._items[tag_bytes] = derive_item_set(tag_bytes, self.params)
        return item

    @property
    def tipping(self) -> TippingCalculator:
        if self._tipping is None:
            self._tipping = TippingCalculator.for_params(self.params)
        return self._tipping

    # -- messages --------------------------------------------------------------
    def originate(self, x: bytes) -> Tag:
        r = new_salt()
        self.stream.send(MsgType.ORIGINATE_REQ, hash_message(r, x))
        _, payload = self.stream.expect(MsgType.ORIGINATE_RESP)
        e, sigma = wire.unpack_originate_resp(payload)
        return Tag(r, e, sigma)

    def send_msg(self, to: Optional[str], x: bytes, tag: Optional[Tag] = None) -> tuple[Tag, bytes]:
        """Originate (``tag is None``) or forward ``x`` to ``to``.

        A forward still runs a full origination exchange and throws the
        fresh tag away, so the server sees the same traffic either way.
        """
        fresh = self.originate(x)
        out = fresh if tag is None else tag
        if self.eems is not None and to is not None:
            self.eems.send(self.id, to, out.to_bytes(), x)
        return out, x

    def rcv_msg(self, sender: str, tag: Tag | bytes, x: bytes) -> bool:
        try:
            parsed = tag if isinstance(tag, Tag) else Tag.from_bytes(tag)
        except TagError:
            return False
        if not verify_tag(self.server_pubkey, parsed, x):
            return False
        self.inbox.append(InboxEntry(sender, parsed, x))
        return True

    def receive_all(self) -> list[InboxEntry]:
        if self.eems is None:
            return []
        start = len(self.inbox)
        for sender, tag_bytes, x in self.eems.receive(self.id):
            self.rcv_msg(sender, tag_bytes, x)
        return self.inbox[start:]

    # -- complaints ------------------------------------------------------------
    def begin(self) -> np.ndarray:
        """Open a complaint session; returns the snapshot of the user's bits."""
        self.stream.send(MsgType.COMPLAIN_BEGIN)
        kind, payload = self.stream.expect(MsgType.COMPLAIN_SNAPSHOT, MsgType.COMPLAIN_RESULT)
        if kind is MsgType.COMPLAIN_RESULT:
            raise ComplaintRejected(ComplaintCode(payload[0]))
        u = self.params.u
        if len(payload) != (u + 7) // 8:
            raise ProtocolError(f"snapshot is {len(payload)} bytes, expected {(u + 7) // 8}")
        bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little", count=u)
        return bits.astype(bool)

    def send_index(self, index: Optional[int]) -> ComplaintCode:
        self.stream.send(MsgType.COMPLAIN_INDEX, wire.pack_index(index))
        _, payload = self.stream.expect(MsgType.COMPLAIN_RESULT)
        return ComplaintCode(payload[0])

    def complain(self, entry: InboxEntry, *, audit_after: bool = False) -> ComplaintResult:
        """Increment the complaint count of ``entry``.

        Raises :class:`ComplaintRejected` for QUOTA, EPOCH_FULL and TIMEOUT.
        """
        item = self._item_set(entry.tag_bytes)
        bits = self.begin()
        choice = choose_index(self.user_set.indices, bits, item, self.rng)
        code = self.send_index(None if choice.aborted else choice.written_index)
        if code in (ComplaintCode.TIMEOUT, ComplaintCode.QUOTA, ComplaintCode.EPOCH_FULL):
            raise ComplaintRejected(code)
        index = None if choice.aborted else choice.written_index
        audit = self.check_and_audit(entry) if audit_after and code is ComplaintCode.ACCEPTED else None
        return ComplaintResult(code, index, choice.hit_item, audit)

    # -- counting and audits ---------------------------------------------------
    def sync_table(self) -> BitTable:
        self.stream.send(MsgType.TABLE_SYNC_REQ)
        _, payload = self.stream.expect(MsgType.TABLE_SYNC_RESP)
        self.table = BitTable.from_bytes(payload, enforce_lock=False)
        return self.table

    def check_and_audit(self, entry: InboxEntry, *, refresh: bool = True) -> AuditCheck:
        """Audit ``entry`` if its count has reached the tipping point."""
        if refresh or self.table is None:
            self.sync_table()
        tau = self.tipping.tau(self.table.m)
        count = item_count(self.table, self._item_set(entry.tag_bytes))
        if count < tau:
            return AuditCheck(False, count, tau)
        ok, originator = self.audit(entry.tag, entry.x)
        return AuditCheck(True, count, tau, originator, ok)

    def audit(self, tag: Tag | bytes, x: bytes) -> tuple[bool, Optional[str]]:
        tag_bytes = tag.to_bytes() if isinstance(tag, Tag) else bytes(tag)
        self.stream.send(MsgType.AUDIT_REQ, wire.pack_audit_req(tag_bytes, x))
        _, payload = self.stream.expect(MsgType.AUDIT_RESP)
        if not payload or payload[0] != AuditCode.OK:
            return False, None
        return True, payload[1:].decode("utf-8")
