"""The complaint service.

:class:`FactsServer` holds all epoch state and is safe to drive from many
threads at once.  Complaint sessions are serialized through one global
lock with a FIFO ticket queue; a session that outlives its deadline is
reaped by whoever next needs the lock.  :class:`FactsTCPServer` exposes
the same object over the framed wire protocol, one thread per connection.
"""

from __future__ import annotations

import hashlib
import hmac
import itertools
import json
import logging
import os
import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import wire
from .ccbf import BitTable, CcbfParams, IndexSet, derive_item_set, derive_user_set, server_validate_index
from .tags import ServerKeys, TagError, audit_open, public_key_bytes, server_issue_tag
from .tipping import TippingCalculator, choose_params
from .wire import AuditCode, ComplaintCode, ComplaintRejected, EpochInfo, FrameStream, MsgType, ProtocolError

log = logging.getLogger(__name__)

__all__ = [
    "AuditVerdict",
    "ComplaintRejected",
    "ComplaintSession",
    "FactsServer",
    "FactsTCPServer",
    "ServerConfig",
    "SetupError",
    "UserRecord",
    "setup",
]


class SetupError(RuntimeError):
    pass


@dataclass
class ServerConfig:
    n: int = 100_000
    t: int = 100
    quota: int = 10
    lambda_stat: int = 10
    session_deadline: float = 5.0
    epoch_length: float = 0.0  # seconds; 0 disables automatic resets
    host: str = "127.0.0.1"
    port: int = 0
    audit_threshold_check: bool = False
    record_transcripts: bool = False
    params: Optional[CcbfParams] = None  # bypasses choose_params when set

    @classmethod
    def from_file(cls, path: str | os.PathLike, **overrides: Any) -> "ServerConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        if isinstance(data.get("params"), dict):
            data["params"] = CcbfParams(**data["params"])
        return cls(**data)

    def resolve_params(self) -> CcbfParams:
        if self.params is not None:
            return self.params
        return choose_params(self.n, self.t, self.lambda_stat)


@dataclass
class UserRecord:
    id: str
    token_digest: bytes
    complaints_used: int = 0


@dataclass
class ComplaintSession:
    user: str
    positions: np.ndarray
    snapshot: np.ndarray
    started: float
    deadline: float

    def packed_snapshot(self) -> bytes:
        return np.packbits(self.snapshot, bitorder="little").tobytes()


@dataclass(frozen=True)
class AuditVerdict:
    ok: bool
    originator: Optional[str] = None


@dataclass
class SessionRecord:
    user: str
    start: float
    end: float
    outcome: str


class FactsServer:
    """In-memory server state for one deployment; see :meth:`setup`."""

    def __init__(self, config: Optional[ServerConfig] = None, clock=time.monotonic) -> None:
        self.config = config or ServerConfig()
        self.clock = clock
        self.params: Optional[CcbfParams] = None
        self.keys: Optional[ServerKeys] = None
        self.table: Optional[BitTable] = None
        self.users: dict[str, UserRecord] = {}
        self.epoch_id = 0
        self.complaint_total = 0
        self.session_log: list[SessionRecord] = []
        self.audit_log: list[tuple[str, str]] = []
        self._cond = threading.Condition()
        self._queue: deque[int] = deque()
        self._tickets = itertools.count()
        self._session: Optional[ComplaintSession] = None
        self._timed_out: set[str] = set()
        self._user_sets: dict[str, IndexSet] = {}
        self._tipping: Optional[TippingCalculator] = None

    # -- setup ---------------------------------------------------------------
    def setup(self, c: int, user_ids: Optional[list[str]] = None) -> dict[str, bytes]:
        """Generate keys, register ``c`` users, allocate a zeroed table.

        Returns the bearer token of every registered user.
        """
        if self.table is not None:
            raise SetupError("server state already exists for this epoch")
        if c < 1:
            raise SetupError("at least one user is required")
        if user_ids is None:
            user_ids = [f"user{i:05d}" for i in range(c)]
        if len(user_ids) != c or len(set(user_ids)) != c:
            raise SetupError("need exactly c distinct user ids")
        self.params = self.config.resolve_params()
        self.keys = ServerKeys.generate()
        self.table = BitTable(self.params.s)
        tokens = {}
        for uid in user_ids:
            wire.encode_hello(uid, b"")  # validates the id length
            token = os.urandom(32)
            tokens[uid] = token
            self.users[uid] = UserRecord(uid, wire.token_digest(token))
        return tokens

    def _require_setup(self) -> None:
        if self.table is None:
            raise SetupError("server has not been set up")

    # -- identity ------------------------------------------------------------
    def authenticate(self, user: str, token_digest: bytes) -> bool:
        rec = self.users.get(user)
        return rec is not None and hmac.compare_digest(rec.token_digest, token_digest)

    def _record(self, user: str) -> UserRecord:
        try:
            return self.users[user]
        except KeyError:
            raise PermissionError(f"unknown user {user!r}") from None

    @property
    def public_key_bytes(self) -> bytes:
        self._require_setup()
        return public_key_bytes(self.keys.public_key)

    def user_key(self, user: str) -> bytes:
        """Per-user, per-epoch secret from which the user's set is derived."""
        self._require_setup()
        self._record(user)
        msg = self.epoch_id.to_bytes(8, "big") + user.encode()
        return hashlib.blake2b(msg, key=self.keys.derive_key, digest_size=32).digest()

    def user_set(self, user: str) -> IndexSet:
        with self._cond:
            cached = self._user_sets.get(user)
            if cached is None:
                cached = derive_user_set(user, self.user_key(user), self.params)
                self._user_sets[user] = cached
            return cached

    def epoch_info(self, user: str) -> EpochInfo:
        self._require_setup()
        p = self.params
        return EpochInfo(
            self.epoch_id, p.s, p.u, p.v, p.n, p.t, self.config.quota, p.lambda_stat,
            self.user_key(user), self.public_key_bytes,
        )

    # -- origination -----------------------------------------------------------
    def handle_originate(self, user: str, h: bytes) -> tuple[bytes, bytes]:
        self._require_setup()
        self._record(user)
        return server_issue_tag(self.keys, user, h)

    # -- complaints ------------------------------------------------------------
    def _admissible(self, rec: UserRecord) -> None:
        if rec.complaints_used >= self.config.quota:
            raise ComplaintRejected(ComplaintCode.QUOTA)
        if self.complaint_total >= self.params.n:
            raise ComplaintRejected(ComplaintCode.EPOCH_FULL)

    def _reap_locked(self) -> None:
        s = self._session
        if s is not None and self.clock() >= s.deadline:
            log.info("reaping complaint session of %s after deadline", s.user)
            self._timed_out.add(s.user)
            self._end_session_locked("timeout", end=s.deadline)

    def _end_session_locked(self, outcome: str, end: Optional[float] = None) -> None:
        s = self._session
        self.session_log.append(SessionRecord(s.user, s.started, self.clock() if end is None else end, outcome))
        self._session = None
        self.table.release()
        self._cond.notify_all()

    def _wait_locked(self, ready) -> None:
        while True:
            self._reap_locked()
            if ready():
                return
            timeout = None
            if self._session is not None:
                timeout = max(self._session.deadline - self.clock(), 0.0) + 1e-3
            self._cond.wait(timeout)

    def begin_complaint(self, user: str) -> ComplaintSession:
        """Take the table lock for ``user`` and snapshot its positions.

        Blocks in FIFO order while another session is live.  Raises
        :class:`ComplaintRejected` with ``QUOTA`` or ``EPOCH_FULL``.
        """
        self._require_setup()
        rec = self._record(user)
        user_set = self.user_set(user)
        with self._cond:
            self._timed_out.discard(user)
            self._admissible(rec)
            ticket = next(self._tickets)
            self._queue.append(ticket)
            try:
                self._wait_locked(lambda: self._session is None and self._queue[0] == ticket)
            finally:
                self._queue.remove(ticket)
                self._cond.notify_all()
            self._admissible(rec)
            if not self.table.acquire(blocking=False):
                raise RuntimeError("table lock held outside a complaint session")
            now = self.clock()
            positions = user_set.indices
            self._session = ComplaintSession(
                user, positions, self.table.bits[positions].copy(), now, now + self.config.session_deadline
            )
            return self._session

    def finish_complaint(self, user: str, i: Optional[int]) -> ComplaintCode:
        """Apply the index (``None`` aborts) sent for ``user``'s live session."""
        self._require_setup()
        rec = self._record(user)
        with self._cond:
            self._reap_locked()
            s = self._session
            if s is None or s.user != user:
                if user in self._timed_out:
                    self._timed_out.discard(user)
                    return ComplaintCode.TIMEOUT
                return ComplaintCode.NO_SESSION
            if i is None:
                self._end_session_locked("abort")
                return ComplaintCode.ABORTED
            ok = server_validate_index(self.table, self.user_set(user), i)
            rec.complaints_used += 1
            if ok:
                self.complaint_total += 1
            self._end_session_locked("accept" if ok else "reject")
            return ComplaintCode.ACCEPTED if ok else ComplaintCode.REJECTED

    def abandon(self, user: str) -> None:
        """Release ``user``'s live session without charging quota (disconnects)."""
        with self._cond:
            if self._session is not None and self._session.user == user:
                self._end_session_locked("abandon")

    @property
    def session_live(self) -> bool:
        with self._cond:
            self._reap_locked()
            return self._session is not None

    # -- reads and audits ------------------------------------------------------
    def sync_table(self) -> bytes:
        self._require_setup()
        return self.table.to_bytes()

    def tau(self, m: Optional[int] = None) -> int:
        if self._tipping is None:
            self._tipping = TippingCalculator.for_params(self.params)
        return self._tipping.tau(self.table.m if m is None else m)

    def handle_audit(self, user: Optional[str], tag_bytes: bytes, x: bytes) -> AuditVerdict:
        self._require_setup()
        try:
            originator = audit_open(self.keys, tag_bytes, x)
        except TagError as exc:
            log.info("audit from %s rejected: %s", user, exc)
            return AuditVerdict(False)
        if self.config.audit_threshold_check:
            item = derive_item_set(tag_bytes, self.params)
            if int(np.count_nonzero(self.table.bits[item.indices])) < self.tau():
                return AuditVerdict(False)
        log.info("audit by %s opened a tag originated by %s", user, originator)
        self.audit_log.append((user or "", originator))
        return AuditVerdict(True, originator)

    # -- epochs ----------------------------------------------------------------
    def epoch_reset(self) -> int:
        """Start a new epoch once no session is live; returns the new epoch id."""
        self._require_setup()
        with self._cond:
            self._wait_locked(lambda: self._session is None)
            with self.table.write_lock():
                self.table.reset()
            for rec in self.users.values():
                rec.complaints_used = 0
            self.complaint_total = 0
            self.epoch_id += 1
            self.keys = self.keys.rotated()
            self._user_sets.clear()
            self._timed_out.clear()
            self._cond.notify_all()
            return self.epoch_id

    def check_conservation(self) -> bool:
        return self.complaint_total == self.table.m == self.table.popcount()


def setup(c: int, n: int, t: int, quota: int, lambda_stat: int = 10, **config: Any) -> tuple[FactsServer, dict[str, bytes]]:
    server = FactsServer(ServerConfig(n=n, t=t, quota=quota, lambda_stat=lambda_stat, **config))
    return server, server.setup(c)


# -- network front-end ---------------------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    server: "FactsTCPServer"

    def handle(self) -> None:
        core = self.server.core
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        transcript: Optional[list] = [] if core.config.record_transcripts else None
        stream = FrameStream(sock, transcript)
        user = None
        try:
            kind, payload = stream.expect(MsgType.HELLO)
            user, digest = wire.decode_hello(payload)
            if not core.authenticate(user, digest):
                log.warning("rejected hello for %r", user)
                return
            if transcript is not None:
                self.server.transcripts.append((user, transcript))
            stream.send(MsgType.EPOCH_INFO, core.epoch_info(user).pack())
            while True:
                kind, payload = stream.recv()
                self._dispatch(core, stream, user, kind, payload)
        except (ConnectionError, ProtocolError, OSError) as exc:
            log.debug("connection for %r closed: %s", user, exc)
        finally:
            if user is not None:
                core.abandon(user)
            stream.close()

    def _dispatch(self, core: FactsServer, stream: FrameStream, user: str, kind: MsgType, payload: bytes) -> None:
        if kind is MsgType.ORIGINATE_REQ:
            if len(payload) != 32:
                raise ProtocolError("originate request must carry a 32-byte digest")
            e, sigma = core.handle_originate(user, payload)
            stream.send(MsgType.ORIGINATE_RESP, wire.pack_originate_resp(e, sigma))
        elif kind is MsgType.COMPLAIN_BEGIN:
            try:
                session = core.begin_complaint(user)
            except ComplaintRejected as exc:
                stream.send(MsgType.COMPLAIN_RESULT, bytes([exc.code]))
                return
            stream.send(MsgType.COMPLAIN_SNAPSHOT, session.packed_snapshot())
        elif kind is MsgType.COMPLAIN_INDEX:
            code = core.finish_complaint(user, wire.unpack_index(payload))
            stream.send(MsgType.COMPLAIN_RESULT, bytes([code]))
        elif kind is MsgType.AUDIT_REQ:
            tag_bytes, x = wire.unpack_audit_req(payload)
            verdict = core.handle_audit(user, tag_bytes, x)
            if verdict.ok:
                body = bytes([AuditCode.OK]) + verdict.originator.encode()
            else:
                body = bytes([AuditCode.REJECTED])
            stream.send(MsgType.AUDIT_RESP, body)
        elif kind is MsgType.TABLE_SYNC_REQ:
            stream.send(MsgType.TABLE_SYNC_RESP, core.sync_table())
        elif kind is MsgType.EPOCH_INFO:
            stream.send(MsgType.EPOCH_INFO, core.epoch_info(user).pack())
        else:
            raise ProtocolError(f"unexpected {kind.name} from client")


class FactsTCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, core: FactsServer, address: Optional[tuple[str, int]] = None) -> None:
        self.core = core
        self.transcripts: list[tuple[str, list]] = []
        address = address or (core.config.host, core.config.port)
        super().__init__(address, _Handler)
        self._thread: Optional[threading.Thread] = None
        self._epoch_stop = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.server_address[:2]
        return host, port

    def start(self) -> "FactsTCPServer":
        self._thread = threading.Thread(target=self.serve_forever, name="facts-server", daemon=True)
        self._thread.start()
        if self.core.config.epoch_length > 0:
            threading.Thread(target=self._epoch_loop, name="facts-epochs", daemon=True).start()
        return self

    def _epoch_loop(self) -> None:
        while not self._epoch_stop.wait(self.core.config.epoch_length):
            self.core.epoch_reset()

    def stop(self) -> None:
        self._epoch_stop.set()
        self.shutdown()
        self.server_close()

    def __enter__(self) -> "FactsTCPServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
