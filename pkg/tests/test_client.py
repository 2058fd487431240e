import hashlib
import socket
import threading
import time

import numpy as np
import pytest

from facts import wire
from facts.ccbf import choose_index
from facts.client import FactsClient, LoopbackEEMS
from facts.sim import count_overlaps
from facts.tipping import tail_thresholds
from facts.wire import ComplaintCode, ComplaintRejected, FrameStream, MsgType, ProtocolError

from conftest import running_server


def connect(tcp, tokens, uid, **kw):
    return FactsClient(uid, tokens[uid], tcp.address, **kw).connect()


# -- connection ---------------------------------------------------------------------


def test_connect_receives_epoch_info(server):
    core, tcp, tokens = server
    uid = next(iter(tokens))
    with connect(tcp, tokens, uid) as c:
        assert c.params == core.params
        assert c.info.user_key == core.user_key(uid)
        assert c.info.quota == 10
        assert c.user_set == core.user_set(uid) and len(c.user_set) == core.params.u


def test_bad_token_is_refused(server):
    _, tcp, tokens = server
    uid = next(iter(tokens))
    with pytest.raises((ConnectionError, OSError)):
        FactsClient(uid, b"not the token", tcp.address).connect()


def test_pinned_key_mismatch(server):
    _, tcp, tokens = server
    uid = next(iter(tokens))
    with pytest.raises(ProtocolError):
        connect(tcp, tokens, uid, server_pubkey=b"\0" * 32)


def test_unconnected_client_errors(server):
    _, tcp, tokens = server
    with pytest.raises(ConnectionError):
        FactsClient("x", b"t", tcp.address).originate(b"x")


# -- messages -----------------------------------------------------------------------


def test_originate_then_receive(clients):
    a, b = clients[:2]
    tag, x = a.send_msg(b.id, b"hello")
    [entry] = b.receive_all()
    assert entry.tag == tag and entry.x == x and entry.sender == a.id


def test_forward_keeps_original_tag(clients):
    a, b, c, d = clients
    tag, x = a.send_msg(b.id, b"chain letter")
    digests = [hashlib.sha256(tag.to_bytes()).hexdigest()]
    for sender, receiver in ((b, c), (c, d)):
        [entry] = sender.receive_all()
        out, _ = sender.send_msg(receiver.id, entry.x, tag=entry.tag)
        digests.append(hashlib.sha256(out.to_bytes()).hexdigest())
    [final] = d.receive_all()
    digests.append(hashlib.sha256(final.tag_bytes).hexdigest())
    assert len(set(digests)) == 1


def test_rcv_msg_discards_bad_input(clients):
    a, b = clients[:2]
    tag = a.originate(b"genuine")
    assert not b.rcv_msg(a.id, tag, b"forged")
    raw = bytearray(tag.to_bytes())
    raw[40] ^= 1
    assert not b.rcv_msg(a.id, bytes(raw), b"genuine")
    assert not b.rcv_msg(a.id, b"junk", b"genuine")
    assert b.inbox == []
    assert b.rcv_msg(a.id, tag.to_bytes(), b"genuine") and len(b.inbox) == 1


def test_eems_records_only_metadata(clients):
    eems = clients[0].eems
    tag, x = clients[0].send_msg(clients[1].id, b"secret")
    assert eems.transcript == [(clients[0].id, clients[1].id, len(tag.to_bytes()) + len(x))]


def test_forward_and_origination_look_identical_to_server():
    with running_server(users=2, record_transcripts=True) as (core, tcp, tokens):
        a_id, b_id = tokens
        eems = LoopbackEEMS()
        with connect(tcp, tokens, a_id, eems=eems) as a:
            a.send_msg(b_id, b"first message")
        with connect(tcp, tokens, b_id, eems=eems) as b:
            b.receive_all()
            b.send_msg(a_id, b"a message of some other length entirely")  # origination
            b.send_msg(a_id, b"first message", tag=b.inbox[0].tag)  # forward
        time.sleep(0.1)
        [(_, frames)] = [(u, t) for u, t in tcp.transcripts if u == b_id]
        # hello, epoch info, then the two exchanges
        orig, fwd = frames[2:4], frames[4:6]
        assert [f[:2] for f in orig] == [("in", MsgType.ORIGINATE_REQ), ("out", MsgType.ORIGINATE_RESP)]
        assert orig == fwd


# -- complaints ---------------------------------------------------------------------


def test_complaint_sends_bare_index(server):
    core, tcp, tokens = server
    a_id, b_id = list(tokens)[:2]
    frames = []
    with connect(tcp, tokens, a_id) as a, connect(tcp, tokens, b_id, transcript=frames) as b:
        b.rcv_msg(a_id, a.originate(b"spam"), b"spam")
        frames.clear()
        res = b.complain(b.inbox[0])
    assert res.code is ComplaintCode.ACCEPTED and res.status == "complained"
    assert res.index in core.user_set(b_id)
    assert core.table.bits[res.index]
    # COMPLAIN_INDEX carries 8 bytes: 4 length + 1 type + 8 payload
    assert ("out", MsgType.COMPLAIN_INDEX, 13) in frames
    snap = [f for f in frames if f[1] == MsgType.COMPLAIN_SNAPSHOT]
    assert snap == [("in", MsgType.COMPLAIN_SNAPSHOT, 5 + (core.params.u + 7) // 8)]


def test_client_aborts_when_own_slots_full(server):
    core, tcp, tokens = server
    uid = next(iter(tokens))
    with core.table.write_lock():
        for i in core.user_set(uid).indices:
            core.table.set_bit(int(i))
    core.complaint_total = core.table.m
    with connect(tcp, tokens, uid) as c:
        c.rcv_msg(uid, c.originate(b"x"), b"x")
        res = c.complain(c.inbox[0])
    assert res.code is ComplaintCode.ABORTED and res.index is None and res.status == "aborted"
    assert core.users[uid].complaints_used == 0


def test_index_always_from_snapshot_zeros(server):
    core, tcp, tokens = server
    uid = next(iter(tokens))
    rng = np.random.default_rng(0)
    with core.table.write_lock():
        for i in rng.choice(core.user_set(uid).indices, core.params.u - 5, replace=False):
            core.table.set_bit(int(i))
    core.complaint_total = core.table.m
    with connect(tcp, tokens, uid) as c:
        c.rcv_msg(uid, c.originate(b"x"), b"x")
        item = c._item_set(c.inbox[0].tag_bytes)
        for _ in range(5):
            bits = c.begin()
            out = choose_index(c.user_set.indices, bits, item, c.rng)
            zeros = set(c.user_set.indices[~bits].tolist())
            assert out.written_index in zeros
            assert c.send_index(out.written_index) is ComplaintCode.ACCEPTED
        assert c.begin().all()
        assert c.send_index(None) is ComplaintCode.ABORTED


def test_quota_over_the_wire():
    with running_server(users=1, quota=4) as (core, tcp, tokens):
        uid = next(iter(tokens))
        with connect(tcp, tokens, uid) as c:
            c.rcv_msg(uid, c.originate(b"x"), b"x")
            outcomes = []
            for _ in range(9):
                try:
                    outcomes.append(c.complain(c.inbox[0]).code)
                except ComplaintRejected as exc:
                    outcomes.append(exc.code)
        assert outcomes == [ComplaintCode.ACCEPTED] * 4 + [ComplaintCode.QUOTA] * 5


def test_invalid_index_over_the_wire(server):
    core, tcp, tokens = server
    uid = next(iter(tokens))
    with connect(tcp, tokens, uid) as c:
        c.begin()
        outside = int(np.setdiff1d(np.arange(1000), c.user_set.indices)[0])
        assert c.send_index(outside) is ComplaintCode.REJECTED
    assert core.table.m == 0 and core.users[uid].complaints_used == 1


def test_disconnect_mid_session_frees_lock(server):
    core, tcp, tokens = server
    a_id, b_id = list(tokens)[:2]
    a = connect(tcp, tokens, a_id)
    a.begin()
    a.close()
    with connect(tcp, tokens, b_id) as b:
        t0 = time.monotonic()
        b.begin()
        assert time.monotonic() - t0 < 1.0
        b.send_index(None)
    assert core.session_log[0].outcome == "abandon"


def test_silent_client_times_out():
    with running_server(users=2, session_deadline=0.5) as (core, tcp, tokens):
        a_id, b_id = tokens
        silent = connect(tcp, tokens, a_id)
        silent.begin()
        with connect(tcp, tokens, b_id) as b:
            t0 = time.monotonic()
            b.begin()
            waited = time.monotonic() - t0
            b.send_index(None)
        assert waited <= 0.5 + 1.0
        assert silent.send_index(int(silent.user_set.indices[0])) is ComplaintCode.TIMEOUT
        assert core.table.m == 0 and core.users[a_id].complaints_used == 0
        silent.close()


def test_concurrent_sessions_never_overlap():
    with running_server(users=20, quota=3) as (core, tcp, tokens):
        errors = []

        def work(uid):
            try:
                with connect(tcp, tokens, uid) as c:
                    c.rcv_msg(uid, c.originate(uid.encode()), uid.encode())
                    for _ in range(3):
                        c.complain(c.inbox[0])
            except Exception as exc:  # pragma: no cover - reported below
                errors.append(exc)

        threads = [threading.Thread(target=work, args=(u,)) for u in tokens]
        for th in threads:
            th.start()
        for th in threads:
            th.join(30)
        assert not errors
        assert len(core.session_log) == 60
        assert count_overlaps((r.start, r.end) for r in core.session_log) == 0
        assert core.check_conservation() and core.table.m == 60


# -- counting and audits ------------------------------------------------------------


def test_check_and_audit_below_threshold(clients):
    a, b = clients[:2]
    b.rcv_msg(a.id, a.originate(b"x"), b"x")
    chk = b.check_and_audit(b.inbox[0])
    assert not chk.fired and chk.count == 0 and chk.tau >= 0 and chk.originator is None


def test_clients_with_same_snapshot_agree_on_tau(clients):
    a, b = clients[:2]
    b.rcv_msg(a.id, a.originate(b"x"), b"x")
    b.complain(b.inbox[0])
    ta, tb = a.sync_table(), b.sync_table()
    assert ta.m == tb.m == 1
    assert a.tipping.tau(ta.m) == b.tipping.tau(tb.m)


def test_audit_fires_after_enough_complaints():
    th = tail_thresholds(50, 10)
    k = int(np.ceil(th.fn_safe_count))
    with running_server(users=k + 1) as (core, tcp, tokens):
        ids = list(tokens)
        origin = ids[0]
        with connect(tcp, tokens, origin) as o:
            x = b"widely reported message"
            tag_bytes = o.originate(x).to_bytes()
        for uid in ids[1:]:
            with connect(tcp, tokens, uid, rng=np.random.default_rng(hash(uid) & 0xFFFF)) as c:
                assert c.rcv_msg(origin, tag_bytes, x)
                c.complain(c.inbox[0])
        with connect(tcp, tokens, ids[-1]) as c:
            c.rcv_msg(origin, tag_bytes, x)
            chk = c.check_and_audit(c.inbox[0])
        assert chk.fired and chk.audit_ok and chk.originator == origin
        assert chk.count >= chk.tau


def test_complain_can_chain_into_audit(clients):
    a, b = clients[:2]
    b.rcv_msg(a.id, a.originate(b"x"), b"x")
    res = b.complain(b.inbox[0], audit_after=True)
    assert res.audit is not None and not res.audit.fired and res.audit.count == int(res.hit_item)


def test_audit_rejects_forgery(clients):
    a, b = clients[:2]
    tag = a.originate(b"x")
    assert b.audit(tag, b"x") == (True, a.id)
    assert b.audit(tag, b"y") == (False, None)


def test_epoch_refresh_updates_user_set(server):
    core, tcp, tokens = server
    uid = next(iter(tokens))
    with connect(tcp, tokens, uid) as c:
        old = c.user_set
        core.epoch_reset()
        info = c.refresh_epoch()
        assert info.epoch_id == 1 and c.user_set != old and c.user_set == core.user_set(uid)


def test_raw_hello_protocol(server):
    core, tcp, tokens = server
    uid, tok = next(iter(tokens.items()))
    sock = socket.create_connection(tcp.address)
    fs = FrameStream(sock)
    fs.send(MsgType.HELLO, wire.encode_hello(uid, tok))
    kind, payload = fs.recv()
    assert kind is MsgType.EPOCH_INFO and len(payload) == 8 * 6 + 4 * 2 + 64
    fs.send(MsgType.ORIGINATE_REQ, b"\0" * 31)  # malformed: connection is dropped
    with pytest.raises(ConnectionError):
        fs.recv()
    fs.close()
