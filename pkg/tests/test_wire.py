import socket
import struct

import pytest
from hypothesis import given, strategies as st

from facts import wire
from facts.wire import EpochInfo, FrameStream, MsgType, ProtocolError


def test_frame_layout():
    assert wire.pack_frame(MsgType.ORIGINATE_REQ, b"ab") == b"\x00\x00\x00\x03\x01ab"
    assert wire.pack_frame(MsgType.COMPLAIN_BEGIN) == b"\x00\x00\x00\x01\x03"


def test_message_type_codes():
    assert [int(t) for t in MsgType][1:] == list(range(1, 12))


def test_hello_roundtrip_and_size():
    h = wire.encode_hello("user00001", b"token")
    assert len(h) == wire.HELLO_LEN == 65
    assert wire.decode_hello(h) == ("user00001", wire.token_digest(b"token"))


@pytest.mark.parametrize("uid", ["", "x" * 33])
def test_hello_rejects_bad_ids(uid):
    with pytest.raises(ProtocolError):
        wire.encode_hello(uid, b"t")


def test_hello_decode_rejects_bad_lengths():
    with pytest.raises(ProtocolError):
        wire.decode_hello(b"\0" * 64)
    with pytest.raises(ProtocolError):
        wire.decode_hello(b"\x21" + b"\0" * 64)


def test_index_payload():
    assert wire.pack_index(5) == struct.pack(">Q", 5)
    assert wire.pack_index(None) == b"\xff" * 8
    assert wire.unpack_index(b"\xff" * 8) is None
    assert wire.unpack_index(wire.pack_index(2**40)) == 2**40
    with pytest.raises(ProtocolError):
        wire.unpack_index(b"\0" * 7)


@given(st.binary(min_size=1, max_size=200), st.binary(max_size=200))
def test_audit_req_roundtrip(tag, x):
    assert wire.unpack_audit_req(wire.pack_audit_req(tag, x)) == (tag, x)


def test_originate_resp_roundtrip_and_errors():
    e, sigma = b"e" * 33, b"s" * 64
    assert wire.unpack_originate_resp(wire.pack_originate_resp(e, sigma)) == (e, sigma)
    with pytest.raises(ProtocolError):
        wire.unpack_originate_resp(wire.pack_originate_resp(e, sigma)[:-1])
    with pytest.raises(ProtocolError):
        wire.unpack_originate_resp(b"\0")


def test_epoch_info_roundtrip():
    info = EpochInfo(3, 960_000, 9462, 370, 10_000, 50, 10, 10, b"k" * 32, b"p" * 32)
    assert EpochInfo.unpack(info.pack()) == info
    with pytest.raises(ProtocolError):
        EpochInfo.unpack(info.pack()[:-1])


def test_stream_reassembles_split_frames():
    a, b = socket.socketpair()
    transcript = []
    out, inp = FrameStream(a), FrameStream(b, transcript)
    raw = wire.pack_frame(MsgType.AUDIT_REQ, b"x" * 1000) + wire.pack_frame(MsgType.TABLE_SYNC_REQ)
    for i in range(0, len(raw), 7):
        a.sendall(raw[i:i + 7])
    assert inp.recv() == (MsgType.AUDIT_REQ, b"x" * 1000)
    assert inp.expect(MsgType.TABLE_SYNC_REQ) == (MsgType.TABLE_SYNC_REQ, b"")
    assert transcript == [("in", 0x07, 1005), ("in", 0x09, 5)]
    out.close()
    with pytest.raises(ConnectionError):
        inp.recv()
    inp.close()


@pytest.mark.parametrize(
    "raw", [b"\x00\x00\x00\x00", b"\xff\xff\xff\xff", b"\x00\x00\x00\x01\x7f"]
)
def test_stream_rejects_bad_frames(raw):
    a, b = socket.socketpair()
    a.sendall(raw)
    with pytest.raises(ProtocolError):
        FrameStream(b).recv()
    a.close()
    b.close()


def test_expect_rejects_wrong_type():
    a, b = socket.socketpair()
    FrameStream(a).send(MsgType.ORIGINATE_REQ, b"\0" * 32)
    with pytest.raises(ProtocolError):
        FrameStream(b).expect(MsgType.AUDIT_REQ)
    a.close()
    b.close()
