import socket
import struct
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secureknn import transport
from secureknn.transport import (
    ErrorCode,
    FrameError,
    HandshakeError,
    Message,
    MsgType,
    Role,
    SessionClosed,
    decode_frame,
    encode_frame,
    loopback_pair,
)

SID = bytes(range(16))


def test_frame_roundtrip_simple():
    msg = Message(MsgType.SM_REQ, b"payload-bytes")
    sid, decoded = decode_frame(encode_frame(SID, msg))
    assert sid == SID and decoded == msg


@settings(max_examples=200, deadline=None)
@given(
    msg_type=st.sampled_from(list(MsgType)),
    payload=st.binary(max_size=2048),
    sid=st.binary(min_size=16, max_size=16),
)
def test_frame_roundtrip_fuzz(msg_type, payload, sid):
    frame = encode_frame(sid, Message(msg_type, payload))
    got_sid, got = decode_frame(frame)
    assert got_sid == sid and got.msg_type == msg_type and got.payload == payload


def test_frame_bad_magic():
    frame = bytearray(encode_frame(SID, Message(MsgType.SM_REQ, b"x")))
    frame[0] = ord("X")
    with pytest.raises(FrameError, match="magic"):
        decode_frame(bytes(frame))


def test_frame_bad_version():
    frame = bytearray(encode_frame(SID, Message(MsgType.SM_REQ, b"x")))
    frame[4] = 2
    with pytest.raises(FrameError, match="version"):
        decode_frame(bytes(frame))


def test_frame_unknown_type():
    frame = bytearray(encode_frame(SID, Message(MsgType.SM_REQ, b"x")))
    frame[5] = 0xEE
    with pytest.raises(FrameError, match="message type"):
        decode_frame(bytes(frame))


def test_frame_truncated():
    frame = encode_frame(SID, Message(MsgType.SM_REQ, b"abcdef"))
    with pytest.raises(FrameError):
        decode_frame(frame[:-1])


def test_oversized_frame_rejected_both_ways():
    small_cap = 1024
    with pytest.raises(FrameError, match="exceeds"):
        encode_frame(SID, Message(MsgType.GAMMA, bytes(2048)), max_frame=small_cap)
    # Receiver side: a header declaring an oversized payload is rejected
    # before the payload would be read.
    header = transport.MAGIC + bytes((transport.VERSION, MsgType.GAMMA)) + SID
    header += struct.pack(">I", 10_000_000)
    with pytest.raises(FrameError, match="exceeds"):
        transport._check_header(header, small_cap)


def test_loopback_delivery_and_close(pk, sk, rng):
    a, b = loopback_pair(SID)
    ct = pk.encrypt(5, rng)
    a.send(Message(MsgType.SM_REQ, transport.pack_ct(ct)))
    got = b.receive()
    assert sk.decrypt(transport.unpack_ct(pk, got.payload)) == 5
    a.close()
    with pytest.raises(SessionClosed):
        b.receive()


def test_loopback_ordering_under_interleaving():
    # 10,000 messages across 4 concurrent sessions: per-session FIFO.
    sessions = [loopback_pair(bytes([i]) * 16) for i in range(4)]
    per_session = 2500

    def sender(ep):
        for seq in range(per_session):
            ep.send(Message(MsgType.BETA, seq.to_bytes(4, "big")))

    threads = [threading.Thread(target=sender, args=(a,)) for a, _ in sessions]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for _, b in sessions:
        seqs = [int.from_bytes(b.receive().payload, "big") for _ in range(per_session)]
        assert seqs == list(range(per_session))


def test_codec_roundtrips_every_message_type(pk, rng):
    cts = [pk.encrypt(i, rng) for i in range(5)]
    fp = pk.fingerprint()

    assert transport.unpack_hello(transport.pack_hello(Role.BOB, fp)) == (Role.BOB, fp)
    assert transport.unpack_ct_pair(pk, transport.pack_ct_pair(cts[0], cts[1])) == (cts[0], cts[1])
    assert transport.unpack_ct(pk, transport.pack_ct(cts[2])) == cts[2]
    assert transport.unpack_ct_vec(pk, transport.pack_ct_vec(cts)) == cts
    gamma, ell = cts[:3], cts[2:]
    assert transport.unpack_smin_req(pk, transport.pack_smin_req(gamma, ell)) == (gamma, ell)
    m_vec, alpha = cts[1:4], cts[0]
    assert transport.unpack_smin_resp(pk, transport.pack_smin_resp(m_vec, alpha)) == (m_vec, alpha)
    pairs = [(cts[0], cts[1]), (cts[2], cts[3])]
    assert transport.unpack_sm_batch_req(pk, transport.pack_sm_batch_req(pairs)) == pairs
    entries = list(enumerate(cts))
    assert transport.unpack_dist_list(pk, transport.pack_dist_list(2, entries)) == (2, entries)
    assert transport.unpack_index_list(transport.pack_index_list([4, 0, 2])) == [4, 0, 2]
    matrix = [cts[:2], cts[2:4]]
    assert transport.unpack_ct_matrix(pk, transport.pack_ct_matrix(matrix)) == matrix
    ints = [[1, 2, 3], [4, 5, 6]]
    assert transport.unpack_int_matrix(transport.pack_int_matrix(ints)) == ints
    assert transport.unpack_query(pk, transport.pack_query(3, 2, cts)) == (3, 2, cts)
    assert transport.unpack_blinds(transport.pack_blinds("h:1", ints)) == ("h:1", ints)
    code, text = transport.unpack_error(transport.pack_error(ErrorCode.PRECONDITION, "nope"))
    assert code == ErrorCode.PRECONDITION and text == "nope"


def test_large_ciphertext_vector_roundtrip(pk, rng):
    cts = [pk.encrypt(i % 97, rng) for i in range(1000)]
    decoded = transport.unpack_ct_vec(pk, transport.pack_ct_vec(cts))
    assert len(decoded) == 1000 and decoded == cts


def _serve_once(server_sock, fingerprint, results):
    conn, _ = server_sock.accept()
    try:
        ep = transport.accept_handshake(conn, Role.C2, fingerprint)
        results["ep"] = ep
    except HandshakeError as exc:
        results["error"] = exc


@pytest.fixture
def tcp_server():
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.bind(("127.0.0.1", 0))
    sock.listen(1)
    yield sock, sock.getsockname()
    sock.close()


def test_tcp_handshake_and_roundtrip(tcp_server, pk, sk, rng):
    sock, addr = tcp_server
    fp = pk.fingerprint()
    results = {}
    thread = threading.Thread(target=_serve_once, args=(sock, fp, results))
    thread.start()
    client = transport.connect(addr, Role.C1, fp, SID)
    thread.join()
    server_ep = results["ep"]
    assert server_ep.session_id == SID and server_ep.peer_role == Role.C1
    assert client.peer_role == Role.C2
    ct = pk.encrypt(41, rng)
    client.send(Message(MsgType.SBD_LSB_REQ, transport.pack_ct(ct)))
    got = server_ep.receive()
    assert sk.decrypt(transport.unpack_ct(pk, got.payload)) == 41
    client.close()
    with pytest.raises(SessionClosed):
        server_ep.receive()
    server_ep.close()


def test_tcp_fingerprint_mismatch(tcp_server, pk):
    sock, addr = tcp_server
    results = {}
    thread = threading.Thread(target=_serve_once, args=(sock, pk.fingerprint(), results))
    thread.start()
    with pytest.raises(HandshakeError, match="fingerprint"):
        transport.connect(addr, Role.C1, b"\x00" * 32, SID)
    thread.join()
    assert "error" in results


def test_tcp_version_mismatch_is_handshake_error(tcp_server, pk):
    sock, addr = tcp_server
    results = {}
    thread = threading.Thread(target=_serve_once, args=(sock, pk.fingerprint(), results))
    thread.start()
    raw = socket.create_connection(addr)
    frame = bytearray(
        encode_frame(SID, Message(MsgType.HELLO, transport.pack_hello(Role.C1, pk.fingerprint())))
    )
    frame[4] = 9  # not the protocol version the server speaks
    raw.sendall(bytes(frame))
    thread.join()
    raw.close()
    assert isinstance(results.get("error"), HandshakeError)
