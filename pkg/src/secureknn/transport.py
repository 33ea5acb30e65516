"""Ordered, reliable, session-scoped message channels between party roles.

Frame layout, bit-exact::

    magic "SKNN" | version 0x01 | msg_type (1 byte) | session id (16 bytes)
    | payload length (4-byte big-endian) | payload

Sessions open with a HELLO exchange carrying each side's role and the
SHA-256 fingerprint of the Paillier public key, so the two clouds and
the querying user cannot silently operate under different keys.

Two realizations share the framing code: an in-process pair backed by
queues (tests, benchmarks) and a TCP channel (deployment).  Both
deliver messages in send order, exactly once.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
from dataclasses import dataclass

from . import paillier
from ._wire import Reader, WireError, put_bigint, put_u32, put_u8, put_utf8
from .paillier import Ciphertext, PaillierPublicKey

MAGIC = b"SKNN"
VERSION = 1
SESSION_ID_LEN = 16
HEADER_LEN = len(MAGIC) + 1 + 1 + SESSION_ID_LEN + 4
DEFAULT_MAX_FRAME = 16 * 1024 * 1024


class Role(enum.IntEnum):
    C1 = 1
    C2 = 2
    BOB = 3


class MsgType(enum.IntEnum):
    HELLO = 0x00
    SM_REQ = 0x01
    SM_RESP = 0x02
    SBD_LSB_REQ = 0x03
    SBD_LSB_RESP = 0x04
    SMIN_REQ = 0x05
    SMIN_RESP = 0x06
    BETA = 0x07
    U_VEC = 0x08
    DIST_LIST = 0x09
    INDEX_LIST = 0x0A
    GAMMA = 0x0B
    GAMMA_PRIME = 0x0C
    QUERY = 0x0D
    BLINDS = 0x0E
    RESULT = 0x0F
    SM_BATCH_REQ = 0x10
    SM_BATCH_RESP = 0x11
    ERROR = 0x12


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    PROTOCOL_FAULT = 2
    PRECONDITION = 3
    INTERNAL = 4


class TransportError(Exception):
    """Base class for channel failures."""


class FrameError(TransportError):
    """Frame corruption: bad magic, bad version, or oversized length."""


class HandshakeError(TransportError):
    """Version or key-fingerprint disagreement while opening a session."""


class SessionClosed(TransportError):
    """The peer closed the session (or receive timed out)."""


class ProtocolError(TransportError):
    """Peer sent an ERROR message or an unexpected message type."""

    def __init__(self, message: str, code: ErrorCode = ErrorCode.INTERNAL):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    payload: bytes


def encode_frame(session_id: bytes, msg: Message, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    if len(session_id) != SESSION_ID_LEN:
        raise FrameError(f"session id must be {SESSION_ID_LEN} bytes")
    if HEADER_LEN + len(msg.payload) > max_frame:
        raise FrameError(f"frame of {HEADER_LEN + len(msg.payload)} bytes exceeds cap {max_frame}")
    return (
        MAGIC
        + bytes((VERSION, msg.msg_type))
        + session_id
        + struct.pack(">I", len(msg.payload))
        + msg.payload
    )


def decode_frame(frame: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> tuple[bytes, Message]:
    """Decode one complete frame, returning (session_id, message)."""
    if len(frame) < HEADER_LEN:
        raise FrameError("truncated frame header")
    session_id, length = _check_header(frame[:HEADER_LEN], max_frame)
    if len(frame) != HEADER_LEN + length:
        raise FrameError("frame length does not match header")
    msg_type = _check_msg_type(frame[5])
    return session_id, Message(msg_type, frame[HEADER_LEN:])


def _check_header(header: bytes, max_frame: int) -> tuple[bytes, int]:
    if header[:4] != MAGIC:
        raise FrameError("bad magic")
    if header[4] != VERSION:
        raise FrameError(f"unsupported protocol version {header[4]}")
    length = struct.unpack(">I", header[-4:])[0]
    if HEADER_LEN + length > max_frame:
        raise FrameError(f"declared frame of {HEADER_LEN + length} bytes exceeds cap {max_frame}")
    return header[6 : 6 + SESSION_ID_LEN], length


def _check_msg_type(raw: int) -> MsgType:
    try:
        return MsgType(raw)
    except ValueError:
        raise FrameError(f"unknown message type 0x{raw:02x}") from None


class PartyEndpoint:
    """One side of a session.  Subclasses provide the byte transport."""

    def __init__(self, session_id: bytes, role: Role, max_frame: int = DEFAULT_MAX_FRAME):
        self.session_id = session_id
        self.role = role
        self.peer_role: Role | None = None
        self.max_frame = max_frame

    def send(self, msg: Message) -> None:
        raise NotImplementedError

    def receive(self) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def request(self, msg: Message, expected: MsgType) -> Message:
        """Send and await the matching response type.

        An ERROR reply raises :class:`ProtocolError` with the peer's
        code and text; any other type mismatch is also a protocol error.
        """
        self.send(msg)
        reply = self.receive()
        if reply.msg_type == MsgType.ERROR:
            code, text = unpack_error(reply.payload)
            raise ProtocolError(f"peer error: {text}", code)
        if reply.msg_type != expected:
            raise ProtocolError(f"expected {expected.name}, got {reply.msg_type.name}")
        return reply

    def send_error(self, code: ErrorCode, text: str) -> None:
        try:
            self.send(Message(MsgType.ERROR, pack_error(code, text)))
        except TransportError:
            pass


class LocalEndpoint(PartyEndpoint):
    """In-process channel half; messages still round-trip the frame codec."""

    _CLOSE = object()

    def __init__(self, session_id, role, inbox, outbox, max_frame=DEFAULT_MAX_FRAME, timeout=900.0):
        super().__init__(session_id, role, max_frame)
        self._inbox = inbox
        self._outbox = outbox
        self._timeout = timeout
        self._closed = False

    def send(self, msg: Message) -> None:
        if self._closed:
            raise SessionClosed("session closed")
        self._outbox.put(encode_frame(self.session_id, msg, self.max_frame))

    def receive(self) -> Message:
        if self._closed:
            raise SessionClosed("session closed")
        try:
            frame = self._inbox.get(timeout=self._timeout)
        except queue.Empty:
            raise SessionClosed("receive timed out") from None
        if frame is self._CLOSE:
            self._closed = True
            raise SessionClosed("peer closed the session")
        session_id, msg = decode_frame(frame, self.max_frame)
        if session_id != self.session_id:
            raise FrameError("frame for a different session")
        return msg

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(self._CLOSE)


def loopback_pair(
    session_id: bytes | None = None,
    roles: tuple[Role, Role] = (Role.C1, Role.C2),
    max_frame: int = DEFAULT_MAX_FRAME,
    timeout: float = 900.0,
) -> tuple[LocalEndpoint, LocalEndpoint]:
    """Construct both ends of an in-process session.

    The handshake is implicit: both endpoints are created agreeing on
    the session id, and key agreement is the caller's responsibility.
    """
    if session_id is None:
        session_id = bytes(SESSION_ID_LEN)
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    a = LocalEndpoint(session_id, roles[0], b_to_a, a_to_b, max_frame, timeout)
    b = LocalEndpoint(session_id, roles[1], a_to_b, b_to_a, max_frame, timeout)
    a.peer_role, b.peer_role = roles[1], roles[0]
    return a, b


class SocketEndpoint(PartyEndpoint):
    """TCP channel half; the header is read before the payload so an
    oversized declared length is rejected without allocating it."""

    def __init__(self, sock, session_id, role, max_frame=DEFAULT_MAX_FRAME):
        super().__init__(session_id, role, max_frame)
        self._sock = sock
        self._closed = False

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            chunk = self._sock.recv(n)
            if not chunk:
                raise SessionClosed("connection closed by peer")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def send(self, msg: Message) -> None:
        if self._closed:
            raise SessionClosed("session closed")
        try:
            self._sock.sendall(encode_frame(self.session_id, msg, self.max_frame))
        except OSError as exc:
            raise SessionClosed(f"send failed: {exc}") from exc

    def receive(self) -> Message:
        if self._closed:
            raise SessionClosed("session closed")
        try:
            header = self._recv_exact(HEADER_LEN)
            session_id, length = _check_header(header, self.max_frame)
            payload = self._recv_exact(length) if length else b""
        except OSError as exc:
            raise SessionClosed(f"receive failed: {exc}") from exc
        if session_id != self.session_id:
            raise FrameError("frame for a different session")
        return Message(_check_msg_type(header[5]), payload)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


def connect(
    address: tuple[str, int],
    role: Role,
    fingerprint: bytes,
    session_id: bytes,
    max_frame: int = DEFAULT_MAX_FRAME,
    timeout: float | None = 900.0,
) -> SocketEndpoint:
    """Open a TCP session: connect, send HELLO, verify the peer's HELLO.

    ``timeout`` bounds connection establishment and every subsequent
    receive; a client waiting on a long-running query needs it larger
    than the query's whole wall time.
    """
    try:
        sock = socket.create_connection(address, timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {address[0]}:{address[1]}: {exc}") from exc
    ep = SocketEndpoint(sock, session_id, role, max_frame)
    try:
        ep.send(Message(MsgType.HELLO, pack_hello(role, fingerprint)))
        reply = _handshake_receive(ep)
        peer_role, peer_fp = unpack_hello(reply.payload)
        if peer_fp != fingerprint:
            raise HandshakeError("public key fingerprint mismatch")
        ep.peer_role = peer_role
        return ep
    except TransportError:
        ep.close()
        raise


def accept_handshake(
    sock, own_role: Role, fingerprint: bytes, max_frame: int = DEFAULT_MAX_FRAME
) -> SocketEndpoint:
    """Server side of the session handshake on an accepted socket.

    Adopts the client's session id.  Raises :class:`HandshakeError` on
    version or fingerprint disagreement (after telling the peer).
    """
    ep = SocketEndpoint(sock, bytes(SESSION_ID_LEN), own_role, max_frame)
    try:
        hello = _handshake_receive(ep, adopt_session=True)
        peer_role, peer_fp = unpack_hello(hello.payload)
    except HandshakeError:
        ep.send_error(ErrorCode.MALFORMED, "handshake failed")
        ep.close()
        raise
    if peer_fp != fingerprint:
        ep.send_error(ErrorCode.MALFORMED, "public key fingerprint mismatch")
        ep.close()
        raise HandshakeError("public key fingerprint mismatch")
    ep.peer_role = peer_role
    ep.send(Message(MsgType.HELLO, pack_hello(own_role, fingerprint)))
    return ep


def _handshake_receive(ep: SocketEndpoint, adopt_session: bool = False) -> Message:
    # During the handshake any framing defect counts as a handshake error.
    try:
        header = ep._recv_exact(HEADER_LEN)
        session_id, length = _check_header(header, ep.max_frame)
        payload = ep._recv_exact(length) if length else b""
        msg = Message(_check_msg_type(header[5]), payload)
    except (FrameError, WireError, SessionClosed) as exc:
        raise HandshakeError(str(exc)) from exc
    if adopt_session:
        ep.session_id = session_id
    elif session_id != ep.session_id:
        raise HandshakeError("peer answered with a different session id")
    if msg.msg_type == MsgType.ERROR:
        code, text = unpack_error(msg.payload)
        raise HandshakeError(f"peer rejected handshake: {text}")
    if msg.msg_type != MsgType.HELLO:
        raise HandshakeError(f"expected HELLO, got {msg.msg_type.name}")
    return msg


# ---------------------------------------------------------------------------
# Payload codecs.  Vectors encode as a 4-byte big-endian count followed by
# the elements; matrices as row count, column count, then row-major cells.
# ---------------------------------------------------------------------------


def _put_ct(buf: bytearray, ct: Ciphertext) -> None:
    put_bigint(buf, ct.value)


def _put_ct_vec(buf: bytearray, cts: list[Ciphertext]) -> None:
    put_u32(buf, len(cts))
    for ct in cts:
        _put_ct(buf, ct)


def _read_ct_vec(reader: Reader, pk: PaillierPublicKey) -> list[Ciphertext]:
    return [paillier.read_ciphertext(reader, pk) for _ in range(reader.u32())]


def _put_int_matrix(buf: bytearray, rows: list[list[int]]) -> None:
    put_u32(buf, len(rows))
    put_u32(buf, len(rows[0]) if rows else 0)
    for row in rows:
        for cell in row:
            put_bigint(buf, cell)


def _read_int_matrix(reader: Reader) -> list[list[int]]:
    n, m = reader.u32(), reader.u32()
    return [[reader.bigint() for _ in range(m)] for _ in range(n)]


def pack_hello(role: Role, fingerprint: bytes) -> bytes:
    buf = bytearray()
    put_u8(buf, role)
    buf += fingerprint
    return bytes(buf)


def unpack_hello(payload: bytes) -> tuple[Role, bytes]:
    reader = Reader(payload)
    try:
        role = Role(reader.u8())
    except ValueError:
        raise HandshakeError("unknown role in HELLO") from None
    fingerprint = reader.take(32)
    reader.expect_end()
    return role, fingerprint


def pack_ct_pair(a: Ciphertext, b: Ciphertext) -> bytes:
    buf = bytearray()
    _put_ct(buf, a)
    _put_ct(buf, b)
    return bytes(buf)


def unpack_ct_pair(pk: PaillierPublicKey, payload: bytes) -> tuple[Ciphertext, Ciphertext]:
    reader = Reader(payload)
    a = paillier.read_ciphertext(reader, pk)
    b = paillier.read_ciphertext(reader, pk)
    reader.expect_end()
    return a, b


def pack_ct(ct: Ciphertext) -> bytes:
    return ct.to_bytes()


def unpack_ct(pk: PaillierPublicKey, payload: bytes) -> Ciphertext:
    return Ciphertext.from_bytes(pk, payload)


def pack_ct_vec(cts: list[Ciphertext]) -> bytes:
    buf = bytearray()
    _put_ct_vec(buf, cts)
    return bytes(buf)


def unpack_ct_vec(pk: PaillierPublicKey, payload: bytes) -> list[Ciphertext]:
    reader = Reader(payload)
    out = _read_ct_vec(reader, pk)
    reader.expect_end()
    return out


def pack_smin_req(gamma: list[Ciphertext], ell: list[Ciphertext]) -> bytes:
    buf = bytearray()
    _put_ct_vec(buf, gamma)
    _put_ct_vec(buf, ell)
    return bytes(buf)


def unpack_smin_req(pk, payload) -> tuple[list[Ciphertext], list[Ciphertext]]:
    reader = Reader(payload)
    gamma = _read_ct_vec(reader, pk)
    ell = _read_ct_vec(reader, pk)
    reader.expect_end()
    return gamma, ell


def pack_smin_resp(m_vec: list[Ciphertext], alpha: Ciphertext) -> bytes:
    buf = bytearray()
    _put_ct_vec(buf, m_vec)
    _put_ct(buf, alpha)
    return bytes(buf)


def unpack_smin_resp(pk, payload) -> tuple[list[Ciphertext], Ciphertext]:
    reader = Reader(payload)
    m_vec = _read_ct_vec(reader, pk)
    alpha = paillier.read_ciphertext(reader, pk)
    reader.expect_end()
    return m_vec, alpha


def pack_sm_batch_req(pairs: list[tuple[Ciphertext, Ciphertext]]) -> bytes:
    buf = bytearray()
    put_u32(buf, len(pairs))
    for a, b in pairs:
        _put_ct(buf, a)
        _put_ct(buf, b)
    return bytes(buf)


def unpack_sm_batch_req(pk, payload) -> list[tuple[Ciphertext, Ciphertext]]:
    reader = Reader(payload)
    count = reader.u32()
    pairs = [
        (paillier.read_ciphertext(reader, pk), paillier.read_ciphertext(reader, pk))
        for _ in range(count)
    ]
    reader.expect_end()
    return pairs


def pack_dist_list(k: int, entries: list[tuple[int, Ciphertext]]) -> bytes:
    # k rides along because the key holder needs it to build the index list.
    buf = bytearray()
    put_u32(buf, k)
    put_u32(buf, len(entries))
    for index, ct in entries:
        put_u32(buf, index)
        _put_ct(buf, ct)
    return bytes(buf)


def unpack_dist_list(pk, payload) -> tuple[int, list[tuple[int, Ciphertext]]]:
    reader = Reader(payload)
    k = reader.u32()
    count = reader.u32()
    entries = [(reader.u32(), paillier.read_ciphertext(reader, pk)) for _ in range(count)]
    reader.expect_end()
    return k, entries


def pack_index_list(indices: list[int]) -> bytes:
    buf = bytearray()
    put_u32(buf, len(indices))
    for index in indices:
        put_u32(buf, index)
    return bytes(buf)


def unpack_index_list(payload: bytes) -> list[int]:
    reader = Reader(payload)
    out = [reader.u32() for _ in range(reader.u32())]
    reader.expect_end()
    return out


def pack_ct_matrix(rows: list[list[Ciphertext]]) -> bytes:
    buf = bytearray()
    put_u32(buf, len(rows))
    put_u32(buf, len(rows[0]) if rows else 0)
    for row in rows:
        for ct in row:
            _put_ct(buf, ct)
    return bytes(buf)


def unpack_ct_matrix(pk, payload) -> list[list[Ciphertext]]:
    reader = Reader(payload)
    n, m = reader.u32(), reader.u32()
    rows = [[paillier.read_ciphertext(reader, pk) for _ in range(m)] for _ in range(n)]
    reader.expect_end()
    return rows


def pack_int_matrix(rows: list[list[int]]) -> bytes:
    buf = bytearray()
    _put_int_matrix(buf, rows)
    return bytes(buf)


def unpack_int_matrix(payload: bytes) -> list[list[int]]:
    reader = Reader(payload)
    out = _read_int_matrix(reader)
    reader.expect_end()
    return out


PROTOCOL_ID_BASIC = 1
PROTOCOL_ID_FULL = 2


def pack_query(k: int, protocol_id: int, cts: list[Ciphertext]) -> bytes:
    buf = bytearray()
    put_u32(buf, k)
    put_u8(buf, protocol_id)
    _put_ct_vec(buf, cts)
    return bytes(buf)


def unpack_query(pk, payload) -> tuple[int, int, list[Ciphertext]]:
    reader = Reader(payload)
    k = reader.u32()
    protocol_id = reader.u8()
    cts = _read_ct_vec(reader, pk)
    reader.expect_end()
    return k, protocol_id, cts


def pack_blinds(result_address: str, blinds: list[list[int]]) -> bytes:
    # The address tells the querying user where to collect the blinded
    # result matrix (the C2 daemon); empty for in-process channels.
    buf = bytearray()
    put_utf8(buf, result_address)
    _put_int_matrix(buf, blinds)
    return bytes(buf)


def unpack_blinds(payload: bytes) -> tuple[str, list[list[int]]]:
    reader = Reader(payload)
    address = reader.utf8()
    blinds = _read_int_matrix(reader)
    reader.expect_end()
    return address, blinds


def pack_error(code: ErrorCode, text: str) -> bytes:
    buf = bytearray()
    put_u32(buf, code)
    put_utf8(buf, text)
    return bytes(buf)


def unpack_error(payload: bytes) -> tuple[ErrorCode, str]:
    reader = Reader(payload)
    raw = reader.u32()
    code = ErrorCode(raw) if raw in ErrorCode._value2member_map_ else ErrorCode.INTERNAL
    text = reader.utf8()
    reader.expect_end()
    return code, text


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)


def format_address(address: tuple[str, int]) -> str:
    return f"{address[0]}:{address[1]}"
