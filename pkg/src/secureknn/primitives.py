"""Two-party secure sub-protocols between the orchestrating cloud (C1)
and the key-holding cloud (C2).

Every function with a ``chan`` parameter runs the C1 side over an open
session; :func:`serve_session` runs the matching C2 side.  Throughout,
C1 holds only ciphertexts, C2 holds the secret key, and everything C2
decrypts is either blinded by randomness known only to C1 or is a 0/1
indicator at a position scrambled by a secret permutation.

The sub-protocols:

* ``sm``      -- product of two encrypted values
* ``ssed``    -- squared Euclidean distance of two encrypted vectors
* ``sbd``     -- bit decomposition of an encrypted value (MSB first)
* ``smin``    -- bitwise encryption of the minimum of two bit vectors
* ``smin_n``  -- minimum of n bit vectors by pairwise tournament
* ``sbor``    -- OR of two encrypted bits

``xor_bits`` is a local helper (no messages).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from . import transport
from .paillier import Ciphertext, PaillierSecretKey, RandomSource, invert
from .transport import (
    ErrorCode,
    Message,
    MsgType,
    PartyEndpoint,
    ProtocolError,
    SessionClosed,
    loopback_pair,
)

DEFAULT_KAPPA = 40

# Pairs per SM_BATCH_REQ frame; larger batches are split transparently.
DEFAULT_BATCH_SIZE = 2048

U_GT_V = "u>v"
V_GT_U = "v>u"
FUNCTIONALITIES = (U_GT_V, V_GT_U)


class EncryptedBits:
    """Bitwise encryption of an l-bit value, most significant bit first."""

    __slots__ = ("bits",)

    def __init__(self, bits: Iterable[Ciphertext]):
        self.bits = tuple(bits)

    def __len__(self) -> int:
        return len(self.bits)

    def __iter__(self):
        return iter(self.bits)

    def __getitem__(self, index: int) -> Ciphertext:
        return self.bits[index]


def sbd_bound_ok(bit_length: int, kappa: int, modulus: int) -> bool:
    """Masking headroom check: 2^(l + kappa + ceil(log2 l) + 1) < n."""
    log_l = math.ceil(math.log2(bit_length)) if bit_length > 1 else 0
    return (1 << (bit_length + kappa + log_l + 1)) < modulus


def sm(chan: PartyEndpoint, enc_a: Ciphertext, enc_b: Ciphertext, rng: RandomSource) -> Ciphertext:
    """Encrypted product of a and b, using the identity
    a*b = (a+r_a)(b+r_b) - a*r_b - b*r_a - r_a*r_b.

    C2 decrypts only the two blinded sums; the result is known to C1
    alone.  Valid for any residues, including negative-encoded values.
    """
    return sm_batch(chan, [(enc_a, enc_b)], rng)[0]


def sm_batch(
    chan: PartyEndpoint,
    pairs: Sequence[tuple[Ciphertext, Ciphertext]],
    rng: RandomSource,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> list[Ciphertext]:
    """Element-wise secure multiplication, one round trip per chunk."""
    if not pairs:
        return []
    out: list[Ciphertext] = []
    for start in range(0, len(pairs), batch_size):
        out.extend(_sm_chunk(chan, pairs[start : start + batch_size], rng))
    return out


def _sm_chunk(chan, pairs, rng) -> list[Ciphertext]:
    pk = pairs[0][0].pk
    n = pk.n
    blinds = []
    masked = []
    for enc_a, enc_b in pairs:
        r_a = rng.randrange(1, n)
        r_b = rng.randrange(1, n)
        blinds.append((r_a, r_b))
        masked.append((enc_a + pk.encrypt(r_a, rng), enc_b + pk.encrypt(r_b, rng)))
    if len(pairs) == 1:
        req = Message(MsgType.SM_REQ, transport.pack_ct_pair(*masked[0]))
        reply = chan.request(req, MsgType.SM_RESP)
        products = [transport.unpack_ct(pk, reply.payload)]
    else:
        req = Message(MsgType.SM_BATCH_REQ, transport.pack_sm_batch_req(masked))
        reply = chan.request(req, MsgType.SM_BATCH_RESP)
        products = transport.unpack_ct_vec(pk, reply.payload)
        if len(products) != len(pairs):
            raise ProtocolError("batch response length mismatch")
    out = []
    for (enc_a, enc_b), (r_a, r_b), h in zip(pairs, blinds, products):
        s = h + enc_a * (n - r_b)
        s = s + enc_b * (n - r_a)
        out.append(s + pk.encrypt(r_a * r_b % n, rng) * (n - 1))
    return out


def ssed(
    chan: PartyEndpoint,
    enc_x: Sequence[Ciphertext],
    enc_y: Sequence[Ciphertext],
    rng: RandomSource,
) -> Ciphertext:
    """Encryption of sum((x_i - y_i)^2) over two encrypted vectors.

    Dimension mismatch is a local error; no messages are sent.
    """
    if len(enc_x) != len(enc_y):
        raise ValueError(f"dimension mismatch: {len(enc_x)} vs {len(enc_y)}")
    if not enc_x:
        raise ValueError("vectors must have at least one component")
    diffs = [a - b for a, b in zip(enc_x, enc_y)]
    squares = sm_batch(chan, [(d, d) for d in diffs], rng)
    total = squares[0]
    for sq in squares[1:]:
        total = total + sq
    return total


def sbd(
    chan: PartyEndpoint,
    enc_z: Ciphertext,
    bit_length: int,
    rng: RandomSource,
    kappa: int = DEFAULT_KAPPA,
) -> EncryptedBits:
    """Bitwise encryption of z (0 <= z < 2^l), MSB first.

    Iterative least-significant-bit extraction.  Each round C1 sends
    the running value under a statistical mask; C2 returns only the
    encrypted parity of the masked value.  C1 unmasks the parity (flip
    when the mask was odd), strips the bit and halves via the inverse
    of 2 modulo n.  Masks shrink with the remaining width so a sum can
    never wrap modulo n.
    """
    pk = enc_z.pk
    if bit_length < 1:
        raise ValueError("bit length must be positive")
    if not sbd_bound_ok(bit_length, kappa, pk.n):
        raise ValueError(
            f"bit length {bit_length} with kappa {kappa} violates the masking bound for this key"
        )
    n = pk.n
    inv2 = invert(2, n)
    current = enc_z
    bits_lsb_first: list[Ciphertext] = []
    for round_index in range(bit_length):
        mask = rng.randrange(0, 1 << (bit_length - round_index + kappa))
        masked = current + pk.encrypt(mask % n, rng)
        reply = chan.request(Message(MsgType.SBD_LSB_REQ, transport.pack_ct(masked)), MsgType.SBD_LSB_RESP)
        parity = transport.unpack_ct(pk, reply.payload)
        if mask % 2 == 0:
            bit = parity
        else:
            bit = pk.encrypt(1, rng) + parity * (n - 1)
        bits_lsb_first.append(bit)
        # (z - z_0) is even, so multiplying by 2^-1 mod n halves exactly.
        current = (current + bit * (n - 1)) * inv2
    return EncryptedBits(reversed(bits_lsb_first))


def xor_bits(enc_u: Ciphertext, enc_v: Ciphertext, enc_uv: Ciphertext) -> Ciphertext:
    """E(u XOR v) from the bit encryptions and their product encryption,
    via u + v - 2uv.  Local, no messages."""
    n = enc_u.pk.n
    return enc_u + enc_v + enc_uv * (n - 2)


def smin(
    chan: PartyEndpoint,
    u_bits: EncryptedBits,
    v_bits: EncryptedBits,
    rng: RandomSource,
    functionality: str | None = None,
    permutations: tuple[Sequence[int], Sequence[int]] | None = None,
) -> EncryptedBits:
    """Bitwise encryption of min(u, v), known to C1 only.

    C1 flips a coin for the comparison direction F (u>v or v>u) and
    runs it obliviously: C2 learns the outcome bit alpha of F but not F
    itself, so alpha tells it nothing about which input won.  Ties take
    the alpha = 0 path and return the common value.

    ``functionality`` pins the coin and ``permutations`` the two secret
    position scramblings; both exist for exhaustive and transcript
    tests and default to fresh random draws.
    """
    if len(u_bits) != len(v_bits):
        raise ValueError(f"bit length mismatch: {len(u_bits)} vs {len(v_bits)}")
    length = len(u_bits)
    pk = u_bits[0].pk
    n = pk.n

    if functionality is None:
        functionality = FUNCTIONALITIES[rng.randrange(2)]
    elif functionality not in FUNCTIONALITIES:
        raise ValueError(f"functionality must be one of {FUNCTIONALITIES}")

    products = sm_batch(chan, list(zip(u_bits, v_bits)), rng)

    w_vec: list[Ciphertext] = []
    gamma_vec: list[Ciphertext] = []
    ell_vec: list[Ciphertext] = []
    r_hats: list[int] = []
    h_prev = pk.encrypt(0, rng)
    enc_minus_one = pk.encrypt(n - 1, rng)
    for i in range(length):
        r_hat = rng.randrange(1, n)
        r_hats.append(r_hat)
        if functionality == U_GT_V:
            # W_i = E(u_i * (1 - v_i)): 1 exactly when u_i > v_i.
            w = u_bits[i] + products[i] * (n - 1)
            gamma = (v_bits[i] - u_bits[i]) + pk.encrypt(r_hat, rng)
        else:
            w = v_bits[i] + products[i] * (n - 1)
            gamma = (u_bits[i] - v_bits[i]) + pk.encrypt(r_hat, rng)
        g = xor_bits(u_bits[i], v_bits[i], products[i])
        # H carries 1 exactly at the first differing bit; earlier entries
        # stay 0, later ones are randomized by the exponent blind.
        h = h_prev * rng.randrange(1, n) + g
        h_prev = h
        phi = enc_minus_one + h
        ell = w + phi * rng.randrange(1, n)
        w_vec.append(w)
        gamma_vec.append(gamma)
        ell_vec.append(ell)

    if permutations is None:
        perm1 = list(range(length))
        perm2 = list(range(length))
        rng.shuffle(perm1)
        rng.shuffle(perm2)
    else:
        perm1, perm2 = (list(p) for p in permutations)
        if sorted(perm1) != list(range(length)) or sorted(perm2) != list(range(length)):
            raise ValueError("permutations must cover every bit position once")

    gamma_perm = [gamma_vec[perm1[i]] for i in range(length)]
    ell_perm = [ell_vec[perm2[i]] for i in range(length)]
    reply = chan.request(
        Message(MsgType.SMIN_REQ, transport.pack_smin_req(gamma_perm, ell_perm)),
        MsgType.SMIN_RESP,
    )
    m_perm, enc_alpha = transport.unpack_smin_resp(pk, reply.payload)
    if len(m_perm) != length:
        raise ProtocolError("SMIN response length mismatch")

    m_tilde: list[Ciphertext | None] = [None] * length
    for i in range(length):
        m_tilde[perm1[i]] = m_perm[i]

    out: list[Ciphertext] = []
    for i in range(length):
        # lambda_i = E(alpha * (other_i - mine_i)): the correction that
        # swaps in the other side's bit exactly when F held.
        lam = m_tilde[i] + enc_alpha * (n - r_hats[i])
        base = u_bits[i] if functionality == U_GT_V else v_bits[i]
        out.append(base + lam)
    return EncryptedBits(out)


def tournament_rounds(count: int) -> list[list[tuple[int, int]]]:
    """Pairing plan of the bottom-up minimum tournament over ``count``
    inputs: per round, (keeper, eliminated) index pairs over the
    original positions.  An unpaired survivor advances unchanged."""
    rounds = []
    alive = list(range(count))
    while len(alive) > 1:
        pairs = [(alive[j], alive[j + 1]) for j in range(0, len(alive) - 1, 2)]
        rounds.append(pairs)
        alive = [alive[j] for j in range(0, len(alive), 2)]
    return rounds


def smin_n(
    chan: PartyEndpoint,
    vectors: Sequence[EncryptedBits],
    rng: RandomSource,
) -> EncryptedBits:
    """Bitwise encryption of the minimum over n bit vectors.

    Pairwise tournament over ceil(log2 n) rounds; a single input is
    returned re-randomized so the output never aliases the input.
    """
    if not vectors:
        raise ValueError("at least one input vector required")
    if len({len(v) for v in vectors}) != 1:
        raise ValueError("input vectors must share one bit length")
    if len(vectors) == 1:
        return EncryptedBits(bit.rerandomized(rng) for bit in vectors[0])
    current = dict(enumerate(vectors))
    for pairs in tournament_rounds(len(vectors)):
        for keeper, eliminated in pairs:
            current[keeper] = smin(chan, current[keeper], current[eliminated], rng)
            del current[eliminated]
    return current[0]


def sbor(chan: PartyEndpoint, enc_a: Ciphertext, enc_b: Ciphertext, rng: RandomSource) -> Ciphertext:
    """E(a OR b) for bit encryptions, via a + b - a*b."""
    return sbor_batch(chan, [(enc_a, enc_b)], rng)[0]


def sbor_batch(
    chan: PartyEndpoint,
    pairs: Sequence[tuple[Ciphertext, Ciphertext]],
    rng: RandomSource,
) -> list[Ciphertext]:
    if not pairs:
        return []
    n = pairs[0][0].pk.n
    products = sm_batch(chan, pairs, rng)
    return [a + b + prod * (n - 1) for (a, b), prod in zip(pairs, products)]


# ---------------------------------------------------------------------------
# C2 side
# ---------------------------------------------------------------------------


class Observer:
    """Test instrumentation: every plaintext the key holder sees.

    Contexts tag where a value surfaced so leak-boundary tests can
    distinguish blinded values from meaningful ones.
    """

    SM_MASKED = "sm_masked"
    SM_PRODUCT = "sm_product"
    SBD_MASKED = "sbd_masked"
    SMIN_ROW = "smin_row"
    BETA = "beta"
    DISTANCE = "distance"
    BLINDED_RESULT = "blinded_result"

    def __init__(self):
        self._lock = threading.Lock()
        self.records: list[tuple[str, int]] = []

    def record(self, context: str, value: int) -> None:
        with self._lock:
            self.records.append((context, value))

    def values(self, context: str | None = None) -> list[int]:
        with self._lock:
            return [v for c, v in self.records if context is None or c == context]

    def clear(self) -> None:
        with self._lock:
            self.records.clear()


class ProtocolFault(Exception):
    """An invariant the protocol guarantees was violated at C2."""


@dataclass
class ResponderState:
    """Everything the C2 side needs to answer one session."""

    secret_key: PaillierSecretKey
    rng: RandomSource
    observer: Observer | None = None

    def note(self, context: str, value: int) -> None:
        if self.observer is not None:
            self.observer.record(context, value)


def _respond_sm(state: ResponderState, payload: bytes) -> Message:
    pk = state.secret_key.public
    a_masked, b_masked = transport.unpack_ct_pair(pk, payload)
    h = _masked_product(state, a_masked, b_masked)
    return Message(MsgType.SM_RESP, transport.pack_ct(h))


def _respond_sm_batch(state: ResponderState, payload: bytes) -> Message:
    pk = state.secret_key.public
    pairs = transport.unpack_sm_batch_req(pk, payload)
    out = [_masked_product(state, a, b) for a, b in pairs]
    return Message(MsgType.SM_BATCH_RESP, transport.pack_ct_vec(out))


def _masked_product(state: ResponderState, a_masked, b_masked) -> Ciphertext:
    sk = state.secret_key
    h_a = sk.decrypt(a_masked)
    h_b = sk.decrypt(b_masked)
    state.note(Observer.SM_MASKED, h_a)
    state.note(Observer.SM_MASKED, h_b)
    h = h_a * h_b % sk.public.n
    state.note(Observer.SM_PRODUCT, h)
    return sk.public.encrypt(h, state.rng)


def _respond_sbd_lsb(state: ResponderState, payload: bytes) -> Message:
    sk = state.secret_key
    masked = transport.unpack_ct(sk.public, payload)
    y = sk.decrypt(masked)
    state.note(Observer.SBD_MASKED, y)
    return Message(MsgType.SBD_LSB_RESP, transport.pack_ct(sk.public.encrypt(y & 1, state.rng)))


def _respond_smin(state: ResponderState, payload: bytes) -> Message:
    sk = state.secret_key
    pk = sk.public
    gamma_perm, ell_perm = transport.unpack_smin_req(pk, payload)
    plain = [sk.decrypt(ct) for ct in ell_perm]
    for value in plain:
        state.note(Observer.SMIN_ROW, value)
    ones = sum(1 for value in plain if value == 1)
    if ones > 1:
        raise ProtocolFault(f"{ones} unit entries in comparison vector")
    alpha = 1 if ones == 1 else 0
    # Gamma'^0 is the constant 1, a deterministic encryption of zero.
    m_vec = [ct * alpha if alpha else Ciphertext(pk, 1) for ct in gamma_perm]
    return Message(
        MsgType.SMIN_RESP,
        transport.pack_smin_resp(m_vec, pk.encrypt(alpha, state.rng)),
    )


PRIMITIVE_HANDLERS: dict[MsgType, Callable[[ResponderState, bytes], Message]] = {
    MsgType.SM_REQ: _respond_sm,
    MsgType.SM_BATCH_REQ: _respond_sm_batch,
    MsgType.SBD_LSB_REQ: _respond_sbd_lsb,
    MsgType.SMIN_REQ: _respond_smin,
}

Handler = Callable[[ResponderState, bytes], Message | None]


def serve_session(
    chan: PartyEndpoint,
    secret_key: PaillierSecretKey,
    rng: RandomSource,
    observer: Observer | None = None,
    extra_handlers: dict[MsgType, Handler] | None = None,
) -> None:
    """Answer requests on one session until the peer closes it.

    Stateless across requests.  A malformed request or a protocol fault
    is answered with an ERROR message and closes the session.
    """
    state = ResponderState(secret_key, rng, observer)
    handlers: dict[MsgType, Handler] = dict(PRIMITIVE_HANDLERS)
    if extra_handlers:
        handlers.update(extra_handlers)
    try:
        while True:
            try:
                msg = chan.receive()
            except SessionClosed:
                return
            handler = handlers.get(msg.msg_type)
            if handler is None:
                chan.send_error(ErrorCode.MALFORMED, f"unexpected {msg.msg_type.name}")
                return
            try:
                reply = handler(state, msg.payload)
            except ProtocolFault as exc:
                chan.send_error(ErrorCode.PROTOCOL_FAULT, str(exc))
                return
            except (transport.FrameError, ValueError) as exc:
                chan.send_error(ErrorCode.MALFORMED, str(exc))
                return
            if reply is not None:
                chan.send(reply)
    finally:
        chan.close()


class InlineC2(PartyEndpoint):
    """Loopback channel that answers C1 requests synchronously in-process.

    Messages still pass through the frame codec.  Used by unit tests
    and by distance-phase worker processes, where spawning a serving
    thread per worker would only add moving parts.
    """

    def __init__(
        self,
        secret_key: PaillierSecretKey,
        rng: RandomSource,
        observer: Observer | None = None,
        extra_handlers: dict[MsgType, Handler] | None = None,
        session_id: bytes | None = None,
    ):
        super().__init__(session_id or bytes(transport.SESSION_ID_LEN), transport.Role.C1)
        self.peer_role = transport.Role.C2
        self._state = ResponderState(secret_key, rng, observer)
        self._handlers: dict[MsgType, Handler] = dict(PRIMITIVE_HANDLERS)
        if extra_handlers:
            self._handlers.update(extra_handlers)
        self._pending: list[Message] = []

    def send(self, msg: Message) -> None:
        _, decoded = transport.decode_frame(
            transport.encode_frame(self.session_id, msg, self.max_frame), self.max_frame
        )
        handler = self._handlers.get(decoded.msg_type)
        if handler is None:
            self._pending.append(
                Message(
                    MsgType.ERROR,
                    transport.pack_error(ErrorCode.MALFORMED, f"unexpected {decoded.msg_type.name}"),
                )
            )
            return
        try:
            reply = handler(self._state, decoded.payload)
        except ProtocolFault as exc:
            self._pending.append(
                Message(MsgType.ERROR, transport.pack_error(ErrorCode.PROTOCOL_FAULT, str(exc)))
            )
            return
        if reply is not None:
            frame = transport.encode_frame(self.session_id, reply, self.max_frame)
            self._pending.append(transport.decode_frame(frame, self.max_frame)[1])

    def receive(self) -> Message:
        if not self._pending:
            raise SessionClosed("no pending reply")
        return self._pending.pop(0)

    def close(self) -> None:
        self._pending.clear()


def spawn_loopback_c2(
    secret_key: PaillierSecretKey,
    rng: RandomSource,
    observer: Observer | None = None,
    extra_handlers: dict[MsgType, Handler] | None = None,
    timeout: float = 120.0,
) -> PartyEndpoint:
    """In-process C2 served from a daemon thread; returns the C1 end."""
    c1_end, c2_end = loopback_pair(timeout=timeout)
    thread = threading.Thread(
        target=serve_session,
        args=(c2_end, secret_key, rng, observer, extra_handlers),
        daemon=True,
    )
    thread.start()
    return c1_end
