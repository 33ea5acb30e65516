"""End-to-end query protocols across the three parties.

Roles:

* the querying user ("Bob") encrypts a query vector and receives the
  k nearest records, blinded so that neither cloud sees them;
* the storage cloud (C1) holds the encrypted database and orchestrates;
* the key cloud (C2) holds the secret key and answers masked requests.

Two protocols are offered.  The *basic* protocol computes encrypted
distances, then lets C2 decrypt them and pick the k smallest; it is
fast but reveals the distances and the winning row identities to the
clouds.  The *full* protocol keeps everything under encryption: each
round an oblivious minimum over bitwise-encrypted distances selects
one record through an encrypted 0/1 indicator vector, and the chosen
record's distance bits are OR-ed to all ones (the sentinel 2^l - 1) so
later rounds skip it, without either cloud learning which row it was.

Result delivery is shared: C1 additively blinds the winning records
and hands the blinds to the user and the blinded ciphertexts to C2;
C2 decrypts and hands the blinded plaintexts to the user, who removes
the blinds.  C1 never sees plaintext records; C2 sees only uniformly
blinded residues.
"""

from __future__ import annotations

import logging
import queue
import random
import threading
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

from . import transport
from .database import EncryptedDatabase
from .paillier import (
    Ciphertext,
    PaillierPublicKey,
    PaillierSecretKey,
    RandomSource,
)
from .primitives import (
    DEFAULT_KAPPA,
    EncryptedBits,
    InlineC2,
    Observer,
    ProtocolFault,
    ResponderState,
    sbd,
    sbor_batch,
    serve_session,
    sm_batch,
    smin_n,
    ssed,
)
from .transport import (
    ErrorCode,
    Message,
    MsgType,
    PartyEndpoint,
    ProtocolError,
    Role,
    SessionClosed,
    loopback_pair,
)

log = logging.getLogger("secureknn")

PROTOCOL_BASIC = "basic"
PROTOCOL_FULL = "full"
_PROTOCOL_IDS = {
    PROTOCOL_BASIC: transport.PROTOCOL_ID_BASIC,
    PROTOCOL_FULL: transport.PROTOCOL_ID_FULL,
}
_PROTOCOL_NAMES = {v: k for k, v in _PROTOCOL_IDS.items()}


def new_session_id(rng: RandomSource) -> bytes:
    return rng.getrandbits(8 * transport.SESSION_ID_LEN).to_bytes(
        transport.SESSION_ID_LEN, "big"
    )


# ---------------------------------------------------------------------------
# Querying user's side
# ---------------------------------------------------------------------------


def build_query_message(
    pk: PaillierPublicKey,
    values: Sequence[int],
    k: int,
    protocol: str,
    rng: RandomSource,
    expected_features: int | None = None,
) -> Message:
    """Encrypt a query attribute-wise into a QUERY message."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if protocol not in _PROTOCOL_IDS:
        raise ValueError(f"protocol must be one of {sorted(_PROTOCOL_IDS)}")
    if expected_features is not None and len(values) != expected_features:
        raise ValueError(
            f"query has {len(values)} attributes, schema expects {expected_features}"
        )
    if not values:
        raise ValueError("query must have at least one attribute")
    cts = [pk.encrypt(v, rng) for v in values]
    return Message(MsgType.QUERY, transport.pack_query(k, _PROTOCOL_IDS[protocol], cts))


def execute_query(
    pk: PaillierPublicKey,
    values: Sequence[int],
    k: int,
    protocol: str,
    open_c1: Callable[[bytes], PartyEndpoint],
    open_c2: Callable[[bytes, str], PartyEndpoint],
    rng: RandomSource,
) -> list[list[int]]:
    """Run one query as the user and return plaintext records.

    ``open_c1(session_id)`` opens the session to the storage cloud;
    ``open_c2(session_id, address)`` opens the result pickup session to
    the key cloud at the address announced in the BLINDS message.
    """
    query_msg = build_query_message(pk, values, k, protocol, rng)
    session_id = new_session_id(rng)

    c1 = open_c1(session_id)
    try:
        reply = c1.request(query_msg, MsgType.BLINDS)
        result_address, blinds = transport.unpack_blinds(reply.payload)
    finally:
        c1.close()

    c2 = open_c2(session_id, result_address)
    try:
        reply = c2.receive()
        if reply.msg_type == MsgType.ERROR:
            code, text = transport.unpack_error(reply.payload)
            raise ProtocolError(f"result delivery failed: {text}", code)
        if reply.msg_type != MsgType.GAMMA_PRIME:
            raise ProtocolError(f"expected GAMMA_PRIME, got {reply.msg_type.name}")
        blinded = transport.unpack_int_matrix(reply.payload)
    finally:
        c2.close()

    if len(blinded) != len(blinds) or any(
        len(a) != len(b) for a, b in zip(blinded, blinds)
    ):
        raise ProtocolError("blind and result matrices disagree in shape")
    n = pk.n
    return [
        [(cell - blind) % n for cell, blind in zip(row, blind_row)]
        for row, blind_row in zip(blinded, blinds)
    ]


# ---------------------------------------------------------------------------
# Storage cloud (C1) side
# ---------------------------------------------------------------------------


def reconstruct_value(bits: EncryptedBits) -> Ciphertext:
    """Encryption of the value from its bit encryptions (MSB first)."""
    length = len(bits)
    total: Ciphertext | None = None
    for i, bit in enumerate(bits):
        weight = 1 << (length - 1 - i)
        term = bit if weight == 1 else bit * weight
        total = term if total is None else total + term
    if total is None:
        raise ValueError("empty bit vector")
    return total


def select_winner_record(
    chan: PartyEndpoint,
    flags: Sequence[Ciphertext],
    rows: Sequence[Sequence[Ciphertext]],
    rng: RandomSource,
) -> list[Ciphertext]:
    """Attribute-wise encryption of the row whose flag encrypts 1.

    ``flags`` decrypts to a standard basis vector; multiplying every
    cell by its row flag and summing columns selects the marked row
    without revealing which one it was.
    """
    m = len(rows[0])
    pairs = [(flags[i], rows[i][j]) for i in range(len(rows)) for j in range(m)]
    products = sm_batch(chan, pairs, rng)
    record = []
    for j in range(m):
        column = products[j]
        for i in range(1, len(rows)):
            column = column + products[i * m + j]
        record.append(column)
    return record


def exclude_winner(
    chan: PartyEndpoint,
    flags: Sequence[Ciphertext],
    dist_bits: Sequence[EncryptedBits],
    rng: RandomSource,
) -> list[EncryptedBits]:
    """OR every distance bit with its row flag.

    The winning row's bits all become 1 (the sentinel value 2^l - 1) so
    the next minimum round cannot choose it again; other rows keep
    their value under fresh ciphertexts.
    """
    length = len(dist_bits[0])
    pairs = [(flags[i], bit) for i, bits in enumerate(dist_bits) for bit in bits]
    ored = sbor_batch(chan, pairs, rng)
    return [
        EncryptedBits(ored[i * length : (i + 1) * length])
        for i in range(len(dist_bits))
    ]


WorkerSpec = tuple


def local_worker_spec(sk: PaillierSecretKey) -> WorkerSpec:
    """Worker channel spec for single-process deployments (tests and
    benchmarks, where the caller legitimately holds both roles)."""
    return ("local", sk.lam, sk.mu)


def tcp_worker_spec(
    address: tuple[str, int], fingerprint: bytes, max_frame: int = transport.DEFAULT_MAX_FRAME
) -> WorkerSpec:
    return ("tcp", address[0], address[1], fingerprint.hex(), max_frame)


def _open_worker_channel(spec: WorkerSpec, pk: PaillierPublicKey, rng: RandomSource):
    if spec[0] == "local":
        sk = PaillierSecretKey(pk, spec[1], spec[2])
        return InlineC2(sk, rng)
    if spec[0] == "tcp":
        _, host, port, fp_hex, max_frame = spec
        return transport.connect(
            (host, port), Role.C1, bytes.fromhex(fp_hex), new_session_id(rng), max_frame
        )
    raise ValueError(f"unknown worker channel spec {spec[0]!r}")


def _distance_worker(args) -> list[tuple[int, list[int] | None]]:
    spec, n, g, row_chunk, query_values, bit_length, kappa, seed = args
    pk = PaillierPublicKey(n, g)
    rng: RandomSource = random.Random(seed) if seed is not None else random.SystemRandom()
    chan = _open_worker_channel(spec, pk, rng)
    try:
        enc_query = [Ciphertext(pk, v) for v in query_values]
        out: list[tuple[int, list[int] | None]] = []
        for row_values in row_chunk:
            enc_row = [Ciphertext(pk, v) for v in row_values]
            dist = ssed(chan, enc_query, enc_row, rng)
            if bit_length:
                bits = sbd(chan, dist, bit_length, rng, kappa)
                out.append((dist.value, [b.value for b in bits]))
            else:
                out.append((dist.value, None))
        return out
    finally:
        chan.close()


def distance_phase(
    chan: PartyEndpoint,
    db: EncryptedDatabase,
    enc_query: Sequence[Ciphertext],
    rng: RandomSource,
    with_bits: bool,
    kappa: int = DEFAULT_KAPPA,
    parallel: int = 1,
    worker_spec: WorkerSpec | None = None,
    worker_seeds: Sequence[int] | None = None,
) -> tuple[list[Ciphertext], list[EncryptedBits] | None]:
    """Per-record squared distance (and optionally its bit decomposition).

    Records are mutually independent, so with ``parallel > 1`` the rows
    are split over a process pool in which each worker drives its own
    session to the key cloud.  Output order is row order regardless of
    scheduling.
    """
    pk = enc_query[0].pk
    if parallel > 1 and worker_spec is not None and db.n > 1:
        chunks: list[list[int]] = [[] for _ in range(min(parallel, db.n))]
        for i in range(db.n):
            chunks[i % len(chunks)].append(i)
        args = []
        for w, chunk in enumerate(chunks):
            seed = None if worker_seeds is None else worker_seeds[w % len(worker_seeds)]
            rows = [[db.rows[i][j].value for j in db.feature_columns] for i in chunk]
            args.append(
                (
                    worker_spec,
                    pk.n,
                    pk.g,
                    rows,
                    [ct.value for ct in enc_query],
                    db.bit_length if with_bits else 0,
                    kappa,
                    seed,
                )
            )
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            chunk_results = list(pool.map(_distance_worker, args))
        dists: list[Ciphertext | None] = [None] * db.n
        bits: list[EncryptedBits | None] = [None] * db.n
        for chunk, results in zip(chunks, chunk_results):
            for i, (dist_value, bit_values) in zip(chunk, results):
                dists[i] = Ciphertext(pk, dist_value)
                if bit_values is not None:
                    bits[i] = EncryptedBits(Ciphertext(pk, v) for v in bit_values)
        return list(dists), (list(bits) if with_bits else None)

    dists = []
    bits = []
    for row in db.rows:
        dist = ssed(chan, enc_query, db.feature_vector(row), rng)
        dists.append(dist)
        if with_bits:
            bits.append(sbd(chan, dist, db.bit_length, rng, kappa))
    return dists, (bits if with_bits else None)


def run_basic_query(
    chan: PartyEndpoint,
    db: EncryptedDatabase,
    enc_query: Sequence[Ciphertext],
    k: int,
    rng: RandomSource,
    parallel: int = 1,
    worker_spec: WorkerSpec | None = None,
    worker_seeds: Sequence[int] | None = None,
) -> list[list[Ciphertext]]:
    """Distance-revealing protocol: C2 decrypts all distances and names
    the winning rows.  Returns the k encrypted records, nearest first."""
    dists, _ = distance_phase(
        chan, db, enc_query, rng, with_bits=False,
        parallel=parallel, worker_spec=worker_spec, worker_seeds=worker_seeds,
    )
    entries = list(enumerate(dists))
    reply = chan.request(
        Message(MsgType.DIST_LIST, transport.pack_dist_list(k, entries)),
        MsgType.INDEX_LIST,
    )
    delta = transport.unpack_index_list(reply.payload)
    if len(delta) != k or any(not 0 <= i < db.n for i in delta):
        raise ProtocolError("invalid winner index list")
    return [list(db.rows[i]) for i in delta]


def run_full_query(
    chan: PartyEndpoint,
    db: EncryptedDatabase,
    enc_query: Sequence[Ciphertext],
    k: int,
    rng: RandomSource,
    kappa: int = DEFAULT_KAPPA,
    parallel: int = 1,
    worker_spec: WorkerSpec | None = None,
    worker_seeds: Sequence[int] | None = None,
) -> list[list[Ciphertext]]:
    """Pattern-hiding protocol: k rounds of oblivious minimum selection.

    Neither cloud learns distances or winner identities; the winning
    row is selected through an encrypted indicator vector and retired
    by forcing its distance bits to the all-ones sentinel.
    """
    pk = enc_query[0].pk
    n = pk.n
    dists, dist_bits = distance_phase(
        chan, db, enc_query, rng, with_bits=True, kappa=kappa,
        parallel=parallel, worker_spec=worker_spec, worker_seeds=worker_seeds,
    )
    assert dist_bits is not None
    winners: list[list[Ciphertext]] = []
    for round_index in range(k):
        dmin_bits = smin_n(chan, dist_bits, rng)
        enc_dmin = reconstruct_value(dmin_bits)
        if round_index == 0:
            enc_dists = dists
        else:
            # Re-derive every row's distance from its (possibly
            # sentinel-overwritten) bits: C1 cannot know which row
            # changed, so it must not cache.
            enc_dists = [reconstruct_value(bits) for bits in dist_bits]
        # E(r_i * (d_min - d_i)): zero exactly for rows at the minimum,
        # otherwise a nonzero residue hidden by the blind.
        masked = [
            (enc_dmin - enc_dists[i]) * rng.randrange(1, n) for i in range(db.n)
        ]
        perm = list(range(db.n))
        rng.shuffle(perm)
        beta = [masked[perm[i]] for i in range(db.n)]
        reply = chan.request(
            Message(MsgType.BETA, transport.pack_ct_vec(beta)), MsgType.U_VEC
        )
        u_vec = transport.unpack_ct_vec(pk, reply.payload)
        if len(u_vec) != db.n:
            raise ProtocolError("indicator vector length mismatch")
        flags: list[Ciphertext] = [None] * db.n  # type: ignore[list-item]
        for i in range(db.n):
            flags[perm[i]] = u_vec[i]
        winners.append(select_winner_record(chan, flags, db.rows, rng))
        dist_bits = exclude_winner(chan, flags, dist_bits, rng)
    return winners


def blind_records(
    winners: Sequence[Sequence[Ciphertext]], rng: RandomSource
) -> tuple[list[list[Ciphertext]], list[list[int]]]:
    """Additively blind each attribute; returns (blinded ciphertexts for
    the key cloud, blinds for the user)."""
    pk = winners[0][0].pk
    blinds = [[rng.randrange(1, pk.n) for _ in row] for row in winners]
    gamma = [
        [ct + pk.encrypt(blind, rng) for ct, blind in zip(row, blind_row)]
        for row, blind_row in zip(winners, blinds)
    ]
    return gamma, blinds


class C1Coordinator:
    """Storage-cloud request handler: one instance per database.

    ``open_c2(session_id)`` must open a fresh session to the key cloud;
    ``result_address`` is what the user is told to dial for result
    pickup (empty for in-process deployments).
    """

    def __init__(
        self,
        db: EncryptedDatabase,
        pk: PaillierPublicKey,
        open_c2: Callable[[bytes], PartyEndpoint],
        rng: RandomSource,
        parallel: int = 1,
        worker_spec: WorkerSpec | None = None,
        worker_seeds: Sequence[int] | None = None,
        result_address: str = "",
        kappa: int = DEFAULT_KAPPA,
    ):
        if db.key_fingerprint != pk.fingerprint():
            raise ValueError("database fingerprint does not match the public key")
        self.db = db
        self.pk = pk
        self.open_c2 = open_c2
        self.rng = rng
        self.parallel = parallel
        self.worker_spec = worker_spec
        self.worker_seeds = worker_seeds
        self.result_address = result_address
        self.kappa = kappa

    def handle_session(self, chan: PartyEndpoint) -> None:
        """Serve one user query session, then close it."""
        try:
            try:
                msg = chan.receive()
            except SessionClosed:
                return
            if msg.msg_type != MsgType.QUERY:
                chan.send_error(ErrorCode.MALFORMED, f"expected QUERY, got {msg.msg_type.name}")
                return
            try:
                k, protocol_id, enc_query = transport.unpack_query(self.pk, msg.payload)
            except Exception as exc:
                chan.send_error(ErrorCode.MALFORMED, f"bad QUERY payload: {exc}")
                return
            problem = self._check_query(k, protocol_id, enc_query)
            if problem:
                chan.send_error(ErrorCode.PRECONDITION, problem)
                return
            self._run(chan, k, protocol_id, enc_query)
        finally:
            chan.close()

    def _check_query(self, k, protocol_id, enc_query) -> str | None:
        if protocol_id not in _PROTOCOL_NAMES:
            return f"unknown protocol id {protocol_id}"
        if k < 1:
            return "k must be at least 1"
        if k > self.db.n:
            return f"k={k} exceeds the record count n={self.db.n}"
        if len(enc_query) != len(self.db.feature_columns):
            return (
                f"query has {len(enc_query)} attributes, database distance "
                f"uses {len(self.db.feature_columns)}"
            )
        return None

    def _run(self, chan, k, protocol_id, enc_query) -> None:
        protocol = _PROTOCOL_NAMES[protocol_id]
        log.info("query: protocol=%s k=%d n=%d", protocol, k, self.db.n)
        c2 = self.open_c2(chan.session_id)
        try:
            if protocol == PROTOCOL_BASIC:
                winners = run_basic_query(
                    c2, self.db, enc_query, k, self.rng,
                    self.parallel, self.worker_spec, self.worker_seeds,
                )
            else:
                winners = run_full_query(
                    c2, self.db, enc_query, k, self.rng, self.kappa,
                    self.parallel, self.worker_spec, self.worker_seeds,
                )
            gamma, blinds = blind_records(winners, self.rng)
            c2.send(Message(MsgType.GAMMA, transport.pack_ct_matrix(gamma)))
            chan.send(
                Message(
                    MsgType.BLINDS,
                    transport.pack_blinds(self.result_address, blinds),
                )
            )
        except ProtocolError as exc:
            log.error("query failed: %s", exc)
            chan.send_error(exc.code, str(exc))
        except transport.TransportError as exc:
            log.error("key-cloud channel failed: %s", exc)
            chan.send_error(ErrorCode.INTERNAL, f"key-cloud channel failed: {exc}")
        finally:
            c2.close()


# ---------------------------------------------------------------------------
# Key cloud (C2) side
# ---------------------------------------------------------------------------


class _ResultMailbox:
    """Blinded result matrices parked per session until the user dials in."""

    def __init__(self):
        self._lock = threading.Lock()
        self._queues: dict[bytes, queue.Queue] = {}

    def queue_for(self, session_id: bytes) -> queue.Queue:
        with self._lock:
            return self._queues.setdefault(session_id, queue.Queue())

    def discard(self, session_id: bytes) -> None:
        with self._lock:
            self._queues.pop(session_id, None)


def _respond_beta(state: ResponderState, payload: bytes) -> Message:
    """Indicator construction: a 1 at one uniformly chosen zero position
    (rows tied at the minimum), 0 elsewhere.  Zero zeros means the
    preceding minimum was wrong: abort."""
    sk = state.secret_key
    pk = sk.public
    beta = transport.unpack_ct_vec(pk, payload)
    plain = [sk.decrypt(ct) for ct in beta]
    for value in plain:
        state.note(Observer.BETA, value)
    zero_positions = [i for i, value in enumerate(plain) if value == 0]
    if not zero_positions:
        raise ProtocolFault("no zero entry in the blinded difference vector")
    chosen = zero_positions[state.rng.randrange(len(zero_positions))]
    flags = [pk.encrypt(1 if i == chosen else 0, state.rng) for i in range(len(beta))]
    return Message(MsgType.U_VEC, transport.pack_ct_vec(flags))


def _respond_dist_list(state: ResponderState, payload: bytes) -> Message:
    sk = state.secret_key
    k, entries = transport.unpack_dist_list(sk.public, payload)
    if not 1 <= k <= len(entries):
        raise ProtocolFault(f"k={k} invalid for {len(entries)} distances")
    decrypted = []
    for index, ct in entries:
        value = sk.decrypt(ct)
        state.note(Observer.DISTANCE, value)
        decrypted.append((value, index))
    decrypted.sort()
    delta = [index for _, index in decrypted[:k]]
    return Message(MsgType.INDEX_LIST, transport.pack_index_list(delta))


class C2Responder:
    """Key-cloud service: answers primitive and protocol requests from
    the storage cloud and delivers blinded results to users.

    Stateless across requests apart from the result mailbox, which
    holds each query's decrypted-but-blinded records until the user's
    pickup session with the same id arrives.
    """

    def __init__(
        self,
        secret_key: PaillierSecretKey,
        rng: RandomSource,
        observer: Observer | None = None,
        delivery_timeout: float = 300.0,
    ):
        self.secret_key = secret_key
        self.rng = rng
        self.observer = observer
        self.delivery_timeout = delivery_timeout
        self.mailbox = _ResultMailbox()

    def _gamma_handler(self, session_id: bytes):
        def handle(state: ResponderState, payload: bytes) -> None:
            sk = state.secret_key
            rows = transport.unpack_ct_matrix(sk.public, payload)
            plain = [[sk.decrypt(ct) for ct in row] for row in rows]
            for row in plain:
                for value in row:
                    state.note(Observer.BLINDED_RESULT, value)
            self.mailbox.queue_for(session_id).put(plain)
            return None

        return handle

    def extra_handlers(self, session_id: bytes):
        return {
            MsgType.BETA: _respond_beta,
            MsgType.DIST_LIST: _respond_dist_list,
            MsgType.GAMMA: self._gamma_handler(session_id),
        }

    def serve_connection(self, chan: PartyEndpoint) -> None:
        if chan.peer_role == Role.BOB:
            self._deliver(chan)
        else:
            serve_session(
                chan,
                self.secret_key,
                self.rng,
                self.observer,
                self.extra_handlers(chan.session_id),
            )

    def _deliver(self, chan: PartyEndpoint) -> None:
        try:
            inbox = self.mailbox.queue_for(chan.session_id)
            try:
                matrix = inbox.get(timeout=self.delivery_timeout)
            except queue.Empty:
                chan.send_error(ErrorCode.INTERNAL, "no result for this session")
                return
            chan.send(Message(MsgType.GAMMA_PRIME, transport.pack_int_matrix(matrix)))
        finally:
            self.mailbox.discard(chan.session_id)
            chan.close()


# ---------------------------------------------------------------------------
# Single-process deployment
# ---------------------------------------------------------------------------


def run_query_in_process(
    pk: PaillierPublicKey,
    sk: PaillierSecretKey,
    db: EncryptedDatabase,
    values: Sequence[int],
    k: int,
    protocol: str,
    rng: RandomSource,
    observer: Observer | None = None,
    parallel: int = 1,
    worker_seeds: Sequence[int] | None = None,
    kappa: int = DEFAULT_KAPPA,
) -> list[list[int]]:
    """Run one query with all three parties in this process.

    The library form of the system used by tests, benchmarks and demos;
    channels are in-process queues but carry the same frames as TCP.
    """
    responder = C2Responder(sk, rng, observer)

    def open_c2_from_c1(session_id: bytes) -> PartyEndpoint:
        c1_end, c2_end = loopback_pair(session_id, (Role.C1, Role.C2))
        threading.Thread(
            target=responder.serve_connection, args=(c2_end,), daemon=True
        ).start()
        return c1_end

    coordinator = C1Coordinator(
        db,
        pk,
        open_c2_from_c1,
        rng,
        parallel=parallel,
        worker_spec=local_worker_spec(sk) if parallel > 1 else None,
        worker_seeds=worker_seeds,
        kappa=kappa,
    )

    def open_c1(session_id: bytes) -> PartyEndpoint:
        bob_end, c1_end = loopback_pair(session_id, (Role.BOB, Role.C1))
        threading.Thread(
            target=coordinator.handle_session, args=(c1_end,), daemon=True
        ).start()
        return bob_end

    def open_c2_from_bob(session_id: bytes, _address: str) -> PartyEndpoint:
        bob_end, c2_end = loopback_pair(session_id, (Role.BOB, Role.C2))
        threading.Thread(
            target=responder.serve_connection, args=(c2_end,), daemon=True
        ).start()
        return bob_end

    return execute_query(pk, values, k, protocol, open_c1, open_c2_from_bob, rng)
