import random

import pytest

from secureknn import oracle, transport
from secureknn.bench import synthetic_table
from secureknn.database import ColumnSpec, TableSchema, encrypt_table, table_from_rows
from secureknn.primitives import EncryptedBits, InlineC2, Observer, smin_n
from secureknn.protocols import (
    PROTOCOL_BASIC,
    PROTOCOL_FULL,
    C2Responder,
    blind_records,
    build_query_message,
    exclude_winner,
    reconstruct_value,
    run_query_in_process,
    select_winner_record,
)
from secureknn.transport import Message, MsgType, ProtocolError

from helpers import (
    HEART_DISTANCES,
    HEART_QUERY,
    HEART_ROWS,
    bits_to_int,
    encrypt_heart,
)


def enc_bits(pk, rng, value, length):
    return EncryptedBits(pk.encrypt(b, rng) for b in oracle.plain_bits(value, length))


def returned_distance_multiset(rows, query, feature_columns):
    return sorted(
        oracle.plain_squared_distance([row[j] for j in feature_columns], query)
        for row in rows
    )


# ---------------------------------------------------------------------------
# local building blocks
# ---------------------------------------------------------------------------


def test_reconstruct_value(pk, sk, rng):
    assert sk.decrypt(reconstruct_value(enc_bits(pk, rng, 55, 6))) == 55
    assert sk.decrypt(reconstruct_value(enc_bits(pk, rng, 0, 6))) == 0
    # The all-ones exclusion sentinel reconstructs to 2^l - 1.
    assert sk.decrypt(reconstruct_value(enc_bits(pk, rng, 63, 6))) == 63


def test_select_winner_record_basis_vectors(pk, sk, rng, chan):
    rows = [[pk.encrypt(v, rng)] for v in (10, 20, 30)]
    basis3 = [pk.encrypt(b, rng) for b in (0, 0, 1)]
    picked = select_winner_record(chan, basis3, rows, rng)
    assert [sk.decrypt(ct) for ct in picked] == [30]
    basis1 = [pk.encrypt(b, rng) for b in (1, 0, 0)]
    assert [sk.decrypt(ct) for ct in select_winner_record(chan, basis1, rows, rng)] == [10]


def test_select_winner_record_random_oracle(pk, sk, rng, chan):
    table = [[rng.randrange(50) for _ in range(3)] for _ in range(8)]
    rows = [[pk.encrypt(v, rng) for v in row] for row in table]
    winner = rng.randrange(8)
    flags = [pk.encrypt(1 if i == winner else 0, rng) for i in range(8)]
    picked = select_winner_record(chan, flags, rows, rng)
    assert [sk.decrypt(ct) for ct in picked] == table[winner]


def test_exclude_winner_bits(pk, sk, rng, chan):
    dist_bits = [enc_bits(pk, rng, 0b0110, 4), enc_bits(pk, rng, 0b0110, 4)]
    original_values = {b.value for bits in dist_bits for b in bits}
    flags = [pk.encrypt(1, rng), pk.encrypt(0, rng)]
    updated = exclude_winner(chan, flags, dist_bits, rng)
    assert [sk.decrypt(b) for b in updated[0]] == [1, 1, 1, 1]
    assert [sk.decrypt(b) for b in updated[1]] == [0, 1, 1, 0]
    # Untouched row is plaintext-equal but re-randomized.
    assert all(b.value not in original_values for b in updated[1])


def test_two_exclusions_then_minimum_skips_both(pk, sk, rng, chan):
    values = (3, 5, 9)
    dist_bits = [enc_bits(pk, rng, v, 4) for v in values]
    for winner in (0, 1):
        flags = [pk.encrypt(1 if i == winner else 0, rng) for i in range(3)]
        dist_bits = exclude_winner(chan, flags, dist_bits, rng)
    assert bits_to_int(sk, dist_bits[0]) == 15
    assert bits_to_int(sk, dist_bits[1]) == 15
    assert bits_to_int(sk, smin_n(chan, dist_bits, rng)) == 9


def test_blinding_algebra(pk, sk, rng):
    # Delivery: C2 decrypts value + blind, the user subtracts the blind.
    record = [pk.encrypt(200, rng), pk.encrypt(5, rng)]
    gamma, blinds = blind_records([record], rng)
    decrypted = [sk.decrypt(ct) for ct in gamma[0]]
    assert [(g - b) % pk.n for g, b in zip(decrypted, blinds[0])] == [200, 5]

    class FixedBlinds:
        def __init__(self, blinds, base):
            self.blinds = list(blinds)
            self.base = base

        def randrange(self, *args, **kwargs):
            if self.blinds:
                return self.blinds.pop(0)
            return self.base.randrange(*args, **kwargs)

    fixed = FixedBlinds([17, pk.n - 3], rng)
    gamma, blinds = blind_records([record], fixed)
    got = [sk.decrypt(ct) for ct in gamma[0]]
    assert got[0] == 217 and blinds[0] == [17, pk.n - 3]
    assert got[1] == 2  # 5 + (n - 3) wraps
    assert [(g - b) % pk.n for g, b in zip(got, blinds[0])] == [200, 5]


def test_build_query_message(pk, rng):
    msg = build_query_message(pk, HEART_QUERY, 2, PROTOCOL_FULL, rng)
    k, protocol_id, cts = transport.unpack_query(pk, msg.payload)
    assert k == 2 and protocol_id == transport.PROTOCOL_ID_FULL and len(cts) == 9
    with pytest.raises(ValueError, match="k must be"):
        build_query_message(pk, HEART_QUERY, 0, PROTOCOL_FULL, rng)
    with pytest.raises(ValueError, match="protocol"):
        build_query_message(pk, HEART_QUERY, 1, "turbo", rng)
    with pytest.raises(ValueError, match="attributes"):
        build_query_message(pk, HEART_QUERY, 1, PROTOCOL_FULL, rng, expected_features=10)


# ---------------------------------------------------------------------------
# end-to-end, in process
# ---------------------------------------------------------------------------


def test_heart_basic_golden(pk, sk, rng):
    db = encrypt_heart(pk, rng)
    rows = run_query_in_process(pk, sk, db, HEART_QUERY, 2, PROTOCOL_BASIC, rng)
    assert rows == [HEART_ROWS[4], HEART_ROWS[3]]  # ascending distance: t5, t4


def test_heart_full_golden_selection_order(pk, sk, rng):
    db = encrypt_heart(pk, rng)
    rows = run_query_in_process(pk, sk, db, HEART_QUERY, 2, PROTOCOL_FULL, rng)
    assert rows == [HEART_ROWS[4], HEART_ROWS[3]]  # nearest first: 118 then 139


def test_exact_match_row_comes_first(pk, sk, rng):
    db = encrypt_heart(pk, rng)
    query = HEART_ROWS[2][:9]
    rows = run_query_in_process(pk, sk, db, query, 1, PROTOCOL_BASIC, rng)
    assert rows == [HEART_ROWS[2]]


def test_k_equals_n_returns_whole_table(pk, sk, rng):
    db = encrypt_heart(pk, rng)
    rows = run_query_in_process(pk, sk, db, HEART_QUERY, 6, PROTOCOL_BASIC, rng)
    assert sorted(map(tuple, rows)) == sorted(map(tuple, HEART_ROWS))


def test_single_record_database(pk, sk, rng):
    schema = TableSchema((ColumnSpec("x", 0, 9, True), ColumnSpec("y", 0, 9, True)))
    db = encrypt_table(pk, table_from_rows(schema, [[3, 7]]), rng)
    for protocol in (PROTOCOL_BASIC, PROTOCOL_FULL):
        assert run_query_in_process(pk, sk, db, [1, 1], 1, protocol, rng) == [[3, 7]]


def test_duplicate_rows_tie(pk, sk, rng):
    schema = TableSchema((ColumnSpec("x", 0, 15, True), ColumnSpec("y", 0, 15, True)))
    rows = [[4, 4], [4, 4], [9, 9], [0, 15]]
    db = encrypt_table(pk, table_from_rows(schema, rows), rng)
    query = [4, 4]

    observer = Observer()
    got = run_query_in_process(pk, sk, db, query, 1, PROTOCOL_FULL, rng, observer=observer)
    assert got[0] == [4, 4]
    # Both copies sit at the minimum: exactly two zero entries surfaced.
    betas = observer.values(Observer.BETA)
    assert len(betas) == 4 and betas.count(0) == 2

    got = run_query_in_process(pk, sk, db, query, 3, PROTOCOL_FULL, rng)
    assert returned_distance_multiset(got, query, (0, 1)) == oracle.plain_knn_distances(
        rows, query, 3
    )


@pytest.mark.parametrize("protocol", [PROTOCOL_BASIC, PROTOCOL_FULL])
def test_random_instances_match_oracle(pk, sk, protocol):
    rng = random.Random(1234 if protocol == PROTOCOL_BASIC else 5678)
    runs = 8 if protocol == PROTOCOL_BASIC else 5
    for _ in range(runs):
        n = rng.randrange(2, 11)
        m = rng.randrange(1, 4)
        k = rng.randrange(1, min(3, n) + 1)
        schema = TableSchema(tuple(ColumnSpec(f"c{j}", 0, 15, True) for j in range(m)))
        rows = [[rng.randrange(16) for _ in range(m)] for _ in range(n)]
        db = encrypt_table(pk, table_from_rows(schema, rows), rng)
        query = [rng.randrange(16) for _ in range(m)]
        got = run_query_in_process(pk, sk, db, query, k, protocol, rng)
        assert returned_distance_multiset(got, query, tuple(range(m))) == (
            oracle.plain_knn_distances(rows, query, k)
        ), (rows, query, k)


def test_full_ordering_nondecreasing(pk, sk, rng):
    table = synthetic_table(9, 2, 16, rng)
    db = encrypt_table(pk, table, rng)
    query = [5, 5]
    rows = run_query_in_process(pk, sk, db, query, 4, PROTOCOL_FULL, rng)
    dists = [oracle.plain_squared_distance(r, query) for r in rows]
    assert dists == sorted(dists)


def test_parallel_distance_phase_equivalent(pk, sk, rng):
    table = synthetic_table(7, 3, 16, rng)
    db = encrypt_table(pk, table, rng)
    query = [2, 9, 4]
    got = run_query_in_process(pk, sk, db, query, 2, PROTOCOL_FULL, rng, parallel=2)
    assert returned_distance_multiset(got, query, (0, 1, 2)) == oracle.plain_knn_distances(
        table.rows, query, 2
    )


# ---------------------------------------------------------------------------
# precondition and fault paths
# ---------------------------------------------------------------------------


def test_k_larger_than_table_rejected(pk, sk, rng):
    db = encrypt_heart(pk, rng)
    with pytest.raises(ProtocolError, match="exceeds") as exc_info:
        run_query_in_process(pk, sk, db, HEART_QUERY, 7, PROTOCOL_BASIC, rng)
    assert exc_info.value.code == transport.ErrorCode.PRECONDITION


def test_query_dimension_mismatch_rejected(pk, sk, rng):
    db = encrypt_heart(pk, rng)
    with pytest.raises(ProtocolError, match="attributes") as exc_info:
        run_query_in_process(pk, sk, db, [1, 2, 3], 1, PROTOCOL_FULL, rng)
    assert exc_info.value.code == transport.ErrorCode.PRECONDITION


def test_beta_without_zero_aborts(pk, sk, rng):
    responder = C2Responder(sk, rng)
    chan = InlineC2(sk, rng, extra_handlers=responder.extra_handlers(bytes(16)))
    beta = [pk.encrypt(5, rng), pk.encrypt(9, rng)]
    with pytest.raises(ProtocolError, match="no zero"):
        chan.request(Message(MsgType.BETA, transport.pack_ct_vec(beta)), MsgType.U_VEC)


# ---------------------------------------------------------------------------
# leak boundaries
# ---------------------------------------------------------------------------


def test_basic_leak_is_exactly_the_distances(pk, sk, rng):
    db = encrypt_heart(pk, rng)
    observer = Observer()
    run_query_in_process(pk, sk, db, HEART_QUERY, 2, PROTOCOL_BASIC, rng, observer=observer)
    assert sorted(observer.values(Observer.DISTANCE)) == sorted(HEART_DISTANCES)
    # Everything below the distance domain bound is a true distance;
    # every other decrypted value is blinded into large residues.
    small = [v for v in observer.values() if v < 2**db.bit_length]
    assert sorted(small) == sorted(HEART_DISTANCES)


def test_full_leak_surface_is_structural(pk, sk, rng):
    db = encrypt_heart(pk, rng)
    observer = Observer()
    run_query_in_process(pk, sk, db, HEART_QUERY, 2, PROTOCOL_FULL, rng, observer=observer)
    observed = observer.values()
    threshold = max(2**db.bit_length, db.n)
    # Only structural 0/1 indicators (at secretly permuted positions)
    # ever surface; no distance and no row position.
    assert all(v in (0, 1) or v > threshold for v in observed)
    assert not set(observed) & set(HEART_DISTANCES)
    assert not set(observed) & set(range(2, db.n + 1))
    assert observer.values(Observer.DISTANCE) == []
