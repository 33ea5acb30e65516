"""Synthetic benchmark harness for both query protocols.

Builds random integer tables, runs single queries in-process, and
reports wall-clock seconds per configuration.  Absolute numbers are
hardware-bound; the interesting outputs are the scaling trends
(linear in n and m for the basic protocol, roughly linear in k and in
the distance bit width for the pattern-hiding one).
"""

from __future__ import annotations

import dataclasses
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

from .database import (
    ColumnSpec,
    EncryptedDatabase,
    PlainTable,
    TableSchema,
    encrypt_table,
    table_from_rows,
)
from .oracle import plain_knn_distances
from .paillier import PaillierPublicKey, PaillierSecretKey, RandomSource, generate_keypair
from .primitives import DEFAULT_KAPPA, InlineC2
from .protocols import distance_phase, local_worker_spec, run_query_in_process


@dataclass(frozen=True)
class BenchPoint:
    protocol: str
    n: int
    m: int
    k: int
    bit_length: int
    key_bits: int
    parallel: int
    seconds: float

    CSV_HEADER = "protocol,n,m,k,l,K,parallel,seconds"

    def csv_row(self) -> str:
        return (
            f"{self.protocol},{self.n},{self.m},{self.k},{self.bit_length},"
            f"{self.key_bits},{self.parallel},{self.seconds:.4f}"
        )


def synthetic_table(n: int, m: int, value_bound: int, rng: RandomSource) -> PlainTable:
    """Random table with m feature columns over [0, value_bound)."""
    schema = TableSchema(
        tuple(ColumnSpec(f"a{j}", 0, value_bound - 1, True) for j in range(m))
    )
    rows = [[rng.randrange(value_bound) for _ in range(m)] for _ in range(n)]
    return table_from_rows(schema, rows)


def widen_bit_length(db: EncryptedDatabase, bit_length: int) -> EncryptedDatabase:
    """Force a larger distance width (for l sweeps); never below the
    width the domains require."""
    if bit_length < db.bit_length:
        raise ValueError(f"cannot shrink bit length below {db.bit_length}")
    return dataclasses.replace(db, bit_length=bit_length)


def time_query(
    pk: PaillierPublicKey,
    sk: PaillierSecretKey,
    db: EncryptedDatabase,
    values: Sequence[int],
    k: int,
    protocol: str,
    rng: RandomSource,
    parallel: int = 1,
) -> tuple[list[list[int]], float]:
    start = time.perf_counter()
    rows = run_query_in_process(pk, sk, db, values, k, protocol, rng, parallel=parallel)
    return rows, time.perf_counter() - start


def time_distance_phase(
    pk: PaillierPublicKey,
    sk: PaillierSecretKey,
    db: EncryptedDatabase,
    values: Sequence[int],
    rng: RandomSource,
    parallel: int = 1,
    kappa: int = DEFAULT_KAPPA,
) -> float:
    """Wall time of the per-record distance + bit-decomposition phase."""
    enc_query = [pk.encrypt(v, rng) for v in values]
    chan = InlineC2(sk, rng)
    spec = local_worker_spec(sk) if parallel > 1 else None
    start = time.perf_counter()
    distance_phase(
        chan, db, enc_query, rng, with_bits=True, kappa=kappa,
        parallel=parallel, worker_spec=spec,
    )
    return time.perf_counter() - start


def sweep(
    rng: RandomSource,
    protocols: Sequence[str],
    n_values: Sequence[int],
    m: int,
    k_values: Sequence[int],
    key_bits_values: Sequence[int] = (512,),
    bit_lengths: Sequence[int] | None = None,
    value_bound: int = 16,
    parallel: int = 1,
) -> list[BenchPoint]:
    """Cartesian sweep; one query per configuration point."""
    points: list[BenchPoint] = []
    for key_bits in key_bits_values:
        pk, sk = generate_keypair(key_bits, rng)
        for n in n_values:
            table = synthetic_table(n, m, value_bound, rng)
            base_db = encrypt_table(pk, table, rng)
            query = [rng.randrange(value_bound) for _ in range(m)]
            for bit_length in bit_lengths or [base_db.bit_length]:
                db = widen_bit_length(base_db, bit_length)
                for k in k_values:
                    if k > n:
                        continue
                    for protocol in protocols:
                        rows, seconds = time_query(
                            pk, sk, db, query, k, protocol, rng, parallel
                        )
                        _check_answer(table, query, rows, k, db)
                        points.append(
                            BenchPoint(
                                protocol, n, m, k, db.bit_length, key_bits,
                                parallel, seconds,
                            )
                        )
    return points


def _check_answer(table, query, rows, k, db) -> None:
    # A benchmark that returns wrong answers measures nothing.
    feats = db.feature_columns
    expected = plain_knn_distances([r for r in table.rows], query, k)
    got = sorted(
        sum((row[j] - q) ** 2 for j, q in zip(feats, query)) for row in rows
    )
    if got != expected:
        raise AssertionError(f"benchmark run returned wrong neighbors: {got} != {expected}")


def linear_fit_r_squared(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Coefficient of determination of the least-squares line."""
    return statistics.correlation(xs, ys) ** 2
