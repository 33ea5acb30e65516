"""Plaintext table ingestion, attribute-wise encryption, and the
encrypted-database file format.

The data owner's side of the system: load a CSV against a declared
schema, validate every cell, encrypt cell by cell, and write a
``SKNNDB01`` file for the storage cloud.

The schema declares per-column domain bounds and which columns enter
the distance computation.  The distance bit width ``l`` is derived
from the declared bounds, not from the data, so it stays stable when
rows are added: ``l = ceil(log2(max possible squared distance + 2))``.
The ``+ 2`` reserves the all-ones value ``2^l - 1`` as the exclusion
sentinel used by the pattern-hiding protocol, so no real distance can
collide with an excluded record.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from typing import Sequence

from ._wire import Reader, WireError, put_bigint, put_u32, put_utf8
from .paillier import (
    Ciphertext,
    PaillierPublicKey,
    RandomSource,
    read_ciphertext,
)
from .primitives import DEFAULT_KAPPA, sbd_bound_ok

DB_MAGIC = b"SKNNDB01"


class SchemaError(ValueError):
    """Schema file is malformed or inconsistent."""


class DataError(ValueError):
    """CSV contents violate the schema."""


class DatabaseFormatError(ValueError):
    """Encrypted database file is malformed."""


class KeyMismatchError(ValueError):
    """Database was encrypted under a different public key."""


class DomainTooLargeError(ValueError):
    """Declared domains need a distance width the key cannot mask."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    lo: int
    hi: int
    feature: bool


@dataclass(frozen=True)
class TableSchema:
    columns: tuple[ColumnSpec, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def feature_indices(self) -> tuple[int, ...]:
        return tuple(i for i, c in enumerate(self.columns) if c.feature)

    def max_squared_distance(self) -> int:
        """Largest squared distance two in-domain feature vectors can have."""
        return sum((c.hi - c.lo) ** 2 for c in self.columns if c.feature)

    def required_bit_length(self) -> int:
        # Feature values and every achievable distance must fit below the
        # all-ones sentinel 2^l - 1; distances dominate except for domains
        # shifted far from zero.
        largest = max(
            self.max_squared_distance(),
            max(c.hi for c in self.columns if c.feature),
        )
        return max(1, math.ceil(math.log2(largest + 2)))


_SCHEMA_LINE = re.compile(
    r"^(?P<name>[^:]+):\s*(?P<lo>\d+)\s*\.\.\s*(?P<hi>\d+)\s*,\s*feature:\s*(?P<feature>yes|no)\s*$"
)


def load_schema(path: str) -> TableSchema:
    """Parse a schema file: one ``name: lo..hi, feature: yes|no`` line
    per column; ``#`` comments and blank lines are ignored."""
    columns = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            match = _SCHEMA_LINE.match(line)
            if not match:
                raise SchemaError(f"{path}:{lineno}: cannot parse {line!r}")
            lo, hi = int(match["lo"]), int(match["hi"])
            if lo > hi:
                raise SchemaError(f"{path}:{lineno}: empty domain {lo}..{hi}")
            columns.append(ColumnSpec(match["name"].strip(), lo, hi, match["feature"] == "yes"))
    if not columns:
        raise SchemaError(f"{path}: no columns declared")
    names = [c.name for c in columns]
    if len(set(names)) != len(names):
        raise SchemaError(f"{path}: duplicate column names")
    if not any(c.feature for c in columns):
        raise SchemaError(f"{path}: at least one feature column required")
    return TableSchema(tuple(columns))


@dataclass(frozen=True)
class PlainTable:
    schema: TableSchema
    rows: tuple[tuple[int, ...], ...]

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def m(self) -> int:
        return len(self.schema.columns)


def table_from_rows(schema: TableSchema, rows: Sequence[Sequence[int]]) -> PlainTable:
    """Validate in-memory rows against the schema (used by benchmarks)."""
    checked = []
    for i, row in enumerate(rows):
        checked.append(_check_row(schema, i, [str(v) for v in row]))
    if not checked:
        raise DataError("no rows")
    return PlainTable(schema, tuple(checked))


def _check_row(schema: TableSchema, row_index: int, cells: Sequence[str]) -> tuple[int, ...]:
    if len(cells) != len(schema.columns):
        raise DataError(
            f"row {row_index + 1}: expected {len(schema.columns)} cells, got {len(cells)}"
        )
    values = []
    for col, (spec, cell) in enumerate(zip(schema.columns, cells)):
        text = cell.strip()
        try:
            value = int(text, 10)
        except ValueError:
            raise DataError(
                f"row {row_index + 1}, column {spec.name!r}: not an integer: {text!r}"
            ) from None
        if not spec.lo <= value <= spec.hi:
            raise DataError(
                f"row {row_index + 1}, column {spec.name!r}: {value} outside {spec.lo}..{spec.hi}"
            )
        values.append(value)
    return tuple(values)


def load_csv(path: str, schema: TableSchema) -> PlainTable:
    """Load and validate a CSV with a header row matching the schema."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != schema.names:
            raise DataError(
                f"{path}: header {header!r} does not match schema columns {list(schema.names)!r}"
            )
        rows = [_check_row(schema, i, cells) for i, cells in enumerate(reader)]
    if not rows:
        raise DataError(f"{path}: no rows")
    return PlainTable(schema, tuple(rows))


@dataclass(frozen=True)
class EncryptedDatabase:
    """Attribute-wise encrypted table plus the protocol parameters the
    storage cloud needs: feature columns, distance bit width, and the
    fingerprint of the key everything is encrypted under."""

    rows: tuple[tuple[Ciphertext, ...], ...]
    feature_columns: tuple[int, ...]
    bit_length: int
    column_names: tuple[str, ...]
    key_fingerprint: bytes

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def m(self) -> int:
        return len(self.column_names)

    def feature_vector(self, row: Sequence[Ciphertext]) -> list[Ciphertext]:
        return [row[j] for j in self.feature_columns]


def encrypt_table(
    pk: PaillierPublicKey,
    table: PlainTable,
    rng: RandomSource,
    kappa: int = DEFAULT_KAPPA,
) -> EncryptedDatabase:
    """Encrypt every cell and fix ``l`` from the declared domains.

    Rejects keys too small to mask an ``l``-bit distance during bit
    decomposition.
    """
    bit_length = table.schema.required_bit_length()
    if not sbd_bound_ok(bit_length, kappa, pk.n):
        raise DomainTooLargeError(
            f"distance width {bit_length} bits cannot be masked under a "
            f"{pk.key_bits}-bit key (kappa={kappa})"
        )
    rows = tuple(
        tuple(pk.encrypt(value, rng) for value in row) for row in table.rows
    )
    return EncryptedDatabase(
        rows=rows,
        feature_columns=table.schema.feature_indices,
        bit_length=bit_length,
        column_names=table.schema.names,
        key_fingerprint=pk.fingerprint(),
    )


def save_database(path: str, db: EncryptedDatabase) -> None:
    """Write the ``SKNNDB01`` format: header (n, m, l, feature bitmap,
    key fingerprint, column names) then row-major ciphertexts."""
    buf = bytearray(DB_MAGIC)
    put_u32(buf, db.n)
    put_u32(buf, db.m)
    put_u32(buf, db.bit_length)
    bitmap = bytearray((db.m + 7) // 8)
    for j in db.feature_columns:
        bitmap[j // 8] |= 0x80 >> (j % 8)
    buf += bitmap
    buf += db.key_fingerprint
    for name in db.column_names:
        put_utf8(buf, name)
    for row in db.rows:
        for ct in row:
            put_bigint(buf, ct.value)
    with open(path, "wb") as fh:
        fh.write(buf)


def load_database(path: str, pk: PaillierPublicKey) -> EncryptedDatabase:
    with open(path, "rb") as fh:
        data = fh.read()
    reader = Reader(data)
    try:
        if reader.take(len(DB_MAGIC)) != DB_MAGIC:
            raise DatabaseFormatError(f"{path}: not an encrypted database (bad magic)")
        n = reader.u32()
        m = reader.u32()
        bit_length = reader.u32()
        bitmap = reader.take((m + 7) // 8)
        fingerprint = reader.take(32)
        if fingerprint != pk.fingerprint():
            raise KeyMismatchError(f"{path}: database was encrypted under a different key")
        names = tuple(reader.utf8() for _ in range(m))
        rows = tuple(
            tuple(read_ciphertext(reader, pk) for _ in range(m)) for _ in range(n)
        )
        reader.expect_end()
    except WireError as exc:
        raise DatabaseFormatError(f"{path}: {exc}") from exc
    features = tuple(j for j in range(m) if bitmap[j // 8] & (0x80 >> (j % 8)))
    if not features:
        raise DatabaseFormatError(f"{path}: no feature columns")
    return EncryptedDatabase(rows, features, bit_length, names, fingerprint)
