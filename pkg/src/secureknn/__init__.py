"""Secure k-nearest-neighbor queries over a Paillier-encrypted database.

A data owner encrypts a table attribute-wise and outsources it to a
storage cloud (C1); the decryption key lives at a separate,
non-colluding key cloud (C2).  A client encrypts a query vector and
the two clouds jointly find the k closest records, either quickly
(revealing distances to the key cloud) or fully obliviously (hiding
distances and access patterns from both clouds).
"""

from .database import (
    ColumnSpec,
    DataError,
    EncryptedDatabase,
    PlainTable,
    SchemaError,
    TableSchema,
    encrypt_table,
    load_csv,
    load_database,
    load_schema,
    save_database,
    table_from_rows,
)
from .paillier import (
    Ciphertext,
    PaillierPublicKey,
    PaillierSecretKey,
    generate_keypair,
    load_public_key,
    load_secret_key,
    write_public_key,
    write_secret_key,
)
from .primitives import (
    DEFAULT_KAPPA,
    EncryptedBits,
    Observer,
    sbd,
    sbor,
    sm,
    sm_batch,
    smin,
    smin_n,
    ssed,
    xor_bits,
)
from .protocols import (
    PROTOCOL_BASIC,
    PROTOCOL_FULL,
    C1Coordinator,
    C2Responder,
    build_query_message,
    execute_query,
    reconstruct_value,
    run_basic_query,
    run_full_query,
    run_query_in_process,
)

__version__ = "0.1.0"
