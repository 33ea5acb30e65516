"""Command-line surface: key generation, database encryption, the two
cloud daemons, the query client, and the benchmark driver.

Exit codes: 0 success, 2 usage, 3 I/O or file format, 4 protocol or
handshake failure, 5 precondition violation (e.g. k larger than the
table).

Setting the environment variable ``SKNN_SEED`` (an integer) replaces
the system randomness source with a seeded generator for reproducible
transcripts.  That mode is insecure by construction and is announced
loudly on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import random
import socket
import sys
import threading

from . import bench as bench_mod
from . import database, paillier, protocols, transport
from .paillier import RandomSource
from .primitives import Observer
from .transport import ErrorCode, HandshakeError, ProtocolError, Role, TransportError

log = logging.getLogger("secureknn.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PROTOCOL = 4
EXIT_PRECONDITION = 5


def seeded_mode() -> bool:
    return "SKNN_SEED" in os.environ


def make_rng(offset: int = 0) -> RandomSource:
    """System randomness, unless SKNN_SEED pins a reproducible seed."""
    seed = os.environ.get("SKNN_SEED")
    if seed is None:
        return random.SystemRandom()
    print(
        "WARNING: SKNN_SEED is set; using deterministic randomness (INSECURE, test mode)",
        file=sys.stderr,
    )
    return random.Random(int(seed) + offset)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}")


def _address(text: str) -> tuple[str, int]:
    try:
        return transport.parse_address(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _query_row(text: str) -> list[int]:
    try:
        values = [int(part.strip()) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"query must be comma-separated integers: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("query must not be empty")
    if any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("attribute values must be nonnegative")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sknn",
        description="Secure k-nearest-neighbor queries over a Paillier-encrypted database",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a Paillier keypair")
    p.add_argument("--bits", type=int, choices=paillier.ALLOWED_KEY_BITS, required=True)
    p.add_argument("--out-prefix", required=True, help="writes PREFIX.pub and PREFIX.sec")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("encrypt-db", help="encrypt a CSV table for outsourcing")
    p.add_argument("--csv", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--pub", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encrypt_db)

    p = sub.add_parser("serve-c2", help="run the key-cloud daemon")
    p.add_argument("--sec", required=True, help="secret key file")
    p.add_argument("--listen", type=_address, required=True)
    p.add_argument("--max-frame", type=_positive_int, default=transport.DEFAULT_MAX_FRAME)
    p.add_argument(
        "--log-plaintext",
        action="store_true",
        help="log every decrypted value (only allowed in SKNN_SEED test mode)",
    )
    p.set_defaults(func=cmd_serve_c2)

    p = sub.add_parser("serve-c1", help="run the storage-cloud daemon")
    p.add_argument("--db", required=True, help="encrypted database file")
    p.add_argument("--pub", required=True)
    p.add_argument("--listen", type=_address, required=True)
    p.add_argument("--c2-addr", type=_address, required=True)
    p.add_argument("--parallel", type=_positive_int, default=1)
    p.add_argument("--max-frame", type=_positive_int, default=transport.DEFAULT_MAX_FRAME)
    p.set_defaults(func=cmd_serve_c1)

    p = sub.add_parser("query", help="run one k-nearest-neighbor query")
    p.add_argument("--c1-addr", type=_address, required=True)
    p.add_argument("--pub", required=True)
    p.add_argument("--query", type=_query_row, required=True, help="comma-separated attribute values")
    p.add_argument("--k", type=_positive_int, required=True)
    p.add_argument(
        "--protocol",
        choices=(protocols.PROTOCOL_BASIC, protocols.PROTOCOL_FULL),
        default=protocols.PROTOCOL_FULL,
    )
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="sweep synthetic workloads and emit CSV timings")
    p.add_argument(
        "--protocol",
        choices=(protocols.PROTOCOL_BASIC, protocols.PROTOCOL_FULL, "both"),
        default="both",
    )
    p.add_argument("--n", type=_int_list, default=[250, 500, 1000])
    p.add_argument("--m", type=_positive_int, default=2)
    p.add_argument("--k", type=_int_list, default=[5])
    p.add_argument("--bits", type=_int_list, default=[512])
    p.add_argument("--l", type=_int_list, default=None, help="distance bit-width overrides")
    p.add_argument("--values-max", type=_positive_int, default=16)
    p.add_argument("--parallel", type=_positive_int, default=1)
    p.add_argument("--out", default=None, help="CSV output path (default stdout)")
    p.set_defaults(func=cmd_bench)

    return parser


def cmd_keygen(args) -> int:
    rng = make_rng()
    pk, sk = paillier.generate_keypair(args.bits, rng)
    pub_path = args.out_prefix + ".pub"
    sec_path = args.out_prefix + ".sec"
    paillier.write_public_key(pub_path, pk)
    paillier.write_secret_key(sec_path, sk)
    os.chmod(sec_path, 0o600)
    if args.bits == 512:
        print(
            "WARNING: 512-bit keys are INSECURE; use them for tests and benchmarks only",
            file=sys.stderr,
        )
    print(f"public key:  {pub_path}")
    print(f"secret key:  {sec_path}")
    print(f"fingerprint: {pk.fingerprint().hex()}")
    return EXIT_OK


def cmd_encrypt_db(args) -> int:
    rng = make_rng()
    schema = database.load_schema(args.schema)
    table = database.load_csv(args.csv, schema)
    pk = paillier.load_public_key(args.pub)
    db = database.encrypt_table(pk, table, rng)
    database.save_database(args.out, db)
    print(f"encrypted {db.n} rows x {db.m} columns -> {args.out}")
    print(f"feature columns: {', '.join(db.column_names[j] for j in db.feature_columns)}")
    print(f"distance bit width l = {db.bit_length}")
    return EXIT_OK


def _serve_loop(listen, handler, name) -> int:
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind(listen)
    server.listen(32)
    host, port = server.getsockname()[:2]
    print(f"{name} listening on {host}:{port}", flush=True)
    try:
        while True:
            conn, _ = server.accept()
            threading.Thread(target=handler, args=(conn,), daemon=True).start()
    except KeyboardInterrupt:
        return EXIT_OK
    finally:
        server.close()


class _LoggingObserver(Observer):
    """Test-mode observer that also logs every value the key cloud sees."""

    def record(self, context: str, value: int) -> None:
        super().record(context, value)
        log.info("plaintext[%s] = %d", context, value)


def cmd_serve_c2(args) -> int:
    if args.log_plaintext and not seeded_mode():
        print("--log-plaintext requires SKNN_SEED test mode", file=sys.stderr)
        return EXIT_USAGE
    sk = paillier.load_secret_key(args.sec)
    fingerprint = sk.public.fingerprint()
    observer = _LoggingObserver() if args.log_plaintext else None
    responder = protocols.C2Responder(sk, make_rng(offset=2), observer)
    print(f"key fingerprint: {fingerprint.hex()}", flush=True)

    def handle(conn) -> None:
        try:
            chan = transport.accept_handshake(conn, Role.C2, fingerprint, args.max_frame)
        except HandshakeError as exc:
            log.warning("handshake rejected: %s", exc)
            return
        responder.serve_connection(chan)

    return _serve_loop(args.listen, handle, "key cloud (C2)")


def cmd_serve_c1(args) -> int:
    pk = paillier.load_public_key(args.pub)
    db = database.load_database(args.db, pk)
    fingerprint = pk.fingerprint()
    rng = make_rng(offset=1)
    c2_address = args.c2_addr

    def open_c2(session_id: bytes):
        return transport.connect(
            c2_address, Role.C1, fingerprint, session_id, args.max_frame
        )

    worker_spec = (
        protocols.tcp_worker_spec(c2_address, fingerprint, args.max_frame)
        if args.parallel > 1
        else None
    )
    coordinator = protocols.C1Coordinator(
        db,
        pk,
        open_c2,
        rng,
        parallel=args.parallel,
        worker_spec=worker_spec,
        result_address=transport.format_address(c2_address),
    )
    print(f"database: {db.n} rows x {db.m} columns, l={db.bit_length}", flush=True)

    def handle(conn) -> None:
        try:
            chan = transport.accept_handshake(conn, Role.C1, fingerprint, args.max_frame)
        except HandshakeError as exc:
            log.warning("handshake rejected: %s", exc)
            return
        coordinator.handle_session(chan)

    return _serve_loop(args.listen, handle, "storage cloud (C1)")


def cmd_query(args) -> int:
    pk = paillier.load_public_key(args.pub)
    fingerprint = pk.fingerprint()
    rng = make_rng(offset=3)

    def open_c1(session_id: bytes):
        return transport.connect(args.c1_addr, Role.BOB, fingerprint, session_id)

    def open_c2(session_id: bytes, address: str):
        return transport.connect(
            transport.parse_address(address), Role.BOB, fingerprint, session_id
        )

    rows = protocols.execute_query(
        pk, args.query, args.k, args.protocol, open_c1, open_c2, rng
    )
    for row in rows:
        print(",".join(str(v) for v in row))
    return EXIT_OK


def cmd_bench(args) -> int:
    rng = make_rng()
    if args.protocol == "both":
        protos = [protocols.PROTOCOL_BASIC, protocols.PROTOCOL_FULL]
    else:
        protos = [args.protocol]
    points = bench_mod.sweep(
        rng,
        protos,
        args.n,
        args.m,
        args.k,
        key_bits_values=args.bits,
        bit_lengths=args.l,
        value_bound=args.values_max,
        parallel=args.parallel,
    )
    lines = [bench_mod.BenchPoint.CSV_HEADER] + [p.csv_row() for p in points]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION if exc.code == ErrorCode.PRECONDITION else EXIT_PROTOCOL
    except database.KeyMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (HandshakeError, TransportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (
        paillier.KeyFormatError,
        database.SchemaError,
        database.DataError,
        database.DatabaseFormatError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (database.DomainTooLargeError, paillier.PaillierError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
