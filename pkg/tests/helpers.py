"""Shared test utilities: scripted randomness, the heart-disease
sample data, and the acceptance-criteria report registry."""

from __future__ import annotations

import random
from pathlib import Path

from secureknn import database
from secureknn.paillier import PaillierPublicKey

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
HEART_CSV = DATA_DIR / "heart.csv"
HEART_SCHEMA = DATA_DIR / "heart.schema"

HEART_ROWS = [
    [63, 1, 1, 145, 233, 1, 3, 0, 6, 0],
    [56, 1, 3, 130, 256, 1, 2, 1, 6, 2],
    [57, 0, 3, 140, 241, 0, 2, 0, 7, 1],
    [59, 1, 4, 144, 200, 1, 2, 2, 6, 3],
    [55, 0, 4, 128, 205, 0, 2, 1, 7, 3],
    [77, 1, 4, 125, 304, 0, 1, 3, 3, 4],
]
HEART_FEATURES = list(range(9))  # "num" is the returned label, not a distance input
HEART_QUERY = [58, 1, 4, 133, 196, 1, 2, 1, 6]
# Squared distances of HEART_QUERY to each row over the 9 feature columns,
# computed by hand and cross-checked by the oracle tests.
HEART_DISTANCES = [1549, 3614, 2080, 139, 118, 12104]


def load_heart_table() -> database.PlainTable:
    schema = database.load_schema(str(HEART_SCHEMA))
    return database.load_csv(str(HEART_CSV), schema)


def encrypt_heart(pk: PaillierPublicKey, rng) -> database.EncryptedDatabase:
    return database.encrypt_table(pk, load_heart_table(), rng)


class ScriptedRng:
    """Randomness source whose first ``randrange`` calls return forced
    values, then defers to a base source.  Used to pin protocol blinds
    in golden-transcript tests."""

    def __init__(self, forced, base: random.Random):
        self.forced = list(forced)
        self.base = base

    def randrange(self, *args, **kwargs):
        if self.forced:
            return self.forced.pop(0)
        return self.base.randrange(*args, **kwargs)

    def getrandbits(self, bits: int) -> int:
        return self.base.getrandbits(bits)

    def shuffle(self, seq) -> None:
        self.base.shuffle(seq)

    def choice(self, seq):
        return self.base.choice(seq)


def bits_to_int(sk, bits) -> int:
    """Decrypt an encrypted bit vector (MSB first) to its integer."""
    length = len(bits)
    return sum(sk.decrypt(b) << (length - 1 - i) for i, b in enumerate(bits))


# The acceptance suite records one line per criterion here; the
# conftest terminal-summary hook prints them after the run.
ACCEPTANCE_REPORT: list[tuple[str, str]] = []


def report(criterion: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    if detail:
        status = f"{status} ({detail})"
    ACCEPTANCE_REPORT.append((criterion, status))
    assert passed, f"{criterion}: {detail}"


def report_skip(criterion: str, reason: str) -> None:
    ACCEPTANCE_REPORT.append((criterion, f"SKIP ({reason})"))
