"""Paillier cryptosystem with the additive-homomorphic operations.

Every protocol in this package is built from four facts about Paillier
ciphertexts under a public key ``(n, g)`` with ``g = n + 1``:

* multiplying two ciphertexts adds their plaintexts modulo ``n``,
* raising a ciphertext to an integer power multiplies its plaintext by
  that integer modulo ``n``,
* encryption is probabilistic (two encryptions of the same value are
  different ciphertexts),
* only the holder of the secret key can decrypt.

Plaintexts are residues in ``[0, n)``.  A negative quantity ``-x`` is
represented as ``n - x``; differences and squares computed on such
residues stay correct modulo ``n``, which is what makes squared
Euclidean distances over encrypted differences work.

Key material and ciphertexts are immutable values and safe to share
between threads.  Key generation and encryption draw from a caller
supplied randomness source (``random.SystemRandom`` in production,
a seeded ``random.Random`` in reproducible test runs).
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field

import gmpy2

from ._wire import Reader, WireError, put_bigint, put_u32

ALLOWED_KEY_BITS = (512, 1024, 2048)

# Miller-Rabin rounds requested from GMP's probabilistic primality test.
PRIMALITY_ROUNDS = 64

_KEY_MAGIC = b"SKNNKEY1"

RandomSource = random.Random


class PaillierError(Exception):
    """Base class for key and ciphertext errors."""


class KeySizeError(PaillierError):
    """Requested key size is not one of the supported sizes."""


class PlaintextRangeError(PaillierError):
    """Plaintext or scalar is outside [0, n)."""


class InvalidCiphertextError(PaillierError):
    """Ciphertext value is outside the valid ciphertext group."""


class KeyFormatError(PaillierError):
    """Key file is malformed or of the wrong kind."""


def powmod(base: int, exp: int, mod: int) -> int:
    """Modular exponentiation via GMP (several times faster than ``pow``)."""
    return int(gmpy2.powmod(base, exp, mod))


def invert(value: int, mod: int) -> int:
    return int(gmpy2.invert(value, mod))


@dataclass(frozen=True)
class PaillierPublicKey:
    """Public half of a keypair: modulus ``n`` and generator ``g = n + 1``.

    ``n_squared`` is cached because every homomorphic operation reduces
    modulo it.
    """

    n: int
    g: int
    n_squared: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "n_squared", self.n * self.n)

    @property
    def key_bits(self) -> int:
        return self.n.bit_length()

    def fingerprint(self) -> bytes:
        """SHA-256 over the serialized (n, g) pair.

        Carried in session handshakes and database headers so that all
        three parties agree on which key the ciphertexts belong to.
        """
        buf = bytearray()
        put_bigint(buf, self.n)
        put_bigint(buf, self.g)
        return hashlib.sha256(bytes(buf)).digest()

    def random_unit(self, rng: RandomSource) -> int:
        """Random element of [1, n) coprime to n."""
        while True:
            r = rng.randrange(1, self.n)
            if math.gcd(r, self.n) == 1:
                return r

    def encrypt(self, m: int, rng: RandomSource) -> "Ciphertext":
        """Encrypt ``m`` in [0, n) with a fresh random factor.

        With ``g = n + 1`` the ciphertext is ``(1 + m*n) * r^n mod n^2``;
        every call draws a fresh ``r``, so repeated encryptions of the
        same value differ.
        """
        if not 0 <= m < self.n:
            raise PlaintextRangeError(f"plaintext out of range [0, n): {m}")
        r = self.random_unit(rng)
        value = (1 + m * self.n) * powmod(r, self.n, self.n_squared) % self.n_squared
        return Ciphertext(self, value)

    def ciphertext(self, value: int) -> "Ciphertext":
        """Wrap a raw ciphertext value (e.g. read from the wire)."""
        return Ciphertext(self, value)


@dataclass(frozen=True)
class PaillierSecretKey:
    """Decryption material: Carmichael exponent ``lam`` and inverse ``mu``.

    Held only by the C2 role; possession of this object is the trust
    boundary of the whole system.
    """

    public: PaillierPublicKey
    lam: int
    mu: int

    def decrypt(self, ct: "Ciphertext") -> int:
        """Recover the unique plaintext in [0, n).

        Raises :class:`InvalidCiphertextError` for values outside the
        ciphertext group (distinct from decrypting to garbage).
        """
        pk = self.public
        value = ct.value
        if not 1 <= value < pk.n_squared or math.gcd(value, pk.n) != 1:
            raise InvalidCiphertextError("value not in the ciphertext group")
        u = powmod(value, self.lam, pk.n_squared)
        return (u - 1) // pk.n * self.mu % pk.n


@dataclass(frozen=True)
class Ciphertext:
    """One Paillier ciphertext: a residue modulo ``n^2``.

    Arithmetic operators perform the homomorphic operations:
    ``a + b`` adds plaintexts, ``a - b`` subtracts, ``a * k`` multiplies
    the plaintext by the integer ``k`` (``0 <= k < n``).
    """

    pk: PaillierPublicKey
    value: int

    def _check_peer(self, other: "Ciphertext") -> None:
        if self.pk.n != other.pk.n:
            raise PaillierError("ciphertexts under different keys")

    def __add__(self, other: "Ciphertext") -> "Ciphertext":
        self._check_peer(other)
        return Ciphertext(self.pk, self.value * other.value % self.pk.n_squared)

    def __sub__(self, other: "Ciphertext") -> "Ciphertext":
        return self + other * (self.pk.n - 1)

    def __mul__(self, scalar: int) -> "Ciphertext":
        if not 0 <= scalar < self.pk.n:
            raise PlaintextRangeError(f"scalar out of range [0, n): {scalar}")
        return Ciphertext(self.pk, powmod(self.value, scalar, self.pk.n_squared))

    def rerandomized(self, rng: RandomSource) -> "Ciphertext":
        """Fresh ciphertext of the same plaintext."""
        r = self.pk.random_unit(rng)
        value = self.value * powmod(r, self.pk.n, self.pk.n_squared) % self.pk.n_squared
        return Ciphertext(self.pk, value)

    def to_bytes(self) -> bytes:
        buf = bytearray()
        put_bigint(buf, self.value)
        return bytes(buf)

    @classmethod
    def from_bytes(cls, pk: PaillierPublicKey, data: bytes) -> "Ciphertext":
        reader = Reader(data)
        ct = read_ciphertext(reader, pk)
        reader.expect_end()
        return ct


def read_ciphertext(reader: Reader, pk: PaillierPublicKey) -> Ciphertext:
    value = reader.bigint()
    if not 1 <= value < pk.n_squared:
        raise WireError("ciphertext value out of range")
    return Ciphertext(pk, value)


def _random_prime(bits: int, rng: RandomSource) -> int:
    # Top two bits forced so the product of two such primes has exactly
    # 2*bits bits; low bit forced to make the candidate odd.
    while True:
        candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        if gmpy2.is_prime(candidate, PRIMALITY_ROUNDS):
            return candidate


def generate_keypair(
    key_bits: int, rng: RandomSource
) -> tuple[PaillierPublicKey, PaillierSecretKey]:
    """Generate a keypair with an ``n`` of exactly ``key_bits`` bits.

    ``key_bits`` must be one of :data:`ALLOWED_KEY_BITS`.  512 is only
    adequate for tests and benchmarks.
    """
    if key_bits not in ALLOWED_KEY_BITS:
        raise KeySizeError(f"key size must be one of {ALLOWED_KEY_BITS}, got {key_bits}")
    half = key_bits // 2
    while True:
        p = _random_prime(half, rng)
        q = _random_prime(half, rng)
        # Reject primes that are equal or too close (Fermat-factorable n).
        if p != q and abs(p - q).bit_length() > half - 100:
            break
    n = p * q
    assert n.bit_length() == key_bits
    g = n + 1
    lam = (p - 1) * (q - 1) // math.gcd(p - 1, q - 1)
    # With g = n + 1, L(g^lam mod n^2) = lam mod n, so mu is its inverse.
    mu = invert(lam % n, n)
    pk = PaillierPublicKey(n, g)
    return pk, PaillierSecretKey(pk, lam, mu)


def _write_key_file(path: str, key_bits: int, parts: list[int]) -> None:
    buf = bytearray(_KEY_MAGIC)
    put_u32(buf, key_bits)
    for part in parts:
        put_bigint(buf, part)
    with open(path, "wb") as fh:
        fh.write(buf)


def write_public_key(path: str, pk: PaillierPublicKey) -> None:
    _write_key_file(path, pk.key_bits, [pk.n, pk.g])


def write_secret_key(path: str, sk: PaillierSecretKey) -> None:
    pk = sk.public
    _write_key_file(path, pk.key_bits, [pk.n, pk.g, sk.lam, sk.mu])


def _read_key_file(path: str) -> tuple[int, Reader]:
    with open(path, "rb") as fh:
        data = fh.read()
    reader = Reader(data)
    try:
        if reader.take(len(_KEY_MAGIC)) != _KEY_MAGIC:
            raise KeyFormatError(f"{path}: not a key file (bad magic)")
        return reader.u32(), reader
    except WireError as exc:
        raise KeyFormatError(f"{path}: {exc}") from exc


def load_public_key(path: str) -> PaillierPublicKey:
    key_bits, reader = _read_key_file(path)
    try:
        n = reader.bigint()
        g = reader.bigint()
        reader.expect_end()
    except WireError as exc:
        raise KeyFormatError(f"{path}: {exc}") from exc
    if n.bit_length() != key_bits:
        raise KeyFormatError(f"{path}: modulus does not match declared size")
    return PaillierPublicKey(n, g)


def load_secret_key(path: str) -> PaillierSecretKey:
    key_bits, reader = _read_key_file(path)
    try:
        n = reader.bigint()
        g = reader.bigint()
        if not reader.remaining:
            raise KeyFormatError(f"{path}: public key file, secret material missing")
        lam = reader.bigint()
        mu = reader.bigint()
        reader.expect_end()
    except WireError as exc:
        raise KeyFormatError(f"{path}: {exc}") from exc
    if n.bit_length() != key_bits:
        raise KeyFormatError(f"{path}: modulus does not match declared size")
    return PaillierSecretKey(PaillierPublicKey(n, g), lam, mu)
