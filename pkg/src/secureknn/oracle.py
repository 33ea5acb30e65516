"""Plaintext reference implementations used as ground truth in tests.

Deliberately brute force: linear scans and direct arithmetic, no shared
code with the encrypted protocol path.
"""

from __future__ import annotations

from typing import Sequence


def plain_squared_distance(x: Sequence[int], y: Sequence[int]) -> int:
    if len(x) != len(y):
        raise ValueError("dimension mismatch")
    return sum((a - b) ** 2 for a, b in zip(x, y))


def plain_knn(rows: Sequence[Sequence[int]], query: Sequence[int], k: int) -> list[int]:
    """Indices of the k rows nearest to the query, nearest first.

    Ties are broken by row index; callers comparing against a protocol
    run should compare distance multisets, not index lists.
    """
    if not 1 <= k <= len(rows):
        raise ValueError(f"k must be in [1, {len(rows)}]")
    order = sorted(range(len(rows)), key=lambda i: (plain_squared_distance(rows[i], query), i))
    return order[:k]


def plain_knn_distances(
    rows: Sequence[Sequence[int]], query: Sequence[int], k: int
) -> list[int]:
    """The k smallest squared distances, nondecreasing."""
    return sorted(plain_squared_distance(r, query) for r in rows)[:k]


def plain_bits(z: int, bit_length: int) -> list[int]:
    """Binary expansion of z, most significant bit first."""
    if not 0 <= z < (1 << bit_length):
        raise ValueError(f"value {z} does not fit in {bit_length} bits")
    return [(z >> (bit_length - 1 - i)) & 1 for i in range(bit_length)]


def plain_min_bits(u: int, v: int, bit_length: int) -> list[int]:
    return plain_bits(min(u, v), bit_length)


def plain_product(a: int, b: int, modulus: int) -> int:
    return a * b % modulus
