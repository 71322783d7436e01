"""Parameter sets for the approximate-arithmetic ciphertext ring.

A parameter set fixes the ring degree, the rescaling prime chain, and the
working scale.  The chain is one wide base prime, ``levels`` primes sized
to the scale so each rescale divides it back to roughly its starting
value, and one wide auxiliary prime reserved for key switching.  All
primes are congruent to 1 mod 2n so the negacyclic transform exists, and
generation scans downward from the target power of two, which makes a
parameter set fully reproducible from its numbers alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from ..errors import PrimeSearchExhausted
from ..numtheory import is_probable_prime
from .ntt import MAX_PRIME_BITS

__all__ = ["CkksParams", "scan_primes"]


def scan_primes(bits: int, two_n: int, count: int, exclude: set[int] = frozenset()) -> list[int]:
    """First `count` primes = 1 mod two_n found scanning down from 2**bits."""
    found: list[int] = []
    c = (1 << bits) + 1
    c -= (c - 1) % two_n
    floor = 1 << (bits - 1)
    while len(found) < count:
        if c < floor:
            raise PrimeSearchExhausted(f"not enough {bits}-bit primes = 1 mod {two_n}")
        if c not in exclude and is_probable_prime(c):
            found.append(c)
        c -= two_n
    return found


@dataclass(frozen=True)
class CkksParams:
    degree: int = 8192
    levels: int = 6
    scale_bits: int = 40
    base_bits: int = 49
    special_bits: int = 49
    sigma: float = 3.2
    moduli: tuple[int, ...] = field(init=False, repr=False)
    special: int = field(init=False, repr=False)

    def __post_init__(self):
        n = self.degree
        if n < 8 or n & (n - 1):
            raise ValueError("degree must be a power of two, at least 8")
        if self.levels < 1:
            raise ValueError("need at least one rescaling prime")
        if not (self.scale_bits < self.base_bits <= MAX_PRIME_BITS):
            raise ValueError("prime sizes must satisfy scale < base <= word limit")
        two_n = 2 * n
        base = scan_primes(self.base_bits, two_n, 1)[0]
        special = scan_primes(self.special_bits, two_n, 2, exclude={base})
        special = special[0] if special[0] != base else special[1]
        rescale = scan_primes(self.scale_bits, two_n, self.levels, exclude={base, special})
        object.__setattr__(self, "moduli", (base, *rescale))
        object.__setattr__(self, "special", special)

    @property
    def slot_count(self) -> int:
        return self.degree // 2

    @property
    def scale(self) -> float:
        return float(1 << self.scale_bits)

    @property
    def all_primes(self) -> tuple[int, ...]:
        """Ciphertext chain followed by the key-switching prime."""
        return (*self.moduli, self.special)

    @property
    def fingerprint(self) -> str:
        blob = json.dumps([self.degree, list(self.moduli), self.special, self.scale_bits]).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json_obj(self) -> dict:
        return {
            "degree": self.degree,
            "levels": self.levels,
            "scale_bits": self.scale_bits,
            "base_bits": self.base_bits,
            "special_bits": self.special_bits,
            "sigma": self.sigma,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CkksParams":
        params = cls(
            degree=int(obj["degree"]),
            levels=int(obj["levels"]),
            scale_bits=int(obj["scale_bits"]),
            base_bits=int(obj["base_bits"]),
            special_bits=int(obj["special_bits"]),
            sigma=float(obj.get("sigma", 3.2)),
        )
        want = obj.get("fingerprint")
        if want is not None and want != params.fingerprint:
            raise ValueError("parameter fingerprint mismatch")
        return params
