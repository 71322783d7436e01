"""Additively homomorphic modular cipher with a single secret holder.

Keys use the generator g = n + 1, for which (1 + n)^m = 1 + m*n (mod n^2)
turns one of the two exponentiations in encryption into a single modular
multiply.  Homomorphic addition is ciphertext multiplication mod n^2;
scalar multiplication is ciphertext exponentiation.

Messages live in [0, n).  Calculations that should stay meaningful under
addition must leave headroom below n; the packing module manages that.
"""

from __future__ import annotations

import hashlib
import json
import secrets
from dataclasses import dataclass
from functools import cached_property
from math import gcd, lcm
from random import Random

import gmpy2

from .errors import InvalidCiphertext, KeyMismatch, MessageOutOfRange
from .numtheory import gen_prime, mod_inv

__all__ = [
    "PaillierPublicKey",
    "PaillierSecretKey",
    "PaillierCiphertext",
    "keygen",
    "keypair_from_primes",
    "encrypt",
    "decrypt",
    "add_ct",
    "scalar_mul",
]


def _fingerprint(n: int) -> str:
    return hashlib.sha256(format(n, "x").encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PaillierPublicKey:
    n: int
    g: int

    def __post_init__(self):
        if self.n.bit_length() < 16:
            raise ValueError("modulus too small to be meaningful")

    @property
    def n_sq(self) -> int:
        return self.n * self.n

    @property
    def fingerprint(self) -> str:
        return _fingerprint(self.n)

    def to_json(self) -> str:
        return json.dumps({"n": format(self.n, "x"), "g": format(self.g, "x")}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PaillierPublicKey":
        obj = json.loads(text)
        return cls(n=int(obj["n"], 16), g=int(obj["g"], 16))


@dataclass(frozen=True)
class PaillierSecretKey:
    public: PaillierPublicKey
    lambda_n: int

    @cached_property
    def mu(self) -> int:
        # L(g^lambda mod n^2)^-1 mod n; for g = n + 1 this is simply
        # lambda^-1 because (1+n)^lambda = 1 + lambda*n.
        n = self.public.n
        u = int(gmpy2.powmod(self.public.g, self.lambda_n, self.public.n_sq))
        return mod_inv(_L(u, n), n)

    def to_json(self) -> str:
        return json.dumps({"lambda": format(self.lambda_n, "x")}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, public: PaillierPublicKey) -> "PaillierSecretKey":
        obj = json.loads(text)
        return cls(public=public, lambda_n=int(obj["lambda"], 16))


@dataclass(frozen=True)
class PaillierCiphertext:
    value: int
    key_fingerprint: str

    def __post_init__(self):
        if self.value < 0:
            raise InvalidCiphertext("ciphertext value must be non-negative")


def _L(u: int, n: int) -> int:
    """(u - 1) / n, defined only when n divides u - 1."""
    q, r = divmod(u - 1, n)
    if r:
        raise InvalidCiphertext("L(u) is not integral; wrong key or corrupt value")
    return q


def keygen(bits_per_prime: int, rng: Random | None = None) -> tuple[PaillierPublicKey, PaillierSecretKey]:
    """Fresh keypair with an exactly 2*bits_per_prime-bit modulus."""
    r = rng if rng is not None else secrets.SystemRandom()
    while True:
        p = gen_prime(bits_per_prime, r)
        q = gen_prime(bits_per_prime, r)
        if p != q and (p * q).bit_length() == 2 * bits_per_prime:
            return keypair_from_primes(p, q)


def keypair_from_primes(p: int, q: int) -> tuple[PaillierPublicKey, PaillierSecretKey]:
    """Deterministic keypair constructor, exposed for tests with known primes."""
    if p == q:
        raise ValueError("primes must be distinct")
    n = p * q
    pub = PaillierPublicKey(n=n, g=n + 1)
    sec = PaillierSecretKey(public=pub, lambda_n=lcm(p - 1, q - 1))
    return pub, sec


def encrypt(pub: PaillierPublicKey, m: int, rng: Random | None = None) -> PaillierCiphertext:
    """E(m) = g^m * x^n mod n^2 with x drawn fresh from the units mod n."""
    if not 0 <= m < pub.n:
        raise MessageOutOfRange(f"message must lie in [0, {pub.n})")
    r = rng if rng is not None else secrets.SystemRandom()
    n, n_sq = pub.n, pub.n_sq
    while True:
        x = r.randrange(1, n)
        if gcd(x, n) == 1:
            break
    if pub.g == n + 1:
        gm = (1 + m * n) % n_sq
    else:
        gm = int(gmpy2.powmod(pub.g, m, n_sq))
    c = gm * int(gmpy2.powmod(x, n, n_sq)) % n_sq
    return PaillierCiphertext(value=c, key_fingerprint=pub.fingerprint)


def decrypt(sec: PaillierSecretKey, ct: PaillierCiphertext) -> int:
    """m = L(c^lambda mod n^2) * mu mod n."""
    pub = sec.public
    if ct.key_fingerprint != pub.fingerprint:
        raise KeyMismatch("ciphertext was produced under a different key")
    if not 0 < ct.value < pub.n_sq or gcd(ct.value, pub.n_sq) != 1:
        raise InvalidCiphertext("value outside the ciphertext group")
    u = int(gmpy2.powmod(ct.value, sec.lambda_n, pub.n_sq))
    return _L(u, pub.n) * sec.mu % pub.n


def add_ct(pub: PaillierPublicKey, a: PaillierCiphertext, b: PaillierCiphertext) -> PaillierCiphertext:
    """Ciphertext of the sum: E(m1 + m2 mod n) = E(m1) * E(m2) mod n^2."""
    if a.key_fingerprint != b.key_fingerprint or a.key_fingerprint != pub.fingerprint:
        raise KeyMismatch("operands come from different keys")
    return PaillierCiphertext(value=a.value * b.value % pub.n_sq, key_fingerprint=a.key_fingerprint)


def scalar_mul(pub: PaillierPublicKey, a: PaillierCiphertext, k: int) -> PaillierCiphertext:
    """Ciphertext of k * m (mod n): E(m)^k mod n^2, for non-negative k."""
    if a.key_fingerprint != pub.fingerprint:
        raise KeyMismatch("operand comes from a different key")
    if k < 0:
        raise MessageOutOfRange("scalar must be non-negative")
    return PaillierCiphertext(
        value=int(gmpy2.powmod(a.value, k, pub.n_sq)),
        key_fingerprint=a.key_fingerprint,
    )
