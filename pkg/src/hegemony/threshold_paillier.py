"""Threshold decryption for the additive cipher: no single party can decrypt.

A ceremony splits the decryption exponent beta * n' into l shares over the
hidden modulus n * n'.  Each holder raises a ciphertext to 2 * delta * sk_i;
combining all l partials with integer Lagrange weights cancels the sharing
polynomial, and the plaintext falls out of the L map divided by 4 * delta^2
* theta.  The factor structure (2 from the partials, 2 from the weights)
guarantees every stray exponent is a multiple of the group order 4*n*n',
so it vanishes regardless of the share reductions mod n*n'.

The ceremony needs strong primes p = 2p' + 1, q = 2q' + 1 so that n * n'
has no small factors an adversary could exploit, and so the Lagrange
denominators stay invertible.
"""

from __future__ import annotations

import hashlib
import json
import secrets
from dataclasses import dataclass
from math import factorial, gcd
from random import Random

import gmpy2

from .errors import (
    CombineFailed,
    IncompleteShareSet,
    InvalidCiphertext,
    KeyMismatch,
    MessageOutOfRange,
)
from .numtheory import gen_strong_prime, lagrange_mu, mod_inv, shamir_share
from .paillier import PaillierCiphertext, _L

__all__ = [
    "ThresholdPublicKey",
    "ThresholdKeyShare",
    "PartialDecryption",
    "ceremony_keygen",
    "encrypt",
    "partial_decrypt",
    "combine",
    "add_ct",
]


@dataclass(frozen=True)
class ThresholdPublicKey:
    n: int
    g: int
    theta: int
    l: int
    ceremony_id: str

    @property
    def n_sq(self) -> int:
        return self.n * self.n

    @property
    def delta(self) -> int:
        return factorial(self.l)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(format(self.n, "x").encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": format(self.n, "x"),
                "g": format(self.g, "x"),
                "theta": format(self.theta, "x"),
                "l": self.l,
                "delta": format(self.delta, "x"),
                "ceremony_id": self.ceremony_id,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ThresholdPublicKey":
        obj = json.loads(text)
        pub = cls(
            n=int(obj["n"], 16),
            g=int(obj["g"], 16),
            theta=int(obj["theta"], 16),
            l=int(obj["l"]),
            ceremony_id=str(obj["ceremony_id"]),
        )
        if int(obj["delta"], 16) != pub.delta:
            raise KeyMismatch("delta field inconsistent with share count")
        return pub


@dataclass(frozen=True)
class ThresholdKeyShare:
    ceremony_id: str
    index: int
    sk: int

    def to_json(self) -> str:
        return json.dumps(
            {"ceremony_id": self.ceremony_id, "index": self.index, "sk": format(self.sk, "x")},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ThresholdKeyShare":
        obj = json.loads(text)
        return cls(ceremony_id=str(obj["ceremony_id"]), index=int(obj["index"]), sk=int(obj["sk"], 16))


@dataclass(frozen=True)
class PartialDecryption:
    ceremony_id: str
    index: int
    value: int


def _random_unit(n: int, rng: Random) -> int:
    while True:
        x = rng.randrange(1, n)
        if gcd(x, n) == 1:
            return x


def ceremony_keygen(
    bits_per_prime: int,
    l: int,
    rng: Random | None = None,
    max_attempts: int = 32,
) -> tuple[ThresholdPublicKey, list[ThresholdKeyShare]]:
    """Dealer-side ceremony producing a public key and l secret shares.

    theta = L(g^(beta*n') mod n^2) is only integral for some choices of the
    random unit b inside g; rather than constraining the sampling, a failed
    ceremony (non-integral theta or a failed self-test roundtrip) is simply
    retried with fresh randomness.
    """
    if l < 1:
        raise ValueError("need at least one share holder")
    r = rng if rng is not None else secrets.SystemRandom()
    for _ in range(max_attempts):
        p, p_prime = gen_strong_prime(bits_per_prime, r)
        while True:
            q, q_prime = gen_strong_prime(bits_per_prime, r)
            if q != p and q_prime != p_prime:
                break
        n = p * q
        if n.bit_length() != 2 * bits_per_prime:
            continue
        n_sq = n * n
        n_prime = p_prime * q_prime
        beta = _random_unit(n, r)
        a = _random_unit(n, r)
        b = _random_unit(n, r)
        g = (1 + a * n) % n_sq * int(gmpy2.powmod(b, n, n_sq)) % n_sq
        secret = beta * n_prime % (n * n_prime)
        raw_shares = shamir_share(secret, l, n * n_prime, r)
        try:
            theta = _L(int(gmpy2.powmod(g, beta * n_prime, n_sq)), n) % n
        except InvalidCiphertext:
            continue
        if gcd(theta, n) != 1:
            continue
        ceremony_id = secrets.token_hex(8)
        pub = ThresholdPublicKey(n=n, g=g, theta=theta, l=l, ceremony_id=ceremony_id)
        shares = [ThresholdKeyShare(ceremony_id=ceremony_id, index=i, sk=s) for i, s in raw_shares]
        probe = r.randrange(n)
        ct = encrypt(pub, probe, r)
        partials = [partial_decrypt(pub, sh, ct) for sh in shares]
        try:
            if combine(pub, partials) == probe:
                return pub, shares
        except (CombineFailed, InvalidCiphertext):
            pass
    raise CombineFailed(f"ceremony failed {max_attempts} self-tests in a row")


def encrypt(pub: ThresholdPublicKey, m: int, rng: Random | None = None) -> PaillierCiphertext:
    """E(m) = g^m * x^n mod n^2; g here is a full generator, no shortcut."""
    if not 0 <= m < pub.n:
        raise MessageOutOfRange(f"message must lie in [0, {pub.n})")
    r = rng if rng is not None else secrets.SystemRandom()
    x = _random_unit(pub.n, r)
    c = int(gmpy2.powmod(pub.g, m, pub.n_sq)) * int(gmpy2.powmod(x, pub.n, pub.n_sq)) % pub.n_sq
    return PaillierCiphertext(value=c, key_fingerprint=pub.fingerprint)


def partial_decrypt(pub: ThresholdPublicKey, share: ThresholdKeyShare, ct: PaillierCiphertext) -> PartialDecryption:
    """c_i = c^(2 * delta * sk_i) mod n^2."""
    if share.ceremony_id != pub.ceremony_id:
        raise KeyMismatch("share belongs to a different ceremony")
    if ct.key_fingerprint != pub.fingerprint:
        raise KeyMismatch("ciphertext was produced under a different key")
    value = int(gmpy2.powmod(ct.value, 2 * pub.delta * share.sk, pub.n_sq))
    return PartialDecryption(ceremony_id=pub.ceremony_id, index=share.index, value=value)


def combine(pub: ThresholdPublicKey, partials: list[PartialDecryption]) -> int:
    """Merge all l partial decryptions into the plaintext.

    m = L(prod_j c_j^(2*mu_j) mod n^2) / (4 * delta^2 * theta) mod n, where
    mu_j is the integer Lagrange weight.  Negative weights are applied by
    inverting the partial first.
    """
    seen = {p.index for p in partials}
    if seen != set(range(1, pub.l + 1)) or len(partials) != pub.l:
        raise IncompleteShareSet(f"need partials 1..{pub.l} exactly once, got {sorted(p.index for p in partials)}")
    for p in partials:
        if p.ceremony_id != pub.ceremony_id:
            raise KeyMismatch("partial belongs to a different ceremony")
    n_sq = pub.n_sq
    acc = 1
    for p in partials:
        e = 2 * lagrange_mu(p.index, pub.l)
        base = p.value if e >= 0 else mod_inv(p.value, n_sq)
        acc = acc * int(gmpy2.powmod(base, abs(e), n_sq)) % n_sq
    try:
        num = _L(acc, pub.n)
    except InvalidCiphertext as exc:
        raise CombineFailed(f"combined value is not a valid decryption: {exc}") from None
    denom = 4 * pub.delta * pub.delta % pub.n * pub.theta % pub.n
    return num * mod_inv(denom, pub.n) % pub.n


def add_ct(pub: ThresholdPublicKey, a: PaillierCiphertext, b: PaillierCiphertext) -> PaillierCiphertext:
    """Homomorphic sum under the ceremony key."""
    if a.key_fingerprint != pub.fingerprint or b.key_fingerprint != pub.fingerprint:
        raise KeyMismatch("operands come from different keys")
    return PaillierCiphertext(value=a.value * b.value % pub.n_sq, key_fingerprint=a.key_fingerprint)
