"""Integer building blocks: primality, safe primes, modular arithmetic, sharing.

Big-integer exponentiation and inversion are delegated to gmpy2, which is
dramatically faster than pure Python at the key sizes used here.  Everything
returns plain ``int`` so callers never see mpz leak through the API.
"""

from __future__ import annotations

import secrets
from fractions import Fraction
from math import factorial, gcd, isqrt
from random import Random

import gmpy2

from .errors import NotInvertible, PrimeSearchExhausted, UnsupportedDegree

__all__ = [
    "is_probable_prime",
    "gen_prime",
    "gen_strong_prime",
    "mod_exp",
    "mod_inv",
    "shamir_share",
    "lagrange_mu",
]

_MR_ROUNDS = 40

# Deterministic trial-division sieve applied before Miller-Rabin.
def _sieve(limit: int) -> list[int]:
    flags = bytearray([1]) * limit
    flags[0:2] = b"\x00\x00"
    for i in range(2, isqrt(limit) + 1):
        if flags[i]:
            flags[i * i :: i] = bytes(len(flags[i * i :: i]))
    return [i for i in range(limit) if flags[i]]


_SMALL_PRIMES = _sieve(4096)


def _rng_or_system(rng: Random | None) -> Random:
    return rng if rng is not None else secrets.SystemRandom()


def is_probable_prime(n: int, rounds: int = _MR_ROUNDS, rng: Random | None = None) -> bool:
    """Miller-Rabin with a small-prime sieve in front.

    Below 2^32 the answer is made exact by full trial division, so small
    inputs can be checked against a brute-force oracle.  Above that the
    error probability is at most 4**-rounds per call.
    """
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    if n < (1 << 32):
        f = _SMALL_PRIMES[-1]
        i = f + (f % 2 + 1)  # next odd
        while i * i <= n:
            if n % i == 0:
                return False
            i += 2
        return True
    r = _rng_or_system(rng)
    d = n - 1
    s = 0
    while d % 2 == 0:
        d //= 2
        s += 1
    nz = gmpy2.mpz(n)
    for _ in range(rounds):
        a = r.randrange(2, n - 1)
        x = gmpy2.powmod(a, d, nz)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = gmpy2.powmod(x, 2, nz)
            if x == n - 1:
                break
        else:
            return False
    return True


def gen_prime(bits: int, rng: Random | None = None) -> int:
    """Random prime with exactly `bits` bits (top bit forced)."""
    if bits < 2:
        raise ValueError("bits must be at least 2")
    r = _rng_or_system(rng)
    for _ in range(64 * bits):
        cand = r.getrandbits(bits) | (1 << (bits - 1)) | 1
        if is_probable_prime(cand, rng=r):
            return cand
    raise PrimeSearchExhausted(f"no {bits}-bit prime found within budget")


def _strong_prime_small(bits: int, rng: Random) -> tuple[int, int]:
    # Exhaustive scan is cheap below ~20 bits and guarantees termination
    # even when safe primes are sparse in the range.
    lo, hi = 1 << (bits - 1), 1 << bits
    candidates = [p for p in range(lo | 1, hi, 2) if is_probable_prime(p) and is_probable_prime((p - 1) // 2)]
    if not candidates:
        raise PrimeSearchExhausted(f"no {bits}-bit safe prime exists")
    p = rng.choice(candidates)
    return p, (p - 1) // 2


def gen_strong_prime(bits: int, rng: Random | None = None, max_windows: int = 4096) -> tuple[int, int]:
    """Find p = 2p' + 1 with both p and p' prime; returns (p, p').

    Candidates are sieved in windows: any small prime dividing either p' or
    2p' + 1 knocks the offset out before the (expensive) Miller-Rabin tests.
    Raises PrimeSearchExhausted instead of looping forever if the budget of
    sieve windows is spent.
    """
    if bits < 4:
        raise ValueError("bits must be at least 4")
    r = _rng_or_system(rng)
    if bits <= 20:
        return _strong_prime_small(bits, r)
    span = 1 << 14  # odd steps per window
    for _ in range(max_windows):
        base = r.getrandbits(bits - 1) | (1 << (bits - 2)) | 1
        alive = bytearray([1]) * span
        for q in _SMALL_PRIMES[1:]:
            # offsets where p' = base + 2k is divisible by q
            start = (-base * mod_inv(2, q)) % q
            alive[start::q] = bytes(len(alive[start::q]))
            # offsets where 2p' + 1 = 2*base + 4k + 1 is divisible by q
            start = (-(2 * base + 1) * mod_inv(4, q)) % q
            alive[start::q] = bytes(len(alive[start::q]))
        for k in range(span):
            if not alive[k]:
                continue
            pp = base + 2 * k
            if pp.bit_length() != bits - 1:
                continue
            p = 2 * pp + 1
            if is_probable_prime(pp, rounds=1, rng=r) and is_probable_prime(p, rounds=1, rng=r):
                if is_probable_prime(pp, rng=r) and is_probable_prime(p, rng=r):
                    return p, pp
    raise PrimeSearchExhausted(f"no {bits}-bit safe prime found in {max_windows} windows")


def mod_exp(base: int, exp: int, modulus: int) -> int:
    """base**exp mod modulus for non-negative exponents."""
    if modulus <= 0:
        raise ValueError("modulus must be positive")
    if exp < 0:
        raise ValueError("negative exponent; invert the base explicitly")
    return int(gmpy2.powmod(base, exp, modulus))


def mod_inv(a: int, modulus: int) -> int:
    """Inverse of a modulo modulus, or NotInvertible if gcd(a, modulus) != 1."""
    if modulus <= 1:
        raise ValueError("modulus must exceed 1")
    try:
        return int(gmpy2.invert(a, modulus))
    except ZeroDivisionError:
        raise NotInvertible(f"gcd({a % modulus}, {modulus}) = {gcd(a, modulus)}") from None


def shamir_share(
    secret: int,
    count: int,
    modulus: int,
    rng: Random | None = None,
    degree: int | None = None,
) -> list[tuple[int, int]]:
    """Split `secret` into `count` shares (i, P(i) mod modulus), i = 1..count.

    The polynomial has uniformly random coefficients and P(0) = secret.  The
    default degree count-1 means every share is needed to reconstruct; a
    lower degree yields a threshold scheme and is exposed for callers that
    want dropout tolerance.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if degree is None:
        degree = count - 1
    if not 0 <= degree < count:
        raise UnsupportedDegree(f"degree {degree} invalid for {count} shares")
    r = _rng_or_system(rng)
    coeffs = [secret % modulus] + [r.randrange(modulus) for _ in range(degree)]
    shares = []
    for i in range(1, count + 1):
        acc = 0
        for c in reversed(coeffs):
            acc = (acc * i + c) % modulus
        shares.append((i, acc))
    return shares


def lagrange_mu(j: int, count: int) -> int:
    """Integer Lagrange weight at zero, scaled by count!.

    mu_j = count! * prod_{j' != j} j' / (j' - j) over j' in 1..count.  The
    factorial clears every denominator, so the result is an exact integer
    (possibly negative).
    """
    if not 1 <= j <= count:
        raise ValueError(f"index {j} outside 1..{count}")
    w = Fraction(factorial(count))
    for jp in range(1, count + 1):
        if jp != j:
            w *= Fraction(jp, jp - j)
    assert w.denominator == 1
    return int(w)
