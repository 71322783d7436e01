"""Additively homomorphic cryptosystem: roundtrips, laws, key handling."""

from random import Random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hegemony.errors import InvalidCiphertext, KeyMismatch, MessageOutOfRange
from hegemony.paillier import (
    PaillierCiphertext,
    PaillierPublicKey,
    PaillierSecretKey,
    add_ct,
    decrypt,
    encrypt,
    keygen,
    keypair_from_primes,
    scalar_mul,
)

# Smallest primes whose product clears the 16-bit modulus floor; keeps the
# exhaustive test cheap.
TINY_P, TINY_Q = 251, 257


@pytest.fixture(scope="module")
def tiny():
    return keypair_from_primes(TINY_P, TINY_Q)


@pytest.fixture(scope="module")
def pair():
    return keygen(128, Random(0xA11CE))


def test_exhaustive_roundtrip_tiny_modulus(tiny):
    pub, sec = tiny
    rng = Random(1)
    assert pub.n == TINY_P * TINY_Q
    for m in range(pub.n):
        assert decrypt(sec, encrypt(pub, m, rng)) == m


def test_keygen_modulus_width():
    pub, sec = keygen(64, Random(2))
    assert pub.n.bit_length() == 128
    assert pub.g == pub.n + 1
    m = 123456789
    assert decrypt(sec, encrypt(pub, m, Random(3))) == m


def test_keypair_from_primes_rejects_equal():
    with pytest.raises(ValueError):
        keypair_from_primes(257, 257)


def test_public_key_floor():
    with pytest.raises(ValueError):
        PaillierPublicKey(n=35, g=36)


def test_message_range_enforced(pair):
    pub, _ = pair
    with pytest.raises(MessageOutOfRange):
        encrypt(pub, pub.n, Random(4))
    with pytest.raises(MessageOutOfRange):
        encrypt(pub, -1, Random(4))
    assert isinstance(encrypt(pub, pub.n - 1, Random(4)), PaillierCiphertext)


def test_ciphertexts_randomised(pair):
    pub, sec = pair
    a = encrypt(pub, 42, Random(5))
    b = encrypt(pub, 42, Random(6))
    assert a.value != b.value
    assert decrypt(sec, a) == decrypt(sec, b) == 42


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_additive_law(pair, data):
    pub, sec = pair
    m1 = data.draw(st.integers(min_value=0, max_value=pub.n - 1))
    m2 = data.draw(st.integers(min_value=0, max_value=pub.n - 1))
    rng = Random(data.draw(st.integers(min_value=0, max_value=2**31)))
    ct = add_ct(pub, encrypt(pub, m1, rng), encrypt(pub, m2, rng))
    assert decrypt(sec, ct) == (m1 + m2) % pub.n


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_scalar_law(pair, data):
    pub, sec = pair
    m = data.draw(st.integers(min_value=0, max_value=pub.n - 1))
    k = data.draw(st.integers(min_value=0, max_value=1 << 24))
    ct = scalar_mul(pub, encrypt(pub, m, Random(7)), k)
    assert decrypt(sec, ct) == (m * k) % pub.n


def test_scalar_mul_edge_cases(pair):
    pub, sec = pair
    ct = encrypt(pub, 99, Random(8))
    assert decrypt(sec, scalar_mul(pub, ct, 0)) == 0
    assert decrypt(sec, scalar_mul(pub, ct, 1)) == 99
    with pytest.raises(MessageOutOfRange):
        scalar_mul(pub, ct, -2)


def test_key_mismatch_detected(pair, tiny):
    pub, sec = pair
    other_pub, other_sec = tiny
    ct = encrypt(pub, 5, Random(9))
    foreign = encrypt(other_pub, 5, Random(9))
    with pytest.raises(KeyMismatch):
        decrypt(other_sec, ct)
    with pytest.raises(KeyMismatch):
        add_ct(pub, ct, foreign)
    with pytest.raises(KeyMismatch):
        scalar_mul(pub, foreign, 3)


def test_invalid_ciphertext_guards(pair):
    pub, sec = pair
    with pytest.raises(InvalidCiphertext):
        PaillierCiphertext(value=-1, key_fingerprint=pub.fingerprint)
    oversized = PaillierCiphertext(value=pub.n_sq, key_fingerprint=pub.fingerprint)
    with pytest.raises(InvalidCiphertext):
        decrypt(sec, oversized)


def test_json_round_trips(pair):
    pub, sec = pair
    pub2 = PaillierPublicKey.from_json(pub.to_json())
    assert pub2 == pub
    sec2 = PaillierSecretKey.from_json(sec.to_json(), pub2)
    ct = encrypt(pub2, 777, Random(10))
    assert decrypt(sec2, ct) == 777


def test_fingerprint_tracks_modulus(pair, tiny):
    pub, _ = pair
    other, _ = tiny
    assert pub.fingerprint != other.fingerprint
    assert pub.fingerprint == PaillierPublicKey.from_json(pub.to_json()).fingerprint
