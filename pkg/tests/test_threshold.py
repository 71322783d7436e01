"""Threshold decryption ceremony: all holders must cooperate, none can cheat."""

from random import Random

import pytest

from hegemony.errors import CombineFailed, IncompleteShareSet, KeyMismatch, MessageOutOfRange
from hegemony.threshold_paillier import (
    PartialDecryption,
    ThresholdKeyShare,
    ThresholdPublicKey,
    add_ct,
    ceremony_keygen,
    combine,
    encrypt,
    partial_decrypt,
)


@pytest.fixture(scope="module")
def ceremony():
    return ceremony_keygen(128, 3, Random(0x5EED))


def _decrypt(pub, shares, ct):
    return combine(pub, [partial_decrypt(pub, s, ct) for s in shares])


def test_ceremony_shapes(ceremony):
    pub, shares = ceremony
    assert pub.n.bit_length() == 256
    assert pub.l == 3 and pub.delta == 6
    assert [s.index for s in shares] == [1, 2, 3]
    assert all(s.ceremony_id == pub.ceremony_id for s in shares)


def test_roundtrip_various_messages(ceremony):
    pub, shares = ceremony
    rng = Random(1)
    messages = [0, 1, pub.n - 1, pub.n // 2] + [rng.randrange(pub.n) for _ in range(40)]
    for m in messages:
        assert _decrypt(pub, shares, encrypt(pub, m, rng)) == m


def test_homomorphic_sum(ceremony):
    pub, shares = ceremony
    rng = Random(2)
    vals = [rng.randrange(1 << 40) for _ in range(8)]
    acc = encrypt(pub, vals[0], rng)
    for v in vals[1:]:
        acc = add_ct(pub, acc, encrypt(pub, v, rng))
    assert _decrypt(pub, shares, acc) == sum(vals) % pub.n


def test_every_strict_subset_fails(ceremony):
    pub, shares = ceremony
    ct = encrypt(pub, 12345, Random(3))
    partials = [partial_decrypt(pub, s, ct) for s in shares]
    for drop in range(3):
        subset = [p for i, p in enumerate(partials) if i != drop]
        with pytest.raises(IncompleteShareSet):
            combine(pub, subset)
    with pytest.raises(IncompleteShareSet):
        combine(pub, [])
    with pytest.raises(IncompleteShareSet):
        combine(pub, partials + [partials[0]])


def test_tampered_partial_detected(ceremony):
    pub, shares = ceremony
    ct = encrypt(pub, 777, Random(4))
    partials = [partial_decrypt(pub, s, ct) for s in shares]
    bad = PartialDecryption(
        ceremony_id=partials[0].ceremony_id,
        index=partials[0].index,
        value=(partials[0].value + 1) % pub.n_sq,
    )
    with pytest.raises(CombineFailed):
        combine(pub, [bad] + partials[1:])


def test_cross_ceremony_rejected(ceremony):
    pub, shares = ceremony
    other_pub, other_shares = ceremony_keygen(128, 3, Random(0xBEEF))
    ct = encrypt(pub, 9, Random(5))
    with pytest.raises(KeyMismatch):
        partial_decrypt(pub, other_shares[0], ct)
    with pytest.raises(KeyMismatch):
        partial_decrypt(other_pub, other_shares[0], ct)
    foreign = encrypt(other_pub, 9, Random(5))
    with pytest.raises(KeyMismatch):
        add_ct(pub, ct, foreign)
    mixed = [partial_decrypt(pub, s, ct) for s in shares[:2]]
    mixed.append(
        PartialDecryption(ceremony_id=other_pub.ceremony_id, index=3, value=1)
    )
    with pytest.raises(KeyMismatch):
        combine(pub, mixed)


def test_message_range(ceremony):
    pub, _ = ceremony
    with pytest.raises(MessageOutOfRange):
        encrypt(pub, pub.n, Random(6))
    with pytest.raises(MessageOutOfRange):
        encrypt(pub, -1, Random(6))


def test_share_count_validation():
    with pytest.raises(ValueError):
        ceremony_keygen(128, 0, Random(7))


def test_single_holder_ceremony():
    pub, shares = ceremony_keygen(128, 1, Random(8))
    assert pub.l == 1 and len(shares) == 1
    ct = encrypt(pub, 4242, Random(9))
    assert combine(pub, [partial_decrypt(pub, shares[0], ct)]) == 4242


def test_json_round_trips(ceremony):
    pub, shares = ceremony
    pub2 = ThresholdPublicKey.from_json(pub.to_json())
    assert pub2 == pub
    share2 = ThresholdKeyShare.from_json(shares[1].to_json())
    assert share2 == shares[1]
    ct = encrypt(pub2, 31337, Random(10))
    partials = [partial_decrypt(pub2, s, ct) for s in [shares[0], share2, shares[2]]]
    assert combine(pub2, partials) == 31337


def test_json_delta_consistency(ceremony):
    pub, _ = ceremony
    import json as _json

    obj = _json.loads(pub.to_json())
    obj["delta"] = format(pub.delta + 1, "x")
    with pytest.raises(KeyMismatch):
        ThresholdPublicKey.from_json(_json.dumps(obj))
