"""Negacyclic number-theoretic transform against schoolbook arithmetic."""

import numpy as np
import pytest

from hegemony.errors import GeometryMismatch
from hegemony.ckks.ntt import (
    MAX_PRIME_BITS,
    NttPlan,
    add_mod,
    evaluation_exponents,
    find_psi,
    mul_mod,
    neg_mod,
    plan_for,
    reduce_mod,
    sub_mod,
)
from hegemony.ckks.params import scan_primes


def _prime(bits, n):
    return scan_primes(bits, 2 * n, 1)[0]


def _negacyclic_schoolbook(a, b, p):
    n = len(a)
    c = [0] * n
    for i in range(n):
        for j in range(n):
            k = i + j
            if k < n:
                c[k] = (c[k] + int(a[i]) * int(b[j])) % p
            else:
                c[k - n] = (c[k - n] - int(a[i]) * int(b[j])) % p
    return np.array(c, dtype=np.uint64)


def test_mul_mod_matches_python_ints():
    rng = np.random.default_rng(0)
    for bits in (30, 45, 49, 50):
        p = _prime(bits, 16)
        a = rng.integers(0, p, 256, dtype=np.uint64)
        b = rng.integers(0, p, 256, dtype=np.uint64)
        got = mul_mod(a, b, p)
        want = [(int(x) * int(y)) % p for x, y in zip(a, b)]
        assert got.tolist() == want


def test_mul_mod_worst_case_operands():
    p = _prime(50, 16)
    edge = np.array([0, 1, p - 1, p - 2, (p - 1) // 2], dtype=np.uint64)
    for x in edge:
        got = mul_mod(np.full(5, x, dtype=np.uint64), edge, p)
        want = [(int(x) * int(y)) % p for y in edge]
        assert got.tolist() == want


def test_add_sub_neg_reduce():
    p = _prime(49, 16)
    rng = np.random.default_rng(1)
    a = rng.integers(0, p, 128, dtype=np.uint64)
    b = rng.integers(0, p, 128, dtype=np.uint64)
    assert add_mod(a, b, p).tolist() == [(int(x) + int(y)) % p for x, y in zip(a, b)]
    assert sub_mod(a, b, p).tolist() == [(int(x) - int(y)) % p for x, y in zip(a, b)]
    assert neg_mod(a, p).tolist() == [(-int(x)) % p for x in a]
    signed = rng.integers(-(1 << 40), 1 << 40, 64)
    assert reduce_mod(signed, p).tolist() == [int(x) % p for x in signed]


def test_find_psi_is_primitive():
    for n in (16, 64):
        p = _prime(40, n)
        psi = find_psi(p, n)
        assert pow(psi, n, p) == p - 1
        assert pow(psi, 2 * n, p) == 1
    with pytest.raises(GeometryMismatch):
        find_psi(97, 64)  # 96 is not a multiple of 128


def test_forward_inverse_roundtrip():
    for n in (16, 64, 256):
        p = _prime(49, n)
        plan = plan_for(p, n)
        rng = np.random.default_rng(n)
        a = rng.integers(0, p, n, dtype=np.uint64)
        assert np.array_equal(plan.inverse(plan.forward(a)), a)
        assert np.array_equal(plan.forward(plan.inverse(a)), a)


def test_convolution_theorem_small():
    for n in (16, 64):
        p = _prime(45, n)
        plan = plan_for(p, n)
        rng = np.random.default_rng(n + 1)
        a = rng.integers(0, p, n, dtype=np.uint64)
        b = rng.integers(0, p, n, dtype=np.uint64)
        got = plan.inverse(mul_mod(plan.forward(a), plan.forward(b), p))
        assert np.array_equal(got, _negacyclic_schoolbook(a, b, p))


def test_forward_is_evaluation_at_odd_roots():
    n = 16
    p = _prime(30, n)
    plan = plan_for(p, n)
    exps = evaluation_exponents(p, n)
    assert sorted(exps.tolist()) == list(range(1, 2 * n, 2))
    rng = np.random.default_rng(2)
    a = rng.integers(0, p, n, dtype=np.uint64)
    points = plan.forward(a)
    for k in range(n):
        x = pow(plan.psi, int(exps[k]), p)
        acc = 0
        for c in reversed(a.tolist()):
            acc = (acc * x + int(c)) % p
        assert int(points[k]) == acc


def test_evaluation_order_is_prime_independent():
    n = 32
    e1 = evaluation_exponents(_prime(30, n), n)
    e2 = evaluation_exponents(_prime(45, n), n)
    assert np.array_equal(e1, e2)


def test_plan_validation():
    p = _prime(30, 16)
    with pytest.raises(GeometryMismatch):
        NttPlan(p, 12)
    with pytest.raises(GeometryMismatch):
        NttPlan((1 << 52) + 1, 16)
    assert MAX_PRIME_BITS == 50
    with pytest.raises(GeometryMismatch):
        NttPlan(p, 16, psi=2)  # not a primitive 2n-th root
    plan = plan_for(p, 16)
    with pytest.raises(GeometryMismatch):
        plan.forward(np.zeros(8, dtype=np.uint64))


def test_plan_cache_returns_same_object():
    p = _prime(30, 16)
    assert plan_for(p, 16) is plan_for(p, 16)
