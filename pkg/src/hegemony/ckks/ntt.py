"""Negacyclic number-theoretic transforms over word-sized primes.

Residue arithmetic uses a float-reciprocal Barrett step: the quotient of a
64-bit product is estimated in double precision, and since the estimate is
off by at most one in either direction, two branchless min-corrections
absorb it.  Inner loops are therefore free of data-dependent branches and
vectorize both under numba and in the numpy fallback.  Primes must stay
below 2**50 for the quotient estimate to be that tight.

Transforms follow the decimation with bit-reversed twiddle tables: the
forward pass leaves values in a fixed scrambled evaluation order and the
inverse pass undoes it, so intermediate storage never needs an explicit
reordering.  The evaluation order is recovered empirically once per degree
(see :func:`evaluation_exponents`) because rotation support only needs the
exponent each output slot corresponds to, not a closed form for it.
"""

from __future__ import annotations

import numpy as np

from ..errors import GeometryMismatch, PrimeSearchExhausted

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency
    _HAVE_NUMBA = False

__all__ = [
    "MAX_PRIME_BITS",
    "mul_mod",
    "add_mod",
    "sub_mod",
    "neg_mod",
    "reduce_mod",
    "mul_acc_perm",
    "dot_acc",
    "exact_div_rows",
    "NttPlan",
    "plan_for",
    "find_psi",
    "evaluation_exponents",
]

MAX_PRIME_BITS = 50


def mul_mod(a, b, p) -> np.ndarray:
    """Elementwise a * b mod p on uint64 operands, p < 2**50."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    pu = np.uint64(p)
    q = (a.astype(np.float64) * b.astype(np.float64) * (1.0 / float(p))).astype(np.uint64)
    r = a * b - q * pu
    r = np.minimum(r, r + pu)
    r = np.minimum(r, r - pu)
    return r


def add_mod(a, b, p) -> np.ndarray:
    s = np.asarray(a, dtype=np.uint64) + np.asarray(b, dtype=np.uint64)
    return np.minimum(s, s - np.uint64(p))


def sub_mod(a, b, p) -> np.ndarray:
    pu = np.uint64(p)
    d = np.asarray(a, dtype=np.uint64) + pu - np.asarray(b, dtype=np.uint64)
    return np.minimum(d, d - pu)


def neg_mod(a, p) -> np.ndarray:
    pu = np.uint64(p)
    d = pu - np.asarray(a, dtype=np.uint64)
    return np.minimum(d, d - pu)


def reduce_mod(values, p) -> np.ndarray:
    """Signed integers (any magnitude an int64 holds) to residues in [0, p)."""
    return np.mod(np.asarray(values, dtype=np.int64), np.int64(p)).astype(np.uint64)


def _bit_rev_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.int64)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _fwd_nb(a, tbl, p, pinv):  # pragma: no cover - exercised via NttPlan
        n = a.shape[0]
        t = n
        m = 1
        while m < n:
            t >>= 1
            for i in range(m):
                s = tbl[m + i]
                sf = np.float64(s)
                base = 2 * i * t
                for j in range(base, base + t):
                    u = a[j]
                    v = a[j + t]
                    q = np.uint64(np.float64(v) * sf * pinv)
                    r = v * s - q * p
                    r = min(r, r + p)
                    r = min(r, r - p)
                    x = u + r
                    x = min(x, x - p)
                    y = u + p - r
                    y = min(y, y - p)
                    a[j] = x
                    a[j + t] = y
            m <<= 1

    @numba.njit(cache=True)
    def _inv_nb(a, tbl, p, pinv, ninv):  # pragma: no cover - exercised via NttPlan
        n = a.shape[0]
        t = 1
        m = n
        while m > 1:
            h = m >> 1
            j1 = 0
            for i in range(h):
                s = tbl[h + i]
                sf = np.float64(s)
                for j in range(j1, j1 + t):
                    u = a[j]
                    v = a[j + t]
                    x = u + v
                    x = min(x, x - p)
                    d = u + p - v
                    d = min(d, d - p)
                    q = np.uint64(np.float64(d) * sf * pinv)
                    r = d * s - q * p
                    r = min(r, r + p)
                    r = min(r, r - p)
                    a[j] = x
                    a[j + t] = r
                j1 += 2 * t
            t <<= 1
            m = h
        nf = np.float64(ninv)
        for j in range(n):
            v = a[j]
            q = np.uint64(np.float64(v) * nf * pinv)
            r = v * ninv - q * p
            r = min(r, r + p)
            r = min(r, r - p)
            a[j] = r


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _mul_acc_perm_nb(acc0, acc1, d, perm, ka, kb, ps, pinvs):  # pragma: no cover
        rows, n = d.shape
        for i in range(rows):
            p = ps[i]
            pinv = pinvs[i]
            for j in range(n):
                x = d[i, perm[j]]
                xf = np.float64(x)
                ya = ka[i, j]
                qa = np.uint64(xf * np.float64(ya) * pinv)
                ra = x * ya - qa * p
                ra = min(ra, ra + p)
                ra = min(ra, ra - p)
                s = acc0[i, j] + ra
                acc0[i, j] = min(s, s - p)
                yb = kb[i, j]
                qb = np.uint64(xf * np.float64(yb) * pinv)
                rb = x * yb - qb * p
                rb = min(rb, rb + p)
                rb = min(rb, rb - p)
                t = acc1[i, j] + rb
                acc1[i, j] = min(t, t - p)

    @numba.njit(cache=True)
    def _dot_acc_nb(acc1, acc2, c1, c2, ph, ps, pinvs):  # pragma: no cover
        rows, n = c1.shape
        for i in range(rows):
            p = ps[i]
            pinv = pinvs[i]
            for j in range(n):
                w = ph[i, j]
                wf = np.float64(w)
                x = c1[i, j]
                qx = np.uint64(np.float64(x) * wf * pinv)
                rx = x * w - qx * p
                rx = min(rx, rx + p)
                rx = min(rx, rx - p)
                s = acc1[i, j] + rx
                acc1[i, j] = min(s, s - p)
                y = c2[i, j]
                qy = np.uint64(np.float64(y) * wf * pinv)
                ry = y * w - qy * p
                ry = min(ry, ry + p)
                ry = min(ry, ry - p)
                t = acc2[i, j] + ry
                acc2[i, j] = min(t, t - p)

    @numba.njit(cache=True)
    def _exact_div_nb(out, coeff, aux, ps, pinvs, top_half, neg_top, top_inv):  # pragma: no cover
        rows, n = coeff.shape
        for i in range(rows):
            p = ps[i]
            pinv = pinvs[i]
            corr = neg_top[i]
            inv = top_inv[i]
            invf = np.float64(inv)
            for j in range(n):
                v = aux[j]
                q = np.uint64(np.float64(v) * pinv)
                t = v - q * p
                t = min(t, t + p)
                t = min(t, t - p)
                if v > top_half:
                    t = t + corr
                    t = min(t, t - p)
                d = coeff[i, j] + p - t
                d = min(d, d - p)
                q2 = np.uint64(np.float64(d) * invf * pinv)
                r = d * inv - q2 * p
                r = min(r, r + p)
                r = min(r, r - p)
                out[i, j] = r


def mul_acc_perm(acc0, acc1, digit, perm, ka, kb, ps, pinvs) -> None:
    """acc0 += digit[:, perm] * ka and acc1 += digit[:, perm] * kb, rowwise
    modulo ps.  The gather through `perm` happens inside the kernel, so no
    permuted copy of the digit is materialized."""
    if _HAVE_NUMBA:
        _mul_acc_perm_nb(acc0, acc1, digit, perm, ka, kb, ps, pinvs)
        return
    d = digit[:, perm]
    for i in range(d.shape[0]):
        p = int(ps[i])
        acc0[i] = add_mod(acc0[i], mul_mod(d[i], ka[i], p), p)
        acc1[i] = add_mod(acc1[i], mul_mod(d[i], kb[i], p), p)


def dot_acc(acc1, acc2, c1, c2, ph, ps, pinvs) -> None:
    """acc1 += c1 * ph and acc2 += c2 * ph, rowwise modulo ps."""
    if _HAVE_NUMBA:
        _dot_acc_nb(acc1, acc2, c1, c2, ph, ps, pinvs)
        return
    for i in range(c1.shape[0]):
        p = int(ps[i])
        acc1[i] = add_mod(acc1[i], mul_mod(c1[i], ph[i], p), p)
        acc2[i] = add_mod(acc2[i], mul_mod(c2[i], ph[i], p), p)


def exact_div_rows(coeff, aux, ps, pinvs, top, neg_top, top_inv) -> np.ndarray:
    """(coeff - centered(aux)) / top per row, for aux the residue mod top.

    The subtraction is exact because the centered lift of aux is congruent
    to the full value mod top, so the division leaves no remainder.  Used
    both for rescaling (top = dropped chain prime) and for removing the
    key-switching prime.
    """
    out = np.empty_like(coeff)
    if _HAVE_NUMBA:
        _exact_div_nb(out, coeff, aux, ps, pinvs, np.uint64(top >> 1), neg_top, top_inv)
        return out
    half = np.uint64(top >> 1)
    big = aux > half
    for i in range(coeff.shape[0]):
        p = int(ps[i])
        tm = aux % np.uint64(p)
        adj = tm + neg_top[i]
        adj = np.minimum(adj, adj - np.uint64(p))
        centered = np.where(big, adj, tm)
        diff = sub_mod(coeff[i], centered, p)
        out[i] = mul_mod(diff, top_inv[i], p)
    return out


def _fwd_np(a: np.ndarray, tbl: np.ndarray, p: int) -> None:
    n = a.shape[0]
    t = n
    m = 1
    while m < n:
        t >>= 1
        blocks = a.reshape(m, 2 * t)
        u = blocks[:, :t].copy()
        w = mul_mod(blocks[:, t:], tbl[m : 2 * m, None], p)
        blocks[:, :t] = add_mod(u, w, p)
        blocks[:, t:] = sub_mod(u, w, p)
        m <<= 1


def _inv_np(a: np.ndarray, tbl: np.ndarray, p: int, ninv: int) -> None:
    n = a.shape[0]
    t = 1
    m = n
    while m > 1:
        h = m >> 1
        blocks = a.reshape(h, 2 * t)
        u = blocks[:, :t].copy()
        v = blocks[:, t:].copy()
        blocks[:, :t] = add_mod(u, v, p)
        blocks[:, t:] = mul_mod(sub_mod(u, v, p), tbl[h:m, None], p)
        t <<= 1
        m = h
    a[:] = mul_mod(a, np.uint64(ninv), p)


def find_psi(p: int, n: int) -> int:
    """Deterministic primitive 2n-th root of unity mod p (p = 1 mod 2n)."""
    if (p - 1) % (2 * n):
        raise GeometryMismatch(f"{p} does not support a degree-{n} negacyclic transform")
    exp = (p - 1) // (2 * n)
    for x in range(2, 4096):
        psi = pow(x, exp, p)
        if pow(psi, n, p) == p - 1:
            return psi
    raise PrimeSearchExhausted(f"no primitive root found for {p}")


class NttPlan:
    """Twiddle tables and kernels for one (prime, degree) pair."""

    def __init__(self, p: int, n: int, psi: int | None = None):
        if n < 2 or n & (n - 1):
            raise GeometryMismatch("transform size must be a power of two")
        if p.bit_length() > MAX_PRIME_BITS:
            raise GeometryMismatch(f"prime has {p.bit_length()} bits, limit is {MAX_PRIME_BITS}")
        self.p = p
        self.n = n
        self.psi = find_psi(p, n) if psi is None else psi
        if pow(self.psi, n, p) != p - 1:
            raise GeometryMismatch("psi is not a primitive 2n-th root of unity")
        rev = _bit_rev_indices(n)
        powers = np.array([pow(self.psi, int(e), p) for e in range(n)], dtype=np.uint64)
        ipsi = pow(self.psi, 2 * n - 1, p)
        ipowers = np.array([pow(ipsi, int(e), p) for e in range(n)], dtype=np.uint64)
        self.psi_rev = np.ascontiguousarray(powers[rev])
        self.ipsi_rev = np.ascontiguousarray(ipowers[rev])
        self.n_inv = pow(n, p - 2, p)
        self._pu = np.uint64(p)
        self._pinv = 1.0 / float(p)

    def forward(self, a: np.ndarray) -> np.ndarray:
        out = np.array(a, dtype=np.uint64, copy=True)
        if out.shape != (self.n,):
            raise GeometryMismatch(f"expected {self.n} coefficients")
        if _HAVE_NUMBA:
            _fwd_nb(out, self.psi_rev, self._pu, self._pinv)
        else:
            _fwd_np(out, self.psi_rev, self.p)
        return out

    def inverse(self, a: np.ndarray) -> np.ndarray:
        out = np.array(a, dtype=np.uint64, copy=True)
        if out.shape != (self.n,):
            raise GeometryMismatch(f"expected {self.n} values")
        if _HAVE_NUMBA:
            _inv_nb(out, self.ipsi_rev, self._pu, self._pinv, np.uint64(self.n_inv))
        else:
            _inv_np(out, self.ipsi_rev, self.p, self.n_inv)
        return out


_plans: dict[tuple[int, int], NttPlan] = {}


def plan_for(p: int, n: int) -> NttPlan:
    key = (p, n)
    plan = _plans.get(key)
    if plan is None:
        plan = _plans[key] = NttPlan(p, n)
    return plan


def evaluation_exponents(p: int, n: int) -> np.ndarray:
    """Exponent e(k) such that forward output slot k holds a(psi**e(k)).

    Recovered by transforming the monomial x, whose evaluations are the
    points themselves, then taking discrete logs in the cyclic group the
    roots generate.  The ordering is a property of the butterfly schedule,
    so any prime yields the same table for a given degree.
    """
    plan = plan_for(p, n)
    probe = np.zeros(n, dtype=np.uint64)
    probe[1] = 1
    points = plan.forward(probe)
    log_of = {}
    val = 1
    for e in range(2 * n):
        if e % 2 == 1:
            log_of[val] = e
        val = val * plan.psi % p
    return np.array([log_of[int(v)] for v in points], dtype=np.int64)
