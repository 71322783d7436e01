"""Leveled encrypted arithmetic over packed slot vectors.

Ciphertexts are pairs of ring elements held as residue matrices, one row
per active chain prime, kept in evaluation (transform) order so additions
and multiplications are pointwise.  The second component carries the
message: decryption computes c2 - c1 * s.

Multiplicative depth is paid in rescales: after a plaintext product or a
square, the top chain prime is divided out, which returns the scale to
roughly its working value and shortens the chain by one.  A ciphertext
down to the base prime alone cannot multiply again.

Key switching (used by rotations and by squaring's relinearization)
decomposes the switched component into one digit per active prime.  Key
material lives over the whole chain extended by one wide auxiliary prime,
and the per-digit CRT factors are built from the full chain, so a single
key serves every level.  Rotations share one decomposition across a batch
of steps: each step only permutes the digit transforms, multiplies by its
key, and scales the auxiliary prime back out.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from ..errors import (
    BudgetExhausted,
    InvalidCiphertext,
    KeyMismatch,
    LayoutMismatch,
)
from ..he_backend import HeBackend, HeVector
from .encoding import decode_coeffs, encode_coeffs
from .ntt import (
    add_mod,
    dot_acc,
    evaluation_exponents,
    exact_div_rows,
    mul_acc_perm,
    mul_mod,
    neg_mod,
    plan_for,
    reduce_mod,
    sub_mod,
)
from .params import CkksParams

__all__ = ["CkksCiphertext", "CkksContext", "setup"]

_PLAIN_CACHE_BYTES = 256 << 20


@dataclass
class CkksCiphertext:
    """Residue pair in evaluation order; row count tracks the level."""

    c1: np.ndarray
    c2: np.ndarray
    scale: float

    @property
    def rows(self) -> int:
        return self.c1.shape[0]


class _Secret:
    """Secret ring element; object identity doubles as the access token."""

    __slots__ = ("ntt_rows",)

    def __init__(self, ntt_rows: np.ndarray):
        self.ntt_rows = ntt_rows


class _SwitchKey:
    """One (a, b) pair per decomposition digit, over chain + auxiliary."""

    __slots__ = ("a", "b")

    def __init__(self, a: np.ndarray, b: np.ndarray):
        self.a = a
        self.b = b


def _close(x: float, y: float) -> bool:
    return abs(x - y) <= 1e-9 * max(abs(x), abs(y), 1.0)


class CkksContext(HeBackend):
    """Keyholder and evaluator for one parameter set.

    `rotation_steps` fixes which rotations get key material; asking for
    any other step raises KeyMismatch.  All randomness descends from one
    seed, and rotation keys draw from per-step child streams, so two
    contexts built from the same seed agree on every key even if their
    step sets differ.
    """

    def __init__(
        self,
        params: CkksParams,
        *,
        rotation_steps: Sequence[int] = (),
        seed: int | None = None,
    ):
        self.params = params
        self.slot_count = params.slot_count
        self.budget = params.levels
        n = params.degree
        self._n = n
        self._mods = list(params.moduli)
        self._sp = params.special
        self._all = list(params.all_primes)
        self._n_mod = len(self._mods)
        self._plans = [plan_for(p, n) for p in self._all]

        ss = np.random.SeedSequence(seed)
        self.seed = ss.entropy
        key_rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(0,)))
        self._enc_rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(1,)))

        # slot permutation bookkeeping for rotations
        exps = evaluation_exponents(self._mods[0], n)
        slot_of = np.full(2 * n, -1, dtype=np.int64)
        slot_of[exps] = np.arange(n, dtype=np.int64)
        self._eval_exps = exps
        self._slot_of_exp = slot_of
        self._sigma_cache: dict[int, np.ndarray] = {}

        # per-prime constants for rescaling and auxiliary-prime removal
        self._ps_all = np.array(self._all, dtype=np.uint64)
        self._pinv_all = np.array([1.0 / float(p) for p in self._all])
        self._identity_perm = np.arange(n, dtype=np.int64)
        self._neg_sp = np.array([(q - self._sp % q) % q for q in self._mods], dtype=np.uint64)
        self._sp_inv = np.array([pow(self._sp, q - 2, q) for q in self._mods], dtype=np.uint64)
        self._neg_drop = {
            rows: np.array(
                [(q - self._mods[rows - 1] % q) % q for q in self._mods[: rows - 1]],
                dtype=np.uint64,
            )
            for rows in range(2, self._n_mod + 1)
        }
        self._drop_inv = {
            rows: np.array(
                [pow(self._mods[rows - 1], q - 2, q) for q in self._mods[: rows - 1]],
                dtype=np.uint64,
            )
            for rows in range(2, self._n_mod + 1)
        }

        # digit CRT factors: F_j = aux * (Q/q_j) * [(Q/q_j)^-1 mod q_j],
        # reduced per prime; 1 mod q_j (times aux), 0 mod every other one.
        chain = 1
        for q in self._mods:
            chain *= q
        self._digit_factors = []
        for j, qj in enumerate(self._mods):
            rest = chain // qj
            fj = self._sp * rest * pow(rest, -1, qj)
            self._digit_factors.append([fj % p for p in self._all])

        # keys
        s_coeffs = key_rng.integers(-1, 2, n, dtype=np.int64)
        s_ntt = self._lift_ntt(s_coeffs, self._all)
        self._secret = _Secret(s_ntt)
        s_sq = np.stack([mul_mod(s_ntt[i], s_ntt[i], p) for i, p in enumerate(self._all)])

        self._pk_a = np.stack(
            [key_rng.integers(0, p, n, dtype=np.uint64) for p in self._mods]
        )
        e_pk = np.round(key_rng.normal(0.0, params.sigma, n)).astype(np.int64)
        e_rows = self._lift_ntt(e_pk, self._mods)
        self._pk_b = np.stack(
            [
                add_mod(mul_mod(self._pk_a[i], s_ntt[i], p), e_rows[i], p)
                for i, p in enumerate(self._mods)
            ]
        )

        self._relin = self._make_switch_key(s_sq, key_rng)
        self._rot_keys: dict[int, _SwitchKey] = {}
        for k in sorted({int(s) % self.slot_count for s in rotation_steps} - {0}):
            g = pow(5, k, 2 * n)
            tau_s = s_ntt[:, self._sigma(g)]
            s_old = np.stack([neg_mod(tau_s[i], p) for i, p in enumerate(self._all)])
            rk_rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(2, k)))
            self._rot_keys[k] = self._make_switch_key(s_old, rk_rng)

        self._plain_cache: dict[tuple[bytes, int], np.ndarray] = {}
        self._plain_cache_bytes = 0

    # -- ring helpers --------------------------------------------------
    def _lift_ntt(self, signed_coeffs: np.ndarray, primes: Sequence[int]) -> np.ndarray:
        """Small signed coefficient vector to transform-order residue rows."""
        rows = np.empty((len(primes), self._n), dtype=np.uint64)
        for i, p in enumerate(primes):
            plan = self._plans[self._all.index(p)] if p in self._all else plan_for(p, self._n)
            rows[i] = plan.forward(reduce_mod(signed_coeffs, p))
        return rows

    def _sigma(self, g: int) -> np.ndarray:
        """Transform-order permutation realizing the automorphism x -> x^g."""
        perm = self._sigma_cache.get(g)
        if perm is None:
            idx = (self._eval_exps * g) % (2 * self._n)
            perm = self._slot_of_exp[idx]
            self._sigma_cache[g] = perm
        return perm

    def _gauss_rows(self, rng: np.random.Generator, primes: Sequence[int]) -> np.ndarray:
        e = np.round(rng.normal(0.0, self.params.sigma, self._n)).astype(np.int64)
        return self._lift_ntt(e, primes)

    def _make_switch_key(self, s_old_rows: np.ndarray, rng: np.random.Generator) -> _SwitchKey:
        n_all = len(self._all)
        a = np.empty((self._n_mod, n_all, self._n), dtype=np.uint64)
        b = np.empty_like(a)
        for j in range(self._n_mod):
            for i, p in enumerate(self._all):
                a[j, i] = rng.integers(0, p, self._n, dtype=np.uint64)
            e_rows = self._gauss_rows(rng, self._all)
            for i, p in enumerate(self._all):
                term = mul_mod(s_old_rows[i], np.uint64(self._digit_factors[j][i]), p)
                mask = add_mod(mul_mod(a[j, i], self._secret.ntt_rows[i], p), e_rows[i], p)
                b[j, i] = add_mod(mask, term, p)
        return _SwitchKey(a, b)

    # -- decomposition and key application -----------------------------
    def _decompose(self, comp_ntt: np.ndarray) -> list[np.ndarray]:
        """Digits of a chain element, extended to chain + auxiliary, in
        transform order.  Digit j is the j-th residue row taken as a small
        integer polynomial, so extension is an exact word-size reduction."""
        rows = comp_ntt.shape[0]
        coeff = np.stack(
            [self._plans[i].inverse(comp_ntt[i]) for i in range(rows)]
        )
        digits = []
        for j in range(rows):
            src = coeff[j]
            ext = np.empty((rows + 1, self._n), dtype=np.uint64)
            for i in range(rows):
                ext[i] = src if i == j else src % np.uint64(self._mods[i])
            ext[rows] = src % np.uint64(self._sp)
            for i in range(rows):
                ext[i] = self._plans[i].forward(ext[i])
            ext[rows] = self._plans[-1].forward(ext[rows])
            digits.append(ext)
        return digits

    def _apply_key(
        self,
        digits: list[np.ndarray],
        key: _SwitchKey,
        rows: int,
        perm: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Accumulate digit * key, remove the auxiliary prime, return the
        switched pair over the active chain, in transform order."""
        n = self._n
        sp_i = len(self._all) - 1
        if perm is None:
            perm = self._identity_perm
        acc0 = np.zeros((rows + 1, n), dtype=np.uint64)
        acc1 = np.zeros((rows + 1, n), dtype=np.uint64)
        for j in range(rows):
            d = digits[j]
            mul_acc_perm(
                acc0[:rows], acc1[:rows], d[:rows], perm,
                key.a[j, :rows], key.b[j, :rows],
                self._ps_all[:rows], self._pinv_all[:rows],
            )
            mul_acc_perm(
                acc0[rows:], acc1[rows:], d[rows:], perm,
                key.a[j, sp_i : sp_i + 1], key.b[j, sp_i : sp_i + 1],
                self._ps_all[sp_i:], self._pinv_all[sp_i:],
            )

        out = []
        for acc in (acc0, acc1):
            coeff = np.stack([self._plans[i].inverse(acc[i]) for i in range(rows)])
            aux = self._plans[-1].inverse(acc[rows])
            res = exact_div_rows(
                coeff, aux,
                self._ps_all[:rows], self._pinv_all[:rows],
                self._sp, self._neg_sp[:rows], self._sp_inv[:rows],
            )
            for i in range(rows):
                res[i] = self._plans[i].forward(res[i])
            out.append(res)
        return out[0], out[1]

    def _rescale(self, ct: CkksCiphertext) -> CkksCiphertext:
        rows = ct.rows
        if rows < 2:
            raise BudgetExhausted("no rescaling prime left")
        drop = self._mods[rows - 1]
        new = []
        for comp in (ct.c1, ct.c2):
            coeff = np.stack([self._plans[i].inverse(comp[i]) for i in range(rows)])
            res = exact_div_rows(
                coeff[: rows - 1], coeff[rows - 1],
                self._ps_all[: rows - 1], self._pinv_all[: rows - 1],
                drop, self._neg_drop[rows], self._drop_inv[rows],
            )
            for i in range(rows - 1):
                res[i] = self._plans[i].forward(res[i])
            new.append(res)
        return CkksCiphertext(new[0], new[1], ct.scale / float(drop))

    def _plain_ntt(self, plain: np.ndarray, rows: int, pt_scale: float) -> np.ndarray:
        key = (hashlib.sha1(plain.tobytes()).digest(), rows)
        cached = self._plain_cache.get(key)
        if cached is not None:
            return cached
        coeffs = encode_coeffs(plain, self._n, pt_scale)
        out = np.empty((rows, self._n), dtype=np.uint64)
        for i in range(rows):
            out[i] = self._plans[i].forward(reduce_mod(coeffs, self._mods[i]))
        if self._plain_cache_bytes > _PLAIN_CACHE_BYTES:
            self._plain_cache.clear()
            self._plain_cache_bytes = 0
        self._plain_cache[key] = out
        self._plain_cache_bytes += out.nbytes
        return out

    # -- backend hooks -------------------------------------------------
    def _enc(self, values: np.ndarray) -> CkksCiphertext:
        n = self._n
        rows = self._n_mod
        m_coeffs = encode_coeffs(values, n, self.params.scale)
        m_rows = self._lift_ntt(m_coeffs, self._mods)
        v = self._enc_rng.integers(-1, 2, n, dtype=np.int64)
        v_rows = self._lift_ntt(v, self._mods)
        e3 = self._gauss_rows(self._enc_rng, self._mods)
        e4 = self._gauss_rows(self._enc_rng, self._mods)
        c1 = np.empty((rows, n), dtype=np.uint64)
        c2 = np.empty((rows, n), dtype=np.uint64)
        for i, p in enumerate(self._mods):
            c1[i] = add_mod(mul_mod(self._pk_a[i], v_rows[i], p), e3[i], p)
            c2[i] = add_mod(
                add_mod(mul_mod(self._pk_b[i], v_rows[i], p), m_rows[i], p), e4[i], p
            )
        return CkksCiphertext(c1, c2, self.params.scale)

    def _dec(self, v: HeVector, secret: Any) -> np.ndarray:
        if secret is not self._secret:
            raise KeyMismatch("decryption needs this context's secret")
        ct: CkksCiphertext = v.payload
        rows = ct.rows
        phase = np.empty((rows, self._n), dtype=np.uint64)
        for i, p in enumerate(self._mods[:rows]):
            phase[i] = sub_mod(ct.c2[i], mul_mod(ct.c1[i], secret.ntt_rows[i], p), p)
        coeff = [self._plans[i].inverse(phase[i]) for i in range(rows)]
        if rows == 1:
            q0 = self._mods[0]
            c = coeff[0]
            vals = np.where(c > np.uint64(q0 >> 1), c.astype(np.float64) - float(q0), c.astype(np.float64))
        else:
            # exact two-prime lift; the working scale keeps every phase
            # coefficient far below q0*q1/2
            q0, q1 = self._mods[0], self._mods[1]
            inv01 = pow(q0, -1, q1)
            big = q0 * q1
            half = big >> 1
            r0 = coeff[0].tolist()
            r1 = coeff[1].tolist()
            vals = np.empty(self._n, dtype=np.float64)
            for idx in range(self._n):
                t = ((r1[idx] - r0[idx]) * inv01) % q1
                x = r0[idx] + q0 * t
                if x > half:
                    x -= big
                vals[idx] = float(x)
        return decode_coeffs(vals, self._n, ct.scale).real.copy()

    def _add(self, a: HeVector, b: HeVector) -> CkksCiphertext:
        pa: CkksCiphertext = a.payload
        pb: CkksCiphertext = b.payload
        if not _close(pa.scale, pb.scale):
            raise LayoutMismatch(f"scales diverged: {pa.scale} vs {pb.scale}")
        rows = min(pa.rows, pb.rows)
        c1 = np.empty((rows, self._n), dtype=np.uint64)
        c2 = np.empty((rows, self._n), dtype=np.uint64)
        for i, p in enumerate(self._mods[:rows]):
            c1[i] = add_mod(pa.c1[i], pb.c1[i], p)
            c2[i] = add_mod(pa.c2[i], pb.c2[i], p)
        return CkksCiphertext(c1, c2, pa.scale)

    def _add_plain(self, a: HeVector, plain: np.ndarray) -> CkksCiphertext:
        pa: CkksCiphertext = a.payload
        rows = pa.rows
        coeffs = encode_coeffs(plain, self._n, pa.scale)
        c2 = np.empty((rows, self._n), dtype=np.uint64)
        for i, p in enumerate(self._mods[:rows]):
            c2[i] = add_mod(pa.c2[i], self._plans[i].forward(reduce_mod(coeffs, p)), p)
        return CkksCiphertext(pa.c1.copy(), c2, pa.scale)

    def _dot_plain(self, vectors: Sequence[HeVector], plains: Sequence[np.ndarray]) -> CkksCiphertext:
        lead: CkksCiphertext = vectors[0].payload
        rows = lead.rows
        for v in vectors[1:]:
            if not _close(v.payload.scale, lead.scale):
                raise LayoutMismatch("dot operands carry diverged scales")
        pt_scale = float(self._mods[rows - 1])
        acc1 = np.zeros((rows, self._n), dtype=np.uint64)
        acc2 = np.zeros((rows, self._n), dtype=np.uint64)
        for v, plain in zip(vectors, plains):
            ct: CkksCiphertext = v.payload
            phat = self._plain_ntt(plain, rows, pt_scale)
            dot_acc(acc1, acc2, ct.c1, ct.c2, phat, self._ps_all[:rows], self._pinv_all[:rows])
        raw = CkksCiphertext(acc1, acc2, lead.scale * pt_scale)
        return self._rescale(raw)

    def _square(self, a: HeVector) -> CkksCiphertext:
        pa: CkksCiphertext = a.payload
        rows = pa.rows
        d0 = np.empty((rows, self._n), dtype=np.uint64)
        d1 = np.empty((rows, self._n), dtype=np.uint64)
        d2 = np.empty((rows, self._n), dtype=np.uint64)
        for i, p in enumerate(self._mods[:rows]):
            d0[i] = mul_mod(pa.c1[i], pa.c1[i], p)
            cross = mul_mod(pa.c1[i], pa.c2[i], p)
            d1[i] = add_mod(cross, cross, p)
            d2[i] = mul_mod(pa.c2[i], pa.c2[i], p)
        u0, u1 = self._apply_key(self._decompose(d0), self._relin, rows)
        c1 = np.empty((rows, self._n), dtype=np.uint64)
        c2 = np.empty((rows, self._n), dtype=np.uint64)
        for i, p in enumerate(self._mods[:rows]):
            c1[i] = add_mod(d1[i], u0[i], p)
            c2[i] = add_mod(d2[i], u1[i], p)
        return self._rescale(CkksCiphertext(c1, c2, pa.scale * pa.scale))

    def _rotate(self, a: HeVector, k: int) -> CkksCiphertext:
        return self._rotate_many(a, [k])[k]

    def _rotate_many(self, a: HeVector, steps: Sequence[int]) -> Mapping[int, CkksCiphertext]:
        if not steps:
            return {}
        pa: CkksCiphertext = a.payload
        rows = pa.rows
        digits = self._decompose(pa.c1)
        out: dict[int, CkksCiphertext] = {}
        for k in steps:
            key = self._rot_keys.get(k)
            if key is None:
                raise KeyMismatch(f"no rotation key for step {k}")
            perm = self._sigma(pow(5, k, 2 * self._n))
            u0, u1 = self._apply_key(digits, key, rows, perm)
            c2 = np.empty((rows, self._n), dtype=np.uint64)
            for i, p in enumerate(self._mods[:rows]):
                c2[i] = add_mod(pa.c2[i][perm], u1[i], p)
            out[k] = CkksCiphertext(u0, c2, pa.scale)
        return out

    # -- conveniences --------------------------------------------------
    @property
    def secret(self) -> _Secret:
        return self._secret

    @property
    def rotation_steps(self) -> list[int]:
        return sorted(self._rot_keys)

    def fingerprint(self) -> str:
        return self.params.fingerprint


def setup(
    params: CkksParams | None = None,
    rotation_steps: Sequence[int] = (),
    seed: int | None = None,
) -> CkksContext:
    """Build a ready context; the default parameter set fits the demos."""
    return CkksContext(params or CkksParams(), rotation_steps=rotation_steps, seed=seed)
