"""Slot encoding between real vectors and integer polynomial coefficients.

The n/2 slots of a degree-n ring are the polynomial's values at one
representative of each conjugate pair of primitive 2n-th roots of unity.
Representatives are ordered along the orbit of 5 mod 2n, so the ring
automorphism x -> x**(5**r) cyclically rotates slots by r, which is what
gives rotations their meaning.  Both directions go through a length-2n
FFT.
"""

from __future__ import annotations

import numpy as np

from ..errors import ScaleOverflow

__all__ = ["slot_exponents", "encode_coeffs", "decode_coeffs"]

# np.round on values near 2**52 is still integer-exact; past that the
# rounding itself would quantize, so refuse.
_COEFF_LIMIT = float(1 << 52)

_exp_cache: dict[int, np.ndarray] = {}


def slot_exponents(n: int) -> np.ndarray:
    """Root exponent assigned to each slot: 5**j mod 2n for slot j."""
    table = _exp_cache.get(n)
    if table is None:
        two_n = 2 * n
        out = np.empty(n // 2, dtype=np.int64)
        g = 1
        for j in range(n // 2):
            out[j] = g
            g = g * 5 % two_n
        table = _exp_cache[n] = out
    return table


def encode_coeffs(values: np.ndarray, n: int, scale: float) -> np.ndarray:
    """Round scale * values into the integer coefficients encoding them.

    `values` holds up to n/2 reals (short input is zero-extended).  The
    inverse embedding of the conjugate-extended slot vector is real, and
    filling only one of each conjugate pair lets 2 * Re(fft) stand in for
    the full sum.
    """
    half = n // 2
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size > half:
        raise ScaleOverflow(f"{vals.size} values exceed {half} slots")
    u = np.zeros(2 * n, dtype=np.complex128)
    u[slot_exponents(n)[: vals.size]] = vals
    m = np.fft.fft(u).real[:n] * (2.0 * scale / n)
    peak = float(np.max(np.abs(m))) if m.size else 0.0
    if peak >= _COEFF_LIMIT:
        raise ScaleOverflow(f"coefficient magnitude {peak:.3e} too large to round exactly")
    return np.round(m).astype(np.int64)


def decode_coeffs(coeffs: np.ndarray, n: int, scale: float) -> np.ndarray:
    """Complex slot values of an integer (or real) coefficient vector."""
    mm = np.zeros(2 * n, dtype=np.float64)
    mm[:n] = np.asarray(coeffs, dtype=np.float64)
    spec = np.fft.fft(mm)
    return np.conj(spec[slot_exponents(n)]) / scale
