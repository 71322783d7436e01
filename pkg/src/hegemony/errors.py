"""Exception types shared across the toolkit.

Every error raised by this package derives from :class:`HegemonyError` so
callers can catch the whole family with one clause.  The CLI maps these to
process exit codes (see ``cli.py``).
"""

from __future__ import annotations


class HegemonyError(Exception):
    """Base class for all toolkit errors."""


class NotInvertible(HegemonyError):
    """A modular inverse was requested for a non-unit."""


class PrimeSearchExhausted(HegemonyError):
    """Prime generation hit its attempt budget without finding a candidate."""


class UnsupportedDegree(HegemonyError):
    """Sharing polynomial degree is incompatible with the share count."""


class MessageOutOfRange(HegemonyError):
    """Plaintext does not fit the key's message space."""


class InvalidCiphertext(HegemonyError):
    """Ciphertext failed a structural or arithmetic validity check."""


class KeyMismatch(HegemonyError):
    """Ciphertext or share belongs to a different key than the one supplied."""


class IncompleteShareSet(HegemonyError):
    """Combination was attempted with fewer shares than the ceremony requires."""


class CombineFailed(HegemonyError):
    """Partial decryptions did not combine to a consistent plaintext."""


class WeightOutOfRange(HegemonyError):
    """A weight does not fit the fixed-point field at the configured widths."""


class OverflowDetected(HegemonyError):
    """A packed slot exceeded its representable bound after aggregation."""


class TooManyValues(HegemonyError):
    """More values were supplied than the cipher has slots."""


class BudgetExhausted(HegemonyError):
    """A multiplicative operation was attempted with no levels remaining."""

    def __init__(self, message: str = "no multiplicative levels remaining", *, layer: int | str | None = None):
        super().__init__(message)
        self.layer = layer


class DeferredScalePresent(HegemonyError):
    """An operation that cannot absorb a pending scale factor was attempted."""


class LayoutMismatch(HegemonyError):
    """Two ciphertexts with incompatible slot layouts were combined."""


class ScaleOverflow(HegemonyError):
    """Encoding at the requested scale no longer fits the active modulus."""


class GeometryMismatch(HegemonyError):
    """Tensor shapes, strides, or channel counts are inconsistent."""


class ProtocolError(HegemonyError):
    """A message violated the aggregation protocol (wrong round, kind, or peer)."""


class RoundAbort(HegemonyError):
    """An aggregation round was aborted; details are recorded in the transcript."""

    def __init__(self, message: str, *, round_index: int | None = None, transcript=None):
        super().__init__(message)
        self.round_index = round_index
        self.transcript = transcript
