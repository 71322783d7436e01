"""Backend contract for slotted homomorphic vectors, plus an exact simulator.

A backend owns ciphertext payloads; everything the kernels need to know
travels alongside in :class:`HeVector`: the multiplicative level still
available, the slot count, and a :class:`SlotLayout` describing which slots
carry meaning.  Level accounting lives in this module so that every backend
charges identically: one level per multiplicative op (``mul_plain``,
``dot_plain``, ``square``), none for additions and rotations.

The simulator stores plain float64 slots and is bit-exact, which makes it
the oracle the encrypted backend is compared against.

Layout bookkeeping:

* ``pending_scale`` is a multiplier still owed to every valid slot.  The
  pooling kernel defers its division this way; the next multiplicative op
  folds it into its plaintext and clears it (``folds_pending=True``).
* ``pending_mask`` records that slots outside ``valid`` hold garbage
  rather than zeros, and that a later plaintext multiply is expected to
  zero them.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BudgetExhausted,
    DeferredScalePresent,
    KeyMismatch,
    LayoutMismatch,
    TooManyValues,
)

__all__ = ["SlotLayout", "HeVector", "HeBackend", "SimParams", "SimulatorContext"]


@dataclass(frozen=True)
class SlotLayout:
    valid: frozenset[int]
    pending_scale: float = 1.0
    pending_mask: bool = False

    @classmethod
    def leading(cls, n: int) -> "SlotLayout":
        return cls(valid=frozenset(range(n)))

    def shifted(self, k: int, slot_count: int) -> "SlotLayout":
        if len(self.valid) == slot_count:  # full ring maps to itself
            return self
        return replace(self, valid=frozenset((i - k) % slot_count for i in self.valid))


@dataclass
class HeVector:
    payload: Any
    level: int
    slot_count: int
    layout: SlotLayout

    def with_layout(self, layout: SlotLayout) -> "HeVector":
        return HeVector(payload=self.payload, level=self.level, slot_count=self.slot_count, layout=layout)


def _support(plain: np.ndarray) -> frozenset[int]:
    return frozenset(int(i) for i in np.nonzero(plain)[0])


class HeBackend(ABC):
    """Operations every backend provides; level/layout rules are final here."""

    slot_count: int
    budget: int

    # -- payload hooks -------------------------------------------------
    @abstractmethod
    def _enc(self, values: np.ndarray) -> Any: ...

    @abstractmethod
    def _dec(self, v: HeVector, secret: Any) -> np.ndarray: ...

    @abstractmethod
    def _add(self, a: HeVector, b: HeVector) -> Any: ...

    @abstractmethod
    def _add_plain(self, a: HeVector, plain: np.ndarray) -> Any: ...

    @abstractmethod
    def _dot_plain(self, vectors: Sequence[HeVector], plains: Sequence[np.ndarray]) -> Any: ...

    @abstractmethod
    def _square(self, a: HeVector) -> Any: ...

    @abstractmethod
    def _rotate(self, a: HeVector, k: int) -> Any: ...

    def _rotate_many(self, a: HeVector, steps: Sequence[int]) -> Mapping[int, Any]:
        return {k: self._rotate(a, k) for k in steps}

    # -- public contract ----------------------------------------------
    def encrypt_vec(self, values: Sequence[float]) -> HeVector:
        arr = np.asarray(values, dtype=np.float64).ravel()
        if arr.size > self.slot_count:
            raise TooManyValues(f"{arr.size} values exceed {self.slot_count} slots")
        full = np.zeros(self.slot_count, dtype=np.float64)
        full[: arr.size] = arr
        return HeVector(
            payload=self._enc(full),
            level=self.budget,
            slot_count=self.slot_count,
            layout=SlotLayout.leading(arr.size),
        )

    def decrypt_vec(self, v: HeVector, secret: Any) -> np.ndarray:
        """Raw slot values; pending scale and mask are reported, not applied."""
        return self._dec(v, secret)

    def add(self, a: HeVector, b: HeVector) -> HeVector:
        self._check_pair(a, b)
        out = self._add(a, b)
        layout = SlotLayout(
            valid=a.layout.valid | b.layout.valid,
            pending_scale=a.layout.pending_scale,
            pending_mask=a.layout.pending_mask or b.layout.pending_mask,
        )
        return HeVector(out, min(a.level, b.level), self.slot_count, layout)

    def add_plain(self, a: HeVector, plain: Sequence[float]) -> HeVector:
        if a.layout.pending_scale != 1.0:
            raise DeferredScalePresent("fold the pending scale before adding plaintext")
        arr = self._pad(plain)
        out = self._add_plain(a, arr)
        layout = replace(a.layout, valid=a.layout.valid | _support(arr))
        return HeVector(out, a.level, self.slot_count, layout)

    def mul_plain(self, a: HeVector, plain: Sequence[float], *, folds_pending: bool = False) -> HeVector:
        return self.dot_plain([a], [plain], folds_pending=folds_pending)

    def dot_plain(
        self,
        vectors: Sequence[HeVector],
        plains: Sequence[Iterable[float]],
        *,
        folds_pending: bool = False,
    ) -> HeVector:
        """Sum of slotwise products vectors[t] * plains[t]; one level total."""
        if len(vectors) != len(plains) or not vectors:
            raise LayoutMismatch("need matching, non-empty vector/plain lists")
        lead = vectors[0]
        for v in vectors[1:]:
            if v.level != lead.level or v.layout.pending_scale != lead.layout.pending_scale:
                raise LayoutMismatch("dot_plain operands must share level and pending scale")
        if lead.level < 1:
            raise BudgetExhausted()
        arrs = [self._pad(p) for p in plains]
        out = self._dot_plain(vectors, arrs)
        valid: frozenset[int] = frozenset()
        for arr in arrs:
            valid |= _support(arr)
        mask = any(v.layout.pending_mask for v in vectors)
        layout = SlotLayout(
            valid=valid,
            pending_scale=1.0 if folds_pending else lead.layout.pending_scale,
            pending_mask=False if folds_pending else mask,
        )
        return HeVector(out, lead.level - 1, self.slot_count, layout)

    def square(self, a: HeVector) -> HeVector:
        if a.level < 1:
            raise BudgetExhausted()
        if a.layout.pending_scale != 1.0:
            raise DeferredScalePresent("squaring would square the deferred scale")
        return HeVector(self._square(a), a.level - 1, self.slot_count, a.layout)

    def rotate(self, a: HeVector, k: int) -> HeVector:
        """Cyclic shift: output slot j holds input slot (j + k) mod slot_count."""
        k = k % self.slot_count
        if k == 0:
            return HeVector(a.payload, a.level, a.slot_count, a.layout)
        out = self._rotate(a, k)
        return HeVector(out, a.level, self.slot_count, a.layout.shifted(k, self.slot_count))

    def rotate_batch(self, a: HeVector, steps: Sequence[int]) -> dict[int, HeVector]:
        """Rotations by several steps at once; backends may share setup work."""
        norm = sorted({k % self.slot_count for k in steps})
        payloads = self._rotate_many(a, [k for k in norm if k])
        out: dict[int, HeVector] = {}
        for k in norm:
            if k == 0:
                out[0] = HeVector(a.payload, a.level, a.slot_count, a.layout)
            else:
                out[k] = HeVector(payloads[k], a.level, self.slot_count, a.layout.shifted(k, self.slot_count))
        return out

    def level_of(self, v: HeVector) -> int:
        return v.level

    def slots_of(self, v: HeVector) -> int:
        return v.slot_count

    # -- helpers -------------------------------------------------------
    def _pad(self, plain: Iterable[float]) -> np.ndarray:
        arr = np.asarray(plain, dtype=np.float64).ravel()
        if arr.size > self.slot_count:
            raise TooManyValues(f"plaintext of {arr.size} values exceeds {self.slot_count} slots")
        if arr.size < self.slot_count:
            arr = np.concatenate([arr, np.zeros(self.slot_count - arr.size)])
        return arr

    def _check_pair(self, a: HeVector, b: HeVector) -> None:
        if a.slot_count != b.slot_count or a.slot_count != self.slot_count:
            raise LayoutMismatch("slot counts differ")
        if a.layout.pending_scale != b.layout.pending_scale:
            raise LayoutMismatch("pending scales differ; fold before adding")


@dataclass(frozen=True)
class SimParams:
    slot_count: int = 4096
    budget: int = 6

    def __post_init__(self):
        if self.slot_count < 1 or self.slot_count & (self.slot_count - 1):
            raise ValueError("slot_count must be a power of two")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")


class _SimSecret:
    """Opaque token playing the role of the decryption key."""


class SimulatorContext(HeBackend):
    """Cleartext stand-in with identical level and layout behaviour."""

    def __init__(self, params: SimParams = SimParams()):
        self.params = params
        self.slot_count = params.slot_count
        self.budget = params.budget
        self.secret = _SimSecret()

    def _enc(self, values: np.ndarray) -> np.ndarray:
        return values.copy()

    def _dec(self, v: HeVector, secret: Any) -> np.ndarray:
        if secret is not self.secret:
            raise KeyMismatch("wrong simulator secret")
        return np.asarray(v.payload, dtype=np.float64).copy()

    def _add(self, a: HeVector, b: HeVector) -> np.ndarray:
        return a.payload + b.payload

    def _add_plain(self, a: HeVector, plain: np.ndarray) -> np.ndarray:
        return a.payload + plain

    def _dot_plain(self, vectors: Sequence[HeVector], plains: Sequence[np.ndarray]) -> np.ndarray:
        acc = np.zeros(self.slot_count, dtype=np.float64)
        for v, p in zip(vectors, plains):
            acc += v.payload * p
        return acc

    def _square(self, a: HeVector) -> np.ndarray:
        return a.payload * a.payload

    def _rotate(self, a: HeVector, k: int) -> np.ndarray:
        return np.roll(a.payload, -k)
