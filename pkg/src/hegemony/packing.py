"""Fixed-point packing of weight vectors into big-integer plaintexts.

Each weight is quantised to frac_bits of fraction, shifted into the
non-negative range, and placed in its own slot_bits-wide field of a big
integer (first weight in the lowest bits).  Adding the integers adds every
field independently as long as no field ever carries; the config invariant
slot_bits >= value_bits + log2(max_addends) + 1 guarantees that for up to
max_addends summands.  Division by the summand count happens after
decryption, in unpack_sum, so the ciphertext domain only ever sees sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, floor, log2
from typing import Iterable, Sequence

from .errors import OverflowDetected, WeightOutOfRange

__all__ = ["PackingConfig", "pack", "unpack_sum", "plaintext_bits_for"]


@dataclass(frozen=True)
class PackingConfig:
    frac_bits: int = 16
    slot_bits: int = 48
    shift: int = 1 << 31
    max_addends: int = 16

    def __post_init__(self):
        if min(self.frac_bits, self.slot_bits, self.shift, self.max_addends) < 1:
            raise ValueError("all packing parameters must be positive")
        required = self.value_bits + ceil(log2(self.max_addends)) + 1
        if self.slot_bits < required:
            raise ValueError(
                f"slot_bits={self.slot_bits} cannot hold {self.max_addends} addends "
                f"of {self.value_bits}-bit values (need >= {required})"
            )

    @property
    def value_bits(self) -> int:
        # a shifted quantised value lies in [0, 2*shift)
        return (2 * self.shift - 1).bit_length()

    def slots_per_int(self, plaintext_bits: int) -> int:
        n = plaintext_bits // self.slot_bits
        if n < 1:
            raise ValueError("plaintext too small for even one slot")
        return n

    def to_json_obj(self) -> dict:
        return {
            "frac_bits": self.frac_bits,
            "slot_bits": self.slot_bits,
            "shift": self.shift,
            "max_addends": self.max_addends,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PackingConfig":
        return cls(
            frac_bits=int(obj["frac_bits"]),
            slot_bits=int(obj["slot_bits"]),
            shift=int(obj["shift"]),
            max_addends=int(obj["max_addends"]),
        )


def plaintext_bits_for(n: int) -> int:
    """Usable plaintext bits under a modulus n, with two bits of headroom."""
    return n.bit_length() - 2


def quantize(w: float, config: PackingConfig) -> int:
    """Round-half-away-from-zero at frac_bits of fraction."""
    scaled = abs(w) * (1 << config.frac_bits)
    q = floor(scaled + 0.5)
    return -q if w < 0 else q


def pack(weights: Sequence[float], config: PackingConfig, plaintext_bits: int) -> list[int]:
    """Pack weights into big integers, slots_per_int fields per integer."""
    spi = config.slots_per_int(plaintext_bits)
    out: list[int] = []
    acc = 0
    slot = 0
    for idx, w in enumerate(weights):
        field = quantize(w, config) + config.shift
        if not 0 <= field < 2 * config.shift:
            raise WeightOutOfRange(f"weight[{idx}]={w} outside the representable range")
        acc |= field << (slot * config.slot_bits)
        slot += 1
        if slot == spi:
            out.append(acc)
            acc, slot = 0, 0
    if slot:
        out.append(acc)
    return out


def unpack_sum(
    packed: Iterable[int],
    count: int,
    total: int,
    config: PackingConfig,
    plaintext_bits: int,
) -> list[float]:
    """Decode integers holding the slotwise sum of `count` packed vectors.

    Returns averages: (field - count*shift) / (count * 2^frac_bits).  A
    field at or beyond count * 2 * shift cannot arise from count valid
    summands and raises OverflowDetected, as does count > max_addends.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if count > config.max_addends:
        raise OverflowDetected(f"{count} addends exceeds the configured bound {config.max_addends}")
    spi = config.slots_per_int(plaintext_bits)
    mask = (1 << config.slot_bits) - 1
    bound = count * 2 * config.shift
    values: list[float] = []
    denom = count << config.frac_bits
    for block, big in enumerate(packed):
        for slot in range(spi):
            if len(values) == total:
                return values
            field = (big >> (slot * config.slot_bits)) & mask
            if field >= bound:
                raise OverflowDetected(f"slot {block * spi + slot} holds {field}, bound {bound}")
            values.append((field - count * config.shift) / denom)
    if len(values) != total:
        raise ValueError(f"expected {total} fields, decoded {len(values)}")
    return values
