"""Stable on-disk form for encrypted vectors.

A vector is a small JSON header (parameter fingerprint, chain length,
exact scale, slot layout) followed by the raw residue rows of both
ciphertext components as little-endian 64-bit words.  Loading verifies
the magic, the fingerprint against the receiving context, and the byte
count, so a truncated or foreign file fails loudly instead of decrypting
to noise.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import InvalidCiphertext
from ..he_backend import HeVector, SlotLayout
from .context import CkksCiphertext, CkksContext

__all__ = ["dump_vector", "load_vector"]

MAGIC = b"HEV1"


def dump_vector(context: CkksContext, vec: HeVector) -> bytes:
    ct: CkksCiphertext = vec.payload
    header = {
        "fingerprint": context.params.fingerprint,
        "rows": ct.rows,
        "level": vec.level,
        "scale": ct.scale.hex(),
        "valid": sorted(vec.layout.valid),
        "pending_scale": vec.layout.pending_scale.hex(),
        "pending_mask": vec.layout.pending_mask,
    }
    blob = json.dumps(header, separators=(",", ":")).encode()
    body = ct.c1.astype("<u8").tobytes() + ct.c2.astype("<u8").tobytes()
    return MAGIC + struct.pack("<I", len(blob)) + blob + body


def load_vector(context: CkksContext, data: bytes) -> HeVector:
    if len(data) < 8 or data[:4] != MAGIC:
        raise InvalidCiphertext("not an encrypted vector file")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise InvalidCiphertext("truncated header")
    try:
        header = json.loads(data[8 : 8 + hlen])
    except json.JSONDecodeError as exc:
        raise InvalidCiphertext("unreadable header") from exc
    if header.get("fingerprint") != context.params.fingerprint:
        raise InvalidCiphertext("vector belongs to a different parameter set")
    rows = int(header["rows"])
    if not 1 <= rows <= context.budget + 1 or int(header["level"]) != rows - 1:
        raise InvalidCiphertext("inconsistent chain length")
    n = context.params.degree
    body = data[8 + hlen :]
    want = 2 * rows * n * 8
    if len(body) != want:
        raise InvalidCiphertext(f"expected {want} payload bytes, found {len(body)}")
    words = np.frombuffer(body, dtype="<u8").astype(np.uint64).reshape(2, rows, n)
    valid = frozenset(int(i) for i in header["valid"])
    if any(i < 0 or i >= context.slot_count for i in valid):
        raise InvalidCiphertext("layout names slots outside the ring")
    layout = SlotLayout(
        valid=valid,
        pending_scale=float.fromhex(header["pending_scale"]),
        pending_mask=bool(header["pending_mask"]),
    )
    ct = CkksCiphertext(words[0].copy(), words[1].copy(), float.fromhex(header["scale"]))
    return HeVector(payload=ct, level=rows - 1, slot_count=context.slot_count, layout=layout)
