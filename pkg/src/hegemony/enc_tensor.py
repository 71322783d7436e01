"""Linear-algebra kernels over encrypted slot vectors.

Matrices multiply encrypted vectors through their generalized diagonals:
b = sum_i diag_i * rotate(x, i), which costs one multiplicative level no
matter the size.  A 2D convolution is out_height * filter_height * c_out
such products against Toeplitz matrices built from the filter rows, with
each output channel rotated into its own slot block.  Pooling is additions
and rotations only; its divisor is deferred through the layout and folded
into the dense layer's plaintext.

Input rows are expected channel-strided: the slot for pixel (x, c) of a
row is c * width + x.  All kernels preserve that convention.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import GeometryMismatch, LayoutMismatch
from .he_backend import HeBackend, HeVector, SlotLayout

__all__ = [
    "EncImage",
    "diagonalize",
    "matvec",
    "toeplitz_from_filter",
    "conv2d",
    "conv_rotation_steps",
    "square_activation",
    "global_avg_pool",
    "pool_ladder",
    "pool_rotation_steps",
    "dense_rotation_steps",
    "dense_with_fold",
]


@dataclass
class EncImage:
    """One ciphertext per image row, plus the geometry the slots encode."""

    rows: list[HeVector]
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if len(self.rows) != self.height:
            raise GeometryMismatch(f"{len(self.rows)} row ciphertexts for height {self.height}")


def diagonalize(matrix: np.ndarray) -> np.ndarray:
    """Generalized diagonals of a matrix, zero-padded square.

    Row i of the result is the i-th diagonal: result[i, j] = A[j, (j + i) % s]
    where s = max(rows, cols).  A matvec against the diagonals needs only
    rotations of the input, one per non-zero diagonal.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise GeometryMismatch("expected a 2-D matrix")
    s = max(a.shape)
    padded = np.zeros((s, s))
    padded[: a.shape[0], : a.shape[1]] = a
    out = np.empty((s, s))
    j = np.arange(s)
    for i in range(s):
        out[i] = padded[j, (j + i) % s]
    return out


def _nonzero_diagonals(matrix: np.ndarray) -> dict[int, np.ndarray]:
    diag = diagonalize(matrix)
    return {i: diag[i] for i in range(diag.shape[0]) if np.any(diag[i])}


def _doubled(backend: HeBackend, x: HeVector, size: int) -> HeVector:
    """Append a copy of the leading `size` slots right after themselves.

    Makes every rotation by 0 <= i < size read x[(j + i) % size] from slot
    j + i, so the diagonal products never wrap across garbage.
    """
    if 2 * size > backend.slot_count:
        raise GeometryMismatch(f"need {2 * size} slots for the rotation trick, have {backend.slot_count}")
    if any(i >= size for i in x.layout.valid):
        raise GeometryMismatch("input vector must occupy the leading slots")
    return backend.add(x, backend.rotate(x, -size))


def matvec(backend: HeBackend, a_diag: np.ndarray, x: HeVector) -> HeVector:
    """Product of a diagonalized matrix with an encrypted vector; one level.

    `a_diag` is the output of :func:`diagonalize`.  All-zero diagonals are
    skipped entirely, so structured matrices pay only for the rotations
    they actually use.  The input must be garbage-free: the doubling trick
    would otherwise drag masked slots into the products.
    """
    a_diag = np.asarray(a_diag, dtype=np.float64)
    if a_diag.ndim != 2 or a_diag.shape[0] != a_diag.shape[1]:
        raise GeometryMismatch("expected square diagonal form from diagonalize()")
    if x.layout.pending_mask:
        raise LayoutMismatch("input carries garbage slots; fold a mask first")
    size = a_diag.shape[0]
    xx = _doubled(backend, x, size)
    live = [i for i in range(size) if np.any(a_diag[i])]
    if not live:
        live = [0]
    rots = backend.rotate_batch(xx, live)
    return backend.dot_plain(
        [rots[i] for i in live],
        [a_diag[i] for i in live],
    )


def toeplitz_from_filter(
    filter_row: np.ndarray,
    in_width: int,
    stride: int,
    out_channel_offset: int = 0,
) -> np.ndarray:
    """Stride-aware Toeplitz matrix of a 1-D filter.

    Row r holds the filter taps starting at column r * stride, giving
    out_width = (in_width - len) // stride + 1 rows.  A positive
    out_channel_offset prepends that many zero rows, which places the
    product directly at a channel block offset instead of requiring a
    rotation afterwards.
    """
    taps = np.asarray(filter_row, dtype=np.float64).ravel()
    k = taps.size
    if k == 0 or k > in_width:
        raise GeometryMismatch(f"filter of {k} taps does not fit width {in_width}")
    if stride < 1:
        raise GeometryMismatch("stride must be at least 1")
    out_w = (in_width - k) // stride + 1
    mat = np.zeros((out_channel_offset + out_w, in_width))
    for r in range(out_w):
        mat[out_channel_offset + r, r * stride : r * stride + k] = taps
    return mat


def conv2d(backend: HeBackend, filters: np.ndarray, stride: int, image: EncImage) -> EncImage:
    """Valid 2-D convolution of a row-encoded image; one level total.

    `filters` has shape (filter_h, filter_w, c_in, c_out).  Channel mixing
    is folded into one widened Toeplitz matrix per (filter row, output
    channel): the per-input-channel blocks sit side by side, matching the
    channel-strided slot layout of the rows.  Every output channel is then
    rotated into its own block of out_width slots.
    """
    f = np.asarray(filters, dtype=np.float64)
    if f.ndim != 4:
        raise GeometryMismatch("filters must have shape (h, w, c_in, c_out)")
    kh, kw, c_in, c_out = f.shape
    if c_in != image.channels:
        raise GeometryMismatch(f"filters expect {c_in} channels, image has {image.channels}")
    if kh > image.height or kw > image.width:
        raise GeometryMismatch("filter larger than image")
    if stride < 1:
        raise GeometryMismatch("stride must be at least 1")
    for row in image.rows:
        if row.layout.pending_mask:
            raise LayoutMismatch("image rows carry garbage slots")
    out_h = (image.height - kh) // stride + 1
    out_w = (image.width - kw) // stride + 1
    row_span = image.width * image.channels

    # Widened Toeplitz per (filter row j, output channel k), kept as its
    # sparse set of non-zero diagonals.
    diag: dict[tuple[int, int], dict[int, np.ndarray]] = {}
    for j in range(kh):
        for k in range(c_out):
            wide = np.hstack([toeplitz_from_filter(f[j, :, c, k], image.width, stride) for c in range(c_in)])
            diag[j, k] = _nonzero_diagonals(wide)
    steps = sorted({0} | {i for rows in diag.values() for i in rows})

    # Rotations of each used input row are shared by every (j, k) pair.
    used = sorted({i * stride + j for i in range(out_h) for j in range(kh)})
    rotations: dict[int, dict[int, HeVector]] = {}
    for r in used:
        xx = _doubled(backend, image.rows[r], row_span)
        rotations[r] = backend.rotate_batch(xx, steps)

    out_rows: list[HeVector] = []
    for i in range(out_h):
        acc: HeVector | None = None
        for k in range(c_out):
            vectors: list[HeVector] = []
            plains: list[np.ndarray] = []
            for j in range(kh):
                rots = rotations[i * stride + j]
                for d, row in diag[j, k].items():
                    vectors.append(rots[d])
                    plains.append(row)
            if not vectors:  # all-zero filter for this channel
                vectors = [rotations[i * stride][0]]
                plains = [np.zeros(row_span)]
            ck = backend.dot_plain(vectors, plains)
            ck = backend.rotate(ck, -out_w * k)
            acc = ck if acc is None else backend.add(acc, ck)
        out_rows.append(acc)
    return EncImage(rows=out_rows, height=out_h, width=out_w, channels=c_out)


def conv_rotation_steps(
    width: int,
    channels: int,
    kh: int,
    kw: int,
    c_out: int,
    stride: int,
    slot_count: int,
) -> set[int]:
    """Superset of the rotation steps conv2d may use for this geometry.

    Assumes every filter tap could be non-zero, so the set is independent
    of the weights; conv2d itself skips diagonals that happen to vanish.
    """
    row_span = width * channels
    out_w = (width - kw) // stride + 1
    steps = {0, (-row_span) % slot_count}
    for c in range(channels):
        for r in range(out_w):
            for t in range(kw):
                steps.add((c * width + r * stride + t - r) % row_span)
    steps |= {(-out_w * k) % slot_count for k in range(1, c_out)}
    return steps


def pool_ladder(width: int) -> list[tuple[int, int]]:
    """(window exponent, rotation offset) pairs that fold `width` columns.

    Summing the pieces window[t] rotated by the listed offsets yields, at
    each base slot, the sum of `width` consecutive slots.  Shared with the
    rotation-step planner so key generation and execution cannot drift.
    """
    ladder = []
    offset = 0
    remaining = width
    t = max(width.bit_length() - 1, 0)
    for e in range(t, -1, -1):
        size = 1 << e
        if remaining >= size:
            ladder.append((e, offset))
            offset += size
            remaining -= size
    return ladder


def pool_rotation_steps(width: int) -> set[int]:
    """Every rotation step global_avg_pool performs at this width."""
    steps = {1 << e for e in range(max(width.bit_length() - 1, 0))}
    steps |= {offset for _, offset in pool_ladder(width) if offset}
    return steps


def square_activation(backend: HeBackend, image: EncImage) -> EncImage:
    """Slotwise x^2 on every row; one level."""
    return EncImage(
        rows=[backend.square(r) for r in image.rows],
        height=image.height,
        width=image.width,
        channels=image.channels,
    )


def global_avg_pool(backend: HeBackend, image: EncImage) -> HeVector:
    """Spatial sum per channel at each channel block base; zero levels.

    Rows are added, then each channel's columns are folded with a
    logarithmic rotate-and-add ladder.  Only the base slot of each channel
    block is meaningful afterwards; the layout records the remaining slots
    as garbage and defers the 1/(H*W) divisor for the next plaintext
    multiply to absorb.
    """
    for row in image.rows:
        if row.layout.pending_mask:
            raise LayoutMismatch("image rows carry garbage slots")
    acc = image.rows[0]
    for row in image.rows[1:]:
        acc = backend.add(acc, row)

    width = image.width
    # power-of-two windows: windows[e] slot j = sum of 2^e consecutive slots
    windows = [acc]
    for e in range(1, width.bit_length()):
        prev = windows[-1]
        windows.append(backend.add(prev, backend.rotate(prev, 1 << (e - 1))))
    result: HeVector | None = None
    for e, offset in pool_ladder(width):
        piece = windows[e] if offset == 0 else backend.rotate(windows[e], offset)
        result = piece if result is None else backend.add(result, piece)

    scale = acc.layout.pending_scale / (image.height * image.width)
    layout = SlotLayout(
        valid=frozenset(k * width for k in range(image.channels)),
        pending_scale=scale,
        pending_mask=True,
    )
    return result.with_layout(layout)


def dense_rotation_steps(
    n_out: int,
    feature_slots: list[int],
    slot_count: int,
    out_stride: int = 1,
) -> set[int]:
    """Rotation steps dense_with_fold needs for this geometry."""
    return {(col - o * out_stride) % slot_count for col in feature_slots for o in range(n_out)} - {0}


def dense_with_fold(
    backend: HeBackend,
    weights: np.ndarray,
    bias: np.ndarray,
    x: HeVector,
    out_stride: int = 1,
) -> HeVector:
    """Fully connected layer that folds the deferred scale and mask; one level.

    Feature slots are read off the layout.  Each weight is placed on the
    diagonal that routes its feature's slot to its output slot and is
    pre-multiplied by the pending scale; every other plaintext slot is
    zero.  One multiply therefore applies the weights, the deferred
    divisor, and the garbage mask at once.  The diagonals span the whole
    slot ring, so rotation wraparound needs no doubling trick and masked
    inputs are safe.

    Output o lands at slot o * out_stride.  Matching the stride to the
    spacing of the feature slots makes the rotation steps collapse to
    differences of a single arithmetic progression, which keeps the
    rotation key set small.
    """
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64).ravel()
    if w.ndim != 2 or b.size != w.shape[0]:
        raise GeometryMismatch("weights must be (n_out, n_features) with matching bias")
    n_out, n_feat = w.shape
    slots = sorted(x.layout.valid)
    if len(slots) != n_feat:
        raise GeometryMismatch(f"{n_feat} features expected, layout exposes {len(slots)}")
    n = backend.slot_count
    if out_stride < 1 or (n_out - 1) * out_stride >= n:
        raise GeometryMismatch(f"{n_out} outputs at stride {out_stride} exceed {n} slots")

    rows: dict[int, np.ndarray] = {}
    scale = x.layout.pending_scale
    for c, col in enumerate(slots):
        for o in range(n_out):
            if w[o, c] == 0.0:
                continue
            step = (col - o * out_stride) % n
            row = rows.setdefault(step, np.zeros(n))
            row[o * out_stride] = w[o, c] * scale
    if not rows:
        rows[0] = np.zeros(n)
    steps = sorted(rows)
    rots = backend.rotate_batch(x, steps)
    out = backend.dot_plain([rots[s] for s in steps], [rows[s] for s in steps], folds_pending=True)
    out = out.with_layout(replace(out.layout, valid=frozenset(o * out_stride for o in range(n_out))))
    b_full = np.zeros(n)
    b_full[[o * out_stride for o in range(n_out)]] = b
    return backend.add_plain(out, b_full)
