"""Encrypted linear-algebra kernels against explicit-loop cleartext oracles.

Test data is integer-valued so float64 arithmetic is exact and bitwise
comparison is meaningful regardless of summation order.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hegemony.errors import GeometryMismatch, LayoutMismatch
from hegemony.enc_tensor import (
    EncImage,
    conv2d,
    conv_rotation_steps,
    dense_rotation_steps,
    dense_with_fold,
    diagonalize,
    global_avg_pool,
    matvec,
    pool_ladder,
    pool_rotation_steps,
    square_activation,
    toeplitz_from_filter,
)
from hegemony.he_backend import HeBackend, SimParams, SimulatorContext


def _ints(rng, *shape):
    return rng.integers(-8, 9, size=shape).astype(np.float64)


def _encode_rows(ctx, img):
    """img is (h, w, c); slot for pixel (x, c) of a row is c*w + x."""
    return EncImage(
        rows=[ctx.encrypt_vec(img[i].T.ravel()) for i in range(img.shape[0])],
        height=img.shape[0],
        width=img.shape[1],
        channels=img.shape[2],
    )


def _conv_oracle(img, filters, stride):
    kh, kw, c_in, c_out = filters.shape
    h, w, _ = img.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros((oh, ow, c_out))
    for i in range(oh):
        for j in range(ow):
            for k in range(c_out):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        for c in range(c_in):
                            acc += img[i * stride + a, j * stride + b, c] * filters[a, b, c, k]
                out[i, j, k] = acc
    return out


# -- diagonalize / matvec ---------------------------------------------------


def test_diagonalize_definition():
    a = np.arange(1, 10, dtype=np.float64).reshape(3, 3)
    d = diagonalize(a)
    for i in range(3):
        for j in range(3):
            assert d[i, j] == a[j, (j + i) % 3]


def test_diagonalize_pads_rectangular():
    a = np.arange(6, dtype=np.float64).reshape(2, 3)
    d = diagonalize(a)
    assert d.shape == (3, 3)
    padded = np.zeros((3, 3))
    padded[:2] = a
    for i in range(3):
        for j in range(3):
            assert d[i, j] == padded[j, (j + i) % 3]
    with pytest.raises(GeometryMismatch):
        diagonalize(np.arange(3.0))


def test_matvec_matches_oracle_bitwise():
    rng = np.random.default_rng(0)
    ctx = SimulatorContext(SimParams(slot_count=64, budget=3))
    for n in (1, 3, 8, 17):
        a = _ints(rng, n, n)
        x = _ints(rng, n)
        out = matvec(ctx, diagonalize(a), ctx.encrypt_vec(x))
        got = ctx.decrypt_vec(out, ctx.secret)[:n]
        assert np.array_equal(got, a @ x)
        assert out.level == 2


def test_matvec_rectangular_and_sparse():
    rng = np.random.default_rng(1)
    ctx = SimulatorContext(SimParams(slot_count=64, budget=3))
    a = np.zeros((4, 9))
    a[1, 3] = 2.0
    a[3, 3] = -1.0
    x = _ints(rng, 9)
    out = matvec(ctx, diagonalize(a), ctx.encrypt_vec(x))
    got = ctx.decrypt_vec(out, ctx.secret)[:4]
    assert np.array_equal(got, np.zeros((4, 9)) @ x + a @ x)


def test_matvec_validation():
    ctx = SimulatorContext(SimParams(slot_count=16, budget=3))
    x = ctx.encrypt_vec([1.0, 2.0])
    with pytest.raises(GeometryMismatch):
        matvec(ctx, np.zeros((2, 3)), x)  # not a diagonalize() output
    from dataclasses import replace

    masked = x.with_layout(replace(x.layout, pending_mask=True))
    with pytest.raises(LayoutMismatch):
        matvec(ctx, diagonalize(np.eye(2)), masked)
    # 2*size must fit the ring
    wide = ctx.encrypt_vec(np.ones(9))
    with pytest.raises(GeometryMismatch):
        matvec(ctx, diagonalize(np.eye(9)), wide)


def test_matvec_requires_leading_slots():
    ctx = SimulatorContext(SimParams(slot_count=16, budget=3))
    x = ctx.rotate(ctx.encrypt_vec([1.0, 2.0]), -4)  # valid slots {4, 5}
    with pytest.raises(GeometryMismatch):
        matvec(ctx, diagonalize(np.eye(2)), x)


# -- toeplitz ---------------------------------------------------------------


def test_toeplitz_literal():
    t = toeplitz_from_filter(np.array([1.0, 2.0, 3.0]), in_width=5, stride=1)
    want = np.array(
        [
            [1, 2, 3, 0, 0],
            [0, 1, 2, 3, 0],
            [0, 0, 1, 2, 3],
        ],
        dtype=np.float64,
    )
    assert np.array_equal(t, want)


def test_toeplitz_stride_and_offset():
    t = toeplitz_from_filter(np.array([1.0, 2.0, 3.0]), in_width=5, stride=2)
    want = np.array([[1, 2, 3, 0, 0], [0, 0, 1, 2, 3]], dtype=np.float64)
    assert np.array_equal(t, want)
    t2 = toeplitz_from_filter(np.array([4.0]), in_width=3, stride=1, out_channel_offset=2)
    assert t2.shape == (5, 3)
    assert not t2[:2].any()
    assert np.array_equal(t2[2:], 4.0 * np.eye(3))


def test_toeplitz_validation():
    with pytest.raises(GeometryMismatch):
        toeplitz_from_filter(np.zeros(0), in_width=4, stride=1)
    with pytest.raises(GeometryMismatch):
        toeplitz_from_filter(np.ones(5), in_width=4, stride=1)
    with pytest.raises(GeometryMismatch):
        toeplitz_from_filter(np.ones(2), in_width=4, stride=0)


# -- conv2d -----------------------------------------------------------------


@pytest.mark.parametrize(
    "h,w,c_in,c_out,kh,kw,stride",
    [
        (5, 5, 1, 1, 3, 3, 1),
        (6, 6, 1, 2, 3, 3, 2),
        (6, 7, 2, 3, 2, 3, 1),
        (8, 8, 3, 2, 3, 3, 2),
        (4, 4, 1, 1, 1, 1, 1),
    ],
)
def test_conv2d_matches_oracle_bitwise(h, w, c_in, c_out, kh, kw, stride):
    rng = np.random.default_rng(hash((h, w, c_in, c_out, kh, kw, stride)) % 2**32)
    ctx = SimulatorContext(SimParams(slot_count=64, budget=4))
    img = _ints(rng, h, w, c_in)
    filters = _ints(rng, kh, kw, c_in, c_out)
    out = conv2d(ctx, filters, stride, _encode_rows(ctx, img))
    want = _conv_oracle(img, filters, stride)
    assert (out.height, out.width, out.channels) == want.shape
    for i in range(out.height):
        raw = ctx.decrypt_vec(out.rows[i], ctx.secret)
        for k in range(out.channels):
            got = raw[k * out.width : (k + 1) * out.width]
            assert np.array_equal(got, want[i, :, k]), (i, k)
        # each channel block is contiguous in the valid set
        assert out.rows[i].layout.valid == frozenset(
            range(0, out.channels * out.width)
        ) or out.rows[i].layout.valid <= frozenset(range(out.channels * out.width))


def test_conv2d_costs_one_level():
    rng = np.random.default_rng(7)
    ctx = SimulatorContext(SimParams(slot_count=64, budget=4))
    img = _ints(rng, 5, 5, 1)
    out = conv2d(ctx, _ints(rng, 3, 3, 1, 2), 1, _encode_rows(ctx, img))
    assert all(r.level == 3 for r in out.rows)


def test_conv2d_validation():
    ctx = SimulatorContext(SimParams(slot_count=64, budget=4))
    rng = np.random.default_rng(8)
    img = _encode_rows(ctx, _ints(rng, 5, 5, 2))
    with pytest.raises(GeometryMismatch):
        conv2d(ctx, _ints(rng, 3, 3, 1, 1), 1, img)  # channel mismatch
    with pytest.raises(GeometryMismatch):
        conv2d(ctx, _ints(rng, 6, 3, 2, 1), 1, img)  # taller than image
    with pytest.raises(GeometryMismatch):
        conv2d(ctx, _ints(rng, 3, 3, 2, 1), 0, img)
    with pytest.raises(GeometryMismatch):
        conv2d(ctx, np.zeros((3, 3)), 1, img)


def test_conv2d_rejects_masked_rows():
    ctx = SimulatorContext(SimParams(slot_count=64, budget=4))
    rng = np.random.default_rng(9)
    img = _encode_rows(ctx, _ints(rng, 4, 4, 1))
    from dataclasses import replace

    img.rows[0] = img.rows[0].with_layout(replace(img.rows[0].layout, pending_mask=True))
    with pytest.raises(LayoutMismatch):
        conv2d(ctx, _ints(rng, 3, 3, 1, 1), 1, img)


def test_all_zero_filter_channel():
    ctx = SimulatorContext(SimParams(slot_count=64, budget=4))
    rng = np.random.default_rng(10)
    img = _ints(rng, 4, 4, 1)
    filters = np.zeros((3, 3, 1, 2))
    filters[..., 1] = _ints(rng, 3, 3, 1)
    out = conv2d(ctx, filters, 1, _encode_rows(ctx, img))
    want = _conv_oracle(img, filters, 1)
    raw = ctx.decrypt_vec(out.rows[0], ctx.secret)
    assert not raw[: out.width].any()
    assert np.array_equal(raw[out.width : 2 * out.width], want[0, :, 1])


# -- pooling ----------------------------------------------------------------


def test_square_activation():
    ctx = SimulatorContext(SimParams(slot_count=64, budget=4))
    rng = np.random.default_rng(11)
    img = _ints(rng, 3, 4, 2)
    out = square_activation(ctx, _encode_rows(ctx, img))
    for i in range(3):
        raw = ctx.decrypt_vec(out.rows[i], ctx.secret)
        assert np.array_equal(raw[:8], (img[i].T.ravel()) ** 2)
        assert out.rows[i].level == 3


def test_global_avg_pool_sums_and_defers():
    ctx = SimulatorContext(SimParams(slot_count=64, budget=4))
    rng = np.random.default_rng(12)
    h, w, c = 3, 5, 2
    img = _ints(rng, h, w, c)
    pooled = global_avg_pool(ctx, _encode_rows(ctx, img))
    assert pooled.layout.valid == frozenset({0, w})
    assert pooled.layout.pending_mask
    assert pooled.layout.pending_scale == 1.0 / (h * w)
    raw = ctx.decrypt_vec(pooled, ctx.secret)
    for k in range(c):
        assert raw[k * w] == img[..., k].sum()
        # deferred divisor turns the sum into the average
        assert raw[k * w] * pooled.layout.pending_scale == pytest.approx(img[..., k].mean())
    assert pooled.level == 4  # additions and rotations are free


@settings(max_examples=100, deadline=None)
@given(width=st.integers(min_value=1, max_value=64))
def test_pool_ladder_partitions_width(width):
    covered = []
    for e, offset in pool_ladder(width):
        covered.extend(range(offset, offset + (1 << e)))
    assert covered == list(range(width))


@settings(max_examples=60, deadline=None)
@given(width=st.integers(min_value=1, max_value=40))
def test_pool_steps_cover_execution(width):
    doubling = {1 << e for e in range(max(width.bit_length() - 1, 0))}
    offsets = {offset for _, offset in pool_ladder(width) if offset}
    assert doubling | offsets <= pool_rotation_steps(width)


# -- dense ------------------------------------------------------------------


def test_dense_with_fold_matches_oracle():
    ctx = SimulatorContext(SimParams(slot_count=64, budget=4))
    rng = np.random.default_rng(13)
    h, w, c = 2, 4, 3
    img = _ints(rng, h, w, c)
    pooled = global_avg_pool(ctx, _encode_rows(ctx, img))
    weights = _ints(rng, 5, c)
    bias = _ints(rng, 5)
    out = dense_with_fold(ctx, weights, bias, pooled)
    feats = np.array([img[..., k].sum() for k in range(c)]) * (1.0 / (h * w))
    want = weights @ feats + bias
    raw = ctx.decrypt_vec(out, ctx.secret)
    assert np.array_equal(raw[:5], want)
    assert out.layout.valid == frozenset(range(5))
    assert out.layout.pending_scale == 1.0
    assert not out.layout.pending_mask


def test_dense_out_stride_placement():
    ctx = SimulatorContext(SimParams(slot_count=64, budget=4))
    rng = np.random.default_rng(14)
    img = _ints(rng, 2, 4, 2)
    pooled = global_avg_pool(ctx, _encode_rows(ctx, img))
    weights = _ints(rng, 3, 2)
    bias = _ints(rng, 3)
    out = dense_with_fold(ctx, weights, bias, pooled, out_stride=4)
    assert out.layout.valid == frozenset({0, 4, 8})
    feats = np.array([img[..., k].sum() for k in range(2)]) * (1.0 / 8)
    want = weights @ feats + bias
    raw = ctx.decrypt_vec(out, ctx.secret)
    for o in range(3):
        assert raw[o * 4] == want[o]


def test_dense_masks_garbage():
    """Slots outside the feature set must not leak into the outputs."""
    ctx = SimulatorContext(SimParams(slot_count=16, budget=4))
    img = np.arange(8, dtype=np.float64).reshape(2, 4, 1)
    pooled = global_avg_pool(ctx, _encode_rows(ctx, img))
    # garbage is real here: the ladder leaves partial sums in slots 1..3
    raw = ctx.decrypt_vec(pooled, ctx.secret)
    assert raw[1:4].any()
    out = dense_with_fold(ctx, np.array([[1.0]]), np.zeros(1), pooled)
    got = ctx.decrypt_vec(out, ctx.secret)
    assert got[0] == pytest.approx(img.mean())
    assert not got[1:].any()


def test_dense_validation():
    ctx = SimulatorContext(SimParams(slot_count=16, budget=4))
    rng = np.random.default_rng(15)
    img = _ints(rng, 2, 4, 2)
    pooled = global_avg_pool(ctx, _encode_rows(ctx, img))
    with pytest.raises(GeometryMismatch):
        dense_with_fold(ctx, np.ones((3, 5)), np.zeros(3), pooled)  # 5 != 2 features
    with pytest.raises(GeometryMismatch):
        dense_with_fold(ctx, np.ones((3, 2)), np.zeros(2), pooled)  # bias mismatch
    with pytest.raises(GeometryMismatch):
        dense_with_fold(ctx, np.ones((3, 2)), np.zeros(3), pooled, out_stride=8)


def test_dense_zero_weight_matrix():
    ctx = SimulatorContext(SimParams(slot_count=16, budget=4))
    img = np.ones((2, 4, 1))
    pooled = global_avg_pool(ctx, _encode_rows(ctx, img))
    out = dense_with_fold(ctx, np.zeros((2, 1)), np.array([5.0, -1.0]), pooled)
    raw = ctx.decrypt_vec(out, ctx.secret)
    assert raw[0] == 5.0 and raw[1] == -1.0


# -- rotation-step planners -------------------------------------------------


class RecordingContext(SimulatorContext):
    """Simulator that records every non-trivial rotation step it performs."""

    def __init__(self, params):
        super().__init__(params)
        self.steps: set[int] = set()

    def _rotate(self, a, k):
        self.steps.add(k % self.slot_count)
        return super()._rotate(a, k)

    def _rotate_many(self, a, steps):
        self.steps.update(k % self.slot_count for k in steps)
        return super()._rotate_many(a, steps)


@pytest.mark.parametrize(
    "h,w,c_in,c_out,kh,kw,stride",
    [(6, 6, 1, 2, 3, 3, 2), (6, 7, 2, 3, 2, 3, 1), (5, 5, 1, 1, 3, 3, 1)],
)
def test_conv_planner_covers_execution(h, w, c_in, c_out, kh, kw, stride):
    rng = np.random.default_rng(16)
    ctx = RecordingContext(SimParams(slot_count=64, budget=4))
    img = _ints(rng, h, w, c_in)
    conv2d(ctx, _ints(rng, kh, kw, c_in, c_out), stride, _encode_rows(ctx, img))
    planned = {
        k % 64 for k in conv_rotation_steps(w, c_in, kh, kw, c_out, stride, 64)
    }
    assert ctx.steps <= planned | {0}


def test_pool_planner_covers_execution():
    for w in (1, 2, 3, 5, 6, 7, 8):
        ctx = RecordingContext(SimParams(slot_count=64, budget=4))
        img = np.ones((2, w, 2))
        global_avg_pool(ctx, _encode_rows(ctx, img))
        assert ctx.steps <= pool_rotation_steps(w) | {0}


def test_dense_planner_covers_execution():
    rng = np.random.default_rng(17)
    ctx = RecordingContext(SimParams(slot_count=64, budget=4))
    img = _ints(rng, 2, 4, 3)
    pooled = global_avg_pool(ctx, _encode_rows(ctx, img))
    before = set(ctx.steps)
    dense_with_fold(ctx, _ints(rng, 5, 3), _ints(rng, 5), pooled, out_stride=4)
    used = ctx.steps - before
    planned = dense_rotation_steps(5, [0, 4, 8], 64, out_stride=4)
    assert used <= planned | {0}


def test_dense_steps_collapse_when_stride_matches():
    # feature slots 0, w, 2w with out_stride w give steps in one progression
    steps = dense_rotation_steps(10, [0, 6, 12], 4096, out_stride=6)
    assert steps == {k * 6 % 4096 for k in range(-9, 3)} - {0}
