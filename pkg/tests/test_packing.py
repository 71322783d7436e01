"""Fixed-point slot packing: quantisation, layout, and carry safety."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hegemony.errors import OverflowDetected, WeightOutOfRange
from hegemony.packing import PackingConfig, pack, plaintext_bits_for, quantize, unpack_sum

CFG = PackingConfig()  # frac_bits=16, slot_bits=48, shift=2**31, max_addends=16


def test_defaults_satisfy_carry_invariant():
    # value_bits(32) + log2(16)=4 + 1 = 37 <= 48.
    assert CFG.value_bits == 32
    assert CFG.slot_bits >= CFG.value_bits + 4 + 1


def test_config_rejects_carry_risk():
    with pytest.raises(ValueError):
        PackingConfig(frac_bits=16, slot_bits=36, shift=1 << 31, max_addends=16)
    with pytest.raises(ValueError):
        PackingConfig(frac_bits=0, slot_bits=48, shift=1 << 31, max_addends=16)


def test_quantize_half_away_from_zero():
    c = PackingConfig(frac_bits=1, slot_bits=48, shift=1 << 31, max_addends=16)
    # one fraction bit: steps of 0.5; 0.25 is an exact tie
    assert quantize(0.25, c) == 1
    assert quantize(-0.25, c) == -1
    assert quantize(0.24, c) == 0
    assert quantize(-0.24, c) == 0
    assert quantize(0.75, c) == 2
    assert quantize(-0.75, c) == -2
    assert quantize(0.0, c) == 0
    assert quantize(1.0, CFG) == 1 << 16
    assert quantize(-1.0, CFG) == -(1 << 16)


def test_plaintext_bits_for_leaves_headroom():
    assert plaintext_bits_for(1 << 512) == 511
    n = (1 << 511) + 12345
    assert plaintext_bits_for(n) == 510


def test_pack_literal_layout():
    bits = 96  # exactly two 48-bit slots per integer
    weights = [1.0, -1.0, 0.5]
    packed = pack(weights, CFG, bits)
    f = 1 << 16
    s = CFG.shift
    assert packed == [
        (s + f) | ((s - f) << 48),
        (s + f // 2),
    ]


def test_pack_empty_and_single():
    assert pack([], CFG, 96) == []
    [one] = pack([0.0], CFG, 96)
    assert one == CFG.shift


def test_pack_rejects_out_of_range_weight():
    # shift=2**31 and frac_bits=16 cap |w| just under 2**15
    with pytest.raises(WeightOutOfRange):
        pack([float(1 << 15)], CFG, 96)
    pack([float((1 << 15) - 1)], CFG, 96)


def test_unpack_sum_is_average():
    bits = 96
    a = [0.5, -0.25, 3.0]
    b = [1.5, 0.25, -1.0]
    summed = [x + y for x, y in zip(pack(a, CFG, bits), pack(b, CFG, bits))]
    got = unpack_sum(summed, 2, 3, CFG, bits)
    want = [(x + y) / 2 for x, y in zip(a, b)]
    assert got == pytest.approx(want, abs=2 ** -16)


def test_unpack_sum_count_guards():
    packed = pack([1.0], CFG, 96)
    with pytest.raises(ValueError):
        unpack_sum(packed, 0, 1, CFG, 96)
    with pytest.raises(OverflowDetected):
        unpack_sum(packed, CFG.max_addends + 1, 1, CFG, 96)
    with pytest.raises(ValueError):
        unpack_sum(packed, 1, 5, CFG, 96)


def test_unpack_sum_detects_impossible_field():
    # a single summand can never reach 2*shift in a slot
    too_big = [2 * CFG.shift]
    with pytest.raises(OverflowDetected):
        unpack_sum(too_big, 1, 1, CFG, 96)


weights_strategy = st.lists(
    st.floats(
        min_value=-1000.0,
        max_value=1000.0,
        allow_nan=False,
        allow_infinity=False,
    ),
    min_size=0,
    max_size=40,
)


@settings(max_examples=150, deadline=None)
@given(weights=weights_strategy)
def test_single_vector_roundtrip_property(weights):
    bits = 480  # ten slots per integer
    packed = pack(weights, CFG, bits)
    got = unpack_sum(packed, 1, len(weights), CFG, bits)
    for w, g in zip(weights, got):
        assert abs(w - g) <= 0.5 * 2 ** -16 + 1e-12


@settings(max_examples=100, deadline=None)
@given(
    vectors=st.lists(
        st.lists(
            st.floats(min_value=-100.0, max_value=100.0, allow_nan=False),
            min_size=7,
            max_size=7,
        ),
        min_size=1,
        max_size=16,
    )
)
def test_slot_isolation_under_addition_property(vectors):
    """Summing packed integers never leaks between adjacent slots."""
    bits = 192  # four slots per integer -> the 7-vector spans two integers
    acc = None
    for vec in vectors:
        p = pack(vec, CFG, bits)
        acc = p if acc is None else [x + y for x, y in zip(acc, p)]
    got = unpack_sum(acc, len(vectors), 7, CFG, bits)
    for k in range(7):
        want = sum(v[k] for v in vectors) / len(vectors)
        assert abs(want - got[k]) <= 0.5 * 2 ** -16 + 1e-9


def test_config_json_round_trip():
    c = PackingConfig(frac_bits=12, slot_bits=40, shift=1 << 27, max_addends=8)
    assert PackingConfig.from_json_obj(c.to_json_obj()) == c
