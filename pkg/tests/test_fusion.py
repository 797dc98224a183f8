from itertools import product

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bitfusion.fusion import (BITWIDTHS, FusionConfig, decompose, fused_pe_multiply, fusion_unit_cycle,
                              multiply, multiply_array, shift_table, temporal_multiply)

from oracles import value_range, wrap

SMALL = [2, 4, 8]


@pytest.mark.parametrize("ib,wb", list(product(SMALL, repeat=2)))
@pytest.mark.parametrize("isg,wsg", list(product([False, True], repeat=2)))
def test_exhaustive_spatial(ib, wb, isg, wsg):
    cfg = FusionConfig(ib, wb, isg, wsg)
    xs = np.array(value_range(ib, isg))
    ws = np.array(value_range(wb, wsg))
    got = multiply_array(xs[:, None], ws[None, :], cfg)
    assert np.array_equal(got, xs[:, None] * ws[None, :])
    # scalar brick-by-brick path on a subsample
    for x in xs[:: max(1, len(xs) // 16)]:
        for w in ws[:: max(1, len(ws) // 16)]:
            assert fused_pe_multiply(int(x), int(w), cfg) == int(x) * int(w)


# [PAPER] Fused-PEs per unit: 16 at 2x2, 8 at 4x2, 4 at 4x4, 2 at 8x4, 1 at 8x8
@pytest.mark.parametrize("ib,wb,fpe", [(2, 2, 16), (2, 4, 8), (4, 2, 8), (4, 4, 4), (8, 2, 4),
                                      (2, 8, 4), (8, 4, 2), (4, 8, 2), (8, 8, 1)])
def test_fused_pe_count(ib, wb, fpe):
    assert FusionConfig(ib, wb).fused_pe_count == fpe


def test_temporal_cycles():
    assert FusionConfig(8, 8).temporal_cycles == 1
    assert FusionConfig(16, 8).temporal_cycles == 2
    assert FusionConfig(8, 16).temporal_cycles == 2
    assert FusionConfig(16, 16).temporal_cycles == 4
    assert FusionConfig(16, 16).fused_pe_count == 1


def test_worked_example_4x4():
    # [PAPER] 11 x 6 = 66 from 2-bit slices (2,3) x (1,2) shifted by 0, 2, 2, 4
    cfg = FusionConfig(4, 4, False, False)
    assert shift_table(cfg).shifts == ((0, 2), (2, 4))
    xs = [s.value for s in decompose(11, 4, False).slices]
    ws = [s.value for s in decompose(6, 4, False).slices]
    assert xs == [3, 2] and ws == [2, 1]
    terms = [xs[i] * ws[j] << (2 * i + 2 * j) for i in range(2) for j in range(2)]
    assert terms == [6, 3 << 2, 4 << 2, 2 << 4]
    assert sum(terms) == 66 == fused_pe_multiply(11, 6, cfg)


def test_worked_example_mixed():
    # [PAPER] an 8-bit by 2-bit product decomposes into four brick products
    cfg = FusionConfig(8, 2, False, False)
    assert shift_table(cfg).shifts == ((0,), (2,), (4,), (6,))
    assert fused_pe_multiply(173, 3, cfg) == 519


def test_sign_only_on_top_slice():
    sv = decompose(-77, 8, True)
    assert [s.signed for s in sv.slices] == [False, False, False, True]
    assert sv.recompose() == -77


@given(st.sampled_from(BITWIDTHS), st.booleans(), st.data())
def test_decompose_roundtrip(bits, signed, data):
    r = value_range(bits, signed)
    v = data.draw(st.integers(r.start, r.stop - 1))
    assert decompose(v, bits, signed).recompose() == v


@given(st.sampled_from(BITWIDTHS), st.sampled_from(BITWIDTHS), st.booleans(), st.booleans(), st.data())
def test_multiply_matches_python(ib, wb, isg, wsg, data):
    cfg = FusionConfig(ib, wb, isg, wsg)
    ri, rw = value_range(ib, isg), value_range(wb, wsg)
    x = data.draw(st.integers(ri.start, ri.stop - 1))
    w = data.draw(st.integers(rw.start, rw.stop - 1))
    assert multiply(x, w, cfg) == wrap(x * w)
    assert int(multiply_array(x, w, cfg)) == x * w


@pytest.mark.parametrize("ib,wb", [(16, 8), (8, 16), (16, 16), (16, 2), (2, 16)])
def test_temporal_corners(ib, wb):
    cfg = FusionConfig(ib, wb, True, True)
    for x in (value_range(ib, True).start, -1, 0, 1, value_range(ib, True).stop - 1):
        for w in (value_range(wb, True).start, -1, 0, 1, value_range(wb, True).stop - 1):
            p, cycles = temporal_multiply(x, w, cfg)
            assert p == wrap(x * w)
            assert cycles == cfg.temporal_cycles


def test_fusion_unit_accumulates_and_wraps():
    cfg = FusionConfig(4, 4)
    xs, ws = [1, -2, 3, 7], [-8, 5, 2, 7]
    assert fusion_unit_cycle(xs, ws, 10, cfg) == 10 + sum(a * b for a, b in zip(xs, ws))
    assert fusion_unit_cycle([7], [7], 2**31 - 1, cfg) == wrap(2**31 - 1 + 49)
    # idle Fused-PEs contribute nothing
    assert fusion_unit_cycle([], [], 5, cfg) == 5


def test_fusion_unit_rejects_too_many_pairs():
    with pytest.raises(ValueError):
        fusion_unit_cycle([1] * 5, [1] * 5, 0, FusionConfig(4, 4))


def test_invalid_configs():
    with pytest.raises(ValueError):
        FusionConfig(3, 8)
    with pytest.raises(ValueError):
        FusionConfig(8, 32)
    with pytest.raises(ValueError):
        fused_pe_multiply(1, 1, FusionConfig(16, 8))
    with pytest.raises(ValueError):
        temporal_multiply(1, 1, FusionConfig(8, 8))


def test_operand_range_checked():
    with pytest.raises(ValueError):
        multiply(8, 1, FusionConfig(4, 4, True, True))
    with pytest.raises(ValueError):
        multiply_array(np.array([-1]), np.array([1]), FusionConfig(4, 4, False, True))
