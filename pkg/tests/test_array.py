import numpy as np
import pytest
from hypothesis import given, strategies as st

from bitfusion.array import (ArrayGeometry, ColumnPostUnit, Scratchpad, SystolicArray, column_post,
                             extract_operands, gemm_cycles, systolic_gemm, systolic_matvec)
from bitfusion.fusion import BITWIDTHS, FusionConfig

import oracles


def rand_operands(rng, m, k, n, cfg):
    ri = oracles.value_range(cfg.input_bits, cfg.input_signed)
    rw = oracles.value_range(cfg.weight_bits, cfg.weight_signed)
    return (rng.integers(ri.start, ri.stop, size=(m, k)), rng.integers(rw.start, rw.stop, size=(k, n)))


@given(st.sampled_from(BITWIDTHS), st.sampled_from(BITWIDTHS), st.booleans(), st.booleans(),
       st.integers(1, 3), st.integers(1, 20), st.integers(1, 5), st.integers(1, 3), st.integers(1, 3),
       st.integers(0, 2**31))
def test_fast_path_matches_step_model_and_oracle(ib, wb, isg, wsg, m, k, n, rows, cols, seed):
    cfg = FusionConfig(ib, wb, isg, wsg)
    geom = ArrayGeometry(rows, cols)
    x, w = rand_operands(np.random.default_rng(seed), m, k, n, cfg)
    fast = systolic_gemm(x, w, cfg, geom)
    slow = SystolicArray(geom, cfg).run(x, w)
    assert fast.outputs.tolist() == oracles.gemm(x.tolist(), w.tolist())
    assert np.array_equal(fast.outputs, slow.outputs)
    for key in ("cycles", "waves", "ibuf_reads", "wbuf_reads", "macs", "brick_ops", "overflows"):
        assert getattr(fast, key) == getattr(slow, key), key


def test_cycle_formula():
    geom = ArrayGeometry(4, 4)
    cfg = FusionConfig(4, 4)
    # 4 Fused-PEs per unit -> 16 reduction elements per wave
    assert gemm_cycles(3, 64, 8, cfg, geom) == 4 * 2 * 3 + 7
    assert gemm_cycles(1, 64, 8, FusionConfig(16, 16), geom) == 16 * 2 * 4 + 7


def test_lower_precision_needs_fewer_cycles():
    geom = ArrayGeometry(4, 4)
    base = gemm_cycles(1, 4096, 64, FusionConfig(8, 8), geom)
    assert gemm_cycles(1, 4096, 64, FusionConfig(2, 2), geom) < base
    assert gemm_cycles(1, 4096, 64, FusionConfig(16, 16), geom) > base


def test_weight_reads_scale_with_weight_bits():
    # identical weight count; 2-bit weights pack 4x as many per buffer word
    geom = ArrayGeometry(2, 2)
    rng = np.random.default_rng(1)
    x = rng.integers(-128, 128, size=(1, 128))
    w8 = rng.integers(-128, 128, size=(128, 8))
    w2 = rng.integers(-2, 2, size=(128, 8))
    r8 = systolic_gemm(x, w8, FusionConfig(8, 8), geom)
    r2 = systolic_gemm(x, w2, FusionConfig(8, 2), geom)
    assert r8.wbuf_reads == 4 * r2.wbuf_reads


def test_overflow_counted():
    cfg = FusionConfig(16, 16)
    x = np.full((1, 4), 2**15 - 1)
    w = np.full((4, 1), 2**15 - 1)
    res = systolic_gemm(x, w, cfg, ArrayGeometry(2, 1))
    assert res.outputs[0, 0] == oracles.wrap(4 * (2**15 - 1) ** 2)
    assert res.overflows >= 1


def test_matvec():
    cfg = FusionConfig(8, 4)
    rng = np.random.default_rng(3)
    x = rng.integers(-128, 128, size=10)
    w = rng.integers(-8, 8, size=(10, 3))
    res = systolic_matvec(x, w, cfg, ArrayGeometry(2, 2))
    assert res.outputs.tolist() == oracles.gemm([x.tolist()], w.tolist())[0]


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        systolic_gemm(np.zeros((1, 3)), np.zeros((4, 1)), FusionConfig(8, 8), ArrayGeometry(2, 2))


def test_scratchpad_and_extract():
    sp = Scratchpad("IBUF", 64, 32)
    sp.load_elements([1, -2, 3, -4], 4, 0)
    assert extract_operands(sp, 0, FusionConfig(4, 4), 4) == [1, -2, 3, -4]
    assert sp.reads == 1
    with pytest.raises((IndexError, ValueError)):
        sp.fetch(2)
    with pytest.raises(ValueError):
        extract_operands(sp, 0, FusionConfig(16, 16), 3)


def test_column_post():
    assert column_post(-5, ColumnPostUnit(activation="relu")) == 0
    assert column_post([3, 9, -1], ColumnPostUnit(pooling="max", shift=1, out_bits=4, out_signed=False)) == 4
    assert column_post(1000, ColumnPostUnit(out_bits=8, out_signed=True)) == 127


def test_geometry_validated():
    with pytest.raises(ValueError):
        ArrayGeometry(0, 4)
