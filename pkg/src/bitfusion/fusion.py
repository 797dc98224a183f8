"""Composition of BitBricks into Fused-PEs and FusionUnits.

A FusionUnit holds 16 bricks. Operands up to 8 bits are fused spatially: each
operand is cut into 2-bit slices, every slice pair runs on one brick, and the
brick products are shifted by ``2i + 2j`` and summed. 16-bit operands reuse the
8-bit spatial datapath over two or four cycles (hi/lo byte quadrants).
"""

from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np

from .brick import BrickOperand, brick_multiply
from .numeric import check_range, wrap32

BITWIDTHS = (2, 4, 8, 16)
BRICKS_PER_UNIT = 16
SPATIAL_MAX_BITS = 8


@dataclass(frozen=True)
class FusionConfig:
    input_bits: int
    weight_bits: int
    input_signed: bool = True
    weight_signed: bool = True

    def __post_init__(self):
        for name in ("input_bits", "weight_bits"):
            if getattr(self, name) not in BITWIDTHS:
                raise ValueError(f"{name} must be one of {BITWIDTHS}, got {getattr(self, name)}")

    @property
    def footprint(self) -> int:
        """Bricks consumed by one Fused-PE."""
        return (min(self.input_bits, 8) // 2) * (min(self.weight_bits, 8) // 2)

    @property
    def fused_pe_count(self) -> int:
        return BRICKS_PER_UNIT // self.footprint

    @property
    def temporal_cycles(self) -> int:
        return (max(self.input_bits, 8) // 8) * (max(self.weight_bits, 8) // 8)

    @property
    def is_temporal(self) -> bool:
        return self.temporal_cycles > 1

    @property
    def brick_ops_per_mac(self) -> int:
        return (self.input_bits // 2) * (self.weight_bits // 2)

    @property
    def shift_levels(self) -> int:
        """Levels of the shift-add tree a spatial product passes through."""
        widest = min(max(self.input_bits, self.weight_bits), 8)
        return {2: 0, 4: 1, 8: 2}[widest]

    @property
    def macs_per_cycle(self) -> float:
        return self.fused_pe_count / self.temporal_cycles

    def __str__(self):
        return f"{self.input_bits}x{self.weight_bits}"


@dataclass(frozen=True)
class SliceVector:
    slices: tuple[BrickOperand, ...]
    source_bits: int
    source_signed: bool

    def recompose(self) -> int:
        return sum(s.value << (2 * i) for i, s in enumerate(self.slices))


@dataclass(frozen=True)
class ShiftTable:
    # shifts[i][j]: input slice i, weight slice j
    shifts: tuple[tuple[int, ...], ...]

    @property
    def flat(self) -> list[int]:
        return [s for row in self.shifts for s in row]

    def transpose(self) -> "ShiftTable":
        return ShiftTable(tuple(zip(*self.shifts)))


def decompose(value: int, bits: int, signed: bool) -> SliceVector:
    """Radix-4 slicing; only the top slice carries the sign flag."""
    if bits not in BITWIDTHS:
        raise ValueError(f"bitwidth must be one of {BITWIDTHS}, got {bits}")
    check_range(value, bits, signed)
    n = bits // 2
    raw = value & ((1 << bits) - 1)
    slices = tuple(
        BrickOperand((raw >> (2 * i)) & 0b11, signed and i == n - 1) for i in range(n)
    )
    return SliceVector(slices, bits, signed)


def shift_table(config: FusionConfig) -> ShiftTable:
    ni = min(config.input_bits, SPATIAL_MAX_BITS) // 2
    nj = min(config.weight_bits, SPATIAL_MAX_BITS) // 2
    return ShiftTable(tuple(tuple(2 * i + 2 * j for j in range(nj)) for i in range(ni)))


def _spatial_multiply(x: int, xbits: int, xsigned: bool, w: int, wbits: int, wsigned: bool) -> int:
    xs = decompose(x, xbits, xsigned).slices
    ws = decompose(w, wbits, wsigned).slices
    table = ShiftTable(tuple(tuple(2 * i + 2 * j for j in range(len(ws))) for i in range(len(xs))))
    total = 0
    for i, j in product(range(len(xs)), range(len(ws))):
        total += brick_multiply(xs[i], ws[j]).value * (1 << table.shifts[i][j])
    return total


def fused_pe_multiply(x: int, w: int, config: FusionConfig) -> int:
    if config.input_bits > SPATIAL_MAX_BITS or config.weight_bits > SPATIAL_MAX_BITS:
        raise ValueError(f"config {config} needs temporal_multiply")
    check_range(x, config.input_bits, config.input_signed, "input")
    check_range(w, config.weight_bits, config.weight_signed, "weight")
    p = _spatial_multiply(x, config.input_bits, config.input_signed,
                          w, config.weight_bits, config.weight_signed)
    assert p == x * w
    return p


# 16-bit operands split into bytes; the hi byte keeps the sign
def _halves(v: int, bits: int, signed: bool) -> list[tuple[int, int, bool, int]]:
    """(value, bits, signed, shift) parts of an operand for the temporal path."""
    if bits <= SPATIAL_MAX_BITS:
        return [(v, bits, signed, 0)]
    lo = v & 0xFF
    hi = v >> 8
    return [(lo, 8, False, 0), (hi, 8, signed, 8)]


def temporal_multiply(x: int, w: int, config: FusionConfig) -> tuple[int, int]:
    """Multiply with a 16-bit operand over several cycles. Returns (product, cycles).

    Quadrant order is (lo,lo), (hi,lo), (lo,hi), (hi,hi).
    """
    if max(config.input_bits, config.weight_bits) != 16:
        raise ValueError(f"config {config} has no 16-bit operand")
    check_range(x, config.input_bits, config.input_signed, "input")
    check_range(w, config.weight_bits, config.weight_signed, "weight")
    acc = 0
    cycles = 0
    for wv, wb, ws, wsh in _halves(w, config.weight_bits, config.weight_signed):
        for xv, xb, xs, xsh in _halves(x, config.input_bits, config.input_signed):
            acc += _spatial_multiply(xv, xb, xs, wv, wb, ws) << (xsh + wsh)
            cycles += 1
    assert cycles == config.temporal_cycles
    return wrap32(acc), cycles


def multiply(x: int, w: int, config: FusionConfig) -> int:
    if config.is_temporal:
        return temporal_multiply(x, w, config)[0]
    return fused_pe_multiply(x, w, config)


def fusion_unit_cycle(inputs, weights, psum_in: int, config: FusionConfig) -> int:
    """One FusionUnit step: psum_in plus the sum of its Fused-PE products, 32-bit wrapped.

    Fewer operand pairs than Fused-PEs leaves the remaining Fused-PEs idle.
    """
    n = config.fused_pe_count
    if len(inputs) != len(weights) or len(inputs) > n:
        raise ValueError(
            f"config {config} has {n} Fused-PEs, got {len(inputs)} inputs and {len(weights)} weights"
        )
    total = psum_in
    for x, w in zip(inputs, weights):
        total += multiply(int(x), int(w), config)
    return wrap32(total)


# -- vectorized datapath -----------------------------------------------------

def _brick_lut() -> np.ndarray:
    # lut[xs, ys, xbits, ybits] built from brick_multiply so the vector path shares it
    lut = np.zeros((2, 2, 4, 4), dtype=np.int64)
    for xs, ys, xb, yb in product((0, 1), (0, 1), range(4), range(4)):
        lut[xs, ys, xb, yb] = brick_multiply(BrickOperand(xb, bool(xs)), BrickOperand(yb, bool(ys))).value
    return lut


_LUT = _brick_lut()


def _slice_array(v: np.ndarray, bits: int, signed: bool):
    raw = v.astype(np.int64) & ((1 << bits) - 1)
    n = bits // 2
    return [((raw >> (2 * i)) & 3, int(signed and i == n - 1)) for i in range(n)]


def _spatial_array(x, xbits, xsigned, w, wbits, wsigned):
    total = np.zeros(np.broadcast_shapes(x.shape, w.shape), dtype=np.int64)
    for i, (xsl, xsg) in enumerate(_slice_array(x, xbits, xsigned)):
        for j, (wsl, wsg) in enumerate(_slice_array(w, wbits, wsigned)):
            total += _LUT[xsg, wsg, xsl, wsl] << (2 * i + 2 * j)
    return total


def _halves_array(v, bits, signed):
    if bits <= SPATIAL_MAX_BITS:
        return [(v, bits, signed, 0)]
    return [(v & 0xFF, 8, False, 0), (v >> 8, 8, signed, 8)]


def multiply_array(x, w, config: FusionConfig) -> np.ndarray:
    """Elementwise (broadcasting) products through the brick datapath."""
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    check_range(x, config.input_bits, config.input_signed, "input")
    check_range(w, config.weight_bits, config.weight_signed, "weight")
    total = None
    for wv, wb, ws, wsh in _halves_array(w, config.weight_bits, config.weight_signed):
        for xv, xb, xs, xsh in _halves_array(x, config.input_bits, config.input_signed):
            part = _spatial_array(xv, xb, xs, wv, wb, ws) << (xsh + wsh)
            total = part if total is None else total + part
    return total
