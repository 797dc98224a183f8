"""Systolic array of FusionUnits with border IBUFs, per-unit WBUFs and column post units.

Mapping used throughout: unit (r, c) holds ``fused_pe_count`` Fused-PEs, so one
wave of the array reduces ``rows * fused_pe_count`` input elements into ``cols``
partial sums. Inputs are shared along a row, psums flow down the columns, and
each column's accumulator folds successive K-tiles together.

Waves are issued K-tile outer, N-tile middle, streamed vectors inner. Operand
chunks are staged in each row IBUF (and unit WBUF) in that consumption order,
packed little-endian, and fetched through the buffer's row register.
"""

from dataclasses import dataclass, field, fields
import math

import numpy as np

from .fusion import BRICKS_PER_UNIT, FusionConfig, fusion_unit_cycle, multiply_array
from .numeric import INT32_MAX, INT32_MIN, check_range, saturate, wrap32

BUFFER_KINDS = ("IBUF", "WBUF", "OBUF")


@dataclass(frozen=True)
class ArrayGeometry:
    rows: int = 32
    cols: int = 16
    bricks_per_unit: int = BRICKS_PER_UNIT
    buffer_access_bits: int = 32

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array needs at least one row and one column")
        if self.bricks_per_unit != BRICKS_PER_UNIT:
            raise ValueError("FusionUnits hold exactly 16 BitBricks")
        if self.buffer_access_bits % 16 or self.buffer_access_bits < 16:
            raise ValueError("buffer_access_bits must be a positive multiple of 16")

    @property
    def units(self) -> int:
        return self.rows * self.cols

    @property
    def fill_cycles(self) -> int:
        return self.rows + self.cols - 1


class Scratchpad:
    """Bit-addressed SRAM whose data array is read one access-width word at a time.

    Every operand extraction goes through ``row_register``; only a register miss
    touches the data array.
    """

    def __init__(self, kind: str, capacity_bits: int, access_bits: int = 32):
        if kind not in BUFFER_KINDS:
            raise ValueError(f"unknown scratchpad kind {kind!r}")
        if capacity_bits % access_bits:
            raise ValueError("capacity must be a whole number of access words")
        self.kind = kind
        self.capacity_bits = capacity_bits
        self.access_bits = access_bits
        self.words = [0] * (capacity_bits // access_bits)
        self.row_register: tuple[int, int] | None = None  # (word address, value)
        self.reads = 0
        self.writes = 0

    def write_word(self, addr: int, value: int):
        self._check(addr)
        self.words[addr] = value & ((1 << self.access_bits) - 1)
        self.writes += 1
        if self.row_register is not None and self.row_register[0] == addr:
            self.row_register = None

    def load_elements(self, values, bits: int, start_bit: int = 0):
        """Pack ``values`` little-endian starting at ``start_bit`` (setup, uncounted)."""
        for i, v in enumerate(values):
            bit = start_bit + i * bits
            addr, off = divmod(bit, self.access_bits)
            self._check(addr)
            mask = ((1 << bits) - 1) << off
            self.words[addr] = (self.words[addr] & ~mask) | ((int(v) & ((1 << bits) - 1)) << off)
        self.row_register = None

    def fetch(self, addr: int) -> int:
        self._check(addr)
        if self.row_register is None or self.row_register[0] != addr:
            self.row_register = (addr, self.words[addr])
            self.reads += 1
        return self.row_register[1]

    def _check(self, addr: int):
        if not 0 <= addr < len(self.words):
            raise IndexError(f"{self.kind} address {addr} outside {len(self.words)} words")


def _to_signed(raw: int, bits: int, signed: bool) -> int:
    if signed and raw & (1 << (bits - 1)):
        return raw - (1 << bits)
    return raw


def extract_operands(sp: Scratchpad, addr: int, config: FusionConfig, count: int,
                     role: str = "input", offset: int = 0) -> list[int]:
    """Slice ``count`` operands from the word at ``addr`` via the row register."""
    bits = config.input_bits if role == "input" else config.weight_bits
    signed = config.input_signed if role == "input" else config.weight_signed
    if offset + count * bits > sp.access_bits:
        raise ValueError(f"{count} x {bits}-bit operands exceed one {sp.access_bits}-bit access")
    word = sp.fetch(addr)
    mask = (1 << bits) - 1
    return [_to_signed((word >> (offset + i * bits)) & mask, bits, signed) for i in range(count)]


@dataclass
class ColumnPostUnit:
    accumulator: int = 0
    pooling: str = "none"
    activation: str = "none"
    shift: int = 0
    out_bits: int = 32
    out_signed: bool = True


def column_post(psum, unit: ColumnPostUnit) -> int:
    """Pool (max), then activation, then shift-and-saturate requantization."""
    if unit.pooling == "max":
        v = max(int(p) for p in psum)
    else:
        v = int(psum)
    if unit.activation == "relu":
        v = max(v, 0)
    return int(requantize(v, unit.shift, unit.out_bits, unit.out_signed))


def requantize(v, shift: int, out_bits: int, out_signed: bool):
    if out_bits == 32 and out_signed and shift == 0:
        return wrap32(v)
    return saturate(np.asarray(v, dtype=np.int64) >> shift, out_bits, out_signed)


def column_post_array(psums: np.ndarray, activation: str = "none", shift: int = 0,
                      out_bits: int = 32, out_signed: bool = True) -> np.ndarray:
    v = np.asarray(psums, dtype=np.int64)
    if activation == "relu":
        v = np.maximum(v, 0)
    return np.asarray(requantize(v, shift, out_bits, out_signed), dtype=np.int64)


@dataclass
class FusionUnitState:
    # psums and inputs only pass through; the weight buffer is the sole local storage
    wbuf: Scratchpad


@dataclass
class GemmResult:
    outputs: np.ndarray
    cycles: int
    waves: int
    ibuf_reads: int = 0
    wbuf_reads: int = 0
    macs: int = 0
    brick_ops: int = 0
    shift_add_ops: int = 0
    overflows: int = 0
    counters: dict = field(default_factory=dict)


def _tiling(k: int, n: int, config: FusionConfig, geom: ArrayGeometry):
    kt = geom.rows * config.fused_pe_count
    return kt, max(1, math.ceil(k / kt)), max(1, math.ceil(n / geom.cols))


def _chunk_words(chunk_index: int, chunk_bits: int, access_bits: int) -> range:
    first = chunk_index * chunk_bits // access_bits
    last = ((chunk_index + 1) * chunk_bits - 1) // access_bits
    return range(first, last + 1)


def _misses(chunk_sequence, chunk_bits: int, access_bits: int) -> int:
    last = None
    misses = 0
    for c in chunk_sequence:
        for w in _chunk_words(c, chunk_bits, access_bits):
            if w != last:
                misses += 1
                last = w
    return misses


def _check_operands(inputs, weights, config):
    check_range(inputs, config.input_bits, config.input_signed, "input")
    check_range(weights, config.weight_bits, config.weight_signed, "weight")


def _wrapped_scan(terms: np.ndarray, axis: int):
    """Running 32-bit wrapped sums along ``axis`` and the number of steps that wrapped.

    Wrapping is modular, so wrapping the exact prefix sums gives the stepwise result.
    """
    sums = wrap32(np.cumsum(terms, axis=axis))
    prev = np.concatenate([np.zeros_like(np.take(sums, [0], axis=axis)),
                           np.take(sums, range(sums.shape[axis] - 1), axis=axis)], axis=axis)
    exact = prev + terms
    return sums, int(np.count_nonzero(exact != sums))


def gemm_cycles(m: int, k: int, n: int, config: FusionConfig, geom: ArrayGeometry) -> int:
    _, ktiles, ntiles = _tiling(k, n, config, geom)
    return ktiles * ntiles * m * config.temporal_cycles + geom.fill_cycles


def systolic_gemm(inputs, weights, config: FusionConfig, geom: ArrayGeometry) -> GemmResult:
    """Vectorized array model: [M, K] x [K, N] -> 32-bit [M, N] plus cycle and access counts."""
    x = np.asarray(inputs, dtype=np.int64)
    w = np.asarray(weights, dtype=np.int64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"gemm dimension mismatch: {x.shape} x {w.shape}")
    _check_operands(x, w, config)
    m, k = x.shape
    n = w.shape[1]
    fpe = config.fused_pe_count
    kt, ktiles, ntiles = _tiling(k, n, config, geom)
    rows, cols = geom.rows, geom.cols

    xp = np.zeros((m, ktiles * kt), dtype=np.int64)
    xp[:, :k] = x
    wp = np.zeros((ktiles * kt, ntiles * cols), dtype=np.int64)
    wp[:k, :n] = w
    xr = xp.reshape(m, ktiles, rows, fpe)
    wr = wp.reshape(ktiles, rows, fpe, ntiles, cols)
    # unit sums before the psum add: [m, ktile, row, ntile, col]
    prods = multiply_array(xr[:, :, :, :, None, None], wr[None], config)
    unit = prods.sum(axis=3)

    # psums flow down the rows, then tiles accumulate in the output buffer
    psum, over_rows = _wrapped_scan(unit, axis=2)
    acc, over_tiles = _wrapped_scan(psum[:, :, -1], axis=1)
    overflows = over_rows + over_tiles
    out = acc[:, -1].reshape(m, ntiles * cols)[:, :n]

    access = geom.buffer_access_bits
    in_chunk = fpe * config.input_bits
    w_chunk = fpe * config.weight_bits
    in_seq = [t * m + s for t in range(ktiles) for _ in range(ntiles) for s in range(m)]
    w_seq = [t * ntiles + u for t in range(ktiles) for u in range(ntiles) for _ in range(m)]
    waves = ktiles * ntiles
    macs = m * k * n
    return GemmResult(
        outputs=out,
        cycles=gemm_cycles(m, k, n, config, geom),
        waves=waves,
        ibuf_reads=rows * _misses(in_seq, in_chunk, access),
        wbuf_reads=rows * cols * _misses(w_seq, w_chunk, access),
        macs=macs,
        brick_ops=macs * config.brick_ops_per_mac,
        shift_add_ops=macs * config.shift_levels * config.temporal_cycles,
        overflows=overflows,
    )


class SystolicArray:
    """Step-by-step model built from Scratchpads and ``fusion_unit_cycle``.

    Slow, but every operand goes through a row register and every product
    through a FusionUnit; ``systolic_gemm`` must agree with it exactly.
    """

    def __init__(self, geom: ArrayGeometry, config: FusionConfig):
        self.geom = geom
        self.config = config

    def run(self, inputs, weights) -> GemmResult:
        g, cfg = self.geom, self.config
        x = np.asarray(inputs, dtype=np.int64)
        w = np.asarray(weights, dtype=np.int64)
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ValueError(f"dimension mismatch: {x.shape} x {w.shape}")
        _check_operands(x, w, cfg)
        m, k = x.shape
        n = w.shape[1]
        fpe = cfg.fused_pe_count
        kt, ktiles, ntiles = _tiling(k, n, cfg, g)
        access = g.buffer_access_bits
        in_chunk = fpe * cfg.input_bits
        w_chunk = fpe * cfg.weight_bits

        xp = np.zeros((m, ktiles * kt), dtype=np.int64)
        xp[:, :k] = x
        wp = np.zeros((ktiles * kt, ntiles * g.cols), dtype=np.int64)
        wp[:k, :n] = w

        def words_for(nchunks, chunk_bits):
            nwords = math.ceil(nchunks * chunk_bits / access)
            return max(1, nwords) * access

        ibufs = []
        for r in range(g.rows):
            sp = Scratchpad("IBUF", words_for(ktiles * m, in_chunk), access)
            for t in range(ktiles):
                for s in range(m):
                    vals = xp[s, t * kt + r * fpe: t * kt + (r + 1) * fpe]
                    sp.load_elements(vals, cfg.input_bits, (t * m + s) * in_chunk)
            ibufs.append(sp)
        units = [[FusionUnitState(Scratchpad("WBUF", words_for(ktiles * ntiles, w_chunk), access))
                  for _ in range(g.cols)] for _ in range(g.rows)]
        for r in range(g.rows):
            for c in range(g.cols):
                for t in range(ktiles):
                    for u in range(ntiles):
                        vals = wp[t * kt + r * fpe: t * kt + (r + 1) * fpe, u * g.cols + c]
                        units[r][c].wbuf.load_elements(vals, cfg.weight_bits, (t * ntiles + u) * w_chunk)

        post = [ColumnPostUnit() for _ in range(g.cols)]
        out = np.zeros((m, ntiles * g.cols), dtype=np.int64)
        overflows = 0
        for t in range(ktiles):
            for u in range(ntiles):
                for s in range(m):
                    row_inputs = [self._fetch(ibufs[r], t * m + s, in_chunk, "input") for r in range(g.rows)]
                    for c in range(g.cols):
                        psum = 0
                        for r in range(g.rows):
                            ws = self._fetch(units[r][c].wbuf, t * ntiles + u, w_chunk, "weight")
                            new = fusion_unit_cycle(row_inputs[r], ws, psum, cfg)
                            exact = psum + sum(int(a) * int(b) for a, b in zip(row_inputs[r], ws))
                            overflows += new != exact
                            psum = new
                        col = u * g.cols + c
                        post[c].accumulator = int(out[s, col])
                        exact = post[c].accumulator + psum
                        out[s, col] = wrap32(exact)
                        overflows += out[s, col] != exact
        macs = m * k * n
        return GemmResult(
            outputs=out[:, :n],
            cycles=ktiles * ntiles * m * cfg.temporal_cycles + g.fill_cycles,
            waves=ktiles * ntiles,
            ibuf_reads=sum(sp.reads for sp in ibufs),
            wbuf_reads=sum(u.wbuf.reads for row in units for u in row),
            macs=macs,
            brick_ops=macs * cfg.brick_ops_per_mac,
            shift_add_ops=macs * cfg.shift_levels * cfg.temporal_cycles,
            overflows=int(overflows),
        )

    def _fetch(self, sp: Scratchpad, chunk: int, chunk_bits: int, role: str) -> list[int]:
        bits = self.config.input_bits if role == "input" else self.config.weight_bits
        access = sp.access_bits
        ops: list[int] = []
        start = chunk * chunk_bits
        remaining = chunk_bits // bits
        while remaining:
            addr, off = divmod(start, access)
            take = min(remaining, (access - off) // bits)
            ops += extract_operands(sp, addr, self.config, take, role, off)
            start += take * bits
            remaining -= take
        return ops


def systolic_matvec(inputs, weights, config: FusionConfig, geom: ArrayGeometry) -> GemmResult:
    """Input vector times weight matrix on the step-by-step array model."""
    x = np.asarray(inputs, dtype=np.int64)
    if x.ndim != 1:
        raise ValueError("systolic_matvec takes a 1-D input vector")
    res = SystolicArray(geom, config).run(x[None, :], weights)
    res.outputs = res.outputs[0]
    return res
