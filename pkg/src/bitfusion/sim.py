"""Cycle-accounting simulator for Fusion-ISA blocks.

Execution model
---------------
Addresses follow ``base + sum(iterator[id] * stride[id])`` over the gen-addr
entries of a target; loops that are not currently active contribute iterator 0.

``ld-mem``/``st-mem`` move a tile. The tile is every (buffer word, memory
element) pair reachable by the loops nested in the same body as the transfer,
with the enclosing loops fixed at their current iterations. ``st-mem`` of the
output buffer runs the column post units on the way out: words that share a
memory element are max-reduced (pooling on drain), then relu, then
shift-and-saturate. Drained words become empty; an empty word reads as 0 for
``mul_add`` and as -inf for ``max``.

A loop subtree free of memory instructions is a compute region. Its
``mul_add`` is classified into a GEMM by stride pattern and executed through
``systolic_gemm``; ``max`` runs on the column post units, one compare per
column per cycle.

Timing is a scoreboard with one compute engine and one memory engine. A
transfer costs ``latency + ceil(bits / bandwidth)``. Loads wait for their
buffer slot to be released (two slots per buffer with double buffering).
Stores are queued behind the loads of the next region, so memory traffic
overlaps compute. Block decode costs one cycle per encoded word.
"""

from collections import Counter
from dataclasses import dataclass, field
import math

import numpy as np

from .array import BUFFER_KINDS, column_post_array, systolic_gemm
from .config import ArchConfig
from .isa import (BUF_TARGET, MEM_TARGET, Buf, Compute, ComputeOp, InstructionBlock, LdMem, LoopNode,
                  RdBuf, StMem, Target, WrBuf, GenAddr, check, encode_instruction)
from .memimage import MemoryImage
from .numeric import wrap32

EMPTY = np.iinfo(np.int64).min


class SimError(RuntimeError):
    pass


def gen_address(base: int, iterators: dict, strides: dict) -> int:
    """``base + sum(iterators[id] * strides[id])`` over every stride id."""
    addr = base
    for lid, stride in strides.items():
        if lid not in iterators:
            raise KeyError(f"no iterator for loop id {lid}")
        addr += iterators[lid] * stride
    return addr


@dataclass
class MemoryModel:
    image: MemoryImage = field(default_factory=MemoryImage)
    bandwidth: int = 128  # bits per cycle
    latency: int = 8

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.latency < 0:
            raise ValueError("latency must be nonnegative")

    def transfer_cycles(self, bits: int) -> int:
        if bits <= 0:
            return 0
        return self.latency + math.ceil(bits / self.bandwidth)

    @classmethod
    def for_arch(cls, arch: ArchConfig, image: MemoryImage) -> "MemoryModel":
        return cls(image, arch.bandwidth, arch.latency)


class BufferState:
    """Element-addressed scratchpad contents for one block (one tile slot)."""

    def __init__(self, kind: str, slot_bits: int, bits: int):
        self.kind = kind
        self.bits = bits
        self.values = np.zeros(slot_bits // bits, dtype=np.int64)
        self.valid = np.zeros(len(self.values), dtype=bool)

    def check(self, addr: np.ndarray):
        if addr.size and (addr.min() < 0 or addr.max() >= len(self.values)):
            raise SimError(f"scratchpad overflow: {self.kind} address {int(addr.max())} "
                           f"beyond {len(self.values)} words of {self.bits} bits")

    def read(self, addr: np.ndarray) -> np.ndarray:
        self.check(addr)
        if not self.valid[addr].all():
            raise SimError(f"read of unloaded {self.kind} word")
        return self.values[addr]


@dataclass
class MachineState:
    arch: ArchConfig = field(default_factory=ArchConfig)
    pc: int = 0
    iterators: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    cycle: int = 0

    def reset_buffers(self, input_bits: int, weight_bits: int):
        a = self.arch
        self.buffers = {
            "IBUF": BufferState("IBUF", a.slot_bits("IBUF"), input_bits),
            "WBUF": BufferState("WBUF", a.slot_bits("WBUF"), weight_bits),
            "OBUF": BufferState("OBUF", a.slot_bits("OBUF"), 32),
        }


@dataclass
class BlockStat:
    name: str
    counts: Counter
    events: list = field(default_factory=list)  # (kind, buffer, start, end) in cycles


@dataclass
class RunReport:
    counts: Counter = field(default_factory=Counter)
    macs_by_config: Counter = field(default_factory=Counter)
    blocks: list = field(default_factory=list)
    batch: int = 1
    tensor_bits: Counter = field(default_factory=Counter)  # (tensor, "read" | "write") -> off-chip bits

    def __getitem__(self, key: str) -> int:
        return self.counts[key]

    @property
    def cycles(self) -> int:
        return self.counts["cycles"]

    @property
    def compute_cycles(self) -> int:
        return self.counts["compute_cycles"]

    @property
    def offchip_read_bits(self) -> int:
        return sum(self.counts[f"offchip_read_bits_{b.lower()}"] for b in BUFFER_KINDS)

    @property
    def offchip_write_bits(self) -> int:
        return self.counts["offchip_write_bits_obuf"]

    def per_inference(self, key: str) -> float:
        return self.counts[key] / self.batch

    def merge(self, other: "RunReport") -> "RunReport":
        return RunReport(self.counts + other.counts, self.macs_by_config + other.macs_by_config,
                         self.blocks + other.blocks, max(self.batch, other.batch),
                         self.tensor_bits + other.tensor_bits)

    def tensor_traffic(self, name: str) -> int:
        """Off-chip bits read plus written for one tensor of the memory image."""
        return self.tensor_bits[(name, "read")] + self.tensor_bits[(name, "write")]


COUNTER_KEYS = (
    "cycles", "compute_cycles", "memory_cycles", "decode_cycles", "transfers",
    "macs", "brick_ops", "shift_add_ops", "max_ops", "overflows",
    "ibuf_reads", "ibuf_fills", "wbuf_reads", "wbuf_fills",
    "obuf_reads", "obuf_writes", "obuf_fills", "obuf_drains",
    "ibuf_read_bits", "ibuf_write_bits", "wbuf_read_bits", "wbuf_write_bits",
    "obuf_read_bits", "obuf_write_bits", "register_fills",
    "offchip_read_bits_ibuf", "offchip_read_bits_wbuf", "offchip_read_bits_obuf", "offchip_write_bits_obuf",
)


@dataclass
class _Gen:
    ready: int = 0
    use_end: int = 0
    store_end: int = 0
    pending: bool = False


class _Tile:
    """Unique (buffer word, memory element) pairs of a transfer, relative to the current offsets."""

    def __init__(self, buf: np.ndarray, mem: np.ndarray):
        self.buf = buf
        self.mem = mem
        self.buf_words = len(np.unique(buf))
        self.umem, self.inverse = np.unique(mem, return_inverse=True)
        self.order = np.argsort(mem, kind="stable")
        self.starts = np.searchsorted(mem[self.order], self.umem)


class _Timeline:
    def __init__(self, start: int, mem: MemoryModel, slots: int):
        self.mem = mem
        self.slots = slots
        self.mem_free = self.comp_free = start
        self.hist = {b: [] for b in BUFFER_KINDS}
        self.cur = {b: None for b in BUFFER_KINDS}
        self.pending = []
        self.memory_cycles = 0
        self.events = []

    def _acquire(self, buf: str) -> int:
        hist = self.hist[buf]
        if len(hist) >= self.slots:
            old = hist[-self.slots]
            if old.pending:
                self.flush()
            return max(old.use_end, old.store_end)
        return 0

    def _transfer(self, ready: int, bits: int, kind: str, buf: str) -> int:
        dur = self.mem.transfer_cycles(bits)
        self.memory_cycles += dur
        start = max(self.mem_free, ready)
        self.mem_free = start + dur
        self.events.append((kind, buf, start, self.mem_free))
        return self.mem_free

    def load(self, buf: str, bits: int):
        end = self._transfer(self._acquire(buf), bits, "load", buf)
        g = _Gen(ready=end, use_end=end)
        self.hist[buf].append(g)
        self.cur[buf] = g

    def store(self, buf: str, bits: int):
        g = self.cur[buf]
        if g is None:
            g = _Gen(ready=self._acquire(buf))
            self.hist[buf].append(g)
        g.pending = True
        self.pending.append((g, bits))
        self.cur[buf] = None

    def flush(self):
        pending, self.pending = self.pending, []
        for g, bits in pending:
            g.store_end = self._transfer(g.use_end, bits, "store", "OBUF")
            g.pending = False

    def compute(self, bufs, cycles: int):
        self.flush()
        gens = []
        for b in bufs:
            if self.cur[b] is None:
                g = _Gen(ready=self._acquire(b))
                self.hist[b].append(g)
                self.cur[b] = g
            gens.append(self.cur[b])
        start = max([self.comp_free] + [g.ready for g in gens])
        end = start + cycles
        self.comp_free = end
        self.events.append(("compute", "", start, end))
        for g in gens:
            g.use_end = max(g.use_end, end)

    def finish(self) -> int:
        self.flush()
        return max(self.mem_free, self.comp_free)


def _walk_loops(items):
    for it in items:
        if isinstance(it, LoopNode):
            yield it
            yield from _walk_loops(it.children)


def _walk_instructions(items):
    for it in items:
        if isinstance(it, LoopNode):
            yield from _walk_instructions(it.children)
        else:
            yield it[1]


def _grid(extents, strides_list):
    """Offsets over the product of ``extents`` (row-major) for each stride vector."""
    if not extents:
        return [np.zeros(1, dtype=np.int64) for _ in strides_list]
    idx = np.indices(extents, dtype=np.int64).reshape(len(extents), -1)
    return [np.asarray(s, dtype=np.int64) @ idx for s in strides_list]


class _BlockRun:
    def __init__(self, block: InstructionBlock, state: MachineState, mem: MemoryModel):
        check(block)
        self.block = block
        self.setup = block.setup
        self.cfg = block.config
        self.state = state
        self.mem = mem
        self.arch = state.arch
        self.geom = state.arch.geometry
        self.counts = Counter()
        self.macs_by_config = Counter()
        self.tensor_bits = Counter()
        self.strides = {t: {} for t in Target}
        for ins in block.instructions:
            if isinstance(ins, GenAddr):
                s = self.strides[ins.target]
                s[ins.loop_id] = s.get(ins.loop_id, 0) + ins.stride
        state.iterators = {lp.loop_id: 0 for lp in block.loops}
        state.reset_buffers(self.setup.input_bits, self.setup.weight_bits)
        self.tree = block.loop_tree()
        self._tiles = {}
        self.has_mem = {}
        for node in _walk_loops(self.tree):
            self.has_mem[node.index] = any(isinstance(i, (LdMem, StMem)) for i in _walk_instructions(node.children))
        words = sum(len(encode_instruction(i)) for i in block.instructions)
        self.counts["decode_cycles"] = words
        self.timeline = _Timeline(state.cycle + words, mem, 2 if self.arch.double_buffer else 1)

    # -- driver -----------------------------------------------------------------

    def run(self) -> RunReport:
        start = self.state.cycle
        self._exec(self.tree)
        end = self.timeline.finish()
        self.state.cycle = end
        self.counts["cycles"] = end - start
        self.counts["memory_cycles"] = self.timeline.memory_cycles
        c, acc = self.counts, self.geom.buffer_access_bits
        for b in ("ibuf", "wbuf"):
            c[f"{b}_read_bits"] = c[f"{b}_reads"] * acc
            c[f"{b}_write_bits"] = c[f"{b}_fills"] * acc
        c["obuf_read_bits"] = c["obuf_reads"] * 32 + c["obuf_drains"] * acc
        c["obuf_write_bits"] = c["obuf_writes"] * 32 + c["obuf_fills"] * acc
        c["register_fills"] = c["ibuf_reads"] + c["wbuf_reads"]
        counts = Counter({k: v for k, v in self.counts.items() if v})
        return RunReport(counts, Counter(self.macs_by_config), [BlockStat(self.block.name, counts, self.timeline.events)],
                         tensor_bits=Counter(self.tensor_bits))

    def _tensor_at(self, base: int) -> str:
        for t in self.mem.image.tensors.values():
            if t.offset <= base < t.offset + max(t.nbytes, 1):
                return t.name
        return f"@{base}"

    def _exec(self, items):
        it = self.state.iterators
        for item in items:
            if isinstance(item, LoopNode):
                if not self.has_mem[item.index]:
                    self._region([item], [])
                    continue
                lid = item.loop.loop_id
                for i in range(item.loop.num_iterations):
                    it[lid] = i
                    self.state.pc = item.index
                    self._exec(item.children)
                it[lid] = 0
            else:
                self.state.pc, ins = item
                if isinstance(ins, LdMem):
                    self._load(ins, items)
                elif isinstance(ins, StMem):
                    self._store(ins, items)
                elif isinstance(ins, Compute):
                    self._compute(ins, [])
                elif isinstance(ins, (RdBuf, WrBuf)):
                    self._count_buf(ins, 1)

    def _offset(self, target: Target) -> int:
        return gen_address(0, self.state.iterators, self.strides[target])

    def _stride(self, target: Target, lid: int) -> int:
        return self.strides[target].get(lid, 0)

    # -- compute regions ----------------------------------------------------------

    def _region(self, items, loops):
        for item in items:
            if isinstance(item, LoopNode):
                if item.loop.num_iterations > 0:
                    self._region(item.children, loops + [item.loop])
            else:
                ins = item[1]
                if isinstance(ins, Compute):
                    self._compute(ins, loops)
                elif isinstance(ins, (RdBuf, WrBuf)):
                    self._count_buf(ins, math.prod(lp.num_iterations for lp in loops))
                elif isinstance(ins, (LdMem, StMem)):  # pragma: no cover - regions exclude these
                    raise SimError("memory instruction inside compute region")

    def _count_buf(self, ins, times: int):
        if ins.buf == Buf.OBUF:
            key = "obuf_reads" if isinstance(ins, RdBuf) else "obuf_writes"
            self.counts[key] += times

    def _compute(self, ins: Compute, loops):
        if ins.op == ComputeOp.MUL_ADD:
            self._mul_add(loops)
        elif ins.op == ComputeOp.MAX:
            self._max(loops)
        else:  # pragma: no cover
            raise SimError(f"unsupported compute op {ins.op}")

    def _mul_add(self, loops):
        T = Target
        base = {t: self._offset(t) for t in (T.IBUF, T.WBUF, T.OBUF)}
        groups = {"G": [], "M": [], "N": [], "K": []}
        for lp in loops:
            si, sw, so = (self._stride(t, lp.loop_id) for t in (T.IBUF, T.WBUF, T.OBUF))
            kind = "K" if so == 0 else ("N" if si == 0 else ("M" if sw == 0 else "G"))
            groups[kind].append((lp.num_iterations, si, sw, so))

        def grid(kind):
            g = groups[kind]
            return _grid([e for e, *_ in g], [[s[i] for s in g] for i in (1, 2, 3)])

        gi, gw, go = grid("G")
        mi, _, mo = grid("M")
        _, nw, no = grid("N")
        ki, kw, _ = grid("K")
        ibuf, wbuf, obuf = (self.state.buffers[b] for b in BUFFER_KINDS)
        cycles = 0
        for g in range(len(gi)):
            x = ibuf.read(base[T.IBUF] + gi[g] + mi[:, None] + ki[None, :])
            w = wbuf.read(base[T.WBUF] + gw[g] + kw[:, None] + nw[None, :])
            oaddr = (base[T.OBUF] + go[g] + mo[:, None] + no[None, :]).ravel()
            obuf.check(oaddr)
            res = systolic_gemm(x, w, self.cfg, self.geom)
            cur = np.where(obuf.valid, obuf.values, 0)
            exact = cur.copy()
            np.add.at(exact, oaddr, res.outputs.ravel())
            touched = np.unique(oaddr)
            wrapped = wrap32(exact[touched])
            self.counts["overflows"] += int(np.count_nonzero(wrapped != exact[touched]))
            obuf.values[touched] = wrapped
            obuf.valid[touched] = True
            cycles += res.cycles
            for key in ("ibuf_reads", "wbuf_reads", "macs", "brick_ops", "shift_add_ops", "overflows"):
                self.counts[key] += getattr(res, key)
            self.macs_by_config[_config_key(self.cfg)] += res.macs
        self.counts["compute_cycles"] += cycles
        self.timeline.compute(BUFFER_KINDS, cycles)

    def _max(self, loops):
        T = Target
        ext = [lp.num_iterations for lp in loops]
        ia, oa = _grid(ext, [[self._stride(t, lp.loop_id) for lp in loops] for t in (T.IBUF, T.OBUF)])
        ibuf, obuf = self.state.buffers["IBUF"], self.state.buffers["OBUF"]
        vals = ibuf.read(ia + self._offset(T.IBUF))
        oa = oa + self._offset(T.OBUF)
        obuf.check(oa)
        acc = np.where(obuf.valid, obuf.values, EMPTY)
        np.maximum.at(acc, oa, vals)
        touched = np.unique(oa)
        obuf.values[touched] = acc[touched]
        obuf.valid[touched] = True
        points = len(vals)
        cycles = math.ceil(points / self.geom.cols)
        self.counts["max_ops"] += points
        self.counts["ibuf_reads"] += math.ceil(points * self.setup.input_bits / self.geom.buffer_access_bits)
        self.counts["compute_cycles"] += cycles
        self.timeline.compute(("IBUF", "OBUF"), cycles)

    # -- transfers ---------------------------------------------------------------

    def _tile(self, buf: Buf, items) -> "_Tile":
        """Tile shape relative to the current offsets; fixed for a given body, so cached."""
        key = (buf, id(items))
        tile = self._tiles.get(key)
        if tile is None:
            bt, mt = BUF_TARGET[buf], MEM_TARGET[buf]
            loops = [n.loop for n in _walk_loops(items)
                     if self._stride(bt, n.loop.loop_id) or self._stride(mt, n.loop.loop_id)]
            ext = [lp.num_iterations for lp in loops]
            b, m = _grid(ext, [[self._stride(t, lp.loop_id) for lp in loops] for t in (bt, mt)])
            pairs = np.unique(np.stack([b, m], axis=1), axis=0)
            tile = _Tile(pairs[:, 0], pairs[:, 1])
            self._tiles[key] = tile
        return tile

    def _stream(self, buf: Buf, store: bool):
        s = self.setup
        if buf == Buf.IBUF:
            return s.ibase, s.input_bits, s.input_signed
        if buf == Buf.WBUF:
            return s.wbase, s.weight_bits, s.weight_signed
        if store:
            return s.obase, s.out_bits, s.out_signed
        return s.pbase, 32, True

    def _check_words(self, ins, n: int):
        if ins.num_words != n:
            raise SimError(f"{ins.mnemonic} {ins.buf.name.lower()}: num-words {ins.num_words} "
                           f"but the tile has {n} words")

    def _read_image(self, base, idx, bits, signed):
        try:
            return self.mem.image.read(base, idx, bits, signed)
        except IndexError as e:
            raise SimError(f"address out of image: {e}") from None

    def _load(self, ins: LdMem, items):
        tile = self._tile(ins.buf, items)
        if tile.buf_words != len(tile.buf):
            raise SimError(f"ld-mem {ins.buf.name.lower()}: a buffer word maps to several memory words")
        self._check_words(ins, tile.buf_words)
        name = ins.buf.name
        sp = self.state.buffers[name]
        baddr = tile.buf + self._offset(BUF_TARGET[ins.buf])
        moff = self._offset(MEM_TARGET[ins.buf])
        sp.check(baddr)
        base, bits, signed = self._stream(ins.buf, store=False)
        vals = self._read_image(base, tile.umem + moff, bits, signed)
        sp.values[baddr] = vals[tile.inverse]
        sp.valid[baddr] = True
        low = name.lower()
        self.counts[f"{low}_fills"] += math.ceil(len(baddr) * sp.bits / self.geom.buffer_access_bits)
        moved = len(tile.umem) * bits
        self.counts[f"offchip_read_bits_{low}"] += moved
        self.tensor_bits[(self._tensor_at(base), "read")] += moved
        self.counts["transfers"] += 1
        self.timeline.load(name, moved)

    def _store(self, ins: StMem, items):
        if ins.buf != Buf.OBUF:
            raise SimError("st-mem is only defined for the output buffer")
        tile = self._tile(ins.buf, items)
        self._check_words(ins, tile.buf_words)
        sp = self.state.buffers["OBUF"]
        baddr = tile.buf + self._offset(Target.OBUF)
        umem = tile.umem + self._offset(Target.OMEM)
        sp.check(baddr)
        vals = np.where(sp.valid[baddr], sp.values[baddr], EMPTY)
        # words sharing a memory element pool by max on the way out
        pooled = np.maximum.reduceat(vals[tile.order], tile.starts) if len(vals) else vals
        pooled = np.where(pooled == EMPTY, 0, pooled)
        s = self.setup
        out = column_post_array(pooled, s.activation, s.shift, s.out_bits, s.out_signed)
        try:
            self.mem.image.write(s.obase, umem, out, s.out_bits)
        except IndexError as e:
            raise SimError(f"address out of image: {e}") from None
        sp.valid[baddr] = False
        sp.values[baddr] = 0
        self.counts["obuf_drains"] += math.ceil(tile.buf_words * 32 / self.geom.buffer_access_bits)
        moved = len(umem) * s.out_bits
        self.counts["offchip_write_bits_obuf"] += moved
        self.tensor_bits[(self._tensor_at(s.obase), "write")] += moved
        self.counts["transfers"] += 1
        self.timeline.store("OBUF", moved)


def _config_key(cfg) -> str:
    sign = lambda s: "s" if s else "u"  # noqa: E731
    return f"{sign(cfg.input_signed)}{cfg.input_bits}x{sign(cfg.weight_signed)}{cfg.weight_bits}"


def run_block(block: InstructionBlock, state: MachineState, mem: MemoryModel) -> RunReport:
    """Execute one block against ``mem.image``; returns the counter delta."""
    return _BlockRun(block, state, mem).run()


def run_network(blocks, mem: MemoryModel, arch: ArchConfig | None = None, batch: int = 1) -> RunReport:
    """Run blocks back to back. ``batch`` is the number of inferences the blocks were compiled for."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    state = MachineState(arch or ArchConfig())
    report = RunReport(batch=batch)
    for block in blocks:
        report = report.merge(run_block(block, state, mem))
    report.batch = batch
    return report


def simulate(blocks, image: MemoryImage, arch: ArchConfig | None = None, batch: int = 1):
    """Run on a copy of ``image``; returns (report, final image)."""
    arch = arch or ArchConfig()
    mem = MemoryModel.for_arch(arch, image.copy())
    report = run_network(blocks, mem, arch, batch)
    return report, mem.image
