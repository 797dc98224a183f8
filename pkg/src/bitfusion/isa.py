"""Fusion-ISA: instruction types, block structure, assembler and binary codec.

Binary format (all little-endian)::

    "BFIS"  u8 version  u32 word_count  then word_count x u64 words

Every instruction is one 64-bit word with the opcode in bits [0, 8). A
``setup`` word is followed by four raw base-address words (ibase, wbase,
pbase, obase). Field layouts per opcode are listed in ``docs/isa.md``.
"""

from dataclasses import dataclass, field
from enum import IntEnum
import re
import struct
from typing import ClassVar, Union

from .fusion import BITWIDTHS, FusionConfig

MAGIC = b"BFIS"
VERSION = 1
OUT_BITWIDTHS = (2, 4, 8, 16, 32)
BASE_WORDS = 4


class Opcode(IntEnum):
    SETUP = 0x01
    BLOCK_END = 0x02
    LOOP = 0x03
    COMPUTE = 0x04
    GEN_ADDR = 0x05
    LD_MEM = 0x06
    ST_MEM = 0x07
    RD_BUF = 0x08
    WR_BUF = 0x09


class Buf(IntEnum):
    IBUF = 0
    WBUF = 1
    OBUF = 2


class Target(IntEnum):
    IBUF = 0
    WBUF = 1
    OBUF = 2
    IMEM = 3
    WMEM = 4
    OMEM = 5

    @property
    def is_memory(self) -> bool:
        return self >= Target.IMEM


MEM_TARGET = {Buf.IBUF: Target.IMEM, Buf.WBUF: Target.WMEM, Buf.OBUF: Target.OMEM}
BUF_TARGET = {Buf.IBUF: Target.IBUF, Buf.WBUF: Target.WBUF, Buf.OBUF: Target.OBUF}


class ComputeOp(IntEnum):
    MUL_ADD = 0
    MAX = 1


ACTIVATIONS = ("none", "relu")


class ISAError(ValueError):
    pass


class AsmError(ISAError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class DecodeError(ISAError):
    pass


@dataclass(frozen=True)
class Setup:
    mnemonic: ClassVar[str] = "setup"
    input_bits: int
    weight_bits: int
    input_signed: bool = True
    weight_signed: bool = True
    out_bits: int = 32
    out_signed: bool = True
    activation: str = "none"
    shift: int = 0
    ibase: int = 0
    wbase: int = 0
    pbase: int = 0
    obase: int = 0

    @property
    def config(self) -> FusionConfig:
        return FusionConfig(self.input_bits, self.weight_bits, self.input_signed, self.weight_signed)


@dataclass(frozen=True)
class BlockEnd:
    mnemonic: ClassVar[str] = "block-end"
    next_inst: int = 0


@dataclass(frozen=True)
class Loop:
    mnemonic: ClassVar[str] = "loop"
    loop_id: int
    num_iterations: int
    body: int  # instructions nested inside this loop, transitively


@dataclass(frozen=True)
class Compute:
    mnemonic: ClassVar[str] = "compute"
    op: ComputeOp = ComputeOp.MUL_ADD


@dataclass(frozen=True)
class GenAddr:
    mnemonic: ClassVar[str] = "gen-addr"
    target: Target
    loop_id: int
    stride: int


@dataclass(frozen=True)
class LdMem:
    mnemonic: ClassVar[str] = "ld-mem"
    buf: Buf
    num_words: int


@dataclass(frozen=True)
class StMem:
    mnemonic: ClassVar[str] = "st-mem"
    buf: Buf
    num_words: int


@dataclass(frozen=True)
class RdBuf:
    mnemonic: ClassVar[str] = "rd-buf"
    buf: Buf


@dataclass(frozen=True)
class WrBuf:
    mnemonic: ClassVar[str] = "wr-buf"
    buf: Buf


Instruction = Union[Setup, BlockEnd, Loop, Compute, GenAddr, LdMem, StMem, RdBuf, WrBuf]
INSTRUCTION_TYPES = (Setup, BlockEnd, Loop, Compute, GenAddr, LdMem, StMem, RdBuf, WrBuf)


@dataclass
class LoopNode:
    index: int
    loop: Loop
    children: list = field(default_factory=list)  # (index, Instruction) or LoopNode


@dataclass
class InstructionBlock:
    instructions: list
    name: str = ""
    # loop-nest IR the block was lowered from; lets the scheduling passes re-lower it
    nest: object = field(default=None, repr=False, compare=False)

    @property
    def setup(self) -> Setup:
        first = self.instructions[0] if self.instructions else None
        if not isinstance(first, Setup):
            raise ISAError("block does not start with setup")
        return first

    @property
    def config(self) -> FusionConfig:
        return self.setup.config

    @property
    def loops(self) -> list[Loop]:
        return [i for i in self.instructions if isinstance(i, Loop)]

    def loop_tree(self) -> list:
        """Top-level items of the body between setup and block-end."""
        body = self.instructions[1:-1]
        items, end = _build_tree(body, 0, len(body), offset=1)
        return items

    def __len__(self):
        return len(self.instructions)

    def __eq__(self, other):
        if not isinstance(other, InstructionBlock):
            return NotImplemented
        return self.instructions == other.instructions


def _build_tree(body, start, stop, offset):
    items = []
    i = start
    while i < stop:
        ins = body[i]
        if isinstance(ins, Loop):
            end = i + 1 + ins.body
            if end > stop:
                raise ISAError(f"loop {ins.loop_id} at instruction {i + offset} overruns its enclosing body")
            node = LoopNode(i + offset, ins)
            node.children, _ = _build_tree(body, i + 1, end, offset)
            items.append(node)
            i = end
        else:
            items.append((i + offset, ins))
            i += 1
    return items, i


# -- validation ---------------------------------------------------------------

@dataclass(frozen=True)
class Issue:
    index: int
    message: str

    def __str__(self):
        return f"instruction {self.index}: {self.message}"


def validate(block: InstructionBlock) -> list[Issue]:
    ins = block.instructions
    issues: list[Issue] = []
    if not ins or not isinstance(ins[0], Setup):
        issues.append(Issue(0, "no setup"))
    if not ins or not isinstance(ins[-1], BlockEnd):
        issues.append(Issue(max(len(ins) - 1, 0), "no block-end"))
    loop_ids: dict[int, int] = {}
    for idx, i in enumerate(ins):
        if isinstance(i, Setup):
            if idx != 0:
                issues.append(Issue(idx, "setup must appear only at the start of a block"))
            if i.input_bits not in BITWIDTHS or i.weight_bits not in BITWIDTHS:
                issues.append(Issue(idx, f"operand bitwidths must be in {BITWIDTHS}"))
            if i.out_bits not in OUT_BITWIDTHS:
                issues.append(Issue(idx, f"output bitwidth must be in {OUT_BITWIDTHS}"))
            if i.activation not in ACTIVATIONS:
                issues.append(Issue(idx, f"unknown activation {i.activation!r}"))
            if i.shift < 0 or min(i.ibase, i.wbase, i.pbase, i.obase) < 0:
                issues.append(Issue(idx, "shift and base addresses must be nonnegative"))
        elif isinstance(i, BlockEnd):
            if idx != len(ins) - 1:
                issues.append(Issue(idx, "block-end must be the last instruction"))
        elif isinstance(i, Loop):
            if i.loop_id in loop_ids:
                issues.append(Issue(idx, f"duplicate loop id {i.loop_id}"))
            loop_ids.setdefault(i.loop_id, idx)
            if i.num_iterations < 0:
                issues.append(Issue(idx, "num-iterations must be nonnegative"))
            if i.body < 0 or idx + i.body >= len(ins) - (1 if isinstance(ins[-1], BlockEnd) else 0):
                issues.append(Issue(idx, f"loop {i.loop_id} body runs past the block"))
        elif isinstance(i, GenAddr):
            if i.stride < 0:
                issues.append(Issue(idx, "stride must be nonnegative"))
        elif isinstance(i, (LdMem, StMem)):
            if i.num_words < 0:
                issues.append(Issue(idx, "num-words must be nonnegative"))
    for idx, i in enumerate(ins):
        if isinstance(i, GenAddr) and i.loop_id not in loop_ids:
            issues.append(Issue(idx, f"gen-addr references undeclared loop {i.loop_id}"))
    if not issues:
        try:
            block.loop_tree()
        except ISAError as e:
            issues.append(Issue(0, str(e)))
    return issues


def check(block: InstructionBlock) -> InstructionBlock:
    issues = validate(block)
    if issues:
        raise ISAError("; ".join(str(i) for i in issues))
    return block


# -- assembly text --------------------------------------------------------------

_BOOL = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}

_SETUP_KEYS = {
    "ibits": ("input_bits", int), "wbits": ("weight_bits", int),
    "isigned": ("input_signed", "bool"), "wsigned": ("weight_signed", "bool"),
    "obits": ("out_bits", int), "osigned": ("out_signed", "bool"),
    "act": ("activation", str), "shift": ("shift", int),
    "ibase": ("ibase", int), "wbase": ("wbase", int), "pbase": ("pbase", int), "obase": ("obase", int),
}
_KEYS = {
    "setup": _SETUP_KEYS,
    "block-end": {"next": ("next_inst", int)},
    "loop": {"id": ("loop_id", int), "iters": ("num_iterations", int), "body": ("body", int)},
    "compute": {"op": ("op", ComputeOp)},
    "gen-addr": {"target": ("target", Target), "loop": ("loop_id", int), "stride": ("stride", int)},
    "ld-mem": {"buf": ("buf", Buf), "words": ("num_words", int)},
    "st-mem": {"buf": ("buf", Buf), "words": ("num_words", int)},
    "rd-buf": {"buf": ("buf", Buf)},
    "wr-buf": {"buf": ("buf", Buf)},
}
_TYPES = {cls.mnemonic: cls for cls in INSTRUCTION_TYPES}
_TOKEN = re.compile(r"\S+")


def _convert(raw: str, kind, line: int, col: int):
    try:
        if kind is int:
            return int(raw, 0)
        if kind == "bool":
            return _BOOL[raw.lower()]
        if kind is str:
            return raw
        return kind[raw.upper().replace("-", "_")]
    except (KeyError, ValueError):
        raise AsmError(f"bad value {raw!r}", line, col) from None


def parse_line(text: str, line: int = 1) -> Instruction | None:
    code = text.split("#", 1)[0]
    tokens = [(m.group(), m.start() + 1) for m in _TOKEN.finditer(code)]
    if not tokens:
        return None
    name, col = tokens[0]
    name = name.lower()
    if name not in _TYPES:
        raise AsmError(f"unknown mnemonic {name!r}", line, col)
    keys = _KEYS[name]
    kwargs = {}
    for tok, tcol in tokens[1:]:
        if "=" not in tok:
            raise AsmError(f"expected key=value, got {tok!r}", line, tcol)
        key, raw = tok.split("=", 1)
        if key not in keys:
            raise AsmError(f"unknown field {key!r} for {name}", line, tcol)
        attr, kind = keys[key]
        kwargs[attr] = _convert(raw, kind, line, tcol + len(key) + 1)
    try:
        return _TYPES[name](**kwargs)
    except TypeError as e:
        raise AsmError(f"{name}: {e}", line, col) from None


def assemble(text: str) -> list[InstructionBlock]:
    blocks: list[InstructionBlock] = []
    current: list | None = None
    start_line = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        ins = parse_line(raw, lineno)
        if ins is None:
            continue
        if isinstance(ins, Setup):
            if current is not None:
                raise AsmError("setup inside an open block (missing block-end)", lineno)
            current = [ins]
            start_line = lineno
            continue
        if current is None:
            raise AsmError(f"{ins.mnemonic} outside a block (missing setup)", lineno)
        current.append(ins)
        if isinstance(ins, BlockEnd):
            block = InstructionBlock(current)
            issues = validate(block)
            if issues:
                raise AsmError(f"invalid block: {issues[0]}", start_line)
            blocks.append(block)
            current = None
    if current is not None:
        raise AsmError("unterminated block (missing block-end)", start_line)
    return blocks


def _fmt_value(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, IntEnum):
        return v.name.lower()
    return str(v)


def format_instruction(ins: Instruction) -> str:
    parts = [ins.mnemonic]
    for key, (attr, _) in _KEYS[ins.mnemonic].items():
        parts.append(f"{key}={_fmt_value(getattr(ins, attr))}")
    return " ".join(parts)


def disassemble(blocks) -> str:
    if isinstance(blocks, InstructionBlock):
        blocks = [blocks]
    lines = []
    for b in blocks:
        if b.name:
            lines.append(f"# {b.name}")
        depth_ends: list[int] = []
        for idx, ins in enumerate(b.instructions):
            while depth_ends and idx > depth_ends[-1]:
                depth_ends.pop()
            indent = "  " * (len(depth_ends) + (0 if isinstance(ins, (Setup, BlockEnd)) else 1))
            lines.append(indent + format_instruction(ins))
            if isinstance(ins, Loop):
                depth_ends.append(idx + ins.body)
        lines.append("")
    return "\n".join(lines)


# -- binary codec ---------------------------------------------------------------

_BITS_CODE = {2: 0, 4: 1, 8: 2, 16: 3, 32: 4}
_CODE_BITS = {v: k for k, v in _BITS_CODE.items()}
_STRIDE_BITS = 45


def _field(word: int, lo: int, width: int) -> int:
    return (word >> lo) & ((1 << width) - 1)


def _put(value: int, lo: int, width: int, what: str) -> int:
    if not 0 <= value < (1 << width):
        raise ISAError(f"{what}={value} does not fit {width} bits")
    return value << lo


def encode_instruction(ins: Instruction) -> list[int]:
    if isinstance(ins, Setup):
        w = Opcode.SETUP
        w |= _put(_BITS_CODE[ins.input_bits], 8, 2, "ibits")
        w |= _put(_BITS_CODE[ins.weight_bits], 10, 2, "wbits")
        w |= _put(_BITS_CODE[ins.out_bits], 12, 3, "obits")
        w |= int(ins.input_signed) << 15 | int(ins.weight_signed) << 16 | int(ins.out_signed) << 17
        w |= _put(ACTIVATIONS.index(ins.activation), 18, 2, "act")
        w |= _put(ins.shift, 20, 6, "shift")
        w |= BASE_WORDS << 26
        bases = [ins.ibase, ins.wbase, ins.pbase, ins.obase]
        for b in bases:
            _put(b, 0, 64, "base")
        return [w, *bases]
    if isinstance(ins, BlockEnd):
        return [Opcode.BLOCK_END | _put(ins.next_inst, 8, 32, "next")]
    if isinstance(ins, Loop):
        return [Opcode.LOOP | _put(ins.loop_id, 8, 8, "id") | _put(ins.num_iterations, 16, 32, "iters")
                | _put(ins.body, 48, 16, "body")]
    if isinstance(ins, Compute):
        return [Opcode.COMPUTE | _put(int(ins.op), 8, 2, "op")]
    if isinstance(ins, GenAddr):
        return [Opcode.GEN_ADDR | _put(int(ins.target), 8, 3, "target") | _put(ins.loop_id, 11, 8, "loop")
                | _put(ins.stride, 19, _STRIDE_BITS, "stride")]
    if isinstance(ins, (LdMem, StMem)):
        op = Opcode.LD_MEM if isinstance(ins, LdMem) else Opcode.ST_MEM
        return [op | _put(int(ins.buf), 8, 2, "buf") | _put(ins.num_words, 10, 32, "words")]
    if isinstance(ins, (RdBuf, WrBuf)):
        op = Opcode.RD_BUF if isinstance(ins, RdBuf) else Opcode.WR_BUF
        return [op | _put(int(ins.buf), 8, 2, "buf")]
    raise ISAError(f"cannot encode {ins!r}")


def encode(blocks) -> bytes:
    if isinstance(blocks, InstructionBlock):
        blocks = [blocks]
    words = []
    for b in blocks:
        for ins in b.instructions:
            words += [int(w) for w in encode_instruction(ins)]
    return MAGIC + struct.pack("<BI", VERSION, len(words)) + struct.pack(f"<{len(words)}Q", *words)


def _decode_word(w: int, it, pos: int) -> Instruction:
    op = w & 0xFF
    try:
        opcode = Opcode(op)
    except ValueError:
        raise DecodeError(f"invalid opcode 0x{op:02X} at word {pos}") from None
    try:
        if opcode is Opcode.SETUP:
            nbases = _field(w, 26, 3)
            if nbases != BASE_WORDS:
                raise DecodeError(f"setup at word {pos} declares {nbases} base words")
            bases = [next(it) for _ in range(BASE_WORDS)]
            return Setup(
                input_bits=_CODE_BITS[_field(w, 8, 2)], weight_bits=_CODE_BITS[_field(w, 10, 2)],
                out_bits=_CODE_BITS[_field(w, 12, 3)],
                input_signed=bool(_field(w, 15, 1)), weight_signed=bool(_field(w, 16, 1)),
                out_signed=bool(_field(w, 17, 1)), activation=ACTIVATIONS[_field(w, 18, 2)],
                shift=_field(w, 20, 6), ibase=bases[0], wbase=bases[1], pbase=bases[2], obase=bases[3],
            )
        if opcode is Opcode.BLOCK_END:
            return BlockEnd(_field(w, 8, 32))
        if opcode is Opcode.LOOP:
            return Loop(_field(w, 8, 8), _field(w, 16, 32), _field(w, 48, 16))
        if opcode is Opcode.COMPUTE:
            return Compute(ComputeOp(_field(w, 8, 2)))
        if opcode is Opcode.GEN_ADDR:
            return GenAddr(Target(_field(w, 8, 3)), _field(w, 11, 8), _field(w, 19, _STRIDE_BITS))
        if opcode in (Opcode.LD_MEM, Opcode.ST_MEM):
            cls = LdMem if opcode is Opcode.LD_MEM else StMem
            return cls(Buf(_field(w, 8, 2)), _field(w, 10, 32))
        cls = RdBuf if opcode is Opcode.RD_BUF else WrBuf
        return cls(Buf(_field(w, 8, 2)))
    except StopIteration:
        raise DecodeError(f"stream truncated inside setup at word {pos}") from None
    except (KeyError, IndexError, ValueError) as e:
        if isinstance(e, DecodeError):
            raise
        raise DecodeError(f"malformed {opcode.name.lower()} at word {pos}: {e}") from None


def decode(data: bytes) -> list[InstructionBlock]:
    if not data:
        return []
    if len(data) < 9 or data[:4] != MAGIC:
        raise DecodeError("missing BFIS header")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}")
    if len(data) != 9 + 8 * count:
        raise DecodeError(f"expected {count} words, stream holds {(len(data) - 9) / 8:g}")
    words = struct.unpack_from(f"<{count}Q", data, 9)
    it = iter(words)
    blocks, current = [], None
    pos = 0
    for w in it:
        ins = _decode_word(w, it, pos)
        at = pos
        pos += 1 + (BASE_WORDS if isinstance(ins, Setup) else 0)
        if isinstance(ins, Setup):
            if current is not None:
                raise DecodeError(f"setup at word {at} inside an open block")
            current = [ins]
        elif current is None:
            raise DecodeError(f"{ins.mnemonic} outside a block at word {at}")
        else:
            current.append(ins)
            if isinstance(ins, BlockEnd):
                blocks.append(InstructionBlock(current))
                current = None
    if current is not None:
        raise DecodeError("stream truncated: block without block-end")
    return blocks
