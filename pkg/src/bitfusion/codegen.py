"""Lowering of layer descriptors into Fusion-ISA blocks.

Every layer is first expressed as a loop nest (``Nest``): named dimensions,
affine tensor accesses, and the post-processing applied when outputs drain.
``emit`` turns a nest plus a ``Schedule`` into a block:

* untiled: one loop per dimension, one-word ld/compute/st at the innermost
  level, partial sums round-tripping through memory;
* tiled: an outer loop per dimension walks tiles, an inner loop per dimension
  walks a tile. Each tensor's ld-mem sits just inside the deepest outer loop
  its address depends on, so it is reloaded only when its tile changes.

The scheduling passes (``tile_loops``, ``order_loops``, ``fuse_layers``) work
on the nest attached to a block and re-emit it.
"""

from dataclasses import dataclass, field, replace
import math
from pathlib import Path

import numpy as np
import yaml

from .config import ArchConfig
from .fusion import BITWIDTHS
from .isa import (Buf, BUF_TARGET, BlockEnd, Compute, ComputeOp, GenAddr, InstructionBlock, LdMem, Loop,
                  MEM_TARGET, RdBuf, Setup, StMem, WrBuf, check)
from .memimage import MemoryImage
from .refmodel import conv_ref, gemm_ref, pool_ref, post_ref
from .sim import _grid

KINDS = ("fc", "conv", "pool", "activation", "recurrent_gemm")
STATIONARITIES = ("output", "weight", "input")
UNSUPPORTED_ACTIVATIONS = ("sigmoid", "tanh")


class ScheduleError(ValueError):
    pass


class FusionError(ValueError):
    pass


# -- layer descriptors ------------------------------------------------------------

@dataclass(frozen=True)
class LayerDescriptor:
    kind: str
    name: str = "layer"
    batch: int = 1
    # fc
    in_features: int = 0
    out_features: int = 0
    # conv / pool (NHWC, valid padding)
    height: int = 0
    width: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int | None = None  # conv default 1, pool default window
    window: int = 2
    # activation / requantization applied when outputs drain
    activation: str = "relu"
    shift: int = 0
    out_bits: int = 8
    out_signed: bool = False
    shape: tuple = ()  # activation on a raw tensor that is not produced by a previous layer
    # recurrent_gemm: h_t = act(W x [x_t | h_{t-1}])
    input_size: int = 0
    hidden_size: int = 0
    steps: int = 0
    # operands
    input_bits: int = 8
    weight_bits: int = 8
    input_signed: bool = False
    weight_signed: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.input_bits not in BITWIDTHS or self.weight_bits not in BITWIDTHS:
            raise ValueError(f"{self.name}: bitwidths must be in {BITWIDTHS}")
        if self.out_bits not in BITWIDTHS + (32,):
            raise ValueError(f"{self.name}: out_bits must be in {BITWIDTHS + (32,)}")
        if self.activation in UNSUPPORTED_ACTIVATIONS:
            raise ValueError(f"{self.name}: {self.activation} is not supported on the array (host-side op)")
        if self.activation not in ("none", "relu"):
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")
        if min(self.batch, self.in_features, self.out_features, self.height, self.width, self.in_channels,
               self.out_channels, self.input_size, self.hidden_size, self.steps, self.shift) < 0:
            raise ValueError(f"{self.name}: shape fields must be nonnegative")

    def validate(self) -> "LayerDescriptor":
        """Shape checks; fields left at 0 may be filled from the previous layer first."""
        need = {
            "fc": ("batch", "in_features", "out_features"),
            "conv": ("batch", "height", "width", "in_channels", "out_channels", "kernel"),
            "pool": ("batch", "height", "width", "in_channels", "window"),
            "activation": (),
            "recurrent_gemm": ("batch", "input_size", "hidden_size", "steps"),
        }[self.kind]
        for f in need:
            if getattr(self, f) <= 0:
                raise ValueError(f"{self.name}: {f} must be positive")
        if self.stride is not None and self.stride <= 0:
            raise ValueError(f"{self.name}: stride must be positive")
        if self.kind == "activation" and (not self.shape or any(s <= 0 for s in self.shape)):
            raise ValueError(f"{self.name}: shape must be positive")
        if self.kind in ("conv", "pool") and min(self.out_shape[1:3]) < 1:
            raise ValueError(f"{self.name}: window larger than input")
        if self.kind == "recurrent_gemm":
            if self.input_signed:
                raise ValueError(f"{self.name}: recurrent state is relu output, so inputs must be unsigned")
            if (self.input_size * self.input_bits) % 8 or (self.hidden_size * self.input_bits) % 8:
                raise ValueError(f"{self.name}: input_size and hidden_size must fill whole bytes")
        return self

    @property
    def step(self) -> int:
        if self.stride is not None:
            return self.stride
        return self.window if self.kind == "pool" else 1

    @property
    def in_shape(self) -> tuple:
        k = self.kind
        if k == "fc":
            return (self.batch, self.in_features)
        if k in ("conv", "pool"):
            return (self.batch, self.height, self.width, self.in_channels)
        if k == "activation":
            return tuple(self.shape)
        return (self.steps + 1, self.batch, self.input_size + self.hidden_size)

    @property
    def out_shape(self) -> tuple:
        k = self.kind
        if k == "fc":
            return (self.batch, self.out_features)
        if k in ("conv", "pool"):
            kk = self.kernel if k == "conv" else self.window
            oh = (self.height - kk) // self.step + 1
            ow = (self.width - kk) // self.step + 1
            return (self.batch, oh, ow, self.out_channels if k == "conv" else self.in_channels)
        return self.in_shape

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "fc":
            return (self.in_features, self.out_features)
        if self.kind == "conv":
            return (self.kernel, self.kernel, self.in_channels, self.out_channels)
        if self.kind == "recurrent_gemm":
            return (self.input_size + self.hidden_size, self.hidden_size)
        return ()

    @property
    def out_format(self) -> tuple[int, bool]:
        if self.kind in ("fc", "conv"):
            return 32, True
        if self.kind == "activation":
            return self.out_bits, self.out_signed
        return self.input_bits, self.input_signed

    @classmethod
    def from_dict(cls, data: dict) -> "LayerDescriptor":
        d = dict(data)
        if "shape" in d:
            d["shape"] = tuple(d["shape"])
        return cls(**d)


# -- loop-nest IR -----------------------------------------------------------------

def _row_major(shape) -> tuple:
    strides, acc = [], 1
    for s in reversed(shape):
        strides.append(acc)
        acc *= s
    return tuple(reversed(strides))


@dataclass(frozen=True)
class Access:
    """Affine view of a tensor: element index of view dim k = sum(coeff * iterator) over index[k]."""
    tensor: str
    shape: tuple
    index: tuple  # per view dim: tuple of (dim, coeff)
    offset: int = 0  # element offset of the view inside the tensor
    buf_index: tuple | None = None  # on-chip layout, when it differs from the memory index

    def mem_stride(self, dim: str) -> int:
        return sum(c * s for terms, s in zip(self.index, _row_major(self.shape)) for d, c in terms if d == dim)

    def depends(self, dim: str) -> bool:
        return any(d == dim for terms in (self.buf_index or self.index) for d, _ in terms)

    def box(self, tiles: dict) -> tuple:
        return tuple(sum(c * (tiles[d] - 1) for d, c in terms) + 1 for terms in (self.buf_index or self.index))

    def buf_stride(self, dim: str, tiles: dict) -> int:
        strides = _row_major(self.box(tiles))
        return sum(c * s for terms, s in zip(self.buf_index or self.index, strides) for d, c in terms if d == dim)

    def renamed(self, tensor: str) -> "Access":
        return replace(self, tensor=tensor)


def _identity(tensor: str, shape, dims) -> Access:
    return Access(tensor, tuple(shape), tuple(((d, 1),) if d else () for d in dims))


@dataclass
class Nest:
    name: str
    op: str  # "mul_add", "max" or "copy"
    dims: dict  # canonical order -> extent
    reduce: tuple
    output: Access
    input: Access | None = None
    weight: Access | None = None
    psum: Access | None = None  # OBUF fill source: zero seed for mul_add, the raw tensor for copy
    input_bits: int = 8
    input_signed: bool = False
    weight_bits: int = 8
    weight_signed: bool = True
    out_bits: int = 32
    out_signed: bool = True
    activation: str = "none"
    shift: int = 0
    pinned: dict = field(default_factory=dict)  # dims whose tile must be the full extent
    pool: int = 0  # window of a fused max-pool

    @property
    def post_trivial(self) -> bool:
        return (self.activation == "none" and self.shift == 0 and self.out_bits == 32
                and self.out_signed and not self.pool)

    def accesses(self):
        for buf, acc in ((Buf.IBUF, self.input), (Buf.WBUF, self.weight), (Buf.OBUF, self.output)):
            if acc is not None:
                yield buf, acc

    def elem_bits(self, buf: Buf) -> int:
        return {Buf.IBUF: self.input_bits, Buf.WBUF: self.weight_bits, Buf.OBUF: 32}[buf]


@dataclass(frozen=True)
class Schedule:
    stationarity: str = "output"
    tiles: dict | None = None  # dim -> tile size; None picks by the capacity policy
    order: tuple | None = None  # outer-loop order; None derives it from stationarity
    tiled: bool = True

    def __post_init__(self):
        if self.stationarity not in STATIONARITIES:
            raise ValueError(f"stationarity must be one of {STATIONARITIES}")


@dataclass
class Lowered:
    nest: Nest
    sched: Schedule
    layout: dict
    arch: ArchConfig


def stationary_order(nest: Nest, stationarity: str) -> tuple:
    """Loops the stationary tensor depends on go outermost, the rest inside."""
    dims = list(nest.dims)
    if nest.op != "mul_add" or stationarity == "output":
        keep = [d for d in dims if d not in nest.reduce]
    else:
        acc = nest.weight if stationarity == "weight" else nest.input
        keep = [d for d in dims if acc.depends(d)]
    return tuple(keep + [d for d in dims if d not in keep])


# -- tiling --------------------------------------------------------------------

def _candidates(extent: int):
    out = [1 << i for i in range(extent.bit_length()) if extent % (1 << i) == 0]
    if out[-1] != extent:
        out.append(extent)
    return out


def _fits(nest: Nest, tiles: dict, arch: ArchConfig) -> bool:
    return all(math.prod(acc.box(tiles)) * nest.elem_bits(buf) <= arch.slot_bits(buf.name)
               for buf, acc in nest.accesses())


def choose_tiles(nest: Nest, order, arch: ArchConfig) -> dict:
    """Largest power-of-two tile (or the full extent) per loop that fits, innermost loop first."""
    tiles = {d: nest.pinned.get(d, 1) for d in nest.dims}
    if not _fits(nest, tiles, arch):
        raise ScheduleError(f"{nest.name}: no feasible tile size fits the scratchpads")
    for d in reversed(order):
        if d in nest.pinned:
            continue
        for t in reversed(_candidates(nest.dims[d])):
            if _fits(nest, {**tiles, d: t}, arch):
                tiles[d] = t
                break
    return tiles


def _resolve(nest: Nest, sched: Schedule, arch: ArchConfig):
    order = tuple(sched.order) if sched.order else stationary_order(nest, sched.stationarity)
    if sorted(order) != sorted(nest.dims):
        raise ScheduleError(f"{nest.name}: loop order {order} is not a permutation of {tuple(nest.dims)}")
    if not sched.tiled:
        return order, None
    if sched.tiles is None:
        tiles = choose_tiles(nest, order, arch)
    else:
        tiles = {d: sched.tiles.get(d, nest.dims[d]) for d in nest.dims}
        for d, t in tiles.items():
            if t < 1 or nest.dims[d] % t:
                raise ScheduleError(f"{nest.name}: tile {t} does not divide extent {nest.dims[d]} of {d}")
            if d in nest.pinned and t != nest.pinned[d]:
                raise ScheduleError(f"{nest.name}: loop {d} must keep tile {nest.pinned[d]}")
        if not _fits(nest, tiles, arch):
            raise ScheduleError(f"{nest.name}: tile exceeds scratchpad capacity")
    return order, tiles


# -- emission ------------------------------------------------------------------

@dataclass
class _L:
    loop_id: int
    n: int
    children: list


def _flatten(items) -> list:
    out = []
    for it in items:
        if isinstance(it, _L):
            body = _flatten(it.children)
            out.append(Loop(it.loop_id, it.n, len(body)))
            out.extend(body)
        else:
            out.append(it)
    return out


def _base(layout: dict, acc: Access | None) -> int:
    if acc is None:
        return 0
    info = layout[acc.tensor]
    bit = acc.offset * info.bits
    if bit % 8:
        raise ScheduleError(f"view of {acc.tensor} does not start on a byte boundary")
    return info.offset + bit // 8


def _spills(nest: Nest, order, outer: dict) -> bool:
    """True when a reduction tile loop sits outside the output tile, so partial sums leave the chip."""
    deps = [i for i, d in enumerate(order) if outer[d] > 1 and nest.output.mem_stride(d)]
    pos = max(deps, default=-1)
    return any(outer[d] > 1 and order.index(d) < pos for d in nest.reduce)


def emit(nest: Nest, sched: Schedule, layout, arch: ArchConfig) -> InstructionBlock:
    tensors = getattr(layout, "tensors", layout)
    order, tiles = _resolve(nest, sched, arch)
    outer = {d: nest.dims[d] // tiles[d] for d in order} if tiles else dict(nest.dims)
    spill = _spills(nest, order, outer) if tiles else any(nest.dims[d] > 1 for d in nest.reduce)
    if spill and (nest.op != "mul_add" or not nest.post_trivial):
        raise ScheduleError(f"{nest.name}: loop order reduces outside the output tile, but "
                            "post-processing (activation, requantize, pooling) needs complete sums")
    psum = nest.output if spill else nest.psum
    setup = Setup(nest.input_bits, nest.weight_bits, nest.input_signed, nest.weight_signed,
                  nest.out_bits, nest.out_signed, nest.activation, nest.shift,
                  _base(tensors, nest.input), _base(tensors, nest.weight), _base(tensors, psum),
                  _base(tensors, nest.output))
    accs = list(nest.accesses())
    loads = [b for b, _ in accs if b != Buf.OBUF] + ([Buf.OBUF] if psum is not None else [])
    has_compute = nest.op != "copy"
    op = ComputeOp.MAX if nest.op == "max" else ComputeOp.MUL_ADD

    def compute_ops():
        ops = [RdBuf(b) for b, _ in accs if b != Buf.OBUF]
        return ops + [Compute(op)]

    if tiles is None:
        body = [LdMem(b, 1) for b in loads]
        if has_compute:
            body += [RdBuf(Buf.OBUF)] + compute_ops() + [WrBuf(Buf.OBUF)]
        body.append(StMem(Buf.OBUF, 1))
        for i, d in reversed(list(enumerate(order))):
            gens = [GenAddr(MEM_TARGET[b], i, a.mem_stride(d)) for b, a in accs if a.mem_stride(d)]
            body = [_L(i, nest.dims[d], gens + body)]
        items = body
    else:
        n = len(order)
        words = {}
        for b, a in accs:
            bs = [a.buf_stride(d, tiles) for d in order]
            words[b] = len(np.unique(_grid([tiles[d] for d in order], [bs])[0]))
        dep = {b: max((i for i, d in enumerate(order) if outer[d] > 1 and a.mem_stride(d)), default=-1)
               for b, a in accs}
        odep = max((i for i, d in enumerate(order) if nest.output.depends(d) and tiles[d] > 1), default=-1)

        def inner(j):
            items = []
            if j > 0:
                d = order[j - 1]
                for b, a in accs:
                    if a.buf_stride(d, tiles):
                        items.append(GenAddr(BUF_TARGET[b], n + j - 1, a.buf_stride(d, tiles)))
                    if a.mem_stride(d):
                        items.append(GenAddr(MEM_TARGET[b], n + j - 1, a.mem_stride(d)))
            wrap = has_compute and odep == j - 1
            if wrap:
                items.append(RdBuf(Buf.OBUF))
            if j < n:
                items.append(_L(n + j, tiles[order[j]], inner(j + 1)))
            elif has_compute:
                items += compute_ops()
            if wrap:
                items.append(WrBuf(Buf.OBUF))
            return items

        def outer_body(j):
            items = []
            if j > 0:
                d = order[j - 1]
                for b, a in accs:
                    if a.mem_stride(d) and outer[d] > 1:
                        items.append(GenAddr(MEM_TARGET[b], j - 1, a.mem_stride(d) * tiles[d]))
            items += [LdMem(b, words[b]) for b in loads if dep[b] == j - 1]
            if j < n:
                items.append(_L(j, outer[order[j]], outer_body(j + 1)))
            else:
                items += inner(0)
            if dep[Buf.OBUF] == j - 1:
                items.append(StMem(Buf.OBUF, words[Buf.OBUF]))
            return items

        items = outer_body(0)
    block = InstructionBlock([setup] + _flatten(items) + [BlockEnd()], name=nest.name)
    check(block)
    block.nest = Lowered(nest, replace(sched, order=order, tiles=tiles), layout, arch)
    return block


# -- layer -> nests ----------------------------------------------------------------

def _seed(tensor: str) -> str:
    return f"{tensor}.zero"


def _spatial(layer: LayerDescriptor, x: str, out: str):
    n, h, w, c = layer.in_shape
    _, oh, ow, oc = layer.out_shape
    k = layer.kernel if layer.kind == "conv" else layer.window
    s = layer.step
    nd = "n" if n > 1 else None
    dims = ({"n": n} if nd else {})
    dims.update(oh=oh, ow=ow)
    ch = "oc" if layer.kind == "conv" else "c"
    dims[ch] = oc
    if layer.kind == "conv":
        dims["ic"] = c
    dims.update(kh=k, kw=k)
    nt = ((nd, 1),) if nd else ()
    in_ch = "ic" if layer.kind == "conv" else "c"
    xin = Access(x, (n, h, w, c), (nt, (("oh", s), ("kh", 1)), (("ow", s), ("kw", 1)), ((in_ch, 1),)))
    o = Access(out, (n, oh, ow, oc), (nt, (("oh", 1),), (("ow", 1),), ((ch, 1),)))
    return dims, xin, o


def layer_nests(layer: LayerDescriptor, x: str, out: str, w: str | None = None) -> list[Nest]:
    """Nests for one layer reading tensor ``x`` and writing ``out`` (``w`` holds weights)."""
    k = layer.kind
    operands = dict(input_bits=layer.input_bits, input_signed=layer.input_signed,
                    weight_bits=layer.weight_bits, weight_signed=layer.weight_signed)
    if k == "fc":
        b, ic = layer.in_shape
        oc = layer.out_features
        o = _identity(out, (b, oc), ("b", "oc"))
        return [Nest(layer.name, "mul_add", {"b": b, "oc": oc, "ic": ic}, ("ic",), o,
                     _identity(x, (b, ic), ("b", "ic")), _identity(w, (ic, oc), ("ic", "oc")),
                     o.renamed(_seed(out)), **operands)]
    if k == "conv":
        dims, xin, o = _spatial(layer, x, out)
        wt = _identity(w, layer.weight_shape, ("kh", "kw", "ic", "oc"))
        return [Nest(layer.name, "mul_add", dims, ("ic", "kh", "kw"), o, xin, wt, o.renamed(_seed(out)),
                     **operands)]
    if k == "pool":
        dims, xin, o = _spatial(layer, x, out)
        return [Nest(layer.name, "max", dims, ("kh", "kw"), o, xin, None, None,
                     input_bits=layer.input_bits, input_signed=layer.input_signed,
                     out_bits=layer.input_bits, out_signed=layer.input_signed)]
    if k == "activation":
        shape = layer.in_shape
        names = tuple(f"e{i}" for i in range(len(shape)))
        return [Nest(layer.name, "copy", dict(zip(names, shape)), (), _identity(out, shape, names),
                     psum=_identity(x, shape, names), activation=layer.activation, shift=layer.shift,
                     out_bits=layer.out_bits, out_signed=layer.out_signed)]
    # recurrent_gemm: Z[t] = [x_t | h_{t-1}], h_t written into Z[t + 1][:, ix:]
    t1, b, width = layer.in_shape
    ix, hs = layer.input_size, layer.hidden_size
    nests = []
    for t in range(layer.steps):
        zin = Access(x, (b, width), ((("b", 1),), (("ic", 1),)), offset=t * b * width)
        zout = Access(x, (b, width), ((("b", 1),), (("oc", 1),)), offset=(t + 1) * b * width + ix)
        nests.append(Nest(f"{layer.name}.t{t}", "mul_add", {"b": b, "oc": hs, "ic": width}, ("ic",), zout,
                          zin, _identity(w, (width, hs), ("ic", "oc")), zout.renamed(_seed(x)),
                          out_bits=layer.input_bits, out_signed=False, activation="relu",
                          shift=layer.shift, **operands))
    return nests


def split_post(nest: Nest, raw: str) -> list[Nest]:
    """A mul_add nest with post-processing as a raw-psum nest plus a copy nest that applies it."""
    gemm = replace(nest, output=nest.output.renamed(raw), psum=nest.output.renamed(_seed(raw)),
                   out_bits=32, out_signed=True, activation="none", shift=0)
    keep = [d for d in nest.dims if d not in nest.reduce]
    copy = Nest(f"{nest.name}.post", "copy", {d: nest.dims[d] for d in keep}, (), nest.output,
                psum=nest.output.renamed(raw), activation=nest.activation, shift=nest.shift,
                out_bits=nest.out_bits, out_signed=nest.out_signed)
    return [gemm, copy]


def _ensure(img: MemoryImage, acc: Access | None, bits: int, signed: bool, like: str | None = None):
    """Allocate the tensor behind ``acc`` unless present; ``like`` borrows another tensor's shape."""
    if acc is None or acc.tensor in img.tensors:
        return
    shape = img.tensors[like].shape if like in img.tensors else acc.shape
    img.allocate(acc.tensor, shape, bits, signed)


def _ensure_nest(img: MemoryImage, nest: Nest):
    if nest.input is not None:
        _ensure(img, nest.input, nest.input_bits, nest.input_signed)
    if nest.weight is not None:
        _ensure(img, nest.weight, nest.weight_bits, nest.weight_signed)
    _ensure(img, nest.output, nest.out_bits, nest.out_signed)
    if nest.psum is not None:
        _ensure(img, nest.psum, 32, True, like=nest.output.tensor)


def _lower_parts(nest: Nest, sched: Schedule, img: MemoryImage, arch: ArchConfig) -> list:
    """Emit ``nest``; if its order spills partial sums, emit raw GEMM plus a post-processing block."""
    _ensure_nest(img, nest)
    try:
        return [emit(nest, sched, img, arch)]
    except ScheduleError:
        if nest.post_trivial or nest.op != "mul_add":
            raise
    parts = split_post(nest, f"{nest.output.tensor}.raw")
    for part in parts:
        _ensure(img, part.output, part.out_bits, part.out_signed, like=nest.output.tensor)
        _ensure(img, part.psum, 32, True, like=nest.output.tensor)
    return [emit(p, sched, img, arch) for p in parts]


def lower_layer(layer: LayerDescriptor, arch: ArchConfig, sched: Schedule = Schedule(), layout=None,
                x: str = "input", out: str = "output") -> list[InstructionBlock]:
    """All blocks for one layer; recurrent layers give one block per time step.

    Tensors missing from ``layout`` (a MemoryImage; a fresh one by default) are
    allocated zero-filled. The image is kept on each block as ``block.nest.layout``.
    """
    layer.validate()
    img = layout if layout is not None else MemoryImage()
    w = f"{layer.name}.w" if layer.weight_shape else None
    if layer.kind == "recurrent_gemm":
        out = x
        if x not in img.tensors:
            img.allocate(x, layer.in_shape, layer.input_bits, layer.input_signed)
    if w is not None and w not in img.tensors:
        img.allocate(w, layer.weight_shape, layer.weight_bits, layer.weight_signed)
    if layer.kind == "activation" and x not in img.tensors:
        img.allocate(x, layer.in_shape, 32, True)
    blocks = []
    for nest in layer_nests(layer, x, out, w):
        blocks += _lower_parts(nest, sched, img, arch)
    return blocks


def lower(layer: LayerDescriptor, arch: ArchConfig, sched: Schedule = Schedule(), layout=None,
          x: str = "input", out: str = "output") -> InstructionBlock:
    blocks = lower_layer(layer, arch, sched, layout, x, out)
    if len(blocks) != 1:
        raise ScheduleError(f"{layer.name} lowers to {len(blocks)} blocks; use lower_layer")
    return blocks[0]


# -- scheduling passes ----------------------------------------------------------

def _lowered(block: InstructionBlock) -> Lowered:
    if not isinstance(block.nest, Lowered):
        raise ScheduleError("block carries no loop nest; only compiler-built blocks can be rescheduled")
    return block.nest


def tile_loops(block: InstructionBlock, capacities=None, tiles: dict | None = None) -> InstructionBlock:
    """Re-emit with tiled loops. ``capacities`` is an ArchConfig or a dict of buffer bits."""
    lw = _lowered(block)
    arch = lw.arch
    if isinstance(capacities, ArchConfig):
        arch = capacities
    elif capacities:
        arch = arch.replace(**{f"{k.lower()}_bits": v for k, v in capacities.items()})
    return emit(lw.nest, replace(lw.sched, tiled=True, tiles=tiles), lw.layout, arch)


def order_loops(block: InstructionBlock, stationarity: str) -> InstructionBlock:
    lw = _lowered(block)
    sched = replace(lw.sched, stationarity=stationarity, order=None,
                    tiles=None if lw.sched.tiled else lw.sched.tiles)
    return emit(lw.nest, sched, lw.layout, lw.arch)


def _fuse_pool(nest: Nest, pool: Nest, window: int) -> Nest:
    p = window

    def sub(terms, dim, a, b):
        out = []
        for d, c in terms:
            out += [(a, c * p), (b, c)] if d == dim else [(d, c)]
        return tuple(out)

    def conv_space(index):
        return tuple(sub(sub(t, "oh", "ph", "py"), "ow", "pw", "px") for t in index)

    dims = {}
    for d, e in nest.dims.items():
        if d == "oh":
            dims.update(ph=pool.dims["oh"], py=p)
        elif d == "ow":
            dims.update(pw=pool.dims["ow"], px=p)
        else:
            dims[d] = e
    o = nest.output
    pooled = Access(pool.output.tensor, pool.output.shape,
                    tuple(tuple(("ph" if d == "oh" else "pw" if d == "ow" else d, c) for d, c in t)
                          for t in o.index), buf_index=conv_space(o.index))
    x = replace(nest.input, index=conv_space(nest.input.index))
    return replace(nest, name=f"{nest.name}+{pool.name}", dims=dims, output=pooled, input=x,
                   psum=pooled.renamed(_seed(pool.output.tensor)), pinned={"py": p, "px": p}, pool=p)


def fuse_layers(blocks) -> InstructionBlock:
    """Merge a systolic-array layer with the activation/pool layers that follow it into one block."""
    lws = [_lowered(b) for b in blocks]
    if not lws:
        raise FusionError("nothing to fuse")
    head = lws[0].nest
    nest = head
    for lw in lws[1:]:
        nxt = lw.nest
        if nxt.op == "mul_add":
            raise FusionError(f"{nest.name} and {nxt.name} both need the systolic array")
        if nxt.op == "copy":
            if nest.op != "mul_add" or not nest.post_trivial or nxt.psum.tensor != nest.output.tensor:
                raise FusionError(f"{nxt.name} does not post-process the raw output of {nest.name}")
            nest = replace(nest, name=f"{nest.name}+{nxt.name}", output=nest.output.renamed(nxt.output.tensor),
                           activation=nxt.activation, shift=nxt.shift, out_bits=nxt.out_bits,
                           out_signed=nxt.out_signed)
            continue
        # max pool on the column post units, drained from the output buffer
        if nest.op != "mul_add" or "kh" not in nest.dims or nest.pool:
            raise FusionError(f"{nxt.name} can only fuse after a convolution")
        if nxt.input.tensor != nest.output.tensor:
            raise FusionError(f"{nxt.name} does not consume the output of {nest.name}")
        win = nxt.dims["kh"]
        step = nxt.input.index[1][0][1]
        if step != win:
            raise FusionError(f"{nxt.name}: overlapping pooling windows cannot merge on drain")
        if nest.post_trivial:
            raise FusionError(f"{nxt.name} pools requantized values; fuse the activation first")
        nest = _fuse_pool(nest, nxt, win)
    lw = lws[0]
    layout = lw.layout
    if isinstance(layout, MemoryImage):
        _ensure(layout, nest.psum, 32, True, like=nest.output.tensor)
    elif nest.psum.tensor not in layout:
        raise FusionError(f"layout has no zero-seed tensor {nest.psum.tensor!r}")
    sched = replace(lw.sched, tiles=None, order=None)
    try:
        return emit(nest, sched, layout, lw.arch)
    except ScheduleError as e:
        raise FusionError(str(e)) from None


# -- networks --------------------------------------------------------------------

@dataclass
class Network:
    layers: list
    name: str = "network"
    batch: int = 1


def load_network(path) -> Network:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if isinstance(data, list):
        data = {"layers": data}
    batch = int(data.get("batch", 1))
    layers = []
    for i, spec in enumerate(data.get("layers") or []):
        spec = dict(spec)
        spec.setdefault("name", f"l{i}")
        spec.setdefault("batch", batch)
        try:
            layers.append(LayerDescriptor.from_dict(spec))
        except (TypeError, ValueError) as e:
            raise ValueError(f"{path}: layer {i}: {e}") from None
    return Network(layers, data.get("name", Path(path).stem), batch)


@dataclass
class Program:
    blocks: list
    image: MemoryImage
    output: str
    expected: dict  # tensor name -> refmodel values
    batch: int = 1

    def mismatches(self, image: MemoryImage) -> dict:
        """Tensor name -> number of elements differing from the reference."""
        return {name: int(np.count_nonzero(image.tensor(name) != ref)) for name, ref in self.expected.items()}


def _chain(layers, batch):
    """Fill in batch and inferred input formats along the layer chain."""
    out = []
    prev = None
    for i, layer in enumerate(layers):
        changes = {"batch": batch} if layer.kind != "activation" else {}
        if prev is not None:
            bits, signed = prev.out_format
            if layer.kind == "activation":
                if prev.kind not in ("fc", "conv"):
                    raise ValueError(f"{layer.name}: activation must follow an fc or conv layer")
                changes["shape"] = prev.out_shape
            else:
                if bits == 32:
                    raise ValueError(f"{layer.name}: input is a raw 32-bit tensor; add an activation layer")
                changes.update(input_bits=bits, input_signed=signed)
        elif layer.kind == "activation" and not layer.shape:
            raise ValueError(f"{layer.name}: a leading activation layer needs a shape")
        if prev is not None and layer.kind in ("conv", "pool") and not layer.height:
            if len(prev.out_shape) != 4:
                raise ValueError(f"{layer.name}: needs a 4-d NHWC input, got {prev.out_shape}")
            _, h, w, c = prev.out_shape
            changes.update(height=h, width=w, in_channels=c)
        if prev is not None and layer.kind == "fc" and not layer.in_features:
            changes["in_features"] = math.prod(prev.out_shape) // batch
        layer = replace(layer, **changes).validate()
        if layer.kind == "recurrent_gemm" and len(layers) != 1:
            raise ValueError(f"{layer.name}: recurrent_gemm must be the only layer of its network")
        if prev is not None and math.prod(layer.in_shape) != math.prod(prev.out_shape):
            raise ValueError(f"{layer.name}: expects {layer.in_shape} but receives {prev.out_shape}")
        out.append(layer)
        prev = layer
    return out


def _random(rng, shape, bits, signed):
    lo, hi = (-(1 << (bits - 1)), (1 << (bits - 1)) - 1) if signed else (0, (1 << bits) - 1)
    return rng.integers(lo, hi, size=shape, endpoint=True, dtype=np.int64)


def _reference(layer: LayerDescriptor, x: np.ndarray, w) -> np.ndarray:
    k = layer.kind
    if k == "fc":
        return gemm_ref(x.reshape(layer.in_shape), w).values
    if k == "conv":
        return conv_ref(x.reshape(layer.in_shape), w, layer.step).values
    if k == "pool":
        return pool_ref(x.reshape(layer.in_shape), layer.window, layer.step).values
    if k == "activation":
        return post_ref(x.reshape(layer.in_shape), layer.activation, layer.shift, layer.out_bits,
                        layer.out_signed).values
    z = x.copy()
    ix = layer.input_size
    for t in range(layer.steps):
        psum = gemm_ref(z[t], w).values
        z[t + 1][:, ix:] = post_ref(psum, "relu", layer.shift, layer.input_bits, False).values
    return z


def compile_network(network, arch: ArchConfig | None = None, batch: int | None = None,
                    stationarity: str = "output", fuse: bool = True, tiled: bool = True,
                    tiles: dict | None = None, seed: int = 0, inputs=None) -> Program:
    """Lower a layer chain to blocks, a memory image with synthetic data, and reference outputs."""
    arch = arch or ArchConfig()
    if isinstance(network, Network):
        batch = batch or network.batch
        layers = network.layers
    else:
        layers = list(network)
    batch = batch or 1
    layers = _chain(layers, batch)
    rng = np.random.default_rng(seed)
    img = MemoryImage()
    expected = {}
    if not layers:
        return Program([], img, "", expected, batch)

    first = layers[0]
    x = "input"
    bits, signed = (32, True) if first.kind == "activation" else (first.input_bits, first.input_signed)
    if inputs is None:
        # raw psum inputs are drawn from a 16-bit range so requantization is not all saturation
        values = _random(rng, first.in_shape, min(bits, 16), signed)
        if first.kind == "recurrent_gemm":
            values[:, :, first.input_size:] = 0  # h_0 and all later states start at zero
            values[-1] = 0
    else:
        values = np.asarray(inputs, dtype=np.int64).reshape(first.in_shape)
    img.allocate(x, first.in_shape, bits, signed, values)
    cur = values

    sched = Schedule(stationarity, tiles, None, tiled)
    groups = []  # per layer: list of blocks
    for layer in layers:
        out = x if layer.kind == "recurrent_gemm" else f"{layer.name}.out"
        w = None
        if layer.weight_shape:
            w = _random(rng, layer.weight_shape, layer.weight_bits, layer.weight_signed)
            img.allocate(f"{layer.name}.w", layer.weight_shape, layer.weight_bits, layer.weight_signed, w)
        ref = _reference(layer, cur, w)
        nests = layer_nests(layer, x, out, f"{layer.name}.w" if w is not None else None)
        if out not in img.tensors:
            obits, osigned = layer.out_format
            img.allocate(out, layer.out_shape, obits, osigned)
        expected[out] = ref
        blocks = [part for nest in nests for part in _lower_parts(nest, sched, img, arch)]
        groups.append((layer, blocks))
        x, cur = out, ref

    final = x
    if fuse:
        groups = _fuse_groups(groups)
    blocks = [b for _, bl in groups for b in bl]
    keep = {final}
    expected = {k: v for k, v in expected.items() if k in keep}
    return Program(blocks, img, final, expected, batch)


def _fuse_groups(groups):
    """Greedy fusion: fc/conv + activation (+ non-overlapping pool after conv)."""
    out = []
    i = 0
    while i < len(groups):
        layer, blocks = groups[i]
        if layer.kind in ("fc", "conv") and len(blocks) == 1:
            chain = list(blocks)
            j = i + 1
            fused = None
            for kind in ("activation", "pool"):
                if j < len(groups) and groups[j][0].kind == kind and len(groups[j][1]) == 1:
                    try:
                        candidate = fuse_layers(chain + groups[j][1])
                    except FusionError:
                        break
                    chain.append(groups[j][1][0])
                    fused = candidate
                    j += 1
                else:
                    break
            if fused is not None:
                out.append((layer, [fused]))
                i = j
                continue
        out.append(groups[i])
        i += 1
    return out
