"""Off-chip memory image: a flat little-endian byte store plus a tensor manifest.

On disk an image is two files: ``<name>.bin`` (raw bytes) and ``<name>.json``
(the manifest). Elements narrower than a byte are packed little-endian within
each byte, lowest element in the lowest bits.
"""

from dataclasses import asdict, dataclass
import json
import math
from pathlib import Path

import numpy as np

from .numeric import check_range

ALIGN = 8


@dataclass(frozen=True)
class TensorInfo:
    name: str
    offset: int
    shape: tuple
    bits: int
    signed: bool

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return math.ceil(self.size * self.bits / 8)


class MemoryImage:
    def __init__(self, size: int = 0):
        self.data = np.zeros(size, dtype=np.uint8)
        self.tensors: dict[str, TensorInfo] = {}

    @property
    def size(self) -> int:
        return len(self.data)

    def copy(self) -> "MemoryImage":
        other = MemoryImage()
        other.data = self.data.copy()
        other.tensors = dict(self.tensors)
        return other

    def allocate(self, name: str, shape, bits: int, signed: bool, values=None) -> TensorInfo:
        if name in self.tensors:
            raise ValueError(f"tensor {name!r} already allocated")
        shape = tuple(int(s) for s in shape)
        offset = math.ceil(self.size / ALIGN) * ALIGN
        info = TensorInfo(name, offset, shape, bits, signed)
        self.data = np.concatenate([self.data, np.zeros(offset + info.nbytes - self.size, dtype=np.uint8)])
        self.tensors[name] = info
        if values is not None:
            self.set_tensor(name, values)
        return info

    def set_tensor(self, name: str, values):
        info = self.tensors[name]
        v = np.asarray(values, dtype=np.int64).reshape(-1)
        if v.size != info.size:
            raise ValueError(f"tensor {name!r} expects {info.size} values, got {v.size}")
        check_range(v, info.bits, info.signed, name)
        self.write(info.offset, np.arange(info.size), v, info.bits)

    def tensor(self, name: str) -> np.ndarray:
        info = self.tensors[name]
        return self.read(info.offset, np.arange(info.size), info.bits, info.signed).reshape(info.shape)

    def _bounds(self, base: int, idx: np.ndarray, bits: int):
        if idx.size == 0:
            return
        lo = base * 8 + int(idx.min()) * bits
        hi = base * 8 + (int(idx.max()) + 1) * bits
        if lo < 0 or hi > self.size * 8:
            raise IndexError(f"address range [{lo // 8}, {math.ceil(hi / 8)}) outside image of {self.size} bytes")

    def read(self, base: int, idx, bits: int, signed: bool) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        self._bounds(base, idx, bits)
        if bits < 8:
            bit = idx * bits
            raw = (self.data[base + bit // 8].astype(np.int64) >> (bit % 8)) & ((1 << bits) - 1)
        else:
            nb = bits // 8
            raw = np.zeros(idx.shape, dtype=np.int64)
            for j in range(nb):
                raw |= self.data[base + idx * nb + j].astype(np.int64) << (8 * j)
        if signed:
            raw = np.where(raw >= (1 << (bits - 1)), raw - (1 << bits), raw)
        return raw

    def write(self, base: int, idx, values, bits: int):
        idx = np.asarray(idx, dtype=np.int64)
        v = np.asarray(values, dtype=np.int64) & ((1 << bits) - 1)
        self._bounds(base, idx, bits)
        if bits < 8:
            bit = idx * bits
            byte = base + bit // 8
            sh = bit % 8
            for lane in np.unique(sh):
                sel = sh == lane
                mask = np.uint8(((1 << bits) - 1) << int(lane))
                cur = self.data[byte[sel]] & ~mask
                self.data[byte[sel]] = cur | (v[sel] << int(lane)).astype(np.uint8)
        else:
            nb = bits // 8
            for j in range(nb):
                self.data[base + idx * nb + j] = ((v >> (8 * j)) & 0xFF).astype(np.uint8)

    def save(self, stem):
        stem = Path(stem)
        stem.with_suffix(".bin").write_bytes(self.data.tobytes())
        manifest = {"size": self.size, "tensors": [asdict(t) for t in self.tensors.values()]}
        stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, stem) -> "MemoryImage":
        stem = Path(stem)
        img = cls()
        img.data = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype=np.uint8).copy()
        manifest = json.loads(stem.with_suffix(".json").read_text())
        for t in manifest["tensors"]:
            t["shape"] = tuple(t["shape"])
            img.tensors[t["name"]] = TensorInfo(**t)
        return img
