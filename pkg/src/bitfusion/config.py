"""Architecture configuration shared by the compiler, simulator and CLI."""

from dataclasses import asdict, dataclass, fields
import os
from pathlib import Path

import yaml

from .array import ArrayGeometry

CONFIG_ENV = "BITFUSION_CONFIG"
KIB = 8 * 1024


@dataclass(frozen=True)
class ArchConfig:
    rows: int = 32
    cols: int = 16
    ibuf_bits: int = 32 * KIB
    wbuf_bits: int = 48 * KIB
    obuf_bits: int = 32 * KIB
    buffer_access_bits: int = 32
    bandwidth: int = 128  # bits per cycle
    latency: int = 8  # cycles per transfer initiation
    frequency_mhz: float = 500.0
    double_buffer: bool = True
    energy_table: str | None = None

    def __post_init__(self):
        for f in ("rows", "cols", "ibuf_bits", "wbuf_bits", "obuf_bits", "buffer_access_bits", "bandwidth"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.latency < 0 or self.frequency_mhz <= 0:
            raise ValueError("latency must be nonnegative and frequency positive")

    @property
    def geometry(self) -> ArrayGeometry:
        return ArrayGeometry(self.rows, self.cols, buffer_access_bits=self.buffer_access_bits)

    def capacity(self, buf: str) -> int:
        return {"IBUF": self.ibuf_bits, "WBUF": self.wbuf_bits, "OBUF": self.obuf_bits}[buf]

    def slot_bits(self, buf: str) -> int:
        """Capacity available to one tile (half the buffer when double-buffered)."""
        cap = self.capacity(buf)
        return cap // 2 if self.double_buffer else cap

    def replace(self, **changes) -> "ArchConfig":
        return ArchConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown arch config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path=None) -> "ArchConfig":
        """Load YAML; falls back to $BITFUSION_CONFIG, then to built-in defaults."""
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            return cls()
        data = yaml.safe_load(Path(path).read_text()) or {}
        cfg = cls.from_dict(data)
        if cfg.energy_table and not Path(cfg.energy_table).is_absolute():
            cfg = cfg.replace(energy_table=str(Path(path).parent / cfg.energy_table))
        return cfg
