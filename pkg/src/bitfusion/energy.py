"""Per-component energy from simulator counters and a per-access cost table.

Energy-table files are YAML mappings; every key carries its unit::

    brick_op_pj: 0.05              # pJ per 2-bit brick multiply-add
    shift_add_pj: 0.03             # pJ per shift-add level activation
    ibuf_read_pj_per_bit: 0.08     # likewise ibuf_write, wbuf_*, obuf_*
    dram_pj_per_bit: 15.0          # pJ per off-chip bit moved
    register_fill_pj: 0.4          # pJ per row-register fill (data-array read)
    static_power_mw: 40.0          # mW of leakage
    frequency_mhz: 500.0           # MHz, converts cycles to seconds

Omitted keys default to the built-in table, which is illustrative only. It
comes from no synthesis run.
"""

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

COMPONENTS = ("compute", "ibuf", "wbuf", "obuf", "dram", "leakage")


@dataclass(frozen=True)
class EnergyTable:
    # illustrative defaults, not measured values
    brick_op_pj: float = 0.05
    shift_add_pj: float = 0.03
    ibuf_read_pj_per_bit: float = 0.08
    ibuf_write_pj_per_bit: float = 0.09
    wbuf_read_pj_per_bit: float = 0.06
    wbuf_write_pj_per_bit: float = 0.07
    obuf_read_pj_per_bit: float = 0.08
    obuf_write_pj_per_bit: float = 0.09
    dram_pj_per_bit: float = 15.0
    register_fill_pj: float = 0.4
    static_power_mw: float = 40.0
    frequency_mhz: float = 500.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"energy table entry {f.name} must be >= 0")
        if self.frequency_mhz <= 0:
            raise ValueError("frequency_mhz must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "EnergyTable":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown energy table keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    @classmethod
    def load(cls, path) -> "EnergyTable":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EnergyBreakdown:
    compute: float
    ibuf: float
    wbuf: float
    obuf: float
    dram: float
    leakage: float

    @property
    def total(self) -> float:
        return sum(getattr(self, c) for c in COMPONENTS)

    @property
    def dynamic(self) -> float:
        return self.total - self.leakage

    @property
    def shares(self) -> dict:
        """Fraction per component; all zero for a zero-energy run."""
        t = self.total
        return {c: (getattr(self, c) / t if t else 0.0) for c in COMPONENTS}

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in COMPONENTS}


def account(report, table: EnergyTable) -> EnergyBreakdown:
    """Linear map from counters to pJ; leakage = static power x cycles / frequency."""
    c = report.counts if hasattr(report, "counts") else report
    t = table

    def buf(name):
        return (c[f"{name}_read_bits"] * getattr(t, f"{name}_read_pj_per_bit")
                + c[f"{name}_write_bits"] * getattr(t, f"{name}_write_pj_per_bit"))

    offchip = sum(c[k] for k in ("offchip_read_bits_ibuf", "offchip_read_bits_wbuf",
                                 "offchip_read_bits_obuf", "offchip_write_bits_obuf"))
    return EnergyBreakdown(
        compute=c["brick_ops"] * t.brick_op_pj + c["shift_add_ops"] * t.shift_add_pj,
        ibuf=buf("ibuf") + c["ibuf_reads"] * t.register_fill_pj,
        wbuf=buf("wbuf") + c["wbuf_reads"] * t.register_fill_pj,
        obuf=buf("obuf"),
        dram=offchip * t.dram_pj_per_bit,
        # mW * cycles / MHz = 1e-9 J = 1e3 pJ
        leakage=t.static_power_mw * c["cycles"] / t.frequency_mhz * 1e3,
    )
