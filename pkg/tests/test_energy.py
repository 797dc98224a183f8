from collections import Counter
from pathlib import Path

import pytest
import yaml

from bitfusion.codegen import LayerDescriptor, compile_network
from bitfusion.config import ArchConfig
from bitfusion.energy import COMPONENTS, EnergyTable, account
from bitfusion.sim import RunReport, simulate

FIX = Path(__file__).parent / "fixtures"
ROOT = Path(__file__).resolve().parents[1]


def test_hand_computed_breakdown():
    fx = yaml.safe_load((FIX / "energy_hand.yaml").read_text())
    e = account(RunReport(Counter(fx["counts"])), EnergyTable.from_dict(fx["table"]))
    for k, v in fx["expected"].items():
        assert getattr(e, k) == pytest.approx(v), k
    assert e.total == pytest.approx(sum(fx["expected"].values()))
    assert e.dynamic == pytest.approx(e.total - 100000)


def test_zero_report_is_zero_energy():
    e = account(RunReport(), EnergyTable())
    assert e.total == 0
    assert all(v == 0 for v in e.shares.values())


def test_linear_in_counters():
    fx = yaml.safe_load((FIX / "energy_hand.yaml").read_text())
    table = EnergyTable.from_dict(fx["table"])
    one = account(RunReport(Counter(fx["counts"])), table)
    two = account(RunReport(Counter({k: 2 * v for k, v in fx["counts"].items()})), table)
    for c in COMPONENTS:
        assert getattr(two, c) == pytest.approx(2 * getattr(one, c))


def test_shares_sum_to_one():
    arch = ArchConfig()
    prog = compile_network([LayerDescriptor(kind="fc", name="fc", in_features=64, out_features=32)], arch)
    report, _ = simulate(prog.blocks, prog.image, arch)
    e = account(report, EnergyTable())
    assert sum(e.shares.values()) == pytest.approx(1.0)
    assert set(e.as_dict()) == set(COMPONENTS)


def test_lower_precision_lowers_compute_energy():
    arch = ArchConfig()
    out = {}
    for bits in (2, 8):
        layer = LayerDescriptor(kind="fc", name="fc", in_features=128, out_features=64, input_bits=bits,
                                weight_bits=bits)
        prog = compile_network([layer], arch)
        report, _ = simulate(prog.blocks, prog.image, arch)
        out[bits] = account(report, EnergyTable())
    assert out[2].compute < out[8].compute
    assert out[2].dram < out[8].dram
    assert out[2].total < out[8].total


def test_table_validation(tmp_path):
    with pytest.raises(ValueError, match="unknown"):
        EnergyTable.from_dict({"dram_pj": 1})
    with pytest.raises(ValueError):
        EnergyTable(dram_pj_per_bit=-1)
    with pytest.raises(ValueError):
        EnergyTable(frequency_mhz=0)
    p = tmp_path / "e.yaml"
    p.write_text(yaml.safe_dump({"dram_pj_per_bit": 3}))
    assert EnergyTable.load(p).dram_pj_per_bit == 3


def test_shipped_table_loads():
    t = EnergyTable.load(ROOT / "configs" / "energy.yaml")
    assert EnergyTable.from_dict(t.to_dict()) == t
