"""Command-line driver: ``bitfusion {compile,simulate,sweep,asm,disasm,validate}``.

Report CSV schema (``report.csv``): one row per block, then a ``TOTAL`` row.
Columns are ``block`` followed by ``sim.COUNTER_KEYS`` in order.

Sweep CSV schema: ``axis, value, cycles, compute_cycles, offchip_read_bits,
offchip_write_bits, weight_bits_per_inference, energy_pj``.
"""

import argparse
from concurrent.futures import ProcessPoolExecutor
import csv
import io
import json
import os
from pathlib import Path
import sys
import tempfile

import numpy as np
import yaml

from . import __version__
from .codegen import STATIONARITIES, FusionError, ScheduleError, compile_network, load_network
from .config import ArchConfig
from .energy import EnergyTable, account
from .isa import ISAError, assemble, decode, disassemble, encode, validate
from .memimage import MemoryImage
from .sim import COUNTER_KEYS, SimError, simulate

SWEEP_COLUMNS = ("axis", "value", "cycles", "compute_cycles", "offchip_read_bits", "offchip_write_bits",
                 "weight_bits_per_inference", "energy_pj")


class CliError(Exception):
    pass


def _write_atomic(path: Path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "wb") as f:
        f.write(raw)
    os.replace(tmp, path)


def _arch(args) -> ArchConfig:
    try:
        arch = ArchConfig.load(args.config)
    except (OSError, ValueError, TypeError, yaml.YAMLError) as e:
        raise CliError(f"{args.config or os.environ.get('BITFUSION_CONFIG')}: {e}") from None
    if getattr(args, "bandwidth", None):
        arch = arch.replace(bandwidth=args.bandwidth)
    return arch


def _energy_table(arch: ArchConfig, path=None) -> EnergyTable:
    path = path or arch.energy_table
    return EnergyTable.load(path) if path else EnergyTable(frequency_mhz=arch.frequency_mhz)


def _read_blocks(path: Path):
    if path.suffix in (".s", ".asm"):
        return assemble(path.read_text())
    return decode(path.read_bytes())


def report_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("block",) + COUNTER_KEYS)
    for blk in report.blocks:
        w.writerow((blk.name,) + tuple(blk.counts[k] for k in COUNTER_KEYS))
    w.writerow(("TOTAL",) + tuple(report.counts[k] for k in COUNTER_KEYS))
    return buf.getvalue()


def summary(report, energy=None, arch: ArchConfig | None = None) -> str:
    c = report.counts
    lines = [
        f"blocks            {len(report.blocks)}",
        f"batch             {report.batch}",
        f"cycles            {c['cycles']}",
        f"compute cycles    {c['compute_cycles']}",
        f"multiply-adds     {c['macs']}",
        f"off-chip read     {report.offchip_read_bits} bits",
        f"off-chip write    {report.offchip_write_bits} bits",
        f"psum overflows    {c['overflows']}",
    ]
    if arch is not None and c["cycles"]:
        lines.append(f"runtime           {c['cycles'] / arch.frequency_mhz:.3f} us at {arch.frequency_mhz:g} MHz")
    for cfg, n in sorted(report.macs_by_config.items()):
        lines.append(f"  macs {cfg:<10}  {n}")
    if energy is not None:
        lines.append(f"energy            {energy.total:.1f} pJ (illustrative table unless configured)")
        for k, v in energy.shares.items():
            lines.append(f"  {k:<8} {100 * v:5.1f}%")
    return "\n".join(lines)


# -- subcommands -------------------------------------------------------------------

def cmd_asm(args):
    src = Path(args.input)
    blocks = assemble(src.read_text())
    out = Path(args.output or src.with_suffix(".bfis"))
    _write_atomic(out, encode(blocks))
    print(f"{out}: {len(blocks)} block(s)")


def cmd_disasm(args):
    text = disassemble(decode(Path(args.input).read_bytes()))
    if args.output:
        _write_atomic(Path(args.output), text)
    else:
        sys.stdout.write(text)


def cmd_validate(args):
    bad = 0
    for name in args.files:
        path = Path(name)
        try:
            if path.suffix in (".yaml", ".yml"):
                compile_network(load_network(path), _arch(args))
                print(f"{path}: ok")
                continue
            for i, block in enumerate(_read_blocks(path)):
                for issue in validate(block):
                    print(f"{path}: block {i}: {issue}")
                    bad += 1
            if not bad:
                print(f"{path}: ok")
        except (OSError, ValueError) as e:
            print(f"{path}: {e}")
            bad += 1
    return 1 if bad else 0


def _compile(args):
    arch = _arch(args)
    net = load_network(args.network)
    prog = compile_network(net, arch, batch=args.batch, stationarity=args.stationarity,
                           fuse=not args.no_fuse, tiled=not args.untiled, seed=args.seed)
    return arch, prog


def cmd_compile(args):
    arch, prog = _compile(args)
    out = Path(args.output_dir)
    _write_atomic(out / "program.bfis", encode(prog.blocks))
    _write_atomic(out / "program.s", disassemble(prog.blocks))
    out.mkdir(parents=True, exist_ok=True)
    prog.image.save(out / "image")
    expected = MemoryImage()
    for name, values in prog.expected.items():
        info = prog.image.tensors[name]
        expected.allocate(name, info.shape, info.bits, info.signed, values)
    expected.save(out / "expected")
    _write_atomic(out / "arch.yaml", yaml.safe_dump(arch.to_dict(), sort_keys=False))
    print(f"{out}: {len(prog.blocks)} block(s), output tensor {prog.output!r}")


def _compare(image: MemoryImage, expected: MemoryImage) -> dict:
    return {n: int(np.count_nonzero(image.tensor(n) != expected.tensor(n))) for n in expected.tensors}


def cmd_simulate(args):
    src = Path(args.input)
    if src.suffix in (".yaml", ".yml"):
        args.network = src
        arch, prog = _compile(args)
        report, image = simulate(prog.blocks, prog.image, arch, prog.batch)
        mismatches = prog.mismatches(image)
    else:
        arch = _arch(args)
        if not args.image:
            raise CliError(f"{src}: a memory image (--image STEM) is required for block files")
        blocks = _read_blocks(src)
        report, image = simulate(blocks, MemoryImage.load(args.image), arch, args.batch or 1)
        mismatches = _compare(image, MemoryImage.load(args.expected)) if args.expected else {}
    energy = account(report, _energy_table(arch, args.energy))
    if args.output_dir:
        out = Path(args.output_dir)
        _write_atomic(out / "report.csv", report_csv(report))
        _write_atomic(out / "energy.json", json.dumps(energy.as_dict(), indent=2) + "\n")
        out.mkdir(parents=True, exist_ok=True)
        image.save(out / "final")
    print(summary(report, energy, arch))
    for name, n in mismatches.items():
        print(f"check {name}: {'ok' if n == 0 else f'{n} mismatching elements'}")
    return 1 if any(mismatches.values()) else 0


def sweep_point(network_path: str, arch: ArchConfig, axis: str, value, stationarity: str, seed: int,
                energy_path=None) -> dict:
    net = load_network(network_path)
    batch = net.batch
    if axis == "bandwidth":
        arch = arch.replace(bandwidth=int(value))
    else:
        batch = int(value)
    prog = compile_network(net, arch, batch=batch, stationarity=stationarity, seed=seed)
    report, image = simulate(prog.blocks, prog.image, arch, batch)
    if any(prog.mismatches(image).values()):
        raise SimError(f"{axis}={value}: simulated output differs from the reference")
    energy = account(report, _energy_table(arch, energy_path))
    return {
        "axis": axis, "value": value, "cycles": report.cycles, "compute_cycles": report.compute_cycles,
        "offchip_read_bits": report.offchip_read_bits, "offchip_write_bits": report.offchip_write_bits,
        "weight_bits_per_inference": report.per_inference("offchip_read_bits_wbuf"),
        "energy_pj": round(energy.total, 3),
    }


def _parse_values(axis: str, raw: str | None, arch: ArchConfig):
    if raw:
        return [int(v) for v in raw.split(",")]
    if axis == "bandwidth":
        return [arch.bandwidth // 4, arch.bandwidth, arch.bandwidth * 4]
    return [1, 2, 4, 8, 16, 32, 64, 128, 256]


def cmd_sweep(args):
    arch = _arch(args)
    values = _parse_values(args.axis, args.values, arch)
    if any(v <= 0 for v in values):
        raise CliError("sweep values must be positive")
    jobs = [(str(args.network), arch, args.axis, v, args.stationarity, args.seed, args.energy) for v in values]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(sweep_point, *zip(*jobs)))
    else:
        rows = [sweep_point(*j) for j in jobs]
    buf = io.StringIO()
    w = csv.DictWriter(buf, SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.output:
        _write_atomic(Path(args.output), buf.getvalue())
    sys.stdout.write(buf.getvalue())


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bitfusion", description="Bit-level fusion accelerator toolchain")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="architecture YAML (default: $BITFUSION_CONFIG, then built-in)")
    sub = p.add_subparsers(dest="command", required=True)

    def schedule_flags(sp):
        sp.add_argument("--batch", type=int, help="override the network batch size")
        sp.add_argument("--stationarity", choices=STATIONARITIES, default="output")
        sp.add_argument("--no-fuse", action="store_true", help="keep every layer in its own block")
        sp.add_argument("--untiled", action="store_true", help="emit the untiled loop nest")
        sp.add_argument("--seed", type=int, default=0, help="seed for synthetic inputs and weights")

    sp = sub.add_parser("compile", help="lower a network file to blocks, listing and memory image")
    sp.add_argument("network")
    sp.add_argument("-o", "--output-dir", default="build")
    schedule_flags(sp)
    sp.set_defaults(func=cmd_compile)

    sp = sub.add_parser("simulate", help="simulate a network file or a block file with a memory image")
    sp.add_argument("input", help="network .yaml, or .bfis/.s block file")
    sp.add_argument("--image", help="memory image stem (STEM.bin + STEM.json) for block files")
    sp.add_argument("--expected", help="memory image stem holding reference outputs to compare")
    sp.add_argument("--energy", help="energy table YAML")
    sp.add_argument("--bandwidth", type=int, help="override bandwidth in bits per cycle")
    sp.add_argument("-o", "--output-dir", help="write report.csv, energy.json and the final image here")
    schedule_flags(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="CSV of cycles/traffic/energy across bandwidth or batch")
    sp.add_argument("network")
    sp.add_argument("--axis", choices=("bandwidth", "batch"), required=True)
    sp.add_argument("--values", help="comma-separated values (default: 0.25x,1x,4x bandwidth or 1..256 batch)")
    sp.add_argument("--stationarity", choices=STATIONARITIES, default="output")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--energy", help="energy table YAML")
    sp.add_argument("--jobs", type=int, default=1, help="parallel sweep points")
    sp.add_argument("-o", "--output", help="CSV path")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("asm", help="assemble text into the binary block format")
    sp.add_argument("input")
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_asm)

    sp = sub.add_parser("disasm", help="print a binary block file as assembly")
    sp.add_argument("input")
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_disasm)

    sp = sub.add_parser("validate", help="check block files or network files")
    sp.add_argument("files", nargs="+")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (CliError, ISAError, ScheduleError, FusionError, SimError, ValueError, OSError) as e:
        where = getattr(args, "input", None) or getattr(args, "network", None) or ""
        print(f"error: {where}: {e}" if where else f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
