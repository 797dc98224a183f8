"""Bit-level fusion accelerator model: bricks, fusion units, array, ISA, compiler and simulator."""

__version__ = "0.1.0"

from .brick import BrickOperand, BrickProduct, brick_multiply  # noqa: E402
from .fusion import FusionConfig, fused_pe_multiply, multiply, temporal_multiply  # noqa: E402
from .array import ArrayGeometry, systolic_gemm, systolic_matvec  # noqa: E402
from .config import ArchConfig  # noqa: E402
from .isa import InstructionBlock, assemble, decode, disassemble, encode, validate  # noqa: E402
from .codegen import LayerDescriptor, Schedule, compile_network, lower  # noqa: E402
from .sim import MemoryModel, RunReport, run_block, run_network, simulate  # noqa: E402
from .energy import EnergyTable, account  # noqa: E402

__all__ = [
    "ArchConfig", "ArrayGeometry", "BrickOperand", "BrickProduct", "EnergyTable", "FusionConfig",
    "InstructionBlock", "LayerDescriptor", "MemoryModel", "RunReport", "Schedule", "account", "assemble",
    "brick_multiply", "compile_network", "decode", "disassemble", "encode", "fused_pe_multiply", "lower",
    "multiply", "run_block", "run_network", "simulate", "systolic_gemm", "systolic_matvec",
    "temporal_multiply", "validate",
]
