"""Integer range helpers shared by the datapath models and the reference oracle."""

import numpy as np

PSUM_BITS = 32
INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


def value_range(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


def check_range(value, bits: int, signed: bool, what: str = "value"):
    lo, hi = value_range(bits, signed)
    arr = np.asarray(value)
    if arr.size and (arr.min() < lo or arr.max() > hi):
        kind = "signed" if signed else "unsigned"
        raise ValueError(f"{what} out of range for {kind} {bits}-bit: expected [{lo}, {hi}]")


def wrap32(value):
    """Two's complement wrap to 32 bits; works on ints and int64 arrays."""
    if isinstance(value, (int, np.integer)):
        return ((int(value) + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)
    arr = np.asarray(value, dtype=np.int64)
    return ((arr + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)


def saturate(value, bits: int, signed: bool):
    lo, hi = value_range(bits, signed)
    return np.clip(value, lo, hi)
