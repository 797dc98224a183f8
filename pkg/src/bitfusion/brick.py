"""A single BitBrick: 2-bit operands with per-operand sign flags, 6-bit product.

Binary (0, +1) operands are carried as unsigned 2-bit values and ternary
(-1, 0, +1) operands as signed 2-bit values; there is no separate 1-bit path.
"""

from dataclasses import dataclass

PRODUCT_BITS = 6
PRODUCT_MIN = -(1 << (PRODUCT_BITS - 1))
PRODUCT_MAX = (1 << (PRODUCT_BITS - 1)) - 1


@dataclass(frozen=True)
class BrickOperand:
    bits: int
    signed: bool = False

    def __post_init__(self):
        if not 0 <= self.bits <= 3:
            raise ValueError(f"brick operand bits must be in 0..3, got {self.bits}")

    @classmethod
    def from_value(cls, value: int, signed: bool) -> "BrickOperand":
        lo, hi = (-2, 1) if signed else (0, 3)
        if not lo <= value <= hi:
            raise ValueError(f"{value} does not fit a {'signed' if signed else 'unsigned'} 2-bit operand")
        return cls(value & 0b11, signed)

    @property
    def value(self) -> int:
        return sign_extend(self)


@dataclass(frozen=True)
class BrickProduct:
    value: int

    def __post_init__(self):
        if not -6 <= self.value <= 9:
            raise ValueError(f"brick product {self.value} outside reachable range [-6, 9]")


def sign_extend(op: BrickOperand) -> int:
    """Return the 3-bit two's complement value of ``op`` under its sign flag."""
    if op.signed and op.bits & 0b10:
        return op.bits - 4
    return op.bits


def brick_multiply(x: BrickOperand, y: BrickOperand) -> BrickProduct:
    p = sign_extend(x) * sign_extend(y)
    # 6-bit width is a correctness bound, not a wrap
    assert PRODUCT_MIN <= p <= PRODUCT_MAX, p
    return BrickProduct(p)
