"""Golden wide-integer oracle for the layer operations.

Nothing here slices operands into 2-bit pieces; products are plain integer
multiplies so the oracle stays independent of the brick datapath.
"""

from dataclasses import dataclass

import numpy as np

from .numeric import check_range, saturate, wrap32


@dataclass
class Tensor:
    values: np.ndarray
    bits: int = 32
    signed: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        check_range(self.values, self.bits, self.signed, "tensor element")

    @property
    def shape(self):
        return self.values.shape


def _values(t):
    return t.values if isinstance(t, Tensor) else np.asarray(t, dtype=np.int64)


def gemm_ref(a, b) -> Tensor:
    a, b = _values(a), _values(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"gemm shape mismatch: {a.shape} x {b.shape}")
    return Tensor(wrap32(a @ b), 32, True)


def conv_ref(x, w, stride: int = 1) -> Tensor:
    """Valid convolution. x is [H, W, IC] or [N, H, W, IC]; w is [KH, KW, IC, OC]."""
    x, w = _values(x), _values(w)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ValueError(f"conv shape mismatch: {x.shape} with kernel {w.shape}")
    n, h, wd, _ = x.shape
    kh, kw, _, oc = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("kernel larger than input")
    out = np.zeros((n, oh, ow, oc), dtype=np.int64)
    for dy in range(kh):
        for dx in range(kw):
            patch = x[:, dy:dy + stride * (oh - 1) + 1:stride, dx:dx + stride * (ow - 1) + 1:stride, :]
            out += np.einsum("nhwc,co->nhwo", patch, w[dy, dx])
    out = wrap32(out)
    return Tensor(out if batched else out[0], 32, True)


def pool_ref(x, window: int, stride: int | None = None) -> Tensor:
    """Max pool over the two spatial axes of [H, W, C] or [N, H, W, C]."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    v = t.values
    stride = stride or window
    batched = v.ndim == 4
    if not batched:
        v = v[None]
    n, h, wd, c = v.shape
    oh = (h - window) // stride + 1
    ow = (wd - window) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("pool window larger than input")
    out = np.full((n, oh, ow, c), np.iinfo(np.int64).min, dtype=np.int64)
    for dy in range(window):
        for dx in range(window):
            out = np.maximum(out, v[:, dy:dy + stride * (oh - 1) + 1:stride, dx:dx + stride * (ow - 1) + 1:stride, :])
    return Tensor(out if batched else out[0], t.bits, t.signed)


def act_ref(x, kind: str = "relu") -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if kind == "none":
        return Tensor(t.values.copy(), t.bits, t.signed)
    if kind != "relu":
        raise ValueError(f"unsupported activation {kind!r}")
    return Tensor(np.maximum(t.values, 0), t.bits, t.signed)


def requant_ref(x, shift: int, out_bits: int, signed: bool = True) -> Tensor:
    """Arithmetic right shift, then saturate to ``out_bits``."""
    v = _values(x)
    if out_bits == 32 and signed and shift == 0:
        return Tensor(wrap32(v), 32, True)
    return Tensor(saturate(v >> shift, out_bits, signed), out_bits, signed)


def post_ref(psum, act: str = "none", shift: int = 0, out_bits: int = 32, signed: bool = True) -> Tensor:
    return requant_ref(act_ref(Tensor(psum), act).values, shift, out_bits, signed)


def im2col(x, kh: int, kw: int, stride: int = 1) -> np.ndarray:
    """[H, W, C] -> [OH*OW, KH*KW*C] patch matrix, row order matching conv_ref outputs."""
    v = _values(x)
    h, w, c = v.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    rows = []
    for y in range(oh):
        for xx in range(ow):
            rows.append(v[y * stride:y * stride + kh, xx * stride:xx * stride + kw, :].reshape(-1))
    return np.array(rows, dtype=np.int64)
