import numpy as np
import pytest
from hypothesis import given, strategies as st

from bitfusion.memimage import MemoryImage

from oracles import value_range


@given(st.sampled_from([2, 4, 8, 16, 32]), st.booleans(), st.integers(1, 40), st.integers(0, 2**31))
def test_pack_roundtrip(bits, signed, n, seed):
    r = value_range(bits, signed)
    v = np.random.default_rng(seed).integers(r.start, r.stop, size=n)
    img = MemoryImage()
    img.allocate("pad", (3,), 8, False, [1, 2, 3])
    img.allocate("t", (n,), bits, signed, v)
    assert np.array_equal(img.tensor("t"), v)
    assert img.tensor("pad").tolist() == [1, 2, 3]
    assert img.tensors["t"].offset % 8 == 0


def test_sub_byte_layout_is_little_endian():
    img = MemoryImage()
    img.allocate("t", (4,), 2, False, [1, 2, 3, 0])
    assert img.data[0] == 0b00111001
    img.allocate("u", (2,), 4, True, [-1, 2])
    assert img.data[8] == 0x2F


def test_save_load(tmp_path):
    img = MemoryImage()
    img.allocate("a", (2, 3), 4, True, np.arange(-3, 3).reshape(2, 3))
    img.allocate("b", (5,), 16, False, [0, 1, 65535, 7, 9])
    img.save(tmp_path / "img")
    back = MemoryImage.load(tmp_path / "img")
    assert back.tensors == img.tensors
    assert np.array_equal(back.data, img.data)
    assert back.tensor("a").shape == (2, 3)


def test_errors():
    img = MemoryImage()
    img.allocate("a", (2,), 4, False)
    with pytest.raises(ValueError):
        img.allocate("a", (2,), 4, False)
    with pytest.raises(ValueError):
        img.set_tensor("a", [1, 2, 3])
    with pytest.raises(ValueError):
        img.set_tensor("a", [1, 16])
    with pytest.raises(IndexError):
        img.read(0, np.array([10]), 8, False)
