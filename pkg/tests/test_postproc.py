import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dayqkd.postproc import KeyBlock, binary_entropy, read_key, write_key


@pytest.mark.parametrize("q,h", [(0.0, 0.0), (1.0, 0.0), (0.5, 1.0), (0.11, 0.4999)])
def test_binary_entropy(q, h):
    assert binary_entropy(q) == pytest.approx(h, abs=1e-4)


def test_binary_entropy_rejects_non_probability():
    with pytest.raises(ValueError):
        binary_entropy(1.5)


@given(st.floats(1e-9, 0.5))
def test_binary_entropy_symmetric(q):
    assert binary_entropy(q) == pytest.approx(binary_entropy(1 - q), abs=1e-12)
    assert binary_entropy(q) == pytest.approx(-q * math.log2(q) - (1 - q) * math.log2(1 - q))


@given(st.lists(st.integers(0, 1), max_size=300))
def test_pack_round_trip(bits):
    k = KeyBlock(np.array(bits, dtype=np.uint8))
    assert KeyBlock.from_packed(k.packed(), k.length) == k


def test_keyblock_is_immutable_and_validated():
    k = KeyBlock([0, 1, 1])
    with pytest.raises(ValueError):
        k.bits[0] = 1
    with pytest.raises(ValueError):
        KeyBlock([0, 2])
    with pytest.raises(ValueError):
        KeyBlock(np.zeros((2, 2), np.uint8))
    assert k.xor(KeyBlock([1, 1, 0])) == KeyBlock([1, 0, 1])
    with pytest.raises(ValueError):
        k.xor(KeyBlock([1]))


def test_key_file_round_trip(tmp_path):
    k = KeyBlock.random(1001, 3)
    write_key(tmp_path / "k.bin", k)
    assert (tmp_path / "k.bin").stat().st_size == 8 + 126
    assert read_key(tmp_path / "k.bin") == k


def test_truncated_key_file_reports_offset(tmp_path):
    k = KeyBlock.random(1001, 3)
    p = tmp_path / "k.bin"
    write_key(p, k)
    p.write_bytes(p.read_bytes()[:100])
    with pytest.raises(ValueError, match="byte offset 100"):
        read_key(p)
    p.write_bytes(b"\x01\x02")
    with pytest.raises(ValueError, match="byte offset 2"):
        read_key(p)
