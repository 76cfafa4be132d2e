"""Key blocks, binary entropy and the on-disk key format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np


def binary_entropy(q: float) -> float:
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q={q!r} is not a probability")
    if q == 0.0 or q == 1.0:
        return 0.0
    return -q * math.log2(q) - (1.0 - q) * math.log2(1.0 - q)


@dataclass(frozen=True)
class KeyBlock:
    """Bit string stored one bit per ``uint8`` element (values 0/1)."""

    bits: np.ndarray

    def __post_init__(self):
        b = self.bits
        if not (isinstance(b, np.ndarray) and b.dtype == np.uint8 and not b.flags.writeable):
            b = np.array(b, dtype=np.uint8, copy=True)
        if b.ndim != 1:
            raise ValueError("key bits must be one-dimensional")
        if b.size and b.max() > 1:
            raise ValueError("key bits must be 0 or 1")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def length(self) -> int:
        return int(self.bits.size)

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other) -> bool:
        return isinstance(other, KeyBlock) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())

    def packed(self) -> bytes:
        return np.packbits(self.bits, bitorder="little").tobytes()

    @classmethod
    def from_packed(cls, data: bytes, length: int) -> "KeyBlock":
        if len(data) * 8 < length:
            raise ValueError("packed data shorter than the declared length")
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little", count=length)
        return cls(bits)

    @classmethod
    def random(cls, n: int, rng) -> "KeyBlock":
        return cls(np.random.default_rng(rng).integers(0, 2, n, dtype=np.uint8))

    def xor(self, other: "KeyBlock") -> "KeyBlock":
        if other.length != self.length:
            raise ValueError("length mismatch")
        return KeyBlock(self.bits ^ other.bits)


_HEADER = struct.Struct("<Q")


def write_key(path, key: KeyBlock):
    """Packed little-endian bitstream preceded by an 8-byte bit-length header."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(key.length))
        fh.write(key.packed())


def read_key(path) -> KeyBlock:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated key header at byte offset {len(head)}")
        (n,) = _HEADER.unpack(head)
        data = fh.read()
    need = (n + 7) // 8
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} payload bytes for {n} bits, found {len(data)} "
                         f"(byte offset {_HEADER.size + min(len(data), need)})")
    return KeyBlock.from_packed(data, n)
