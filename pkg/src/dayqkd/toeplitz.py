"""Toeplitz hashing over GF(2) for privacy amplification and key verification.

For an input of ``n`` bits and an output of ``l`` bits the seed has
``n + l - 1`` bits and defines ``T[i, j] = seed[i - j + n - 1]``, so that
``T @ key`` is a slice of the full convolution of seed and key.
"""

from __future__ import annotations

import math
import tempfile

import numpy as np

from .postproc import KeyBlock

_FFT_SEGMENT = 1 << 20
_SPILL_BYTES = 1 << 30
_DIRECT_LIMIT = 1 << 16
_SHORT_OUTPUT = 256
_SHORT_COLS = 1 << 13  # column block; keeps float32 partial sums exact


def toeplitz_matrix(seed, n: int, l: int) -> np.ndarray:
    seed = np.asarray(seed, dtype=np.uint8)
    if seed.size != n + l - 1:
        raise ValueError(f"seed must have n + l - 1 = {n + l - 1} bits, got {seed.size}")
    i = np.arange(l)[:, None]
    j = np.arange(n)[None, :]
    return seed[i - j + n - 1]


def _hash_bits(key: np.ndarray, seed: np.ndarray, l: int) -> np.ndarray:
    n = key.size
    if l == 0:
        return np.zeros(0, np.uint8)
    if n == 0:
        return np.zeros(l, np.uint8)
    if n * l <= _DIRECT_LIMIT:
        t = np.lib.stride_tricks.sliding_window_view(seed, n)[:, ::-1]
        return (t.astype(np.int64) @ key.astype(np.int64) & 1).astype(np.uint8)
    if l <= _SHORT_OUTPUT:
        return _hash_short(key, seed, l)
    return _hash_blocked(key, seed, l)


def _hash_blocked(key: np.ndarray, seed: np.ndarray, l: int, block: int | None = None) -> np.ndarray:
    """Overlap-save Toeplitz product with frequency-domain accumulation.

    Key segments and output blocks share a size ``B``.  The seed window for
    output block ``i`` and key segment ``j`` depends only on ``i - j``, so each
    window is transformed once.  Key spectra go to a temporary file when they
    would not comfortably fit in memory.
    """
    n = key.size
    if block is None:
        block = min(_FFT_SEGMENT, 1 << max(4, int(math.ceil(math.log2(max(n, l))))))
    B = int(block)
    N = 2 * B
    nk, no = -(-n // B), -(-l // B)
    spec_shape = (nk, B + 1)
    tmp = None
    if nk * (B + 1) * 16 > _SPILL_BYTES:
        tmp = tempfile.TemporaryFile()
        kspec = np.memmap(tmp, dtype=np.complex128, mode="w+", shape=spec_shape)
    else:
        kspec = np.empty(spec_shape, dtype=np.complex128)
    try:
        seg = np.zeros(N)
        for j in range(nk):
            part = key[j * B:(j + 1) * B]
            seg[:] = 0.0
            seg[:part.size] = part
            kspec[j] = np.fft.rfft(seg)
        acc = np.zeros((no, B + 1), dtype=np.complex128)
        win = np.zeros(N)
        for d in range(-(nk - 1), no):
            # window for (i, j) with i - j = d starts at seed[(d - 1) B + n]
            base = (d - 1) * B + n
            lo, hi = max(base, 0), min(base + N - 1, seed.size)
            win[:] = 0.0
            if hi > lo:
                win[lo - base:hi - base] = seed[lo:hi]
            else:
                continue
            wspec = np.fft.rfft(win)
            for i in range(max(0, d), min(no, nk + d)):
                acc[i] += wspec * kspec[i - d]
        out = np.empty(no * B, dtype=np.uint8)
        for i in range(no):
            y = np.fft.irfft(acc[i], N)[B - 1:2 * B - 1]
            r = np.rint(y)
            if np.max(np.abs(y - r), initial=0.0) > 0.25:
                raise FloatingPointError("FFT rounding margin exceeded in Toeplitz product")
            out[i * B:(i + 1) * B] = r.astype(np.int64) & 1
        return out[:l]
    finally:
        del kspec
        if tmp is not None:
            tmp.close()


def _hash_short(key: np.ndarray, seed: np.ndarray, l: int) -> np.ndarray:
    # out[i] = sum_m seed[i + m] kr[m] with kr the reversed key; writing
    # m = l*a + c turns this into one (2l-1, A) @ (A, l) product per column block
    n = key.size
    a_tot = -(-n // l)
    kr = np.zeros(a_tot * l, dtype=np.float32)
    kr[:n] = key[::-1]
    kr = kr.reshape(a_tot, l)
    sp = np.zeros(l * (a_tot + 1), dtype=np.float32)
    sp[:seed.size] = seed
    rows = 2 * l - 1
    acc = np.zeros((rows, l), dtype=np.int64)
    for a0 in range(0, a_tot, _SHORT_COLS):
        a1 = min(a_tot, a0 + _SHORT_COLS)
        m = np.lib.stride_tricks.as_strided(sp[l * a0:], shape=(rows, a1 - a0),
                                            strides=(sp.itemsize, l * sp.itemsize), writeable=False)
        acc += np.rint(np.ascontiguousarray(m) @ kr[a0:a1]).astype(np.int64)
    i = np.arange(l)
    return (acc[i[:, None] + i[None, :], i[None, :]].sum(axis=1) & 1).astype(np.uint8)


def toeplitz_pa(key: KeyBlock, out_len: int, seed) -> KeyBlock:
    """Compress ``key`` to ``out_len`` bits with the Toeplitz matrix given by ``seed``."""
    if out_len < 0:
        raise ValueError("output length must be >= 0")
    if out_len > key.length:
        raise ValueError(f"cannot extract {out_len} bits from a {key.length}-bit key")
    seed = np.asarray(seed, dtype=np.uint8)
    if out_len == 0:
        return KeyBlock(np.zeros(0, np.uint8))
    if seed.size != key.length + out_len - 1:
        raise ValueError(f"seed must have {key.length + out_len - 1} bits, got {seed.size}")
    return KeyBlock(_hash_bits(key.bits, seed, out_len))


def toeplitz_hash_many(keys, seeds, l: int, rows_per_batch: int = 1 << 15) -> np.ndarray:
    """Hash many short keys at once, each with its own seed.

    ``keys`` is (m, n) and ``seeds`` is (m, n + l - 1); returns (m, l).
    """
    keys = np.asarray(keys, dtype=np.uint8)
    seeds = np.asarray(seeds, dtype=np.uint8)
    m, n = keys.shape
    if seeds.shape != (m, n + l - 1):
        raise ValueError(f"seeds must have shape ({m}, {n + l - 1})")
    out = np.empty((m, l), np.uint8)
    for lo in range(0, m, rows_per_batch):
        hi = min(m, lo + rows_per_batch)
        win = np.lib.stride_tricks.sliding_window_view(seeds[lo:hi], n, axis=1)[:, :, ::-1]
        out[lo:hi] = (np.einsum("rin,rn->ri", win, keys[lo:hi], dtype=np.int32) & 1).astype(np.uint8)
    return out


def naive_toeplitz(key_bits, seed, l: int) -> np.ndarray:
    """Bit-by-bit reference multiply (slow; for tests)."""
    key_bits = [int(b) for b in key_bits]
    seed = [int(s) for s in seed]
    n = len(key_bits)
    out = []
    for i in range(l):
        acc = 0
        for j in range(n):
            acc ^= seed[i - j + n - 1] & key_bits[j]
        out.append(acc)
    return np.array(out, dtype=np.uint8)


def seed_bits(hash_seed: int, n_bits: int) -> np.ndarray:
    return np.random.default_rng(hash_seed).integers(0, 2, n_bits, dtype=np.uint8)


TAG_BITS = 64


def verification_tag(key: KeyBlock, hash_seed: int, tag_bits: int = TAG_BITS) -> np.ndarray:
    """Toeplitz tag of ``key``; the seed is expanded from ``hash_seed``.

    Empty keys hash to the all-zero tag.
    """
    n = key.length
    if n == 0:
        return np.zeros(tag_bits, np.uint8)
    return _hash_bits(key.bits, seed_bits(hash_seed, n + tag_bits - 1), tag_bits)


def verify_correctness(alice: KeyBlock, bob: KeyBlock, hash_seed: int, tag_bits: int = TAG_BITS) -> bool:
    """Compare Toeplitz tags; a false match happens with probability 2**-tag_bits."""
    if alice.length != bob.length:
        raise ValueError("keys must have equal length")
    return bool(np.array_equal(verification_tag(alice, hash_seed, tag_bits),
                               verification_tag(bob, hash_seed, tag_bits)))
