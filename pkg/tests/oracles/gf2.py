"""Toeplitz multiplication over GF(2) with Python integers.

Row i of the matrix is seed[n-1+i-j] for j = 0..n-1.  Substituting
m = n-1-j turns row i into the seed window starting at bit i, taken against
the key written in reverse; each output bit is the parity of their AND.
"""


def _to_int(bits):
    v = 0
    for i, b in enumerate(bits):
        if b:
            v |= 1 << i
    return v


def toeplitz_hash(key_bits, seed_bits, l):
    n = len(key_bits)
    if len(seed_bits) != n + l - 1:
        raise ValueError("seed length must be n + l - 1")
    rev_key = _to_int(reversed(list(key_bits)))
    seed = _to_int(seed_bits)
    mask = (1 << n) - 1
    return [bin((seed >> i) & mask & rev_key).count("1") & 1 for i in range(l)]


def toeplitz_hash_loops(key_bits, seed_bits, l):
    """Literal double loop; only for tiny inputs."""
    n = len(key_bits)
    out = []
    for i in range(l):
        acc = 0
        for j in range(n):
            acc ^= seed_bits[n - 1 + i - j] & key_bits[j]
        out.append(acc)
    return out
