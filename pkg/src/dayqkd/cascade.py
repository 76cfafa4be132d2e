"""Cascade information reconciliation.

Alice and Bob are separate objects that talk only through a transport; every
parity Alice discloses is counted as leaked.  Bob drives the protocol:

* each pass shuffles the key with a publicly announced seed and splits it
  into blocks.  The ``"classic"`` schedule starts at ``ceil(0.73 / qber)``
  and doubles per pass.  The default ``"optimized"`` schedule uses powers of
  two, ``2**ceil(log2(1/q))`` then ``2**ceil(log2(4/q))`` and ``n/2`` from the
  third pass on, which leaks noticeably fewer parities;
* Alice discloses every block parity of the pass;
* odd blocks are binary-searched, many blocks at once;
* a correction makes blocks of earlier passes odd again, and the search
  continues there (the cascade) until no known block is odd.

Bob remembers every parity Alice has disclosed, including the halves visited
during binary searches.  Each pass is a forest of binary trees (one per
block, split at ``lo + (hi - lo) // 2``); a search starts at the smallest
known odd node on the path of a corrected bit and only asks for children
whose parity is not already known or implied by the parent.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass

import numpy as np
from numba import njit

from .postproc import KeyBlock, binary_entropy
from .toeplitz import TAG_BITS, verification_tag


SCHEDULES = ("optimized", "classic")
EXTRA_BLOCKS = 64


class ReconciliationError(RuntimeError):
    """Raised when Cascade fails to converge within the allowed passes."""


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class StartPass:
    index: int
    seed: int | None  # None keeps the key order (first pass)
    block_size: int


@dataclass(frozen=True)
class ParityQuery:
    index: int
    lo: np.ndarray
    hi: np.ndarray


@dataclass(frozen=True)
class TagRequest:
    seed: int
    bits: int = TAG_BITS


@njit(cache=True)
def _apply_swaps(j):
    p = np.arange(j.size)
    for i in range(j.size - 1, 0, -1):
        k = j[i]
        p[i], p[k] = p[k], p[i]
    return p


@lru_cache(maxsize=8)
def _permutation(n: int, seed: int | None) -> np.ndarray:
    # public data derived from an announced seed, so both parties may share the cache
    if seed is None:
        perm = np.arange(n, dtype=np.int64)
    else:
        # Fisher-Yates with swap targets drawn up front
        j = (np.random.default_rng(seed).random(n) * np.arange(1, n + 1)).astype(np.int64)
        np.minimum(j, np.arange(n), out=j)
        perm = _apply_swaps(j)
    perm.setflags(write=False)
    return perm


def _xor_prefix(bits: np.ndarray) -> np.ndarray:
    out = np.zeros(bits.size + 1, dtype=np.uint8)
    np.bitwise_xor.accumulate(bits, out=out[1:])
    return out


class CascadeAlice:
    """Holder of the reference key; answers parity and tag requests."""

    def __init__(self, key: KeyBlock):
        self._bits = key.bits
        self._prefix: dict[int, np.ndarray] = {}

    def handle(self, msg):
        if isinstance(msg, StartPass):
            perm = _permutation(self._bits.size, msg.seed)
            prefix = _xor_prefix(self._bits[perm])
            self._prefix[msg.index] = prefix
            n, k = self._bits.size, msg.block_size
            edges = np.minimum(np.arange(0, n + k, k), n)
            edges = edges[: int(math.ceil(n / k)) + 1]
            return prefix[edges[1:]] ^ prefix[edges[:-1]]
        if isinstance(msg, ParityQuery):
            prefix = self._prefix[msg.index]
            return prefix[msg.hi] ^ prefix[msg.lo]
        if isinstance(msg, TagRequest):
            return verification_tag(KeyBlock(self._bits), msg.seed, msg.bits)
        raise TypeError(f"unexpected message {type(msg).__name__}")


class LocalTransport:
    """In-process transport that tallies disclosed bits.

    Bob's requests carry only indices and public seeds; the replies (parities
    and hash tags) are what an eavesdropper learns about the key.
    """

    def __init__(self, peer):
        self.peer = peer
        self.leaked_bits = 0
        self.messages = 0

    def request(self, msg):
        reply = self.peer.handle(msg)
        self.messages += 1
        self.leaked_bits += int(np.size(reply))
        return reply


@dataclass
class ReconciliationReport:
    leaked_bits: int
    passes: int
    corrected_errors: int
    f_ec_measured: float
    parity_bits: int = 0
    tag_bits: int = 0
    verified: bool = False


@njit(cache=True)
def _bob_parity1(prefix0, flipped, lo, hi):
    flips = np.searchsorted(flipped, hi) - np.searchsorted(flipped, lo)
    return (prefix0[hi] ^ prefix0[lo] ^ flips) & 1


@njit(cache=True)
def _descend(known, apar, prefix0, flipped, b, h, lo, hi):
    """Advance each search while the left child's parity is known.

    Returns the indices of searches stalled on an unknown child.
    """
    stalled = np.empty(b.size, dtype=np.int64)
    m = 0
    for i in range(b.size):
        while hi[i] - lo[i] > 1:
            left = 2 * h[i]
            if not known[b[i], left]:
                stalled[m] = i
                m += 1
                break
            mid = lo[i] + (hi[i] - lo[i]) // 2
            if apar[b[i], left] != _bob_parity1(prefix0, flipped, lo[i], mid):
                h[i] = left
                hi[i] = mid
            else:
                h[i] = left + 1
                lo[i] = mid
    return stalled[:m]


@njit(cache=True)
def _deepest_odd(known, apar, prefix0, flipped, pos, k, n):
    out_h = np.zeros(pos.size, dtype=np.int64)
    out_lo = np.zeros(pos.size, dtype=np.int64)
    out_hi = np.zeros(pos.size, dtype=np.int64)
    for i in range(pos.size):
        b = pos[i] // k
        lo = b * k
        hi = min(lo + k, n)
        h = 1
        while True:
            if known[b, h] and apar[b, h] != _bob_parity1(prefix0, flipped, lo, hi):
                out_h[i] = h
                out_lo[i] = lo
                out_hi[i] = hi
            if hi - lo <= 1:
                break
            mid = lo + (hi - lo) // 2
            if pos[i] < mid:
                h, hi = 2 * h, mid
            else:
                h, lo = 2 * h + 1, mid
    return out_h, out_lo, out_hi


class _Pass:
    def __init__(self, index, n, k, perm, bob_bits):
        self.index = index
        self.k = k
        self.perm = perm
        self.inv = np.empty(n, dtype=np.int64)
        self.inv[perm] = np.arange(n, dtype=np.int64)
        self.nblocks = int(math.ceil(n / k))
        self.depth = max(0, int(math.ceil(math.log2(k)))) if k > 1 else 0
        width = 1 << (self.depth + 1)
        self.known = np.zeros((self.nblocks, width), dtype=bool)
        self.apar = np.zeros((self.nblocks, width), dtype=np.uint8)
        self.prefix0 = _xor_prefix(bob_bits[perm])
        self.flipped = np.zeros(0, dtype=np.int64)  # sorted pass positions of corrected bits
        self.n = n

    def block_range(self, b):
        lo = b * self.k
        return lo, np.minimum(lo + self.k, self.n)

    def bob_parity(self, lo, hi):
        m = lo.size
        c = np.searchsorted(self.flipped, np.concatenate([hi, lo]))
        flips = c[:m] - c[m:]
        return (self.prefix0[hi] ^ self.prefix0[lo] ^ (flips & 1)).astype(np.uint8)

    def add_flips(self, orig_idx):
        if orig_idx.size:
            self.flipped = np.sort(np.concatenate([self.flipped, self.inv[orig_idx]]))


class CascadeBob:
    def __init__(self, key: KeyBlock, transport: LocalTransport, qber_estimate: float, seed: int = 0,
                 schedule: str = "optimized"):
        if not 0 < qber_estimate <= 0.5:
            raise ValueError("qber_estimate must lie in (0, 0.5]")
        if schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {schedule!r}; choose from {SCHEDULES}")
        self.schedule = schedule
        self.qber = qber_estimate
        self.bits = key.bits.copy()
        self.n = self.bits.size
        self.transport = transport
        self.k1 = max(2, int(math.ceil(0.73 / qber_estimate)))
        self.seed = int(seed)
        self.passes: list[_Pass] = []
        self.pending: list[list[np.ndarray]] = []
        self.corrected = 0
        self.parity_bits = 0
        self.tag_bits = 0

    # -- protocol steps -----------------------------------------------------

    def block_size(self, index: int) -> int:
        n = max(self.n, 1)
        if self.schedule == "classic":
            return int(min(self.k1 * (2 ** index), n))
        if index == 0:
            k = 2 ** math.ceil(math.log2(1.0 / self.qber))
        elif index == 1:
            k = 2 ** math.ceil(math.log2(4.0 / self.qber))
        else:
            k = n // 2
        return int(max(1, min(k, n // 2 if n > 1 else 1)))

    def extra_block_size(self) -> int:
        return max(self.block_size(0), -(-self.n // EXTRA_BLOCKS))

    def run_pass(self, block_size: int | None = None):
        index = len(self.passes)
        k = self.block_size(index) if block_size is None else int(block_size)
        seed = None
        if index > 0:
            seed = int(np.random.SeedSequence([self.seed, index]).generate_state(1, np.uint64)[0])
        before = self.transport.leaked_bits
        apar_blocks = self.transport.request(StartPass(index, seed, k))
        self.parity_bits += self.transport.leaked_bits - before
        ps = _Pass(index, self.n, k, _permutation(self.n, seed), self._original_bits())
        if self.passes:
            ps.add_flips(np.flatnonzero(self._flip_mask()))
        ps.known[:, 1] = True
        ps.apar[:, 1] = apar_blocks
        self.passes.append(ps)
        self.pending.append([])
        b = np.arange(ps.nblocks)
        lo, hi = ps.block_range(b)
        odd = ps.bob_parity(lo, hi) != apar_blocks
        b = b[odd]
        lo, hi = ps.block_range(b)
        self._search(ps, b, np.ones(b.size, dtype=np.int64), lo, hi)
        self._settle()

    def verify(self, seed: int, bits: int = TAG_BITS) -> bool:
        before = self.transport.leaked_bits
        tag = self.transport.request(TagRequest(seed, bits))
        self.tag_bits += self.transport.leaked_bits - before
        return bool(np.array_equal(tag, verification_tag(KeyBlock(self.bits), seed, bits)))

    # -- internals ------------------------------------------------------------

    def _original_bits(self):
        if not hasattr(self, "_orig"):
            self._orig = self.bits.copy()
        return self._orig

    def _flip_mask(self):
        return self.bits != self._original_bits()

    def _settle(self):
        while True:
            progressed = False
            for ps, pend in zip(self.passes, self.pending):
                if not pend:
                    continue
                flips = np.unique(np.concatenate(pend))
                pend.clear()
                b, h, lo, hi = self._odd_nodes(ps, flips)
                if b.size:
                    self._search(ps, b, h, lo, hi)
                    progressed = True
            if not progressed and not any(self.pending):
                return

    def _odd_nodes(self, ps: _Pass, flips):
        """Deepest known odd node on each flipped bit's path, without nesting."""
        pos = ps.inv[flips]
        b = pos // ps.k
        h, lo, hi = _deepest_odd(ps.known, ps.apar, ps.prefix0, ps.flipped, pos, ps.k, ps.n)
        found = h > 0
        b, h, lo, hi = b[found], h[found], lo[found], hi[found]
        if b.size == 0:
            return b, h, lo, hi
        key = b * (1 << (ps.depth + 1)) + h
        _, first = np.unique(key, return_index=True)
        b, h, lo, hi = b[first], h[first], lo[first], hi[first]
        order = np.lexsort((-(hi - lo), lo, b))
        b, h, lo, hi = b[order], h[order], lo[order], hi[order]
        # a node whose successor (same block) starts inside it contains another selected node
        nested = np.zeros(b.size, dtype=bool)
        nested[:-1] = (b[1:] == b[:-1]) & (lo[1:] < hi[:-1])
        keep = ~nested
        return b[keep], h[keep], lo[keep], hi[keep]

    def _search(self, ps: _Pass, b, h, lo, hi):
        """Binary search in odd nodes (disjoint) and correct one error in each."""
        b, h, lo, hi = (np.asarray(a, dtype=np.int64).copy() for a in (b, h, lo, hi))
        while True:
            # walk down through nodes whose parity is already known
            ask = _descend(ps.known, ps.apar, ps.prefix0, ps.flipped, b, h, lo, hi)
            if ask.size == 0:
                break
            mid = lo[ask] + (hi[ask] - lo[ask]) // 2
            before = self.transport.leaked_bits
            reply = self.transport.request(ParityQuery(ps.index, lo[ask], mid))
            self.parity_bits += self.transport.leaked_bits - before
            bl, hl = b[ask], 2 * h[ask]
            ps.known[bl, hl] = True
            ps.apar[bl, hl] = reply
            ps.known[bl, hl + 1] = True
            ps.apar[bl, hl + 1] = ps.apar[bl, h[ask]] ^ reply
        fixed = ps.perm[lo]
        self.bits[fixed] ^= 1
        self.corrected += fixed.size
        for other in self.passes:
            other.add_flips(fixed)
        for pend in self.pending:
            pend.append(fixed)


def cascade_correct(alice: KeyBlock, bob: KeyBlock, qber_estimate: float, seed: int = 0, passes: int = 4,
                    max_passes: int = 16, qber_true: float | None = None, verify_bits: int = TAG_BITS,
                    schedule: str = "optimized"):
    """Reconcile Bob's key with Alice's.

    Runs ``passes`` Cascade passes, then compares verification tags; on a
    mismatch further passes are run, each followed by a new tag comparison,
    up to ``max_passes``.  Tag bits count as leaked.

    Returns ``(corrected_key, report)``.  ``f_ec_measured`` uses
    ``qber_true`` when given, else the actual error fraction.
    """
    if alice.length != bob.length:
        raise ValueError("keys must have equal length")
    if not 0 < qber_estimate <= 0.11:
        raise ValueError("qber_estimate must lie in (0, 0.11]")
    n = alice.length
    true_errors = int(np.count_nonzero(alice.bits != bob.bits))
    transport = LocalTransport(CascadeAlice(alice))
    party = CascadeBob(bob, transport, qber_estimate, seed, schedule)
    verified = n == 0
    if n:
        for _ in range(passes):
            party.run_pass()
        tag_seed = 0
        verified = party.verify(_tag_seed(seed, tag_seed), verify_bits)
        while not verified and len(party.passes) < max_passes:
            # a residual error pattern survived; finer blocks split it with high probability
            party.run_pass(party.extra_block_size())
            tag_seed += 1
            verified = party.verify(_tag_seed(seed, tag_seed), verify_bits)
    q = qber_true if qber_true is not None else (true_errors / n if n else 0.0)
    h = n * binary_entropy(q) if n else 0.0
    report = ReconciliationReport(
        leaked_bits=transport.leaked_bits,
        passes=len(party.passes),
        corrected_errors=party.corrected,
        f_ec_measured=transport.leaked_bits / h if h > 0 else math.inf,
        parity_bits=party.parity_bits,
        tag_bits=party.tag_bits,
        verified=verified,
    )
    if not verified:
        raise ReconciliationError(f"keys still differ after {report.passes} passes")
    return KeyBlock(party.bits), report


def _tag_seed(seed: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, 0x7A6, attempt]).generate_state(1, np.uint64)[0])
