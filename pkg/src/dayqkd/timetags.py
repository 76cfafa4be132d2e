"""Receiver-side processing of time-tag streams.

Clock recovery works in three steps.  PPS edges give the coarse drift and the
start of the second.  Signal tags, folded modulo the slot period, form a peak
whose position is the slot phase; per-second centroids of that peak are then
fitted with a straight line to remove residual drift.

Random decisions (efficiency balancing, double-click resolution) are drawn
from counter-based sources keyed by ``(slot, channel)``, so they do not
depend on how a stream is cut into chunks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import DETECTOR_BASIS, DETECTOR_BIT, N_DETECTORS, balance_keep_probabilities
from .decoy import DecoyCounts
from .protocol import BASIS_X, BASIS_Z, MU1, MU2, PulseTrain, RandomSource

PS_PER_S = 1e12
MIN_CONTRAST = 3.0


class NoLockError(RuntimeError):
    """No periodic structure found in the stream."""


class SiftError(ValueError):
    """Alice's and Bob's records cannot be matched."""


@dataclass(frozen=True)
class SyncState:
    """Slot ``k`` is centred at TDC time ``offset_ps + k * slot_period_ps * (1 + drift)``."""

    offset_ps: float
    drift: float
    slot_period_ps: float

    def __post_init__(self):
        if abs(self.drift) >= 1e-6:
            raise ValueError("|drift| must stay below 1e-6")
        if not self.slot_period_ps > 0:
            raise ValueError("slot period must be positive")

    @property
    def scaled_period(self) -> float:
        return self.slot_period_ps * (1.0 + self.drift)

    def slot_and_phase(self, timestamps):
        x = np.asarray(timestamps, dtype=np.float64) - self.offset_ps
        k = np.rint(x / self.scaled_period)
        return k.astype(np.int64), x - k * self.scaled_period

    def to_dict(self) -> dict:
        return {"offset_ps": self.offset_ps, "drift": self.drift, "slot_period_ps": self.slot_period_ps}


def fit_pps(pps) -> tuple[float, float]:
    """Least-squares fit of PPS edges; returns ``(drift, intercept_ps)``."""
    t = np.sort(np.asarray(pps, dtype=np.float64))
    if t.size < 2:
        raise ValueError("need at least two PPS markers")
    j = np.rint(t / PS_PER_S)
    if np.unique(j).size < 2:
        raise ValueError("PPS markers do not span two distinct seconds")
    jm, tm = j.mean(), t.mean()
    slope = np.sum((j - jm) * (t - tm)) / np.sum((j - jm) ** 2)
    drift = slope / PS_PER_S - 1.0
    if abs(drift) >= 1e-6:
        raise NoLockError(f"PPS drift {drift:.3g} outside the GPS-disciplined range")
    return float(drift), float(tm - slope * jm)


def _circular_sum(h: np.ndarray, width: int) -> np.ndarray:
    """Sum of ``width`` consecutive bins starting at each bin (wrapping)."""
    c = np.concatenate([[0], np.cumsum(np.concatenate([h, h[:width]]))])
    return c[width:width + h.size] - c[:h.size]


class PhaseAccumulator:
    """Per-second folded phase histograms of a (possibly chunked) stream."""

    def __init__(self, pps, period_ps: float, tdc_ps: float):
        self.drift_pps, self.intercept = fit_pps(pps)
        self.period = float(period_ps)
        self.tdc = float(tdc_ps)
        self.nbins = int(math.ceil(self.period / self.tdc))
        self._hist: dict[int, np.ndarray] = {}

    def local_time(self, timestamps) -> np.ndarray:
        return (np.asarray(timestamps, dtype=np.float64) - self.intercept) / (1.0 + self.drift_pps)

    def add(self, timestamps):
        t = self.local_time(timestamps)
        if t.size == 0:
            return
        seg = np.floor(t / PS_PER_S).astype(np.int64)
        b = np.minimum((np.mod(t, self.period) / self.tdc).astype(np.int64), self.nbins - 1)
        s0 = int(seg.min())
        flat = np.bincount((seg - s0) * self.nbins + b, minlength=(int(seg.max()) - s0 + 1) * self.nbins)
        flat = flat.reshape(-1, self.nbins)
        for i in np.flatnonzero(flat.any(axis=1)):
            key = s0 + int(i)
            if key in self._hist:
                self._hist[key] += flat[i]
            else:
                self._hist[key] = flat[i].astype(np.int64)

    def solve(self, window_ps: float, min_segment_counts: int = 20) -> SyncState:
        if not self._hist:
            raise NoLockError("empty stream")
        total = np.sum(list(self._hist.values()), axis=0)
        width = max(1, int(round(window_ps / self.tdc)))
        smooth = _circular_sum(total, width)
        if smooth.mean() <= 0 or smooth.max() / smooth.mean() < MIN_CONTRAST:
            contrast = smooth.max() / smooth.mean() if smooth.mean() > 0 else 0.0
            raise NoLockError(f"folded histogram contrast {contrast:.2f} below {MIN_CONTRAST}")
        start = int(np.argmax(smooth))
        centre = (start + width / 2.0) * self.tdc

        dev = (np.arange(self.nbins) + 0.5) * self.tdc - centre
        dev = (dev + self.period / 2) % self.period - self.period / 2
        inside = np.abs(dev) <= window_ps / 2
        outside = np.abs(dev) > window_ps
        times, phases, weights = [], [], []
        for seg in sorted(self._hist):
            h = self._hist[seg].astype(np.float64)
            bg = h[outside].mean() if outside.any() else 0.0
            w = np.clip(h[inside] - bg, 0.0, None)
            if w.sum() < min_segment_counts:
                continue
            times.append((seg + 0.5) * PS_PER_S)
            phases.append(centre + float(np.sum(w * dev[inside]) / w.sum()))
            weights.append(w.sum())
        if not times:
            raise NoLockError("no second with enough signal to fit the phase")
        t, ph, w = map(np.asarray, (times, phases, weights))
        if t.size >= 2:
            slope, intercept = np.polyfit(t, ph, 1, w=np.sqrt(w))
        else:
            slope, intercept = 0.0, ph[0]
        a = (intercept + self.period / 2) % self.period - self.period / 2
        d = self.drift_pps
        drift = (1.0 + d) * (1.0 + slope) - 1.0
        return SyncState(offset_ps=float(self.intercept + (1.0 + d) * a), drift=float(drift),
                         slot_period_ps=self.period)


def recover_clock(timestamps, pps_markers, nominal_period_ps: float, tdc_ps: float = 81.0,
                  window_ps: float = 1000.0) -> SyncState:
    """Offset and drift of the slot clock from detections and PPS edges.

    The offset is determined modulo the slot period and reported in
    ``[-T/2, T/2)`` relative to the PPS-defined time origin.
    """
    ts = np.asarray(timestamps)
    if ts.size < 1000:
        raise ValueError("need at least 1000 tags to recover the clock")
    acc = PhaseAccumulator(pps_markers, nominal_period_ps, tdc_ps)
    acc.add(ts)
    return acc.solve(window_ps)


def window_filter(timestamps, sync: SyncState, window: float):
    """Tags with ``|phase| <= window/2`` (closed interval).

    Returns ``(keep_mask, slot, phase_ps)`` for every input tag.
    """
    slot, phase = sync.slot_and_phase(timestamps)
    keep = np.abs(phase) <= window * PS_PER_S / 2.0 + 1e-6
    return keep, slot, phase


def _tag_counters(slots, channels, lane: int) -> np.ndarray:
    return (np.asarray(slots, dtype=np.uint64) * np.uint64(8)
            + np.asarray(channels, dtype=np.uint64) + np.uint64(lane))


def balance_efficiency(slots, channels, efficiencies, source: RandomSource) -> np.ndarray:
    """Keep mask thinning each channel to the weakest efficiency of its basis."""
    keep_p = balance_keep_probabilities(efficiencies)
    ch = np.asarray(channels)
    return source.uniform(_tag_counters(slots, ch, 0)) < keep_p[ch]


def resolve_double_clicks(slots, channels, source: RandomSource) -> np.ndarray:
    """Keep mask with at most one tag per slot.

    A slot with clicks in both bases first picks a basis uniformly; among the
    clicks of the chosen basis one is kept uniformly.  ``slots`` must be
    grouped (equal values adjacent).
    """
    slots = np.asarray(slots, dtype=np.int64)
    ch = np.asarray(channels, dtype=np.int64)
    n = slots.size
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return keep
    starts = np.flatnonzero(np.r_[True, slots[1:] != slots[:-1]])
    if np.unique(slots[starts]).size != starts.size:
        raise ValueError("tags must be grouped by slot")
    sizes = np.diff(np.r_[starts, n])
    single = sizes == 1
    keep[starts[single]] = True
    multi = np.flatnonzero(~single)
    if multi.size == 0:
        return keep
    group = np.repeat(np.arange(starts.size), sizes)
    is_z = DETECTOR_BASIS[ch] == BASIS_Z
    has_z = np.maximum.reduceat(is_z, starts)
    has_x = np.maximum.reduceat(~is_z, starts)
    # lane 7 is unused by channel counters (channels are 0..3)
    u_basis = source.uniform(np.asarray(slots[starts], dtype=np.uint64) * np.uint64(8) + np.uint64(7))
    choose_z = has_z & (~has_x | (u_basis < 0.5))
    candidate = is_z == choose_z[group]
    u_tag = source.uniform(_tag_counters(slots, ch, 0))
    rows = np.flatnonzero(np.isin(group, multi))
    order = np.lexsort((u_tag[rows], ~candidate[rows], group[rows]))
    r = rows[order]
    first = np.r_[True, group[r][1:] != group[r][:-1]]
    keep[r[first]] = True
    return keep


@dataclass
class SiftResult:
    """Z-basis key material and the decoy tallies of one stream segment."""

    slot: np.ndarray
    alice_bits: np.ndarray
    bob_bits: np.ndarray
    intensity: np.ndarray
    counts: DecoyCounts
    n_x_total: int = 0
    resolved: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def concatenate(cls, parts) -> "SiftResult":
        parts = list(parts)
        counts = DecoyCounts()
        for p in parts:
            counts = counts + p.counts
        cat = lambda f, dt: np.concatenate([getattr(p, f) for p in parts]) if parts else np.zeros(0, dt)  # noqa: E731
        return cls(cat("slot", np.int64), cat("alice_bits", np.uint8), cat("bob_bits", np.uint8),
                   cat("intensity", np.uint8), counts, sum(p.n_x_total for p in parts),
                   sum(p.resolved for p in parts))


def _check_alice(alice: PulseTrain):
    s = alice.slot
    if s.size > 1 and np.any(s[1:] <= s[:-1]):
        dup = np.flatnonzero(s[1:] == s[:-1])
        if dup.size:
            raise SiftError(f"slot collision: two Alice records for slot {int(s[dup[0]])}")
        raise SiftError("Alice's records must be sorted by slot")


def sift(alice: PulseTrain, slots, channels, duration: float = 0.0) -> SiftResult:
    """Match Bob's resolved detections with Alice's records.

    Z/Z slots give key bits, X/X slots give error tallies (a click on X- when
    |+> was sent), mismatched bases are dropped.
    """
    _check_alice(alice)
    slots = np.asarray(slots, dtype=np.int64)
    ch = np.asarray(channels, dtype=np.int64)
    if slots.size == 0:
        return SiftResult(np.zeros(0, np.int64), np.zeros(0, np.uint8), np.zeros(0, np.uint8),
                          np.zeros(0, np.uint8), DecoyCounts(duration=duration))
    idx = np.searchsorted(alice.slot, slots)
    idx_c = np.minimum(idx, max(len(alice) - 1, 0))
    found = (idx < len(alice)) & (alice.slot[idx_c] == slots) if len(alice) else np.zeros(slots.size, bool)
    if not found.all():
        raise SiftError(f"no Alice record for slot {int(slots[~found][0])}")
    a_basis = alice.basis[idx]
    b_basis = DETECTOR_BASIS[ch]
    b_bit = DETECTOR_BIT[ch]
    inten = alice.intensity[idx]
    zz = (a_basis == BASIS_Z) & (b_basis == BASIS_Z)
    xx = (a_basis == BASIS_X) & (b_basis == BASIS_X)
    a_bits = alice.bit[idx]
    z_err = zz & (a_bits != b_bit)
    x_err = xx & (b_bit == 1)
    tally = {}
    for name, sel, err in (("z", zz, z_err), ("x", xx, x_err)):
        for kname, k in (("mu1", MU1), ("mu2", MU2)):
            m = inten == k
            tally[f"n_{name}_{kname}"] = int(np.count_nonzero(sel & m))
            tally[f"m_{name}_{kname}"] = int(np.count_nonzero(err & m))
    return SiftResult(slots[zz], a_bits[zz].astype(np.uint8), b_bit[zz].astype(np.uint8),
                      inten[zz].astype(np.uint8), DecoyCounts(**tally, duration=duration),
                      n_x_total=int(np.count_nonzero(xx)), resolved=int(slots.size))


def noise_guard_ps(window: float) -> float:
    """Phases farther than this from the slot centre count as off-window noise."""
    return window * PS_PER_S / 2.0 + 2000.0


def per_channel_counts(channels, mask=None) -> np.ndarray:
    ch = np.asarray(channels, dtype=np.int64)
    if mask is not None:
        ch = ch[mask]
    return np.bincount(ch, minlength=N_DETECTORS)[:N_DETECTORS]

