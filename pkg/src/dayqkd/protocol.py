"""Protocol parameters and Alice's random preparation tape.

The tape is counter based: the uniform variate used for field ``f`` of slot
``k`` is a fixed function of ``(seed, 3*k + f)``.  Any subset of slots can
therefore be drawn in any order, by any number of workers, and always yields
the same records as a full sequential pass.  Fields are consumed in the order
basis, bit, intensity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

BASIS_Z = 0
BASIS_X = 1
MU1 = 0
MU2 = 1

_FIELD_BASIS = 0
_FIELD_BIT = 1
_FIELD_INTENSITY = 2
_FIELDS = 3

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


class RandomSource:
    """Seeded stand-in for the transmitter's entropy source.

    ``uniform(counters)`` maps 64-bit counters to doubles in [0, 1); equal
    seeds give equal values for equal counters.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self._key = _splitmix64(np.array([self.seed], dtype=np.uint64))[0]

    def uniform(self, counters) -> np.ndarray:
        c = np.asarray(counters, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = _splitmix64(c ^ self._key)
            z = _splitmix64(z + self._key)
        return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def bits(self, counters) -> np.ndarray:
        return (self.uniform(counters) < 0.5).astype(np.uint8)

    def stream(self, n: int, start: int = 0) -> np.ndarray:
        return self.uniform(np.arange(start, start + n, dtype=np.uint64))


@dataclass(frozen=True)
class ProtocolParams:
    p_z_alice: float = 0.9
    p_mu1: float = 0.7
    mu1_z: float = 0.56
    mu2_z: float = 0.27
    mu1_x: float = 0.69
    mu2_x: float = 0.33
    p_z_bob: float = 0.9
    clock_rate: float = 50e6

    def __post_init__(self):
        for name in ("p_z_alice", "p_mu1", "p_z_bob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name}={getattr(self, name)!r} is not a probability")
        if min(self.mu1_z, self.mu2_z, self.mu1_x, self.mu2_x) < 0:
            raise ValueError("mean photon numbers must be non-negative")
        if not self.clock_rate > 0:
            raise ValueError("clock_rate must be positive")

    def check_decoy(self):
        """Enforce the ordering the decoy analysis needs.

        Degenerate settings (a probability of exactly 0 or 1, equal
        intensities) are accepted by the constructor for sampling, but not here.
        """
        for name in ("p_z_alice", "p_mu1", "p_z_bob"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie strictly inside (0, 1)")
        if not self.mu1_z > self.mu2_z > 0:
            raise ValueError("need mu1_z > mu2_z > 0")
        if not self.mu1_x > self.mu2_x > 0:
            raise ValueError("need mu1_x > mu2_x > 0")

    def intensities(self, basis: int) -> tuple[float, float]:
        return (self.mu1_z, self.mu2_z) if basis == BASIS_Z else (self.mu1_x, self.mu2_x)

    @property
    def p_mu2(self) -> float:
        return 1.0 - self.p_mu1

    def basis_prob(self, basis: int) -> float:
        return self.p_z_alice if basis == BASIS_Z else 1.0 - self.p_z_alice

    def bob_basis_prob(self, basis: int) -> float:
        return self.p_z_bob if basis == BASIS_Z else 1.0 - self.p_z_bob

    def intensity_table(self) -> np.ndarray:
        """2x2 array ``[basis, intensity_class] -> mean photon number``."""
        return np.array([[self.mu1_z, self.mu2_z], [self.mu1_x, self.mu2_x]])

    def to_dict(self) -> dict:
        return asdict(self)


def mean_photon_number(params: ProtocolParams) -> float:
    pz, pm = params.p_z_alice, params.p_mu1
    mz = pm * params.mu1_z + (1 - pm) * params.mu2_z
    mx = pm * params.mu1_x + (1 - pm) * params.mu2_x
    return pz * mz + (1 - pz) * mx


@dataclass
class PulseTrain:
    """Columnar pulse records (one entry per slot)."""

    slot: np.ndarray
    basis: np.ndarray
    bit: np.ndarray
    intensity: np.ndarray

    def __len__(self) -> int:
        return len(self.slot)

    def __post_init__(self):
        n = len(self.slot)
        if not (len(self.basis) == len(self.bit) == len(self.intensity) == n):
            raise ValueError("pulse-train columns differ in length")

    def mean_photons(self, params: ProtocolParams) -> np.ndarray:
        return params.intensity_table()[self.basis, self.intensity]

    def subset(self, mask) -> "PulseTrain":
        return PulseTrain(self.slot[mask], self.basis[mask], self.bit[mask], self.intensity[mask])

    @classmethod
    def concatenate(cls, parts) -> "PulseTrain":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("slot", "basis", "bit", "intensity")))

    @classmethod
    def empty(cls) -> "PulseTrain":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.uint8), np.zeros(0, np.uint8), np.zeros(0, np.uint8))


def pulses_at(slots, params: ProtocolParams, rng: RandomSource) -> PulseTrain:
    """Alice's records for an arbitrary set of slot indices."""
    slots = np.asarray(slots, dtype=np.int64)
    if slots.size and slots.min() < 0:
        raise ValueError("slot indices must be non-negative")
    base = slots.astype(np.uint64) * np.uint64(_FIELDS)
    u_basis = rng.uniform(base + np.uint64(_FIELD_BASIS))
    u_bit = rng.uniform(base + np.uint64(_FIELD_BIT))
    u_int = rng.uniform(base + np.uint64(_FIELD_INTENSITY))
    basis = np.where(u_basis < params.p_z_alice, BASIS_Z, BASIS_X).astype(np.uint8)
    bit = ((u_bit >= 0.5) & (basis == BASIS_Z)).astype(np.uint8)
    intensity = np.where(u_int < params.p_mu1, MU1, MU2).astype(np.uint8)
    return PulseTrain(slots, basis, bit, intensity)


def sample_pulse_train(n_slots: int, params: ProtocolParams, rng: RandomSource,
                       block_size: int = 1 << 22) -> PulseTrain:
    if n_slots <= 0:
        raise ValueError("n_slots must be positive")
    parts = [pulses_at(np.arange(s, min(s + block_size, n_slots), dtype=np.int64), params, rng)
             for s in range(0, n_slots, block_size)]
    return PulseTrain.concatenate(parts)
