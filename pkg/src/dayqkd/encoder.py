"""Jones-vector model of the polarization state encoder.

States are parameterized on the Bloch sphere by a colatitude ``theta`` (set by
the inner interferometer) and a longitude ``phi`` (set by the external phase
modulators)::

    |psi> = cos(theta/2)|H> + exp(i phi) sin(theta/2)|V>

The protocol only ever prepares three states: |L>, |R> (the Z basis, bits
0 and 1) and |+> (the X basis).  Encoder imperfections are offsets applied to
``theta`` and ``phi`` before the state is built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Z = "Z"
X = "X"

_NORM_TOL = 1e-12


@dataclass(frozen=True)
class JonesVector:
    """Normalized polarization state with the global phase fixed so that
    ``amp_h`` is real and non-negative."""

    amp_h: complex
    amp_v: complex

    @classmethod
    def from_amplitudes(cls, amp_h: complex, amp_v: complex) -> "JonesVector":
        norm = math.sqrt(abs(amp_h) ** 2 + abs(amp_v) ** 2)
        if norm == 0.0:
            raise ValueError("zero Jones vector cannot be normalized")
        amp_h, amp_v = complex(amp_h) / norm, complex(amp_v) / norm
        if abs(amp_h) > 0.0:
            phase = amp_h / abs(amp_h)
            amp_h, amp_v = amp_h / phase, amp_v / phase
            amp_h = complex(amp_h.real, 0.0)
        elif abs(amp_v) > 0.0:
            # pure |V>: pin the remaining phase on the V amplitude instead
            amp_v = complex(abs(amp_v), 0.0)
        return cls(amp_h, amp_v)

    def as_array(self) -> np.ndarray:
        return np.array([self.amp_h, self.amp_v], dtype=complex)

    def inner(self, other: "JonesVector") -> complex:
        """<self|other>."""
        return self.amp_h.conjugate() * other.amp_h + self.amp_v.conjugate() * other.amp_v

    def orthogonal(self) -> "JonesVector":
        # (a, b) -> (-b*, a*) is orthogonal and still normalized
        return JonesVector.from_amplitudes(-self.amp_v.conjugate(), self.amp_h.conjugate())

    def overlap(self, other: "JonesVector") -> float:
        """|<self|other>|^2."""
        return abs(self.inner(other)) ** 2

    def is_normalized(self) -> bool:
        return abs(abs(self.amp_h) ** 2 + abs(self.amp_v) ** 2 - 1.0) <= _NORM_TOL


@dataclass(frozen=True)
class EncoderImperfection:
    """Offsets of the encoder's physical knobs from their nominal settings.

    ``intensity_imbalance`` scales the mean photon number of Z-basis bit-1
    pulses relative to bit-0 pulses (1.0 means balanced).
    """

    theta_error: float = 0.0
    phi_error: float = 0.0
    intensity_imbalance: float = 1.0

    def __post_init__(self):
        if not self.intensity_imbalance > 0:
            raise ValueError("intensity_imbalance must be positive")

    @property
    def is_ideal(self) -> bool:
        return self.theta_error == 0.0 and self.phi_error == 0.0 and self.intensity_imbalance == 1.0


IDEAL = EncoderImperfection()


def encode_bloch(theta: float, phi: float) -> JonesVector:
    if not 0.0 <= theta <= math.pi:
        raise ValueError(f"theta={theta!r} outside [0, pi]")
    if not -math.pi <= phi <= math.pi:
        raise ValueError(f"phi={phi!r} outside [-pi, pi]")
    amp_h = math.cos(theta / 2.0)
    amp_v = complex(math.cos(phi), math.sin(phi)) * math.sin(theta / 2.0)
    return JonesVector.from_amplitudes(amp_h, amp_v)


H = encode_bloch(0.0, 0.0)
V = encode_bloch(math.pi, 0.0)
PLUS = encode_bloch(math.pi / 2, 0.0)
MINUS = encode_bloch(math.pi / 2, math.pi)
L = encode_bloch(math.pi / 2, -math.pi / 2)
R = encode_bloch(math.pi / 2, math.pi / 2)

# nominal Bloch angles of the three prepared states
_NOMINAL = {
    (Z, 0): (math.pi / 2, -math.pi / 2),
    (Z, 1): (math.pi / 2, math.pi / 2),
    (X, 0): (math.pi / 2, 0.0),
}


def ideal_target(basis: str, bit: int) -> JonesVector:
    """Ideal state for a basis/bit pair (also defines the analyzer projectors)."""
    return {(Z, 0): L, (Z, 1): R, (X, 0): PLUS, (X, 1): MINUS}[(basis, int(bit))]


def _wrap_phase(phi: float) -> float:
    return (phi + math.pi) % (2 * math.pi) - math.pi if abs(phi) > math.pi else phi


def _fold_colatitude(theta: float, phi: float) -> tuple[float, float]:
    # a colatitude pushed past a pole is the same state seen from the other side
    if theta < 0.0:
        return -theta, _wrap_phase(phi + math.pi)
    if theta > math.pi:
        return 2 * math.pi - theta, _wrap_phase(phi + math.pi)
    return theta, phi


def command_to_state(basis: str, bit: int, imperfection: EncoderImperfection = IDEAL) -> JonesVector:
    """Polarization state produced for an encoder command."""
    key = (basis, int(bit))
    if key == (X, 1):
        raise ValueError("the three-state protocol never prepares |->")
    if key not in _NOMINAL:
        raise ValueError(f"unknown command basis={basis!r} bit={bit!r}")
    theta0, phi0 = _NOMINAL[key]
    theta, phi = _fold_colatitude(theta0 + imperfection.theta_error, phi0 + imperfection.phi_error)
    return encode_bloch(theta, _wrap_phase(phi))


def extinction_ratio(state: JonesVector, target: JonesVector) -> float:
    """Power ratio (dB) between the target polarization and its orthogonal one.

    Returns ``math.inf`` when no power leaks into the orthogonal polarization.
    """
    wanted = target.overlap(state)
    leaked = target.orthogonal().overlap(state)
    if leaked <= 0.0:
        return math.inf
    if wanted <= 0.0:
        return -math.inf
    return 10.0 * math.log10(wanted / leaked)


def intrinsic_qber_from_er(er_db: float) -> float:
    if er_db < 0:
        raise ValueError("extinction ratio must be >= 0 dB")
    if math.isinf(er_db):
        return 0.0
    return 1.0 / (1.0 + 10.0 ** (er_db / 10.0))


def theta_error_for_er(er_db: float) -> float:
    """Colatitude offset that gives an L/R/+ state the requested extinction ratio.

    For a pure colatitude offset ``d`` the leaked power is ``sin^2(d/2)``.
    """
    leak = intrinsic_qber_from_er(er_db)
    return 2.0 * math.asin(math.sqrt(leak))
