import cmath
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dayqkd import encoder as enc

S = 1 / math.sqrt(2)


def close(state, h, v, tol=1e-12):
    return abs(state.amp_h - h) < tol and abs(state.amp_v - v) < tol


def test_bloch_poles_and_equator():
    assert close(enc.encode_bloch(math.pi / 2, 0.0), S, S)
    assert close(enc.encode_bloch(0.0, 1.234), 1, 0)
    assert close(enc.encode_bloch(math.pi / 2, -math.pi / 2), S, -1j * S)


@pytest.mark.parametrize("theta,phi", [(-0.1, 0.0), (3.2, 0.0), (1.0, 3.5)])
def test_bloch_rejects_out_of_range(theta, phi):
    with pytest.raises(ValueError):
        enc.encode_bloch(theta, phi)


@given(st.floats(0, math.pi), st.floats(-math.pi, math.pi))
def test_bloch_states_are_normalized(theta, phi):
    assert enc.encode_bloch(theta, phi).is_normalized()


def test_ideal_commands():
    assert enc.command_to_state(enc.Z, 0) == enc.L
    assert enc.command_to_state(enc.Z, 1) == enc.R
    assert enc.command_to_state(enc.X, 0) == enc.PLUS


def test_minus_is_never_prepared():
    with pytest.raises(ValueError):
        enc.command_to_state(enc.X, 1)


def test_colatitude_error_sets_extinction():
    s = enc.command_to_state(enc.Z, 0, enc.EncoderImperfection(theta_error=0.063))
    leak = enc.R.overlap(s)
    assert leak == pytest.approx(math.sin(0.0315) ** 2, rel=1e-12)
    assert enc.extinction_ratio(s, enc.L) == pytest.approx(30.0, abs=0.05)


def test_extinction_ratio_limits():
    assert enc.extinction_ratio(enc.L, enc.L) == math.inf
    assert enc.extinction_ratio(enc.PLUS, enc.L) == pytest.approx(0.0, abs=1e-9)


def test_extinction_of_known_leak():
    # |<perp|psi>|^2 = 1e-3 by construction
    psi = enc.JonesVector.from_amplitudes(math.sqrt(1 - 1e-3), math.sqrt(1e-3))
    assert enc.extinction_ratio(psi, enc.H) == pytest.approx(10 * math.log10(0.999 / 0.001), abs=1e-9)
    assert enc.extinction_ratio(psi, enc.H) == pytest.approx(29.996, abs=5e-4)


@pytest.mark.parametrize("er,q", [(0.0, 0.5), (30.0, 9.99e-4), (23.5, 4.45e-3)])
def test_intrinsic_qber(er, q):
    assert enc.intrinsic_qber_from_er(er) == pytest.approx(q, rel=2e-3)


@given(st.floats(0.5, 60.0))
def test_theta_error_inverts_extinction(er):
    d = enc.theta_error_for_er(er)
    for basis in (enc.Z, enc.X):
        s = enc.command_to_state(basis, 0, enc.EncoderImperfection(theta_error=d))
        assert enc.extinction_ratio(s, enc.ideal_target(basis, 0)) == pytest.approx(er, abs=1e-6)


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_imperfect_states_stay_normalized(dt, dp):
    imp = enc.EncoderImperfection(theta_error=dt, phi_error=dp)
    for key in ((enc.Z, 0), (enc.Z, 1), (enc.X, 0)):
        assert enc.command_to_state(*key, imp).is_normalized()


def test_analyzer_states_are_orthonormal_pairs():
    assert enc.L.overlap(enc.R) == pytest.approx(0.0, abs=1e-15)
    assert enc.PLUS.overlap(enc.MINUS) == pytest.approx(0.0, abs=1e-15)
    assert enc.L.overlap(enc.PLUS) == pytest.approx(0.5)
    assert cmath.isclose(enc.L.inner(enc.L), 1.0)


def test_imbalance_must_be_positive():
    with pytest.raises(ValueError):
        enc.EncoderImperfection(intensity_imbalance=0.0)
