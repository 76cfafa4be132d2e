import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dayqkd.protocol import (BASIS_X, BASIS_Z, MU1, ProtocolParams, RandomSource, mean_photon_number, pulses_at,
                             sample_pulse_train)


def test_mean_photon_number_of_operating_point():
    assert mean_photon_number(ProtocolParams()) == pytest.approx(0.9 * (0.7 * 0.56 + 0.3 * 0.27)
                                                                 + 0.1 * (0.7 * 0.69 + 0.3 * 0.33))
    assert mean_photon_number(ProtocolParams()) == pytest.approx(0.4839, abs=5e-5)


def test_mean_photon_degenerate_cases():
    assert mean_photon_number(ProtocolParams(mu1_z=0.3, mu2_z=0.3, mu1_x=0.3, mu2_x=0.3)) == pytest.approx(0.3)
    assert mean_photon_number(ProtocolParams(p_z_alice=1.0, p_mu1=1.0)) == pytest.approx(0.56)


def test_basis_and_intensity_fractions():
    n = 10 ** 6
    p = ProtocolParams()
    t = sample_pulse_train(n, p, RandomSource(5))
    for frac, target in ((np.mean(t.basis == BASIS_Z), 0.9), (np.mean(t.intensity == MU1), 0.7)):
        sigma = math.sqrt(target * (1 - target) / n)
        assert abs(frac - target) < 3 * sigma
    # only |0>, |1> in Z and |+> in X
    assert not np.any(t.bit[t.basis == BASIS_X])


def test_degenerate_basis_probability():
    t = sample_pulse_train(10 ** 4, ProtocolParams(p_z_alice=1.0), RandomSource(1))
    assert np.all(t.basis == BASIS_Z)


def test_records_depend_only_on_slot_and_seed():
    p = ProtocolParams()
    full = sample_pulse_train(10_000, p, RandomSource(9), block_size=777)
    some = np.array([0, 17, 4095, 9999])
    part = pulses_at(some, p, RandomSource(9))
    for f in ("basis", "bit", "intensity"):
        assert np.array_equal(getattr(full, f)[some], getattr(part, f))
    other = pulses_at(some, p, RandomSource(10))
    assert not all(np.array_equal(getattr(part, f), getattr(other, f)) for f in ("basis", "bit", "intensity"))


@given(st.integers(0, 2 ** 64 - 1), st.lists(st.integers(0, 2 ** 63), min_size=1, max_size=50))
def test_uniforms_in_unit_interval(seed, counters):
    u = RandomSource(seed).uniform(counters)
    assert np.all((u >= 0) & (u < 1))
    assert np.array_equal(u, RandomSource(seed).uniform(counters))


def test_uniforms_look_uniform():
    u = RandomSource(123).stream(200_000)
    hist = np.bincount((u * 20).astype(int), minlength=20)
    chi2 = np.sum((hist - 10_000) ** 2 / 10_000)
    assert chi2 < 60  # 19 dof; p ~ 3e-6


@pytest.mark.parametrize("kw", [{"p_z_alice": 1.2}, {"mu1_z": -0.1}, {"clock_rate": 0.0}])
def test_invalid_parameters(kw):
    with pytest.raises(ValueError):
        ProtocolParams(**kw)


@pytest.mark.parametrize("kw", [{"mu2_z": 0.6}, {"p_mu1": 1.0}, {"mu2_x": 0.0}])
def test_decoy_ordering_checked(kw):
    with pytest.raises(ValueError):
        ProtocolParams(**kw).check_decoy()


def test_negative_slots_rejected():
    with pytest.raises(ValueError):
        pulses_at([-1], ProtocolParams(), RandomSource(0))
