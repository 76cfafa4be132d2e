import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from dayqkd.channel import DetectorBank, LinkModel, StatePreparer
from dayqkd.decoy import (ASYMPTOTIC, FINITE, DecoyCounts, KeyBudget, LinkScenario, SecurityEpsilons,
                          analyze_counts, decoy_bounds, gamma, hoeffding_delta, key_length, modeled_counts,
                          modeled_skr, optimize_operating_point, skr, tau_n)
from dayqkd.protocol import ProtocolParams
from oracles import decoy_mc

P = ProtocolParams()
SCENARIO = LinkScenario(LinkModel(), DetectorBank(), StatePreparer.from_extinction(24.0, 30.0))


def paper_counts(scale=1e8):
    return modeled_counts(P, SCENARIO, n_z_target=scale)


def test_tau_worked_values():
    assert tau_n(0, 0.56, 0.27, 0.7) == pytest.approx(0.6289, abs=5e-5)
    assert tau_n(0, 0.0, 0.3, 1.0) == 1.0
    assert tau_n(2, 0.0, 0.3, 1.0) == 0.0
    assert sum(tau_n(n, 0.56, 0.27, 0.7) for n in range(51)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("n", [0, 1, 2, 5])
def test_tau_matches_poisson_mixture(n):
    want = sum(p * math.exp(-mu) * mu ** n / math.factorial(n) for mu, p in ((0.56, 0.7), (0.27, 0.3)))
    assert tau_n(n, 0.56, 0.27, 0.7) == pytest.approx(want, rel=1e-13)


def test_tau_vacuum_intensity():
    assert tau_n(0, 0.5, 0.0, 0.6) == pytest.approx(0.6 * math.exp(-0.5) + 0.4)
    assert tau_n(3, 0.5, 0.0, 0.6) == pytest.approx(0.6 * math.exp(-0.5) * 0.125 / 6)


def test_hoeffding_value():
    # sqrt(5e7 * ln(1.9e11)) worked out by hand: ln(1.9e11) = ln 1.9 + 11 ln 10 = 25.970290
    assert hoeffding_delta(1e8, 1e-10 / 19) == pytest.approx(math.sqrt(5e7 * 25.970290), rel=1e-6)
    assert hoeffding_delta(1e8, 1e-10 / 19) == pytest.approx(36_035, abs=1)
    assert hoeffding_delta(0, 0.1) == 0.0
    assert hoeffding_delta(1e6, 1.0) == 0.0
    with pytest.raises(ValueError):
        hoeffding_delta(10, 0.0)


def test_eps1_split():
    assert SecurityEpsilons().eps1 == pytest.approx(1e-10 / 19)
    with pytest.raises(ValueError):
        SecurityEpsilons(eps_sec=0.0)


def test_gamma_degenerate_arguments():
    assert gamma(1e-10, 0.0, 1e6, 1e6) == 0.0
    assert gamma(1e-10, 0.01, 0.0, 1e6) == 0.0
    assert gamma(1e-10, 0.01, 1e6, 1e6) > 0


def test_zero_counts_give_no_key():
    b = analyze_counts(DecoyCounts(), P)
    assert b.l == 0 and b.phi_z_up == 0.5
    b = analyze_counts(DecoyCounts(n_z_mu1=10, n_z_mu2=3, duration=1.0), P)
    assert b.l == 0


def test_counts_validation_and_arithmetic():
    with pytest.raises(ValueError):
        DecoyCounts(n_z_mu1=1, m_z_mu1=2)
    with pytest.raises(ValueError):
        DecoyCounts(n_x_mu2=-1)
    c = DecoyCounts(n_z_mu1=10, m_z_mu1=1, n_x_mu2=4, duration=2.0)
    assert (c + c).n_z == 20 and (c + c).duration == 4.0
    assert c.scaled(0.5).n_x == 2.0
    assert DecoyCounts.from_dict(c.to_dict()) == c
    assert c.basis(0) == (10, 0, 1, 0)


def test_decoy_requires_ordered_intensities():
    with pytest.raises(ValueError):
        decoy_bounds(paper_counts(), ProtocolParams(mu1_x=0.2, mu2_x=0.33))
    with pytest.raises(ValueError):
        decoy_bounds(paper_counts(), P, mode="sideways")


def test_paper_point_key_length_is_positive():
    c = paper_counts()
    b = analyze_counts(c, P)
    assert b.s_z1_low > 0.4 * c.n_z
    assert 0 < b.phi_z_up < 0.05
    assert b.l > 0
    assert skr(b, c.duration) == pytest.approx(b.l / c.duration)
    with pytest.raises(ValueError):
        skr(b, c.duration, mode=ASYMPTOTIC)


@given(st.floats(1e5, 1e10))
def test_asymptotic_dominates_finite(n):
    c = paper_counts(n)
    fin = analyze_counts(c, P, mode=FINITE)
    asym = analyze_counts(c, P, mode=ASYMPTOTIC)
    assert asym.l >= fin.l
    assert asym.s_z1_low >= fin.s_z1_low
    assert asym.phi_z_up <= fin.phi_z_up + 1e-15


@given(st.floats(1e6, 1e9))
def test_doubling_the_block_helps(n):
    l1 = analyze_counts(paper_counts(n), P).l
    l2 = analyze_counts(paper_counts(2 * n), P).l
    assert l2 >= 2 * l1


@given(st.floats(0.0, 0.02), st.floats(0.0, 0.02))
def test_more_errors_never_lengthen_the_key(q1, q2):
    assume(q1 < q2)
    base = paper_counts(1e8)

    def with_q(q):
        d = base.to_dict()
        d["m_z_mu1"], d["m_z_mu2"] = q * d["n_z_mu1"], q * d["n_z_mu2"]
        return analyze_counts(DecoyCounts(**d), P)

    assert with_q(q2).l <= with_q(q1).l


def test_measured_leakage_overrides_model():
    c = paper_counts()
    b = decoy_bounds(c, P)
    l_model = key_length(b, c).l
    l_meas = key_length(b, c, lambda_ec=key_length(b, c).lambda_ec + 1000).l
    assert l_model - l_meas in (1000, 1001)


def test_key_budget_defaults_are_safe():
    assert KeyBudget().l == 0 and KeyBudget().phi_z_up == 0.5


def test_high_loss_gives_zero():
    far = LinkScenario(LinkModel().with_total_loss(60.0), DetectorBank())
    assert modeled_skr(P, far) == 0.0


def test_optimizer_near_nominal_point():
    res = optimize_operating_point(SCENARIO)
    nominal = modeled_skr(P, SCENARIO)
    assert res.skr >= nominal
    assert nominal >= 0.9 * res.skr
    assert res.params.mu1_z > res.params.mu2_z


def test_optimizer_is_deterministic():
    a = optimize_operating_point(SCENARIO, refine_steps=1)
    b = optimize_operating_point(SCENARIO, refine_steps=1)
    assert a.params == b.params and a.skr == b.skr


def test_bounds_hold_on_tagged_trials():
    op = decoy_mc.OperatingPoint(pulses=10 ** 9, eta=2e-3, y0=1e-6, e_d=0.005)
    counts, truth = decoy_mc.run_trials(op, 300, seed=17)
    eps = SecurityEpsilons()
    for i in range(300):
        c = DecoyCounts(**{k: int(v[i]) for k, v in counts.items()}, duration=1.0)
        b = decoy_bounds(c, P, eps)
        assert b.s_z0_low <= truth["s_z0"][i] <= b.s_z0_up
        assert b.s_z1_low <= truth["s_z1"][i]
        assert b.s_x1_low <= truth["s_x1"][i]


@pytest.mark.parametrize("y0", [0.0, 1e-6, 1e-5])
def test_asymptotic_single_photon_bound_on_expected_counts(y0):
    op = decoy_mc.OperatingPoint(pulses=10 ** 12, eta=10 ** -2.4 * 0.85, y0=y0, e_d=0.004)
    counts, truth = decoy_mc.expected_counts(op)
    b = decoy_bounds(DecoyCounts(**counts), P, mode=ASYMPTOTIC)
    # sound, and within the slack the 2*m vacuum bound leaves to a single decoy
    assert 0.8 * truth["s_z1"] <= b.s_z1_low <= truth["s_z1"]
    assert 0.75 * truth["s_x1"] <= b.s_x1_low <= truth["s_x1"]
    assert b.s_z0_low <= truth["s_z0"] <= b.s_z0_up + 1e-9
