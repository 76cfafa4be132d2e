import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dayqkd.channel import (CH_XM, CH_XP, CH_Z0, CH_Z1, ClockModel, CouplingModel, DetectorBank, LinkModel,
                            StatePreparer, StreamSimulator, pps_markers, transmit_and_detect)
from dayqkd.protocol import ProtocolParams, PulseTrain, RandomSource, sample_pulse_train
from dayqkd.timetags import (NoLockError, SiftError, SyncState, balance_efficiency, fit_pps, recover_clock,
                             resolve_double_clicks, sift, window_filter)

P = ProtocolParams()
T_PS = 20_000.0
TDC = 81


def _stream(offset_ps, seconds=2.0, drift=2e-8, seed=1):
    clock = ClockModel(offset_ps=offset_ps, drift=drift, pps_jitter_ps=50.0)
    sim = StreamSimulator(P, LinkModel(), DetectorBank(), clock=clock, seed=seed, chunk_duration=0.1)
    det = [d for _, _, d, _ in sim.iter_chunks(seconds)]
    ts = np.concatenate([d.timestamp for d in det])
    slots = np.concatenate([d.slot for d in det])
    return ts, slots, pps_markers(seconds, clock, seed)


@pytest.mark.parametrize("offset", [0.0, 3250.0, 7350.0, -6000.0])
def test_sync_recovers_offset_and_slots(offset):
    ts, slots, pps = _stream(offset)
    s = recover_clock(ts, pps, T_PS, TDC)
    # flooring on the TDC grid shifts the centroid by about half a bin
    assert s.offset_ps == pytest.approx(offset - TDC / 2, abs=25.0)
    assert s.drift == pytest.approx(2e-8, abs=2e-10)
    k, _ = s.slot_and_phase(ts)
    assert np.mean(k == slots) > 0.999


def test_sync_needs_tags():
    with pytest.raises(ValueError):
        recover_clock(np.arange(10), [0, 10 ** 12], T_PS)


def test_pure_noise_does_not_lock():
    rng = np.random.default_rng(0)
    ts = np.sort(rng.integers(0, 2 * 10 ** 12, 200_000)) // TDC * TDC
    with pytest.raises(NoLockError):
        recover_clock(ts, [0, 10 ** 12, 2 * 10 ** 12], T_PS, TDC)


def test_fit_pps_rejects_runaway_clock():
    with pytest.raises(NoLockError):
        fit_pps([0, int(1e12 * (1 + 1e-5))])
    with pytest.raises(ValueError):
        fit_pps([5])


SYNC = SyncState(0.0, 0.0, T_PS)


def test_window_edges_are_closed():
    ts = np.array([-251, -250, 0, 250, 251, T_PS + 250])
    keep, slot, _ = window_filter(ts, SYNC, 500e-12)
    assert keep.tolist() == [False, True, True, True, False, True]
    assert slot.tolist() == [0, 0, 0, 0, 0, 1]


@given(st.lists(st.integers(0, 10 ** 9), min_size=1, max_size=100))
def test_window_equal_to_period_keeps_everything(ts):
    keep, _, phase = window_filter(np.array(ts), SYNC, T_PS * 1e-12)
    assert keep.all()
    assert np.all(np.abs(phase) <= T_PS / 2 + 1e-6)


def test_balance_thins_strong_x_detector():
    n = 300_000
    slots = np.arange(n)
    ch = np.full(n, CH_XP)
    keep = balance_efficiency(slots, ch, (0.85, 0.85, 0.90, 0.30), RandomSource(3))
    assert keep.mean() == pytest.approx(1 / 3, abs=4 * np.sqrt(2 / 9 / n))
    assert balance_efficiency(slots, np.full(n, CH_XM), (0.85, 0.85, 0.90, 0.30), RandomSource(3)).all()


def test_double_clicks_pick_basis_fairly():
    n = 100_000
    slots = np.repeat(np.arange(n), 2)
    ch = np.tile([CH_Z0, CH_XP], n)
    keep = resolve_double_clicks(slots, ch, RandomSource(5))
    assert np.array_equal(np.bincount(slots[keep]), np.ones(n))
    assert np.mean(ch[keep] == CH_Z0) == pytest.approx(0.5, abs=0.01)


def test_double_click_choice_is_chunk_independent():
    slots = np.repeat(np.arange(1000), 3)
    ch = np.tile([CH_Z0, CH_Z1, CH_XM], 1000)
    whole = resolve_double_clicks(slots, ch, RandomSource(9))
    halves = np.concatenate([resolve_double_clicks(slots[:1500], ch[:1500], RandomSource(9)),
                             resolve_double_clicks(slots[1500:], ch[1500:], RandomSource(9))])
    assert np.array_equal(whole, halves)


def test_double_clicks_need_grouping():
    with pytest.raises(ValueError):
        resolve_double_clicks([1, 2, 1], [0, 0, 0], RandomSource(0))


def _sifted(link, det, preparer, n=400_000, seed=2):
    pulses = sample_pulse_train(n, P, RandomSource(seed))
    d = transmit_and_detect(pulses, preparer.states_for(pulses), link, det, P.p_z_bob, seed, params=P)
    order = np.lexsort((d.channel, d.slot))
    s, c = d.slot[order], d.channel[order]
    k = resolve_double_clicks(s, c, RandomSource(seed))
    return sift(pulses, s[k], c[k])


def test_noiseless_channel_has_no_errors():
    link = LinkModel(coupling=CouplingModel(mean_efficiency=0.5), background_rate=0.0)
    r = _sifted(link, DetectorBank(dark_rate=(0, 0, 0, 0)), StatePreparer())
    assert r.counts.n_z > 5000 and r.counts.n_x > 50
    assert r.counts.m_z == 0 and r.counts.m_x == 0
    assert np.array_equal(r.alice_bits, r.bob_bits)


def test_background_only_gives_half_errors():
    link = LinkModel(coupling=CouplingModel(mean_efficiency=1e-9), background_rate=2e6)
    r = _sifted(link, DetectorBank(), StatePreparer())
    assert r.counts.n_z > 2000
    assert r.counts.q_z == pytest.approx(0.5, abs=4 * 0.5 / np.sqrt(r.counts.n_z))


def test_sift_requires_alice_records():
    alice = PulseTrain(np.array([1, 5]), np.zeros(2, np.uint8), np.zeros(2, np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(SiftError, match="no Alice record"):
        sift(alice, [3], [0])
    dup = PulseTrain(np.array([1, 1]), np.zeros(2, np.uint8), np.zeros(2, np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(SiftError, match="collision"):
        sift(dup, [1], [0])


def test_equal_efficiencies_discard_nothing():
    n = 10_000
    for eff in ((0.5, 0.5, 0.5, 0.5), (0.85, 0.85, 0.9, 0.3)):
        keep = balance_efficiency(np.arange(n), np.full(n, CH_Z1), eff, RandomSource(1))
        assert keep.all()


def test_same_basis_double_click_is_fair():
    n = 100_000
    slots = np.repeat(np.arange(n), 2)
    ch = np.tile([CH_Z0, CH_Z1], n)
    keep = resolve_double_clicks(slots, ch, RandomSource(6))
    assert np.mean(ch[keep] == CH_Z0) == pytest.approx(0.5, abs=0.01)


def test_balanced_background_splits_evenly_in_x():
    link = LinkModel(coupling=CouplingModel(mean_efficiency=1e-9), background_rate=2e6)
    det = DetectorBank()
    pulses = sample_pulse_train(1_000_000, P, RandomSource(3))
    d = transmit_and_detect(pulses, StatePreparer().states_for(pulses), link, det, P.p_z_bob, 3, params=P)
    keep = balance_efficiency(d.slot, d.channel, det.efficiency, RandomSource(3))
    xp = np.count_nonzero(keep & (d.channel == CH_XP))
    xm = np.count_nonzero(keep & (d.channel == CH_XM))
    assert xp > 500
    assert abs(xp / xm - 1) < 5 * np.sqrt(1 / xp + 1 / xm)


def test_resync_on_filtered_tags():
    ts, _, pps = _stream(3250.0)
    s = recover_clock(ts, pps, T_PS, TDC)
    keep, _, _ = window_filter(ts, s, 1e-9)
    again = recover_clock(ts[keep], pps, T_PS, TDC)
    assert again.offset_ps == pytest.approx(s.offset_ps, abs=TDC / 4)
    assert again.drift == pytest.approx(s.drift, abs=1e-10)
