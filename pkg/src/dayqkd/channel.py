"""Free-space link, receiver and detector model.

Conventions
-----------
* Losses are quoted the way the field data report them: as the attenuation
  seen by detections that land inside the *reference* detection window
  (``LinkModel.reference_window``, 1 ns by default).  The physical pulse
  transmission is therefore ``10**(-loss/10) / capture(reference_window)``,
  and narrowing the window below the reference costs signal.
* ``LinkModel.background_rate`` is the total in-window noise floor at the
  reference window, in the efficiency-renormalized frame, *including* the
  detectors' own dark counts.  The sky share is what is left after the dark
  counts are subtracted.  Sky light is unpolarized and is split between the
  four detectors like any other light entering the analyzer.
* Rates reported as "renormalized" divide each detector's counts by that
  detector's efficiency, matching how total detection rates are usually
  plotted for unbalanced detector banks.

Detector channels are 0=Z0 (|L>), 1=Z1 (|R>), 2=X+ and 3=X-; 255 marks a PPS
edge in a time-tag stream.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal as sps
from scipy.special import erf, erfinv

from . import encoder as enc
from .protocol import BASIS_X, BASIS_Z, MU1, ProtocolParams, PulseTrain, RandomSource, pulses_at

CH_Z0, CH_Z1, CH_XP, CH_XM = 0, 1, 2, 3
CH_PPS = 255
N_DETECTORS = 4
DETECTOR_BASIS = np.array([BASIS_Z, BASIS_Z, BASIS_X, BASIS_X], dtype=np.uint8)
DETECTOR_BIT = np.array([0, 1, 0, 1], dtype=np.uint8)
ANALYZER_STATES = (enc.L, enc.R, enc.PLUS, enc.MINUS)

ORIGIN_SIGNAL = 1
ORIGIN_NOISE = 2
ORIGIN_BOTH = 3

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
PS = 1e12


@dataclass(frozen=True)
class CouplingModel:
    """Single-mode-fiber coupling efficiency under turbulence.

    A stationary log-normal process with exponential autocorrelation.  The
    default sigma puts the 99.9th percentile at about 2.5x the mean.
    """

    mean_efficiency: float = 10 ** -1.4
    lognormal_sigma: float = 0.31
    correlation_time: float = 10e-3
    tip_tilt_corrected: bool = True

    def __post_init__(self):
        if not 0.0 < self.mean_efficiency <= 1.0:
            raise ValueError("mean_efficiency must lie in (0, 1]")
        if self.lognormal_sigma < 0:
            raise ValueError("lognormal_sigma must be >= 0")
        if not self.correlation_time > 0:
            raise ValueError("correlation_time must be positive")

    @classmethod
    def tip_tilt(cls, corrected: bool = True, **kw) -> "CouplingModel":
        """Coupling statistics measured with and without tip-tilt correction."""
        mean = 0.04 if corrected else 0.01
        return cls(mean_efficiency=mean, tip_tilt_corrected=corrected, **kw)

    @property
    def loss_db(self) -> float:
        return -10.0 * math.log10(self.mean_efficiency)


@dataclass(frozen=True)
class LinkModel:
    fixed_loss_optics: float = 5.0
    fixed_loss_analyzer: float = 5.0
    coupling: CouplingModel = field(default_factory=CouplingModel)
    background_rate: float = 240.0
    extra_loss: float = 0.0
    reference_window: float = 1e-9

    def __post_init__(self):
        if min(self.fixed_loss_optics, self.fixed_loss_analyzer, self.extra_loss) < 0:
            raise ValueError("losses must be >= 0 dB")
        if self.background_rate < 0:
            raise ValueError("background_rate must be >= 0")
        if not self.reference_window > 0:
            raise ValueError("reference_window must be positive")

    @property
    def fixed_loss_db(self) -> float:
        return self.fixed_loss_optics + self.fixed_loss_analyzer + self.extra_loss

    @property
    def total_loss_db(self) -> float:
        return self.fixed_loss_db + self.coupling.loss_db

    @property
    def fixed_transmission(self) -> float:
        return 10.0 ** (-self.fixed_loss_db / 10.0)

    def with_total_loss(self, total_db: float) -> "LinkModel":
        """Same link with ``extra_loss`` adjusted to reach ``total_db``."""
        base = self.fixed_loss_optics + self.fixed_loss_analyzer + self.coupling.loss_db
        if total_db < base - 1e-12:
            raise ValueError(f"total loss {total_db} dB below the fixed budget {base:.3f} dB")
        return _replace(self, extra_loss=max(0.0, total_db - base))


@dataclass(frozen=True)
class DetectorBank:
    efficiency: tuple = (0.85, 0.85, 0.90, 0.30)
    dark_rate: tuple = (200.0, 200.0, 200.0, 200.0)
    window_width: float = 1e-9
    tdc_resolution: float = 81e-12
    jitter_sigma: float = 30e-12
    pulse_fwhm: float = 500e-12

    def __post_init__(self):
        object.__setattr__(self, "efficiency", tuple(float(e) for e in self.efficiency))
        object.__setattr__(self, "dark_rate", tuple(float(d) for d in self.dark_rate))
        if len(self.efficiency) != N_DETECTORS or len(self.dark_rate) != N_DETECTORS:
            raise ValueError("need exactly four detectors")
        if not all(0.0 < e <= 1.0 for e in self.efficiency):
            raise ValueError("efficiencies must lie in (0, 1]")
        if any(d < 0 for d in self.dark_rate):
            raise ValueError("dark rates must be >= 0")
        if not (self.window_width > 0 and self.tdc_resolution > 0):
            raise ValueError("window_width and tdc_resolution must be positive")
        if self.jitter_sigma < 0 or self.pulse_fwhm < 0:
            raise ValueError("timing spreads must be >= 0")

    @property
    def eff(self) -> np.ndarray:
        return np.asarray(self.efficiency)

    @property
    def dark(self) -> np.ndarray:
        return np.asarray(self.dark_rate)

    @property
    def timing_sigma(self) -> float:
        """Arrival-time spread of signal clicks: pulse width and jitter in quadrature."""
        return math.hypot(self.pulse_fwhm * FWHM_TO_SIGMA, self.jitter_sigma)

    @property
    def tdc_ps(self) -> int:
        return int(round(self.tdc_resolution * PS))

    def with_window(self, window: float) -> "DetectorBank":
        return _replace(self, window_width=window)


@dataclass(frozen=True)
class ClockModel:
    """Timing relation between the transmitter's slots and the receiver TDC.

    Slot ``k`` nominally arrives at TDC time ``(k*T + offset) * (1 + drift)``;
    PPS edge ``j`` is stamped at ``j * 1 s * (1 + drift)`` plus jitter.
    """

    offset_ps: float = 0.0
    drift: float = 0.0
    pps_jitter_ps: float = 0.0

    def __post_init__(self):
        if abs(self.drift) >= 1e-6:
            raise ValueError("|drift| must stay below 1e-6 for GPS-disciplined clocks")


def _replace(obj, **kw):
    d = {f: getattr(obj, f) for f in obj.__dataclass_fields__}
    d.update(kw)
    return type(obj)(**d)


# ---------------------------------------------------------------------------
# timing


def signal_capture(window: float, sigma: float) -> float:
    """Fraction of Gaussian-distributed signal clicks inside a centred window."""
    if window <= 0:
        raise ValueError("window must be positive")
    if sigma == 0:
        return 1.0
    if math.isinf(window):
        return 1.0
    return float(erf(window / (2.0 * sigma * math.sqrt(2.0))))


def window_signal_noise_tradeoff(window: float, pulse_fwhm: float, reference: float = 1e-9,
                                 jitter_sigma: float = 0.0) -> dict:
    """Signal and noise kept by a detection window.

    ``signal_fraction`` is the absolute capture of a Gaussian pulse;
    ``signal_ratio`` is relative to the reference window; ``noise_fraction``
    is ``window / reference`` for noise uniform in time.
    """
    sigma = math.hypot(pulse_fwhm * FWHM_TO_SIGMA, jitter_sigma)
    sf = signal_capture(window, sigma)
    ref = signal_capture(reference, sigma)
    return {
        "signal_fraction": sf,
        "signal_ratio": sf / ref,
        "noise_fraction": window / reference if math.isfinite(window) else math.inf,
    }


def window_for_capture(fraction: float, pulse_fwhm: float) -> float:
    """Inverse of ``signal_capture`` for a pulse without extra jitter."""
    sigma = pulse_fwhm * FWHM_TO_SIGMA
    return float(2.0 * math.sqrt(2.0) * sigma * erfinv(fraction))


# ---------------------------------------------------------------------------
# coupling


def sample_coupling_series(duration: float, dt: float, model: CouplingModel, rng) -> np.ndarray:
    """Coupling efficiency sampled every ``dt`` seconds over ``duration``."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if dt > model.correlation_time / 10 * (1 + 1e-9):
        raise ValueError("dt must resolve the correlation time (dt <= correlation_time/10)")
    n = max(1, int(math.ceil(duration / dt)))
    rng = np.random.default_rng(rng)
    if model.lognormal_sigma == 0:
        return np.full(n, model.mean_efficiency)
    rho = math.exp(-dt / model.correlation_time)
    eps = rng.standard_normal(n)
    z0 = eps[0]
    # exact AR(1) discretization of an Ornstein-Uhlenbeck process, started stationary
    z = sps.lfilter([math.sqrt(1.0 - rho * rho)], [1.0, -rho], eps[1:], zi=[rho * z0])[0]
    z = np.concatenate(([z0], z))
    s = model.lognormal_sigma
    eta = model.mean_efficiency * np.exp(s * z - 0.5 * s * s)
    return np.clip(eta, np.finfo(float).tiny, 1.0)


# ---------------------------------------------------------------------------
# detection model


def analyzer_probabilities(states) -> np.ndarray:
    """|<d|psi>|^2 for each analyzer projector; ``states`` is (n, 2) complex."""
    s = np.atleast_2d(np.asarray(states, dtype=complex))
    proj = np.array([d.as_array() for d in ANALYZER_STATES])
    return np.abs(s @ proj.conj().T) ** 2


@dataclass(frozen=True)
class StatePreparer:
    """Encoder commands with per-basis imperfections."""

    imperfection_z: enc.EncoderImperfection = enc.IDEAL
    imperfection_x: enc.EncoderImperfection = enc.IDEAL

    def state_table(self) -> np.ndarray:
        """(basis, bit) -> Jones vector as a (2, 2, 2) complex array.

        The X-basis bit-1 entry is never prepared and is left at |->.
        """
        t = np.zeros((2, 2, 2), dtype=complex)
        t[BASIS_Z, 0] = enc.command_to_state(enc.Z, 0, self.imperfection_z).as_array()
        t[BASIS_Z, 1] = enc.command_to_state(enc.Z, 1, self.imperfection_z).as_array()
        t[BASIS_X, 0] = enc.command_to_state(enc.X, 0, self.imperfection_x).as_array()
        t[BASIS_X, 1] = enc.MINUS.as_array()
        return t

    def intensity_factor_table(self) -> np.ndarray:
        f = np.ones((2, 2))
        f[BASIS_Z, 1] = self.imperfection_z.intensity_imbalance
        return f

    def states_for(self, pulses: PulseTrain) -> np.ndarray:
        return self.state_table()[pulses.basis, pulses.bit]

    @classmethod
    def from_extinction(cls, er_z_db: float, er_x_db: float) -> "StatePreparer":
        """Colatitude errors tuned to the given extinction ratios."""
        return cls(enc.EncoderImperfection(theta_error=enc.theta_error_for_er(er_z_db)),
                   enc.EncoderImperfection(theta_error=enc.theta_error_for_er(er_x_db)))


class DetectionModel:
    """Per-slot Poisson means for each detector, shared by the Monte Carlo
    sampler and the analytic rate model."""

    def __init__(self, link: LinkModel, detectors: DetectorBank, p_z_bob: float, clock_rate: float):
        self.link = link
        self.detectors = detectors
        self.clock_rate = float(clock_rate)
        self.period = 1.0 / self.clock_rate
        self.sigma = detectors.timing_sigma
        self.capture_ref = signal_capture(link.reference_window, self.sigma)
        # physical transmission excluding the fluctuating coupling factor
        self.transmission = link.fixed_transmission / self.capture_ref
        pb = np.where(DETECTOR_BASIS == BASIS_Z, p_z_bob, 1.0 - p_z_bob)
        self.path = pb  # share of the analyzer input routed to each detector's basis
        eff = detectors.eff
        self.eff = eff
        duty_ref = min(1.0, link.reference_window * self.clock_rate)
        dark_renorm = float(np.sum(detectors.dark * duty_ref / eff))
        sky_renorm = link.background_rate - dark_renorm
        if sky_renorm < -1e-9 * max(1.0, link.background_rate):
            raise ValueError(
                f"background_rate {link.background_rate:g} Hz is below the dark-count floor "
                f"{dark_renorm:.3f} Hz of this detector bank at the reference window")
        sky_renorm = max(0.0, sky_renorm)
        self.sky_photon_rate = sky_renorm / duty_ref if duty_ref > 0 else 0.0
        # detected noise rate per detector over the whole slot (Hz)
        self.noise_rate = detectors.dark + self.sky_photon_rate * (pb / 2.0) * eff

    def signal_means(self, mu, probs, coupling) -> np.ndarray:
        """(n, 4) mean detected signal photons per slot (before windowing)."""
        scale = np.asarray(mu) * np.asarray(coupling) * self.transmission
        return scale[:, None] * probs * (self.path * self.eff)[None, :]

    def noise_means(self) -> np.ndarray:
        return self.noise_rate * self.period


@dataclass
class Detections:
    """Raw receiver output plus simulation ground truth."""

    timestamp: np.ndarray  # int64 ps
    channel: np.ndarray  # uint8
    slot: np.ndarray  # int64, true emitting slot
    origin: np.ndarray  # uint8, ORIGIN_*

    def __len__(self):
        return len(self.timestamp)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.uint8), np.zeros(0, np.int64), np.zeros(0, np.uint8))

    @classmethod
    def concatenate(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("timestamp", "channel", "slot", "origin")))

    def sorted(self) -> "Detections":
        order = np.lexsort((self.channel, self.timestamp))
        return Detections(self.timestamp[order], self.channel[order], self.slot[order], self.origin[order])


def _sample_clicks(slots, lam_sig, lam_noise, p_candidate, model: DetectionModel, clock: ClockModel,
                   gen: np.random.Generator) -> Detections:
    """Click patterns for candidate slots.

    Each slot was proposed with probability ``p_candidate``; it is kept with
    probability P(any click)/p_candidate and then a click pattern is drawn
    conditioned on at least one click.
    """
    lam = lam_sig + lam_noise
    p_click = -np.expm1(-lam)  # per detector
    p_any = -np.expm1(-lam.sum(axis=1))
    keep = gen.random(len(slots)) * p_candidate < p_any
    slots, lam_sig, lam_noise, p_click, p_any = slots[keep], lam_sig[keep], lam_noise[keep], p_click[keep], p_any[keep]
    n = len(slots)
    if n == 0:
        return Detections.empty()
    # first clicking detector: P(first = d) = prod_{j<d}(1-p_j) p_d / P(any)
    none_before = np.cumprod(np.hstack([np.ones((n, 1)), 1.0 - p_click[:, :-1]]), axis=1)
    first_w = none_before * p_click
    cdf = np.cumsum(first_w, axis=1)
    u = gen.random(n) * p_any
    first = np.minimum((cdf < u[:, None]).sum(axis=1), N_DETECTORS - 1)
    later = gen.random((n, N_DETECTORS)) < p_click
    idx = np.arange(N_DETECTORS)[None, :]
    fired = (idx == first[:, None]) | ((idx > first[:, None]) & later)

    rows, chans = np.nonzero(fired)
    ls = lam_sig[rows, chans]
    ln = lam_noise[rows, chans]
    ps_, pn_ = -np.expm1(-ls), -np.expm1(-ln)
    w_sig_only = ps_ * (1 - pn_)
    w_noise_only = (1 - ps_) * pn_
    w_both = ps_ * pn_
    tot = w_sig_only + w_noise_only + w_both
    u = gen.random(len(rows)) * tot
    origin = np.where(u < w_sig_only, ORIGIN_SIGNAL, np.where(u < w_sig_only + w_noise_only, ORIGIN_NOISE, ORIGIN_BOTH))
    period_ps = model.period * PS
    # delays stay inside the slot, which bounds how far tags can reorder
    t_sig = np.clip(gen.normal(0.0, model.sigma * PS, len(rows)), -0.5 * period_ps, 0.5 * period_ps - 1.0)
    t_noise = (gen.random(len(rows)) - 0.5) * period_ps
    t_rel = np.where(origin == ORIGIN_SIGNAL, t_sig,
                     np.where(origin == ORIGIN_NOISE, t_noise, np.minimum(t_sig, t_noise)))
    slot_of = slots[rows]
    t_true = slot_of.astype(np.float64) * period_ps + clock.offset_ps + t_rel
    t_tdc = t_true * (1.0 + clock.drift)
    res = model.detectors.tdc_ps
    ts = np.floor(t_tdc / res).astype(np.int64) * res
    return Detections(ts, chans.astype(np.uint8), slot_of.astype(np.int64), origin.astype(np.uint8))


def _class_inputs(pulses: PulseTrain, states, params_table, factor_table):
    mu = params_table[pulses.basis, pulses.intensity] * factor_table[pulses.basis, pulses.bit]
    return mu, analyzer_probabilities(states)


def transmit_and_detect(pulses: PulseTrain, states, link: LinkModel, detectors: DetectorBank, p_z_bob: float,
                        rng, *, params: ProtocolParams, coupling=None, clock: ClockModel = ClockModel(),
                        intensity_factor=None) -> Detections:
    """Slot-by-slot simulation of the channel and receiver for ``pulses``.

    ``states`` holds one Jones vector per pulse as an (n, 2) complex array.
    ``coupling`` gives the SMF coupling efficiency per pulse; by default the
    link's mean efficiency is used for every slot.
    """
    gen = np.random.default_rng(rng)
    model = DetectionModel(link, detectors, p_z_bob, params.clock_rate)
    states = np.asarray(states, dtype=complex).reshape(len(pulses), 2)
    factor = np.ones((2, 2)) if intensity_factor is None else intensity_factor
    mu, probs = _class_inputs(pulses, states, params.intensity_table(), factor)
    if coupling is None:
        coupling = np.full(len(pulses), link.coupling.mean_efficiency)
    lam_sig = model.signal_means(mu, probs, coupling)
    lam_noise = np.broadcast_to(model.noise_means(), lam_sig.shape)
    return _sample_clicks(pulses.slot.astype(np.int64), lam_sig, lam_noise, 1.0, model, clock, gen)


def pps_markers(duration: float, clock: ClockModel, rng=None) -> np.ndarray:
    """TDC timestamps (ps) of the PPS edges covering ``duration`` seconds."""
    k = np.arange(0, int(math.floor(duration)) + 1, dtype=np.int64)
    t = k.astype(np.float64) * PS * (1.0 + clock.drift)
    if clock.pps_jitter_ps > 0:
        t = t + np.random.default_rng(rng).normal(0.0, clock.pps_jitter_ps, len(k))
    return np.round(t).astype(np.int64)


class StreamSimulator:
    """Monte Carlo generator over long runs using geometric slot skipping.

    Slots are proposed with a Bernoulli probability that upper-bounds the
    true click probability within a chunk; proposals are thinned to the exact
    per-slot probability.  Alice's records are drawn from the counter-based
    tape only at proposed slots, so the result is identical to sampling every
    slot from the same tape.
    """

    def __init__(self, params: ProtocolParams, link: LinkModel, detectors: DetectorBank,
                 preparer: StatePreparer = StatePreparer(), clock: ClockModel = ClockModel(),
                 seed: int = 0, coupling_dt: float = 1e-3, chunk_duration: float = 0.1):
        self.params = params
        self.link = link
        self.detectors = detectors
        self.preparer = preparer
        self.clock = clock
        self.seed = int(seed)
        self.tape = RandomSource(self.seed)
        self.model = DetectionModel(link, detectors, params.p_z_bob, params.clock_rate)
        self.coupling_dt = min(coupling_dt, link.coupling.correlation_time / 10)
        self.chunk_duration = chunk_duration
        self._states = preparer.state_table()
        self._factor = preparer.intensity_factor_table()
        self._mu_table = params.intensity_table() * self._factor.max(axis=1)[:, None]
        # per-class signal means at unit coupling, used for the proposal bound
        probs = analyzer_probabilities(self._states.reshape(4, 2)).reshape(2, 2, 4)
        self._probs = probs

    def _seq(self, *key) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def coupling_series(self, duration: float, segment: int = 0) -> np.ndarray:
        return sample_coupling_series(duration, self.coupling_dt, self.link.coupling, self._seq(1, segment))

    def _max_lambda(self, coupling_max: float) -> float:
        mu_max = self._mu_table.max()
        per_det = mu_max * coupling_max * self.model.transmission * self.model.path * self.model.eff
        return float(per_det.sum() + self.model.noise_means().sum())

    def run_chunk(self, first_slot: int, n_slots: int, coupling: np.ndarray, coupling_start_slot: int,
                  chunk_index: int) -> tuple[Detections, PulseTrain]:
        """Simulate slots ``[first_slot, first_slot + n_slots)``.

        ``coupling`` holds the efficiency series sampled every ``coupling_dt``
        starting at ``coupling_start_slot``.
        """
        gen = self._seq(2, chunk_index)
        slots_per_bin = self.coupling_dt * self.params.clock_rate
        b0 = int((first_slot - coupling_start_slot) // slots_per_bin)
        b1 = int((first_slot + n_slots - 1 - coupling_start_slot) // slots_per_bin) + 1
        cmax = float(coupling[max(0, b0):min(len(coupling), b1)].max())
        p_max = -math.expm1(-self._max_lambda(cmax))
        cand = _geometric_positions(n_slots, p_max, gen) + first_slot
        if len(cand) == 0:
            return Detections.empty(), PulseTrain.empty()
        bins = np.minimum(((cand - coupling_start_slot) / slots_per_bin).astype(np.int64), len(coupling) - 1)
        c = coupling[bins]
        pulses = pulses_at(cand, self.params, self.tape)
        mu = self.params.intensity_table()[pulses.basis, pulses.intensity] * self._factor[pulses.basis, pulses.bit]
        probs = self._probs[pulses.basis, pulses.bit]
        lam_sig = self.model.signal_means(mu, probs, c)
        lam_noise = np.broadcast_to(self.model.noise_means(), lam_sig.shape)
        det = _sample_clicks(cand, lam_sig, lam_noise, p_max, self.model, self.clock, gen)
        clicked = np.unique(det.slot)
        alice = pulses.subset(np.isin(pulses.slot, clicked, assume_unique=False))
        return det.sorted(), alice

    def iter_chunks(self, duration: float, schedule=None):
        """Yield ``(t_start, t_stop, detections, alice_records)`` per chunk.

        ``schedule`` optionally maps time -> (coupling_mean, background_rate);
        the coupling fluctuation is rescaled and the noise floor replaced for
        each chunk.
        """
        if not duration > 0:
            raise ValueError("duration must be positive")
        clock_rate = self.params.clock_rate
        total_slots = int(round(duration * clock_rate))
        chunk_slots = max(1, int(round(self.chunk_duration * clock_rate)))
        # coupling generated per 10 s segment to bound memory
        seg_slots = int(round(10.0 * clock_rate))
        base_mean = self.link.coupling.mean_efficiency
        chunk_index = 0
        for seg_start in range(0, total_slots, seg_slots):
            seg_n = min(seg_slots, total_slots - seg_start)
            series = self.coupling_series(seg_n / clock_rate + self.coupling_dt, segment=seg_start // seg_slots)
            for s in range(seg_start, seg_start + seg_n, chunk_slots):
                n = min(chunk_slots, seg_start + seg_n - s)
                t0, t1 = s / clock_rate, (s + n) / clock_rate
                sim = self
                if schedule is not None:
                    c_mean, bg = schedule(t0)
                    sim = self._rescheduled(c_mean, bg)
                    series_used = series * (c_mean / base_mean)
                    series_used = np.clip(series_used, np.finfo(float).tiny, 1.0)
                else:
                    series_used = series
                det, alice = sim.run_chunk(s, n, series_used, seg_start, chunk_index)
                chunk_index += 1
                yield t0, t1, det, alice

    def _rescheduled(self, coupling_mean: float, background: float) -> "StreamSimulator":
        key = (round(coupling_mean, 15), round(background, 12))
        cache = self.__dict__.setdefault("_sched_cache", {})
        if key not in cache:
            link = _replace(self.link, coupling=_replace(self.link.coupling, mean_efficiency=coupling_mean),
                            background_rate=background)
            sim = object.__new__(StreamSimulator)
            sim.__dict__.update({k: v for k, v in self.__dict__.items() if k != "_sched_cache"})
            sim.link = link
            sim.model = DetectionModel(link, self.detectors, self.params.p_z_bob, self.params.clock_rate)
            cache[key] = sim
        return cache[key]


def _geometric_positions(n_slots: int, p: float, gen: np.random.Generator) -> np.ndarray:
    """Sorted Bernoulli(p) success positions in ``range(n_slots)``."""
    if p <= 0 or n_slots <= 0:
        return np.zeros(0, np.int64)
    if p >= 1:
        return np.arange(n_slots, dtype=np.int64)
    expected = n_slots * p
    out = []
    pos = -1
    while True:
        m = int(expected + 6 * math.sqrt(expected) + 16)
        gaps = gen.geometric(p, m).astype(np.int64)
        cs = pos + np.cumsum(gaps)
        out.append(cs[cs < n_slots])
        if cs[-1] >= n_slots:
            break
        pos = int(cs[-1])
        expected = (n_slots - pos) * p
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# analytic rate model


@dataclass
class RateModel:
    """Expected receiver statistics for a configuration.

    ``counts[b, k, d]`` is the expected number per second of in-window
    detections on detector ``d`` (after efficiency balancing) for pulses
    prepared in basis ``b`` with intensity class ``k``; ``errors`` is the
    matching error-producing part.  Double clicks are neglected.
    """

    tdr: float
    signal_rate: float
    noise_rate: float
    snr: float
    sifted_rate: float
    sifted_rate_detected: float
    sifted_rate_x: float
    qber_z: float
    qber_x: float
    counts: np.ndarray
    errors: np.ndarray

    def decoy_rates(self) -> dict:
        """Per-second expected sifted counts and errors by basis and intensity."""
        out = {}
        for b, name in ((BASIS_Z, "z"), (BASIS_X, "x")):
            dets = DETECTOR_BASIS == b
            for k, kname in ((0, "mu1"), (1, "mu2")):
                out[f"n_{name}_{kname}"] = float(self.counts[b, k, dets].sum())
                out[f"m_{name}_{kname}"] = float(self.errors[b, k, dets].sum())
        return out

    def as_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def balance_keep_probabilities(efficiency) -> np.ndarray:
    """Per-detector keep probability equalizing efficiencies within each basis."""
    eff = np.asarray(efficiency, dtype=float)
    keep = np.ones(N_DETECTORS)
    for b in (BASIS_Z, BASIS_X):
        m = DETECTOR_BASIS == b
        keep[m] = eff[m].min() / eff[m]
    return keep


def expected_rates(params: ProtocolParams, link: LinkModel, detectors: DetectorBank, window: float | None = None,
                   preparer: StatePreparer = StatePreparer(), balance: bool = True) -> RateModel:
    window = detectors.window_width if window is None else window
    model = DetectionModel(link, detectors, params.p_z_bob, params.clock_rate)
    cap = signal_capture(window, model.sigma)
    duty = min(1.0, window * params.clock_rate)
    states = preparer.state_table()
    factor = preparer.intensity_factor_table()
    keep = balance_keep_probabilities(detectors.eff) if balance else np.ones(N_DETECTORS)
    clock = params.clock_rate
    c_mean = link.coupling.mean_efficiency
    noise_slot = model.noise_rate * duty / clock  # in-window noise click probability per slot

    counts = np.zeros((2, 2, N_DETECTORS))
    errors = np.zeros((2, 2, N_DETECTORS))
    signal_renorm = 0.0
    for b in (BASIS_Z, BASIS_X):
        bits = (0, 1) if b == BASIS_Z else (0,)
        for bit in bits:
            p_bit = 0.5 if b == BASIS_Z else 1.0
            probs = analyzer_probabilities(states[b, bit])[0]
            for k in (0, 1):
                p_class = params.basis_prob(b) * p_bit * (params.p_mu1 if k == MU1 else params.p_mu2)
                if p_class == 0:
                    continue
                mu = params.intensity_table()[b, k] * factor[b, bit]
                lam = model.signal_means(np.array([mu]), probs[None, :], np.array([c_mean]))[0]
                sig = -np.expm1(-lam) * cap
                signal_renorm += clock * p_class * float(np.sum(sig / model.eff))
                rate = clock * p_class * (sig + noise_slot) * keep
                counts[b, k] += rate
                # a click on the detector for the other bit of the sender's basis is an error;
                # noise on either detector of the basis errs half the time on average
                sent = (DETECTOR_BASIS == b)
                wrong = sent & (DETECTOR_BIT != bit)
                errors[b, k] += np.where(wrong, rate, 0.0)
    noise_renorm = float(np.sum(model.noise_rate * duty / model.eff))
    tdr = signal_renorm + noise_renorm
    snr = math.inf if noise_renorm == 0 else signal_renorm / noise_renorm

    zdet = DETECTOR_BASIS == BASIS_Z
    xdet = ~zdet
    n_z = counts[BASIS_Z][:, zdet].sum()
    m_z = errors[BASIS_Z][:, zdet].sum()
    n_x = counts[BASIS_X][:, xdet].sum()
    m_x = errors[BASIS_X][:, xdet].sum()
    mu_mean = _mean_mu(params, factor)
    p_z_given_det = params.p_z_alice * _mean_mu_basis(params, factor, BASIS_Z) / mu_mean if mu_mean > 0 else 0.0
    return RateModel(
        tdr=tdr,
        signal_rate=signal_renorm,
        noise_rate=noise_renorm,
        snr=snr,
        sifted_rate=tdr * p_z_given_det * params.p_z_bob,
        sifted_rate_detected=float(n_z),
        sifted_rate_x=float(n_x),
        qber_z=float(m_z / n_z) if n_z > 0 else 0.0,
        qber_x=float(m_x / n_x) if n_x > 0 else 0.0,
        counts=counts,
        errors=errors,
    )


def _mean_mu_basis(params: ProtocolParams, factor, b) -> float:
    t = params.intensity_table()
    f = factor[b].mean() if b == BASIS_Z else factor[b, 0]
    return (params.p_mu1 * t[b, 0] + params.p_mu2 * t[b, 1]) * f


def _mean_mu(params: ProtocolParams, factor) -> float:
    return (params.p_z_alice * _mean_mu_basis(params, factor, BASIS_Z)
            + (1 - params.p_z_alice) * _mean_mu_basis(params, factor, BASIS_X))
