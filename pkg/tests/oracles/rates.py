"""Closed-form rate estimates written without the package's detection model.

In the low-mean-photon regime every detection is (to first order) one photon,
so the renormalized signal rate is clock * <mu> * transmission.
"""

import math


def mean_photons(p_z, p_mu1, mu1_z, mu2_z, mu1_x, mu2_x):
    return p_z * (p_mu1 * mu1_z + (1 - p_mu1) * mu2_z) + (1 - p_z) * (p_mu1 * mu1_x + (1 - p_mu1) * mu2_x)


def tdr_linear(clock_hz, mu_mean, loss_db):
    return clock_hz * mu_mean * 10 ** (-loss_db / 10)


def snr_linear(clock_hz, mu_mean, loss_db, background_hz):
    return tdr_linear(clock_hz, mu_mean, loss_db) / background_hz


def gaussian_capture(window, fwhm, jitter=0.0):
    sigma = math.hypot(fwhm / (2 * math.sqrt(2 * math.log(2))), jitter)
    return math.erf(window / (2 * sigma * math.sqrt(2)))


def sifted_z_rate(tdr_signal, p_z_alice, p_mu1, mu1_z, mu2_z, mu1_x, mu2_x, p_z_bob):
    """Rate of Z/Z coincidences: share of detected photons sent in Z times Bob's Z probability."""
    mz = p_mu1 * mu1_z + (1 - p_mu1) * mu2_z
    mean = mean_photons(p_z_alice, p_mu1, mu1_z, mu2_z, mu1_x, mu2_x)
    return tdr_signal * p_z_alice * mz / mean * p_z_bob
