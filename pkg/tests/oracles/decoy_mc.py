"""Photon-number-tagged Monte Carlo of a decoy-state block.

Each trial draws how many pulses of each (basis, intensity, photon number)
were sent, which of them produced a sifted detection, and which detections
were errors.  Because photon numbers are known, the true vacuum and
single-photon contributions can be compared with the decoy bounds.
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson

N_MAX = 16  # photon numbers 0..N_MAX-2 explicit, last bin lumps the tail


@dataclass(frozen=True)
class OperatingPoint:
    pulses: int
    eta: float  # per-photon detection probability (channel x detector)
    y0: float  # noise click probability per pulse
    e_d: float  # misalignment error probability
    p_z: float = 0.9
    p_mu1: float = 0.7
    mu_z: tuple = (0.56, 0.27)
    mu_x: tuple = (0.69, 0.33)
    p_z_bob: float = 0.9


def _photon_pmf(mu):
    k = np.arange(N_MAX - 1)
    pmf = poisson.pmf(k, mu)
    return np.append(pmf, max(0.0, 1.0 - pmf.sum()))


def _yields(op: OperatingPoint, bob_p: float):
    n = np.arange(N_MAX, dtype=float)
    signal = 1.0 - (1.0 - op.eta) ** n
    click = 1.0 - (1.0 - op.y0) * (1.0 - op.eta) ** n
    num = op.e_d * signal * (1.0 - op.y0) + 0.5 * op.y0
    err = np.divide(num, click, out=np.full_like(num, 0.5), where=click > 0)
    return bob_p * click, err


def run_trials(op: OperatingPoint, trials: int, seed: int):
    """Return per-trial count dictionaries and true vacuum/single-photon counts.

    Output arrays have shape (trials,).
    """
    gen = np.random.default_rng(seed)
    classes = [(b, k) for b in (0, 1) for k in (0, 1)]
    probs = [(op.p_z if b == 0 else 1 - op.p_z) * (op.p_mu1 if k == 0 else 1 - op.p_mu1) for b, k in classes]
    sent = gen.multinomial(np.full(trials, op.pulses), probs)
    out = {}
    truth = {"s_z0": 0, "s_z1": 0, "s_x0": 0, "s_x1": 0}
    for c, (b, k) in enumerate(classes):
        mu = (op.mu_z if b == 0 else op.mu_x)[k]
        by_n = gen.multinomial(sent[:, c], _photon_pmf(mu))
        y, e = _yields(op, op.p_z_bob if b == 0 else 1 - op.p_z_bob)
        det = gen.binomial(by_n, y)
        errs = gen.binomial(det, e)
        tag = ("z" if b == 0 else "x") + "_" + ("mu1" if k == 0 else "mu2")
        out[f"n_{tag}"] = det.sum(axis=1)
        out[f"m_{tag}"] = errs.sum(axis=1)
        basis = "z" if b == 0 else "x"
        truth[f"s_{basis}0"] = truth[f"s_{basis}0"] + det[:, 0]
        truth[f"s_{basis}1"] = truth[f"s_{basis}1"] + det[:, 1]
    return out, truth


def expected_counts(op: OperatingPoint):
    """Expected counts and true vacuum/single-photon detections (no sampling)."""
    out, truth = {}, {"s_z0": 0.0, "s_z1": 0.0, "s_x0": 0.0, "s_x1": 0.0}
    for b in (0, 1):
        for k in (0, 1):
            p = (op.p_z if b == 0 else 1 - op.p_z) * (op.p_mu1 if k == 0 else 1 - op.p_mu1)
            mu = (op.mu_z if b == 0 else op.mu_x)[k]
            y, e = _yields(op, op.p_z_bob if b == 0 else 1 - op.p_z_bob)
            det = op.pulses * p * _photon_pmf(mu) * y
            tag = ("z" if b == 0 else "x") + "_" + ("mu1" if k == 0 else "mu2")
            out[f"n_{tag}"] = float(det.sum())
            out[f"m_{tag}"] = float((det * e).sum())
            basis = "z" if b == 0 else "x"
            truth[f"s_{basis}0"] += det[0]
            truth[f"s_{basis}1"] += det[1]
    return out, truth
