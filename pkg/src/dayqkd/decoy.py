"""Finite-key security analysis for the one-decoy, three-state protocol.

Bounds are computed separately per basis with that basis's intensities.  Each
concentration step uses the Hoeffding deviation ``sqrt(n/2 * ln(1/eps1))``
with ``eps1 = eps_sec / 19``.  The asymptotic variant drops every deviation
term, the phase-error correction ``gamma`` and the two logarithmic penalties
of the key length.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .postproc import binary_entropy
from .protocol import BASIS_X, BASIS_Z, ProtocolParams

FINITE = "finite"
ASYMPTOTIC = "asymptotic"


@dataclass(frozen=True)
class SecurityEpsilons:
    eps_sec: float = 1e-10
    eps_cor: float = 1e-12

    def __post_init__(self):
        if not (0 < self.eps_sec < 1 and 0 < self.eps_cor < 1):
            raise ValueError("security parameters must lie in (0, 1)")

    @property
    def eps1(self) -> float:
        return self.eps_sec / 19.0


@dataclass(frozen=True)
class DecoyCounts:
    n_z_mu1: int = 0
    n_z_mu2: int = 0
    m_z_mu1: int = 0
    m_z_mu2: int = 0
    n_x_mu1: int = 0
    n_x_mu2: int = 0
    m_x_mu1: int = 0
    m_x_mu2: int = 0
    duration: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        for b in ("z", "x"):
            for k in ("mu1", "mu2"):
                if getattr(self, f"m_{b}_{k}") > getattr(self, f"n_{b}_{k}"):
                    raise ValueError(f"m_{b}_{k} exceeds n_{b}_{k}")

    @property
    def n_z(self):
        return self.n_z_mu1 + self.n_z_mu2

    @property
    def m_z(self):
        return self.m_z_mu1 + self.m_z_mu2

    @property
    def n_x(self):
        return self.n_x_mu1 + self.n_x_mu2

    @property
    def m_x(self):
        return self.m_x_mu1 + self.m_x_mu2

    @property
    def q_z(self) -> float:
        return self.m_z / self.n_z if self.n_z else 0.0

    @property
    def q_x(self) -> float:
        return self.m_x / self.n_x if self.n_x else 0.0

    def basis(self, b: int):
        """(n_mu1, n_mu2, m_mu1, m_mu2) for a basis."""
        t = "z" if b == BASIS_Z else "x"
        return tuple(getattr(self, f"{c}_{t}_{k}") for c in ("n", "m") for k in ("mu1", "mu2"))

    def __add__(self, other: "DecoyCounts") -> "DecoyCounts":
        return DecoyCounts(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def scaled(self, factor: float) -> "DecoyCounts":
        """Counts multiplied by ``factor`` (real-valued; used by analytic models)."""
        return DecoyCounts(**{f.name: getattr(self, f.name) * factor for f in fields(self)})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoyCounts":
        return cls(**{f.name: d[f.name] for f in fields(cls)})

    @classmethod
    def from_rates(cls, rates: dict, duration: float) -> "DecoyCounts":
        return cls(**{k: v * duration for k, v in rates.items()}, duration=duration)


@dataclass(frozen=True)
class KeyBudget:
    s_z0_low: float = 0.0
    s_z0_up: float = 0.0
    s_z1_low: float = 0.0
    s_x1_low: float = 0.0
    v_x1_up: float = 0.0
    phi_z_up: float = 0.5
    lambda_ec: float = 0.0
    l: int = 0
    mode: str = FINITE

    def to_dict(self) -> dict:
        return asdict(self)


def tau_n(n: int, mu1: float, mu2: float, p_mu1: float) -> float:
    if n < 0:
        raise ValueError("photon number must be >= 0")
    lf = math.lgamma(n + 1)
    total = 0.0
    for mu, p in ((mu1, p_mu1), (mu2, 1.0 - p_mu1)):
        if p == 0:
            continue
        if mu == 0:
            total += p if n == 0 else 0.0
        else:
            total += p * math.exp(-mu + n * math.log(mu) - lf)
    return total


def hoeffding_delta(n: float, eps: float) -> float:
    if n < 0:
        raise ValueError("n must be >= 0")
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    return math.sqrt(n / 2.0 * math.log(1.0 / eps))


def gamma(a: float, b: float, c: float, d: float) -> float:
    """Finite-size correction to the phase-error rate estimate."""
    if c <= 0 or d <= 0 or b <= 0 or b >= 1:
        return 0.0
    inner = (c + d) / (c * d * (1 - b) * b) * (21.0 / a) ** 2
    if inner <= 1:
        return 0.0
    return math.sqrt((c + d) * (1 - b) * b / (c * d * math.log(2)) * math.log2(inner))


@dataclass(frozen=True)
class _BasisBounds:
    s0_low: float
    s0_up: float
    s1_low: float
    v1_up: float


def _basis_bounds(n1, n2, m1, m2, mu1, mu2, p1, eps1, finite: bool) -> _BasisBounds:
    p2 = 1.0 - p1
    n_tot, m_tot = n1 + n2, m1 + m2
    dn = hoeffding_delta(n_tot, eps1) if finite else 0.0
    dm = hoeffding_delta(m_tot, eps1) if finite else 0.0
    e1, e2 = math.exp(mu1) / p1, math.exp(mu2) / p2
    n1p, n2m = e1 * (n1 + dn), e2 * (n2 - dn)
    m1p, m2m = e1 * (m1 + dm), e2 * (m2 - dm)
    t0 = tau_n(0, mu1, mu2, p1)
    t1 = tau_n(1, mu1, mu2, p1)
    s0_low = t0 * (mu1 * n2m - mu2 * n1p) / (mu1 - mu2)
    s0_up = 2.0 * (m_tot + dm)
    s1_low = (t1 * mu1 * (n2m - (mu2 ** 2 / mu1 ** 2) * n1p - ((mu1 ** 2 - mu2 ** 2) / mu1 ** 2) * (s0_up / t0))
              / (mu2 * (mu1 - mu2)))
    v1_up = t1 * (m1p - m2m) / (mu1 - mu2)
    return _BasisBounds(max(0.0, s0_low), max(0.0, s0_up), max(0.0, s1_low), max(0.0, v1_up))


def decoy_bounds(counts: DecoyCounts, params: ProtocolParams, eps: SecurityEpsilons = SecurityEpsilons(),
                 mode: str = FINITE) -> KeyBudget:
    """Vacuum / single-photon bounds and the phase-error bound.

    Returns a ``KeyBudget`` with ``lambda_ec`` and ``l`` left at zero.
    """
    for b in (BASIS_Z, BASIS_X):
        mu1, mu2 = params.intensities(b)
        if not mu1 > mu2:
            raise ValueError("decoy analysis needs mu1 > mu2 in each basis")
        if not mu2 > 0:
            raise ValueError("decoy analysis needs mu2 > 0")
    if not 0 < params.p_mu1 < 1:
        raise ValueError("p_mu1 must lie strictly inside (0, 1)")
    finite = _check_mode(mode)
    z = _basis_bounds(*counts.basis(BASIS_Z), *params.intensities(BASIS_Z), params.p_mu1, eps.eps1, finite)
    x = _basis_bounds(*counts.basis(BASIS_X), *params.intensities(BASIS_X), params.p_mu1, eps.eps1, finite)
    if x.s1_low > 0 and z.s1_low > 0:
        ratio = min(x.v1_up / x.s1_low, 1.0)
        phi = ratio + (gamma(eps.eps_sec, ratio, z.s1_low, x.s1_low) if finite else 0.0)
    else:
        phi = 0.5
    phi = min(max(phi, 0.0), 0.5)
    return KeyBudget(s_z0_low=z.s0_low, s_z0_up=z.s0_up, s_z1_low=z.s1_low, s_x1_low=x.s1_low,
                     v_x1_up=x.v1_up, phi_z_up=phi, mode=mode)


def _check_mode(mode: str) -> bool:
    if mode not in (FINITE, ASYMPTOTIC):
        raise ValueError(f"unknown mode {mode!r}")
    return mode == FINITE


def ec_leakage(n_z: float, q_z: float, f_ec: float) -> float:
    return f_ec * n_z * binary_entropy(q_z)


def key_length(budget: KeyBudget, counts: DecoyCounts, q_z: float | None = None, f_ec: float = 1.06,
               eps: SecurityEpsilons = SecurityEpsilons(), lambda_ec: float | None = None) -> KeyBudget:
    """Secret key length for a populated budget.

    ``lambda_ec`` overrides the ``f_ec * n_Z * h(Q_Z)`` estimate, e.g. with
    the parity bits actually disclosed by reconciliation.
    """
    q_z = counts.q_z if q_z is None else q_z
    lam = ec_leakage(counts.n_z, q_z, f_ec) if lambda_ec is None else float(lambda_ec)
    rhs = budget.s_z0_low + budget.s_z1_low * (1.0 - binary_entropy(budget.phi_z_up)) - lam
    if budget.mode == FINITE:
        rhs -= 6.0 * math.log2(19.0 / eps.eps_sec) + math.log2(2.0 / eps.eps_cor)
    l = max(0, int(math.floor(rhs)))
    return KeyBudget(**{**budget.to_dict(), "lambda_ec": lam, "l": l})


def analyze_counts(counts: DecoyCounts, params: ProtocolParams, eps: SecurityEpsilons = SecurityEpsilons(),
                   f_ec: float = 1.06, mode: str = FINITE, lambda_ec: float | None = None) -> KeyBudget:
    """``decoy_bounds`` followed by ``key_length``."""
    if counts.n_z == 0:
        return KeyBudget(phi_z_up=0.5, mode=mode)
    budget = decoy_bounds(counts, params, eps, mode)
    return key_length(budget, counts, f_ec=f_ec, eps=eps, lambda_ec=lambda_ec)


def skr(budget: KeyBudget, duration: float, mode: str | None = None) -> float:
    """Secret key rate in bits per second for a finished budget."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    if mode is not None and mode != budget.mode:
        raise ValueError(f"budget was computed in {budget.mode!r} mode, not {mode!r}")
    return budget.l / duration


# ---------------------------------------------------------------------------
# analytic pipeline and operating-point search


@dataclass(frozen=True)
class LinkScenario:
    """Inputs of the analytic key-rate model."""

    link: "object"
    detectors: "object"
    preparer: "object" = None
    f_ec: float = 1.06
    eps: SecurityEpsilons = SecurityEpsilons()


def modeled_counts(params: ProtocolParams, scenario: LinkScenario, n_z_target: float | None = None,
                   duration: float | None = None) -> DecoyCounts:
    """Expected counts for a run sized either by ``n_z_target`` or ``duration``."""
    from .channel import StatePreparer, expected_rates

    preparer = scenario.preparer or StatePreparer()
    rates = expected_rates(params, scenario.link, scenario.detectors, preparer=preparer)
    per_s = rates.decoy_rates()
    nz_rate = per_s["n_z_mu1"] + per_s["n_z_mu2"]
    if duration is None:
        if n_z_target is None:
            raise ValueError("give n_z_target or duration")
        duration = n_z_target / nz_rate if nz_rate > 0 else math.inf
    if not math.isfinite(duration):
        return DecoyCounts(duration=0.0)
    return DecoyCounts.from_rates(per_s, duration)


def modeled_skr(params: ProtocolParams, scenario: LinkScenario, n_z_target: float = 1e8,
                mode: str = FINITE, duration: float | None = None) -> float:
    counts = modeled_counts(params, scenario, n_z_target, duration)
    if counts.duration <= 0:
        return 0.0
    budget = analyze_counts(counts, params, scenario.eps, scenario.f_ec, mode)
    return budget.l / counts.duration


_SEARCH_FIELDS = ("mu1_z", "mu2_z", "mu1_x", "mu2_x", "p_z_alice", "p_mu1")

DEFAULT_GRID = {
    "mu1_z": np.round(np.arange(0.30, 0.91, 0.05), 3),
    "mu2_z": np.round(np.arange(0.05, 0.51, 0.05), 3),
    "mu1_x": np.round(np.arange(0.30, 0.91, 0.05), 3),
    "mu2_x": np.round(np.arange(0.05, 0.51, 0.05), 3),
    "p_z_alice": np.round(np.arange(0.70, 0.981, 0.02), 3),
    "p_mu1": np.round(np.arange(0.40, 0.91, 0.05), 3),
}


@dataclass
class OptimizationResult:
    params: ProtocolParams
    skr: float
    evaluations: int


def _feasible(values: dict) -> bool:
    return (values["mu1_z"] > values["mu2_z"] > 0 and values["mu1_x"] > values["mu2_x"] > 0
            and 0 < values["p_z_alice"] < 1 and 0 < values["p_mu1"] < 1)


def optimize_operating_point(scenario: LinkScenario, n_z_target: float = 1e8, base: ProtocolParams | None = None,
                             grid: dict | None = None, sweeps: int = 4, refine_steps: int = 3,
                             mode: str = FINITE) -> OptimizationResult:
    """Maximize the modeled finite-key rate over intensities and probabilities.

    Coordinate descent over a grid, cycling through the searched fields until
    a full sweep changes nothing, followed by grid refinement around the
    incumbent (step halved ``refine_steps`` times).  Ties are broken towards
    the lexicographically smallest parameter tuple.
    """
    base = base or ProtocolParams()
    grid = {k: np.asarray(v, dtype=float) for k, v in (grid or DEFAULT_GRID).items()}
    unknown = set(grid) - set(_SEARCH_FIELDS)
    if unknown:
        raise ValueError(f"cannot search over {sorted(unknown)}")
    values = {f: getattr(base, f) for f in _SEARCH_FIELDS}
    # start from the feasible grid point nearest to the base parameters
    for f, g in grid.items():
        values[f] = float(g[np.argmin(np.abs(g - values[f]))])
    if not _feasible(values):
        values = _repair(values, grid)
        if values is None:
            raise ValueError("no feasible operating point in the search space")

    cache: dict = {}

    def score(v: dict) -> float:
        key = tuple(v[f] for f in _SEARCH_FIELDS)
        if key not in cache:
            if not _feasible(v):
                cache[key] = -math.inf
            else:
                p = _with(base, v)
                cache[key] = modeled_skr(p, scenario, n_z_target, mode)
        return cache[key]

    def better(a_val, a_key, b_val, b_key):
        return a_val > b_val or (a_val == b_val and a_key < b_key)

    steps = {f: (float(np.min(np.diff(np.unique(g)))) if len(np.unique(g)) > 1 else 0.0) for f, g in grid.items()}
    axes = {f: np.unique(g) for f, g in grid.items()}
    best = score(values)
    for level in range(refine_steps + 1):
        for _ in range(sweeps):
            changed = False
            for f in grid:
                for x in axes[f]:
                    trial = {**values, f: float(x)}
                    s = score(trial)
                    if better(s, _key(trial), best, _key(values)):
                        values, best, changed = trial, s, True
            if not changed:
                break
        if level == refine_steps:
            break
        # local refinement: finer axes centred on the incumbent
        for f in grid:
            steps[f] /= 2.0
            c = values[f]
            lo, hi = float(grid[f].min()), float(grid[f].max())
            axes[f] = np.unique(np.clip(np.round(c + steps[f] * np.arange(-4, 5), 6), lo, hi))
    if not math.isfinite(best):
        raise ValueError("no feasible operating point in the search space")
    return OptimizationResult(_with(base, values), best, len(cache))


def _key(v: dict) -> tuple:
    return tuple(v[f] for f in _SEARCH_FIELDS)


def _with(base: ProtocolParams, v: dict) -> ProtocolParams:
    d = base.to_dict()
    d.update(v)
    return ProtocolParams(**d)


def _repair(values: dict, grid: dict):
    v = dict(values)
    for hi, lo in (("mu1_z", "mu2_z"), ("mu1_x", "mu2_x")):
        if v[hi] > v[lo] > 0:
            continue
        if lo in grid:
            opts = [x for x in grid[lo] if 0 < x < v[hi]]
            if opts:
                v[lo] = float(max(opts))
                continue
        if hi in grid:
            opts = [x for x in grid[hi] if x > v[lo]]
            if opts:
                v[hi] = float(min(opts))
                continue
        return None
    return v if _feasible(v) else None
