"""Experiment configuration.

One YAML tree holds every parameter.  ``ExperimentConfig.from_dict`` accepts
partial trees (missing keys keep their defaults) and rejects unknown keys,
so typos fail loudly.  Command-line overrides use dotted paths such as
``link.extra_loss=14``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .channel import ClockModel, CouplingModel, DetectorBank, LinkModel, StatePreparer, expected_rates
from .decoy import SecurityEpsilons
from .protocol import ProtocolParams


@dataclass(frozen=True)
class EncoderSettings:
    """Polarization extinction ratios (dB) of the prepared states; ``None`` is ideal."""

    er_z_db: float | None = 24.0
    er_x_db: float | None = 30.0

    def __post_init__(self):
        for name in ("er_z_db", "er_x_db"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    def preparer(self) -> StatePreparer:
        from . import encoder as enc

        def imp(er):
            return enc.IDEAL if er is None else enc.EncoderImperfection(theta_error=enc.theta_error_for_er(er))

        return StatePreparer(imp(self.er_z_db), imp(self.er_x_db))


@dataclass(frozen=True)
class RunSettings:
    """Run length, seeding and analysis knobs.

    Exactly one of ``duration`` (s) and ``n_z_target`` sizes the run; with a
    target the duration is taken from the analytic sifted rate.
    """

    duration: float | None = None
    n_z_target: float | None = 1e8
    master_seed: int = 1
    interval: float = 240.0
    chunk_duration: float = 0.1
    coupling_dt: float = 1e-3
    ec_block: int = 1_000_000
    row_block_n_z: float = 1e8
    f_ec_model: float = 1.06

    def __post_init__(self):
        if (self.duration is None) == (self.n_z_target is None):
            raise ValueError("set exactly one of run.duration and run.n_z_target")
        if self.duration is not None and not self.duration > 0:
            raise ValueError("run.duration must be positive")
        if self.n_z_target is not None and not self.n_z_target > 0:
            raise ValueError("run.n_z_target must be positive")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ValueError("run.master_seed must fit in 64 bits")
        if not (self.interval > 0 and self.chunk_duration > 0 and self.coupling_dt > 0):
            raise ValueError("run.interval, run.chunk_duration and run.coupling_dt must be positive")
        if self.ec_block < 1000:
            raise ValueError("run.ec_block must be at least 1000 bits")
        if not (self.row_block_n_z > 0 and self.f_ec_model >= 1.0):
            raise ValueError("run.row_block_n_z must be positive and run.f_ec_model >= 1")


@dataclass(frozen=True)
class ScheduleEntry:
    t: float
    coupling_mean: float
    background_rate: float


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    link: LinkModel = field(default_factory=LinkModel)
    detectors: DetectorBank = field(default_factory=DetectorBank)
    clock: ClockModel = field(default_factory=lambda: ClockModel(offset_ps=3250.0, drift=2e-8, pps_jitter_ps=50.0))
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    security: SecurityEpsilons = field(default_factory=SecurityEpsilons)
    run: RunSettings = field(default_factory=RunSettings)
    schedule: tuple = ()

    def __post_init__(self):
        sched = tuple(e if isinstance(e, ScheduleEntry) else _entry(e) for e in self.schedule)
        object.__setattr__(self, "schedule", sched)
        times = [e.t for e in sched]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("schedule times must be strictly increasing")
        for e in sched:
            if e.t < 0:
                raise ValueError("schedule times must be >= 0")
            # reuse the component validators
            LinkModel(self.link.fixed_loss_optics, self.link.fixed_loss_analyzer,
                      dataclasses.replace(self.link.coupling, mean_efficiency=e.coupling_mean),
                      e.background_rate, self.link.extra_loss, self.link.reference_window)
        half = 0.5e12 / self.protocol.clock_rate
        if abs(self.clock.offset_ps) > half / 2:
            raise ValueError(f"clock.offset_ps must lie within +-{half / 2:g} ps (a quarter slot) so that "
                             "slot numbering is recovered unambiguously")
        self.protocol.check_decoy()

    # -- schedule -----------------------------------------------------------

    def schedule_at(self, t: float) -> tuple[float, float]:
        """(coupling mean, background rate) at run time ``t``, linearly interpolated."""
        if not self.schedule:
            return self.link.coupling.mean_efficiency, self.link.background_rate
        ts = [e.t for e in self.schedule]
        c = float(np.interp(t, ts, [e.coupling_mean for e in self.schedule]))
        b = float(np.interp(t, ts, [e.background_rate for e in self.schedule]))
        return c, b

    def link_at(self, t: float) -> LinkModel:
        if not self.schedule:
            return self.link
        c, b = self.schedule_at(t)
        return dataclasses.replace(self.link, coupling=dataclasses.replace(self.link.coupling, mean_efficiency=c),
                                   background_rate=b)

    def resolved_duration(self) -> float:
        """Run length in seconds, whole clock periods of the aggregation grid."""
        if self.run.duration is not None:
            return float(self.run.duration)
        prep = self.encoder.preparer()
        target = self.run.n_z_target
        if not self.schedule:
            rate = expected_rates(self.protocol, self.link, self.detectors, preparer=prep).sifted_rate_detected
            if rate <= 0:
                raise ValueError("configuration yields no sifted bits")
            return float(math.ceil(target / rate))
        # integrate the scheduled rate in 1 s steps
        acc, t = 0.0, 0
        while acc < target:
            acc += expected_rates(self.protocol, self.link_at(t + 0.5), self.detectors,
                                  preparer=prep).sifted_rate_detected
            t += 1
            if t > 10 * 86400:
                raise ValueError("n_z_target not reached within ten days")
        return float(t)

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        d = _to_plain(self)
        d["schedule"] = [[e.t, e.coupling_mean, e.background_rate] for e in self.schedule]
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d or {}, "")

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())

    def with_overrides(self, assignments) -> "ExperimentConfig":
        """Apply ``key.path=value`` strings (values parsed as YAML scalars)."""
        d = self.to_dict()
        for a in assignments:
            if "=" not in a:
                raise ValueError(f"override {a!r} is not of the form key.path=value")
            key, raw = a.split("=", 1)
            set_path(d, key.strip(), yaml.safe_load(raw))
        return ExperimentConfig.from_dict(d)


def set_path(d: dict, dotted: str, value):
    parts = dotted.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise KeyError(f"unknown configuration key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown configuration key {dotted!r}")
    node[parts[-1]] = value
    # sizing the run by one quantity clears the other
    if dotted == "run.duration" and value is not None:
        node["n_z_target"] = None
    elif dotted == "run.n_z_target" and value is not None:
        node["duration"] = None


def _entry(e) -> ScheduleEntry:
    if isinstance(e, dict):
        return ScheduleEntry(float(e["t"]), float(e["coupling_mean"]), float(e["background_rate"]))
    t, c, b = e
    return ScheduleEntry(float(t), float(c), float(b))


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise TypeError(f"{where or 'config'} must be a mapping")
    defaults = cls() if cls is not ExperimentConfig else None
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise KeyError(f"unknown configuration keys under {where or 'top level'}: {sorted(unknown)}")
    kw = {}
    for name, f in known.items():
        if name not in d:
            continue
        v = d[name]
        proto = getattr(defaults, name) if defaults is not None else _default_of(f)
        if dataclasses.is_dataclass(proto) and isinstance(v, dict):
            # merge partial trees over the default instance
            base = _to_plain(proto)
            if isinstance(proto, RunSettings):
                for a, b in (("duration", "n_z_target"), ("n_z_target", "duration")):
                    if v.get(a) is not None and b not in v:
                        base[b] = None
            base.update(v)
            kw[name] = _build(type(proto), base, f"{where}{name}.")
        elif name == "schedule":
            kw[name] = tuple(_number(list(e), "schedule") if isinstance(e, (list, tuple)) else e for e in v or ())
        else:
            kw[name] = _number(v, f"{where}{name}")
    return cls(**kw)


def _number(v, where: str):
    # YAML 1.1 reads exponents without a dot ("5e-10") as strings
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            raise ValueError(f"{where}: expected a number, got {v!r}") from None
    if isinstance(v, list):
        return tuple(_number(x, where) for x in v)
    return v


def _default_of(f: dataclasses.Field):
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return f.default


# ---------------------------------------------------------------------------
# presets

# Hand-drawn approximation of a full day: coupling rises from about 60 to
# 130 kHz worth of detections, background dips then climbs to 400 Hz at
# sunset.  Rows: (seconds from start, mean coupling, in-window background Hz).
APRIL18_SCHEDULE = (
    (0.0, 0.0248, 220.0),
    (9000.0, 0.0340, 200.0),
    (18000.0, 0.0440, 220.0),
    (25200.0, 0.0520, 240.0),
    (27000.0, 0.0540, 300.0),
    (28800.0, 0.0540, 400.0),
)


def preset(name: str) -> ExperimentConfig:
    if name == "paper":
        return ExperimentConfig()
    if name == "april18":
        return ExperimentConfig(schedule=APRIL18_SCHEDULE,
                                run=RunSettings(duration=28800.0, n_z_target=None))
    if name == "quick":
        return ExperimentConfig(run=RunSettings(duration=20.0, n_z_target=None, row_block_n_z=1e8, interval=5.0))
    raise KeyError(f"unknown preset {name!r}; choose from {PRESETS}")


PRESETS = ("paper", "april18", "quick")
