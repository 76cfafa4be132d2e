"""End-to-end runs: simulate to files, analyze the files, distil a key.

``run_experiment`` writes the time-tag stream and Alice's records first and
then calls ``analyze_tags`` on those files, so a later offline re-analysis of
the same artifacts reproduces the run bit for bit.

Streams are processed in fixed-size record blocks and never loaded whole;
only the sifted key (one byte per bit) is held in memory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .cascade import ReconciliationError, cascade_correct
from .channel import CH_PPS, N_DETECTORS, LinkModel, StreamSimulator, expected_rates, pps_markers
from .config import ExperimentConfig
from .decoy import (ASYMPTOTIC, FINITE, DecoyCounts, KeyBudget, LinkScenario, analyze_counts, decoy_bounds,
                    key_length, modeled_counts, optimize_operating_point)
from .postproc import KeyBlock, write_key
from .protocol import RandomSource
from .timetags import (PhaseAccumulator, SiftError, balance_efficiency, noise_guard_ps, resolve_double_clicks, sift,
                       window_filter)
from .toeplitz import seed_bits, toeplitz_pa

log = logging.getLogger(__name__)

BLOCK_RECORDS = 1 << 22
TAGS_FILE = "tags.bin"
ALICE_FILE = "alice.bin"
FAILED_FILE = "FAILED"
ARTIFACTS = ("config.yaml", "decoy_counts.json", "key_budget.json", "summary.json", "summary.csv",
             "sifted_alice.key", "sifted_bob.key", "secret.key")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def derive_seed(master: int, label: str) -> int:
    """Independent 64-bit seed for one consumer of randomness."""
    code = int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")
    return int(np.random.SeedSequence([int(master), code]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# simulation


@dataclass
class SimulationInfo:
    duration: float
    n_tags: int
    n_pps: int
    n_alice: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def simulate_to_files(config: ExperimentConfig, outdir) -> SimulationInfo:
    """Run the Monte Carlo transmitter/channel/receiver and write both record files.

    The tag file is globally sorted by timestamp: chunks cover consecutive
    slot ranges and every delay stays inside its slot, so only PPS edges need
    merging in.
    """
    outdir = Path(outdir)
    duration = config.resolved_duration()
    master = config.run.master_seed
    clock = config.clock
    sim = StreamSimulator(config.protocol, config.link, config.detectors, config.encoder.preparer(), clock,
                          seed=derive_seed(master, "channel"), coupling_dt=config.run.coupling_dt,
                          chunk_duration=config.run.chunk_duration)
    schedule = config.schedule_at if config.schedule else None
    pps = pps_markers(duration, clock, rng=derive_seed(master, "pps"))
    pps = pps[pps >= 0]
    rate = config.protocol.clock_rate
    period = 1e12 / rate
    res = config.detectors.tdc_ps
    pi = 0
    with io.RecordWriter(outdir / TAGS_FILE) as wt, io.RecordWriter(outdir / ALICE_FILE) as wa:
        for _, t1, det, alice in sim.iter_chunks(duration, schedule):
            s_end = int(round(t1 * rate))
            bound = math.floor(((s_end - 0.5) * period + clock.offset_ps) * (1.0 + clock.drift) / res) * res
            m = det.timestamp >= 0
            ts, ch = det.timestamp[m], det.channel[m]
            pj = int(np.searchsorted(pps, bound, side="left"))
            if pj > pi:
                ts = np.concatenate([ts, pps[pi:pj]])
                ch = np.concatenate([ch, np.full(pj - pi, CH_PPS, np.uint8)])
                order = np.lexsort((ch, ts))
                ts, ch = ts[order], ch[order]
                pi = pj
            wt.write(io.tag_records(ts, ch))
            wa.write(io.alice_records(alice))
        wt.write(io.tag_records(pps[pi:], np.full(len(pps) - pi, CH_PPS, np.uint8)))
        n_tags, n_alice = wt.count, wa.count
    return SimulationInfo(duration=duration, n_tags=n_tags - len(pps), n_pps=len(pps), n_alice=n_alice)


# ---------------------------------------------------------------------------
# tag-stream analysis


def _blocks(n: int, size: int = BLOCK_RECORDS):
    for lo in range(0, n, size):
        yield lo, min(n, lo + size)


def scan_tags(rec: np.ndarray, path="tags") -> tuple[np.ndarray, bool]:
    """Validate channels; return the PPS timestamps and whether ``t`` is non-decreasing."""
    pps, ordered, last = [], True, -1
    for lo, hi in _blocks(len(rec)):
        blk = rec[lo:hi]
        io.check_tag_channels(blk, start=lo, path=path)
        t = blk["t"].astype(np.int64)
        if ordered and t.size and (t[0] < last or np.any(t[1:] < t[:-1])):
            ordered = False
        if t.size:
            last = int(t[-1])
        pps.append(t[blk["ch"] == CH_PPS])
    return (np.sort(np.concatenate(pps)) if pps else np.zeros(0, np.int64)), ordered


def sort_tag_file(src, dst):
    """Sort a tag file by (timestamp, channel).  Loads the whole file."""
    rec = np.fromfile(src, dtype=io.TAG_DTYPE)
    rec[np.lexsort((rec["ch"], rec["t"]))].tofile(dst)


def recover_sync(rec: np.ndarray, pps: np.ndarray, config: ExperimentConfig):
    acc = PhaseAccumulator(pps, 1e12 / config.protocol.clock_rate, config.detectors.tdc_ps)
    n = 0
    for lo, hi in _blocks(len(rec)):
        blk = rec[lo:hi]
        t = blk["t"][blk["ch"] != CH_PPS].astype(np.int64)
        n += t.size
        acc.add(t)
    if n < 1000:
        raise ValueError(f"only {n} detection tags; need at least 1000 to recover the clock")
    return acc.solve(config.detectors.window_width * 1e12)


@dataclass
class StreamTally:
    """Per-row raw statistics gathered while sifting."""

    n_rows: int
    raw: np.ndarray = None  # in-window tags per row and channel (before balancing)
    off: np.ndarray = None  # off-window tags per row and channel
    decoy: np.ndarray = None  # per row: n/m for z/x and mu1/mu2, in DecoyCounts field order
    alice_bits: list = field(default_factory=list)
    bob_bits: list = field(default_factory=list)
    in_window: int = 0
    balanced: int = 0
    resolved: int = 0

    def __post_init__(self):
        self.raw = np.zeros((self.n_rows, N_DETECTORS), np.int64)
        self.off = np.zeros((self.n_rows, N_DETECTORS), np.int64)
        self.decoy = np.zeros((self.n_rows, len(_DECOY_FIELDS)), np.int64)


_DECOY_FIELDS = tuple(f.name for f in dataclasses.fields(DecoyCounts) if f.name != "duration")


def _row_grid(config: ExperimentConfig, duration: float):
    rate = config.protocol.clock_rate
    total_slots = int(round(duration * rate))
    slots_per_row = int(round(config.run.interval * rate))
    n_rows = max(1, -(-total_slots // slots_per_row))
    return total_slots, slots_per_row, n_rows


def sift_stream(rec: np.ndarray, alice_rec: np.ndarray, sync, config: ExperimentConfig, duration: float,
                alice_path="alice") -> StreamTally:
    total_slots, slots_per_row, n_rows = _row_grid(config, duration)
    tally = StreamTally(n_rows)
    window = config.detectors.window_width
    guard = noise_guard_ps(window)
    eff = config.detectors.eff
    master = config.run.master_seed
    src_bal = RandomSource(derive_seed(master, "balance"))
    src_dc = RandomSource(derive_seed(master, "double-click"))
    a_slots = alice_rec["slot"]

    def process(s, c):
        if s.size == 0:
            return
        keep = resolve_double_clicks(s, c, src_dc)
        s, c = s[keep], c[keep]
        tally.resolved += s.size
        lo = int(np.searchsorted(a_slots, np.uint64(s[0]), side="left"))
        hi = int(np.searchsorted(a_slots, np.uint64(s[-1]), side="right"))
        alice = io.pulses_from_records(alice_rec[lo:hi], start=lo, path=alice_path)
        rows = s // slots_per_row
        cuts = np.flatnonzero(np.diff(rows)) + 1
        for a, b in zip(np.r_[0, cuts], np.r_[cuts, s.size]):
            res = sift(alice, s[a:b], c[a:b])
            r = int(rows[a])
            tally.decoy[r] += [getattr(res.counts, f) for f in _DECOY_FIELDS]
            tally.alice_bits.append(res.alice_bits)
            tally.bob_bits.append(res.bob_bits)

    carry_s = np.zeros(0, np.int64)
    carry_c = np.zeros(0, np.int64)
    n = len(rec)
    for lo, hi in _blocks(n):
        blk = rec[lo:hi]
        det = blk["ch"] != CH_PPS
        t = blk["t"][det].astype(np.int64)
        ch = blk["ch"][det].astype(np.int64)
        keep, slot, phase = window_filter(t, sync, window)
        valid = (slot >= 0) & (slot < total_slots)
        row = slot // slots_per_row
        off = valid & (np.abs(phase) > guard)
        tally.off += np.bincount(row[off] * N_DETECTORS + ch[off],
                                 minlength=n_rows * N_DETECTORS).reshape(n_rows, N_DETECTORS)
        inw = valid & keep
        s, c = slot[inw], ch[inw]
        tally.raw += np.bincount(row[inw] * N_DETECTORS + c, minlength=n_rows * N_DETECTORS).reshape(n_rows, N_DETECTORS)
        tally.in_window += s.size
        bal = balance_efficiency(s, c, eff, src_bal)
        s, c = np.concatenate([carry_s, s[bal]]), np.concatenate([carry_c, c[bal]])
        tally.balanced += int(np.count_nonzero(bal))
        if hi < n and s.size:
            # the last slot may continue in the next block
            cut = int(np.searchsorted(s, s[-1], side="left"))
            s, c, carry_s, carry_c = s[:cut], c[:cut], s[cut:], c[cut:]
        else:
            carry_s, carry_c = carry_s[:0], carry_c[:0]
        process(s, c)
    process(carry_s, carry_c)
    return tally


# ---------------------------------------------------------------------------
# summary rows


CSV_ROW_KEYS = io.CSV_COLUMNS


def _row_stats(config: ExperimentConfig, raw, off, counts: DecoyCounts, dur: float) -> dict:
    eff = config.detectors.eff
    period_ps = 1e12 / config.protocol.clock_rate
    window_ps = config.detectors.window_width * 1e12
    off_width = period_ps - 2.0 * noise_guard_ps(config.detectors.window_width)
    tdr = float(np.sum(raw / eff)) / dur
    noise = float(np.sum(off * (window_ps / off_width) / eff)) / dur if off_width > 0 else math.nan
    snr = (tdr - noise) / noise if noise > 0 else math.inf
    row = {"duration_s": dur, "tdr_hz": tdr, "noise_hz": noise, "snr": snr, "qber_z": counts.q_z,
           "qber_x": counts.q_x, "sifted_bps": counts.n_z / dur, "n_z": counts.n_z, "m_z": counts.m_z,
           "n_x": counts.n_x, "m_x": counts.m_x}
    skr_f = skr_inf = 0.0
    if counts.n_z > 0 and counts.n_x > 0:
        # rows are too short for a key of their own; they are rated as if
        # their statistics held over a full block of ``row_block_n_z`` bits
        scale = config.run.row_block_n_z / counts.n_z
        c = counts.scaled(scale)
        for mode in (FINITE, ASYMPTOTIC):
            b = analyze_counts(c, config.protocol, config.security, config.run.f_ec_model, mode)
            rate = b.l / (dur * scale)
            if mode == FINITE:
                skr_f = rate
            else:
                skr_inf = rate
    row["skr_f_bps"] = skr_f
    row["skr_inf_bps"] = skr_inf
    return row


def summary_rows(tally: StreamTally, config: ExperimentConfig, duration: float) -> tuple[list, DecoyCounts]:
    rows = []
    total = DecoyCounts(duration=0.0)
    for r in range(tally.n_rows):
        t0 = r * config.run.interval
        dur = min(config.run.interval, duration - t0)
        counts = DecoyCounts(**dict(zip(_DECOY_FIELDS, (int(x) for x in tally.decoy[r]))), duration=dur)
        total = total + counts
        rows.append({"t_s": t0, **_row_stats(config, tally.raw[r], tally.off[r], counts, dur)})
    return rows, total


# ---------------------------------------------------------------------------
# error correction and privacy amplification


@dataclass
class ReconciliationSummary:
    blocks: int = 0
    leaked_bits: int = 0
    parity_bits: int = 0
    tag_bits: int = 0
    corrected_errors: int = 0
    max_passes: int = 0
    f_ec_measured: float = 0.0
    qber_estimate: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def reconcile(alice_bits: np.ndarray, bob_bits: np.ndarray, q_z: float, config: ExperimentConfig):
    """Cascade over consecutive blocks; returns Bob's corrected bits and the totals."""
    from .postproc import binary_entropy

    q_est = max(q_z, 1e-3)
    if q_est > 0.11:
        raise ReconciliationError(f"QBER {q_z:.4f} beyond the correctable range")
    out = np.empty_like(bob_bits)
    summ = ReconciliationSummary(qber_estimate=q_est)
    size = config.run.ec_block
    for i, lo in enumerate(range(0, alice_bits.size, size)):
        hi = min(alice_bits.size, lo + size)
        corrected, rep = cascade_correct(KeyBlock(alice_bits[lo:hi]), KeyBlock(bob_bits[lo:hi]), q_est,
                                         seed=derive_seed(config.run.master_seed, f"cascade/{i}"))
        out[lo:hi] = corrected.bits
        summ.blocks += 1
        summ.leaked_bits += rep.leaked_bits
        summ.parity_bits += rep.parity_bits
        summ.tag_bits += rep.tag_bits
        summ.corrected_errors += rep.corrected_errors
        summ.max_passes = max(summ.max_passes, rep.passes)
    n = alice_bits.size
    q_true = float(np.count_nonzero(alice_bits != bob_bits)) / n if n else 0.0
    h = n * binary_entropy(q_true)
    summ.f_ec_measured = summ.leaked_bits / h if h > 0 else math.inf
    return out, summ


def amplify(key_bits: np.ndarray, l: int, config: ExperimentConfig) -> KeyBlock:
    if l <= 0:
        return KeyBlock(np.zeros(0, np.uint8))
    seed = seed_bits(derive_seed(config.run.master_seed, "privacy-amplification"), key_bits.size + l - 1)
    return toeplitz_pa(KeyBlock(key_bits), l, seed)


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class RunSummary:
    rows: list
    totals: dict
    sync: dict
    reconciliation: dict
    stream: dict
    counts: DecoyCounts
    budget: KeyBudget

    def to_dict(self) -> dict:
        return {"rows": self.rows, "totals": self.totals, "sync": self.sync,
                "reconciliation": self.reconciliation, "stream": self.stream}


def _stage(name):
    class _Ctx:
        def __enter__(self):
            self.t = time.perf_counter()
            return self

        def __exit__(self, typ, exc, tb):
            log.info("stage %s: %.1f s", name, time.perf_counter() - self.t)
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, str(exc)) from exc
            return False

    return _Ctx()


def analyze_tags(tags_path, alice_path, config: ExperimentConfig, outdir=None) -> RunSummary:
    """Re-run the receiver pipeline on recorded files.

    With ``outdir`` the result artifacts are written there; on failure a
    ``FAILED`` marker naming the stage is written next to whatever was
    already flushed.
    """
    outdir = Path(outdir) if outdir is not None else None
    try:
        return _analyze(Path(tags_path), Path(alice_path), config, outdir)
    except StageError as e:
        if outdir is not None:
            (outdir / FAILED_FILE).write_text(f"stage: {e.stage}\nerror: {e}\n")
        raise


def _analyze(tags_path: Path, alice_path: Path, config: ExperimentConfig, outdir: Path | None) -> RunSummary:
    duration = config.resolved_duration()
    with _stage("read"):
        rec = io.open_tags(tags_path)
        alice_rec = io.open_alice(alice_path)
        pps, ordered = scan_tags(rec, path=tags_path)
    tmp = None
    try:
        if not ordered:
            with _stage("read"):
                tmp = tempfile.NamedTemporaryFile(suffix=".bin", dir=outdir, delete=False)
                tmp.close()
                sort_tag_file(tags_path, tmp.name)
                rec = io.open_tags(tmp.name)
        with _stage("sync"):
            sync = recover_sync(rec, pps, config)
        with _stage("sift"):
            tally = sift_stream(rec, alice_rec, sync, config, duration, alice_path=alice_path)
            n_records = len(rec)
            del rec
    finally:
        if tmp is not None:
            Path(tmp.name).unlink(missing_ok=True)

    with _stage("decoy"):
        rows, counts = summary_rows(tally, config, duration)
        alice_bits = np.concatenate(tally.alice_bits) if tally.alice_bits else np.zeros(0, np.uint8)
        bob_bits = np.concatenate(tally.bob_bits) if tally.bob_bits else np.zeros(0, np.uint8)
        tally.alice_bits = tally.bob_bits = None
        if counts.n_z == 0 or counts.n_x == 0:
            raise SiftError("no sifted detections in one of the bases")
        bounds = decoy_bounds(counts, config.protocol, config.security, FINITE)
        if outdir is not None:
            io.write_json(outdir / "decoy_counts.json", counts.to_dict(), schema="decoy_counts")
            write_key(outdir / "sifted_alice.key", KeyBlock(alice_bits))
            write_key(outdir / "sifted_bob.key", KeyBlock(bob_bits))
    with _stage("reconcile"):
        _, rec_summary = reconcile(alice_bits, bob_bits, counts.q_z, config)
        del bob_bits
    with _stage("decoy"):
        budget = key_length(bounds, counts, eps=config.security, lambda_ec=rec_summary.leaked_bits)
        asym = key_length(decoy_bounds(counts, config.protocol, config.security, ASYMPTOTIC), counts,
                          eps=config.security, lambda_ec=rec_summary.leaked_bits)
    with _stage("amplify"):
        secret = amplify(alice_bits, budget.l, config)
        del alice_bits

    raw_total = tally.raw.sum(axis=0)
    off_total = tally.off.sum(axis=0)
    overall = _row_stats(config, raw_total, off_total, counts, duration)
    totals = {
        "duration_s": duration, "n_z": counts.n_z, "m_z": counts.m_z, "n_x": counts.n_x, "m_x": counts.m_x,
        "qber_z": counts.q_z, "qber_x": counts.q_x, "tdr_hz": overall["tdr_hz"], "snr": overall["snr"],
        "sifted_bps": counts.n_z / duration, "l": budget.l, "l_asymptotic": asym.l,
        "skr_f_bps": budget.l / duration, "skr_inf_bps": asym.l / duration,
    }
    stream = {"records": n_records, "pps": int(pps.size), "in_window": tally.in_window,
              "balanced": tally.balanced, "resolved": tally.resolved}
    summary = RunSummary(rows=rows, totals=totals, sync=sync.to_dict(), reconciliation=rec_summary.to_dict(),
                         stream=stream, counts=counts, budget=budget)
    if outdir is not None:
        with _stage("write"):
            io.write_json(outdir / "key_budget.json", budget.to_dict(), schema="key_budget")
            io.write_json(outdir / "summary.json", summary.to_dict(), schema="run_summary")
            io.write_csv(outdir / "summary.csv", rows)
            write_key(outdir / "secret.key", secret)
    return summary


def run_experiment(config: ExperimentConfig, outdir) -> RunSummary:
    """Simulate, write the raw streams, analyze them and distil the key."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / FAILED_FILE).unlink(missing_ok=True)
    (outdir / "config.yaml").write_text(config.to_yaml())
    try:
        with _stage("simulate"):
            simulate_to_files(config, outdir)
    except StageError as e:
        (outdir / FAILED_FILE).write_text(f"stage: {e.stage}\nerror: {e}\n")
        raise
    return analyze_tags(outdir / TAGS_FILE, outdir / ALICE_FILE, config, outdir)


# ---------------------------------------------------------------------------
# analytic evaluation


def link_with_loss(link: LinkModel, total_db: float) -> LinkModel:
    """Link with the given total loss; below the nominal budget the coupling improves instead."""
    base = link.fixed_loss_optics + link.fixed_loss_analyzer + link.coupling.loss_db
    if total_db >= base:
        return link.with_total_loss(total_db)
    coupling_db = total_db - link.fixed_loss_optics - link.fixed_loss_analyzer
    if coupling_db < 0:
        raise ValueError(f"total loss {total_db} dB is below the fixed optics and analyzer losses")
    c = dataclasses.replace(link.coupling, mean_efficiency=10 ** (-coupling_db / 10))
    return dataclasses.replace(link, coupling=c, extra_loss=0.0)


def evaluate(config: ExperimentConfig) -> dict:
    """Analytic pipeline: expected rates, expected counts over the run, key length."""
    prep = config.encoder.preparer()
    rates = expected_rates(config.protocol, config.link, config.detectors, preparer=prep)
    scen = LinkScenario(config.link, config.detectors, prep, config.run.f_ec_model, config.security)
    if config.run.n_z_target is not None:
        counts = modeled_counts(config.protocol, scen, n_z_target=config.run.n_z_target)
    else:
        counts = modeled_counts(config.protocol, scen, duration=config.run.duration)
    out = {"tdr_hz": rates.tdr, "snr": rates.snr, "qber_z": rates.qber_z, "qber_x": rates.qber_x,
           "sifted_bps": rates.sifted_rate_detected, "duration_s": counts.duration, "n_z": counts.n_z,
           "l": 0, "skr_f_bps": 0.0, "skr_inf_bps": 0.0}
    if counts.duration > 0 and counts.n_z > 0:
        fin = analyze_counts(counts, config.protocol, config.security, config.run.f_ec_model, FINITE)
        inf = analyze_counts(counts, config.protocol, config.security, config.run.f_ec_model, ASYMPTOTIC)
        out.update(l=fin.l, skr_f_bps=fin.l / counts.duration, skr_inf_bps=inf.l / counts.duration)
    return out


SWEEP_AXES = ("loss", "qber", "block")


def _at_axis(config: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    if axis == "loss":
        return dataclasses.replace(config, link=link_with_loss(config.link, value))
    if axis == "qber":
        if not 0 <= value < 0.5:
            raise ValueError("intrinsic QBER must lie in [0, 0.5)")
        er = None if value == 0 else 10 * math.log10(1.0 / value - 1.0)
        return dataclasses.replace(config, encoder=dataclasses.replace(config.encoder, er_z_db=er, er_x_db=er))
    if axis == "block":
        run = dataclasses.replace(config.run, n_z_target=float(value), duration=None)
        return dataclasses.replace(config, run=run)
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def sweep(config: ExperimentConfig, axis: str, values) -> list[dict]:
    """One analytic evaluation per axis value."""
    values = list(values)
    if not values:
        raise ValueError("sweep range is empty")
    out = []
    for v in values:
        row = evaluate(_at_axis(config, axis, float(v)))
        out.append({axis: float(v), **row})
    return out


def optimize(config: ExperimentConfig, **kw):
    """Best modeled operating point for the configured link."""
    scen = LinkScenario(config.link, config.detectors, config.encoder.preparer(), config.run.f_ec_model,
                        config.security)
    n_z = config.run.n_z_target if config.run.n_z_target is not None else 1e8
    return optimize_operating_point(scen, n_z_target=n_z, base=config.protocol, **kw)
