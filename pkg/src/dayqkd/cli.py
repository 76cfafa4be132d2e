"""Command-line entry point (``dayqkd``).

Every subcommand takes ``--config FILE`` and any number of
``--set key.path=value`` overrides.  Key-producing commands (simulate,
analyze, postprocess) exit with status 0 only when a non-empty key results.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import io
from .config import PRESETS, ExperimentConfig, preset
from .decoy import FINITE, DecoyCounts, decoy_bounds, key_length
from .experiment import (ALICE_FILE, SWEEP_AXES, TAGS_FILE, StageError, amplify, analyze_tags,
                         optimize, reconcile, run_experiment, sweep)
from .postproc import read_key, write_key

OUTPUT_ENV = "DAYQKD_OUTPUT_DIR"
EXIT_OK, EXIT_NO_KEY, EXIT_ERROR = 0, 1, 2


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else preset(args.preset)
    return cfg.with_overrides(args.set or [])


def _outdir(args) -> Path:
    p = args.out or os.environ.get(OUTPUT_ENV) or "dayqkd-out"
    path = Path(p)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print_totals(summary):
    t = summary.totals
    print(f"n_Z={t['n_z']} Q_Z={t['qber_z']:.4%} Q_X={t['qber_x']:.4%} TDR={t['tdr_hz']:.0f} Hz "
          f"l={t['l']} SKR_f={t['skr_f_bps']:.1f} bps SKR_inf={t['skr_inf_bps']:.1f} bps")


def cmd_config_init(args) -> int:
    text = preset(args.preset).to_yaml()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    summary = run_experiment(cfg, out)
    _print_totals(summary)
    print(f"artifacts in {out}")
    return EXIT_OK if summary.totals["l"] > 0 else EXIT_NO_KEY


def cmd_analyze(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    src = Path(args.input) if args.input else None
    tags = Path(args.tags) if args.tags else src / TAGS_FILE
    alice = Path(args.alice) if args.alice else src / ALICE_FILE
    summary = analyze_tags(tags, alice, cfg, out)
    _print_totals(summary)
    return EXIT_OK if summary.totals["l"] > 0 else EXIT_NO_KEY


def _axis_values(args) -> list[float]:
    if args.values:
        return [float(v) for v in args.values.split(",") if v.strip()]
    if args.start is None or args.stop is None:
        raise ValueError("give --values or --start/--stop")
    n = args.points
    if n < 1:
        raise ValueError("--points must be >= 1")
    return [float(v) for v in np.linspace(args.start, args.stop, n)]


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = _axis_values(args)
    rows = sweep(cfg, args.axis, values)
    cols = [args.axis, "skr_f_bps", "skr_inf_bps", "l", "qber_z", "qber_x", "tdr_hz", "snr", "sifted_bps",
            "duration_s", "n_z"]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([io._fmt(r[c]) for c in cols])
    finally:
        if args.out:
            fh.close()
    if args.json:
        points = [{**{k: v for k, v in r.items() if k != args.axis}, "value": r[args.axis]} for r in rows]
        io.write_json(args.json, {"axis": args.axis, "points": points}, schema="sweep")
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = _config(args)
    res = optimize(cfg)
    p = res.params
    print(f"SKR_f={res.skr:.1f} bps after {res.evaluations} evaluations")
    for k in ("mu1_z", "mu2_z", "mu1_x", "mu2_x", "p_z_alice", "p_mu1"):
        print(f"protocol.{k}={getattr(p, k):g}")
    return EXIT_OK


def cmd_postprocess(args) -> int:
    """Key budget from a decoy-count sidecar, optionally distilling sifted key files."""
    cfg = _config(args)
    counts = DecoyCounts.from_dict(io.read_json(args.counts, schema="decoy_counts"))
    bounds = decoy_bounds(counts, cfg.protocol, cfg.security, FINITE)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if args.alice_key and args.bob_key:
        a, b = read_key(args.alice_key), read_key(args.bob_key)
        if a.length != counts.n_z or b.length != counts.n_z:
            raise ValueError(f"sifted keys hold {a.length}/{b.length} bits but the counts say n_Z={counts.n_z}")
        _, rec = reconcile(a.bits, b.bits, counts.q_z, cfg)
        budget = key_length(bounds, counts, eps=cfg.security, lambda_ec=rec.leaked_bits)
        if out is not None:
            write_key(out / "secret.key", amplify(a.bits, budget.l, cfg))
    else:
        budget = key_length(bounds, counts, f_ec=args.f_ec, eps=cfg.security,
                            lambda_ec=args.leaked if args.leaked is not None else None)
    text = io.dumps(budget.to_dict())
    if out is not None:
        io.write_json(out / "key_budget.json", budget.to_dict(), schema="key_budget")
    sys.stdout.write(text)
    return EXIT_OK if budget.l > 0 else EXIT_NO_KEY


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dayqkd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log stage timings")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory (default: $%s or ./dayqkd-out)" % OUTPUT_ENV):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--preset", default="paper", choices=PRESETS, help="built-in configuration when no file is given")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key (repeatable)")
        p.add_argument("--out", help=out_help)
        return p

    p = sub.add_parser("config-init", help="print the full default configuration")
    p.add_argument("--preset", default="paper", choices=PRESETS)
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_config_init)

    p = common(sub.add_parser("simulate", help="Monte Carlo run with full post-processing"))
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("analyze", help="re-analyze recorded tag and Alice files"))
    p.add_argument("--input", help="directory holding %s and %s" % (TAGS_FILE, ALICE_FILE))
    p.add_argument("--tags")
    p.add_argument("--alice")
    p.set_defaults(func=cmd_analyze)

    p = common(sub.add_parser("sweep", help="analytic key rate along one axis"), out_help="CSV file (default stdout)")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--start", type=float)
    p.add_argument("--stop", type=float)
    p.add_argument("--points", type=int, default=11)
    p.add_argument("--json", help="also write the points as JSON")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("optimize", help="search intensities and probabilities"))
    p.set_defaults(func=cmd_optimize)

    p = common(sub.add_parser("postprocess", help="key length from a decoy-count sidecar"),
               out_help="directory for key_budget.json (and secret.key)")
    p.add_argument("--counts", required=True, help="decoy_counts.json")
    p.add_argument("--alice-key")
    p.add_argument("--bob-key")
    p.add_argument("--leaked", type=float, help="error-correction leakage in bits")
    p.add_argument("--f-ec", type=float, default=1.06, help="reconciliation efficiency when --leaked is absent")
    p.set_defaults(func=cmd_postprocess)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, KeyError, OSError, jsonschema.ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
