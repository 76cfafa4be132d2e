"""On-disk formats.

Time tags: little-endian 9-byte records, ``uint64`` picosecond timestamp then
``uint8`` channel (0..3 detectors, 255 PPS).  Alice's records use the same
layout with the slot index in place of the timestamp and a packed byte
``basis | bit << 1 | intensity << 2``.

JSON artifacts are written with sorted keys and validated against the
schemas shipped in ``dayqkd/schemas``.
"""

from __future__ import annotations

import csv
import json
import math
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .channel import CH_PPS, N_DETECTORS
from .protocol import PulseTrain

TAG_DTYPE = np.dtype([("t", "<u8"), ("ch", "u1")])
ALICE_DTYPE = np.dtype([("slot", "<u8"), ("code", "u1")])
RECORD_BYTES = 9
assert TAG_DTYPE.itemsize == ALICE_DTYPE.itemsize == RECORD_BYTES

CSV_COLUMNS = ("t_s", "tdr_hz", "snr", "qber_z", "qber_x", "sifted_bps", "skr_inf_bps", "skr_f_bps")


class RecordFileError(ValueError):
    """Malformed binary record file; the message names the byte offset."""


def _records(path, dtype) -> np.ndarray:
    path = Path(path)
    size = path.stat().st_size
    if size % RECORD_BYTES:
        off = size - size % RECORD_BYTES
        raise RecordFileError(f"{path}: truncated record at byte offset {off} "
                              f"({size % RECORD_BYTES} of {RECORD_BYTES} bytes)")
    if size == 0:
        return np.zeros(0, dtype=dtype)
    return np.memmap(path, dtype=dtype, mode="r")


def open_tags(path) -> np.ndarray:
    """Memory-mapped tag records (fields ``t`` and ``ch``)."""
    return _records(path, TAG_DTYPE)


def open_alice(path) -> np.ndarray:
    return _records(path, ALICE_DTYPE)


def check_tag_channels(rec: np.ndarray, start: int = 0, path="tags"):
    ch = rec["ch"]
    bad = np.flatnonzero((ch >= N_DETECTORS) & (ch != CH_PPS))
    if bad.size:
        i = start + int(bad[0])
        raise RecordFileError(f"{path}: invalid channel {int(ch[bad[0]])} at byte offset {i * RECORD_BYTES + 8}")


def tag_records(timestamps, channels) -> np.ndarray:
    t = np.asarray(timestamps)
    if t.size and t.min() < 0:
        raise ValueError("timestamps must be non-negative")
    rec = np.empty(t.size, dtype=TAG_DTYPE)
    rec["t"] = t
    rec["ch"] = channels
    return rec


def write_tags(path, timestamps, channels):
    tag_records(timestamps, channels).tofile(path)


def read_tags(path):
    rec = open_tags(path)
    check_tag_channels(rec, path=path)
    return rec["t"].astype(np.int64), rec["ch"].copy()


def alice_records(pulses: PulseTrain) -> np.ndarray:
    rec = np.empty(len(pulses), dtype=ALICE_DTYPE)
    rec["slot"] = pulses.slot
    rec["code"] = pulses.basis | (pulses.bit << 1) | (pulses.intensity << 2)
    return rec


def pulses_from_records(rec: np.ndarray, start: int = 0, path="alice") -> PulseTrain:
    code = np.asarray(rec["code"])
    bad = np.flatnonzero(code > 7)
    if bad.size:
        i = start + int(bad[0])
        raise RecordFileError(f"{path}: invalid record code {int(code[bad[0]])} at byte offset {i * RECORD_BYTES + 8}")
    basis = (code & 1).astype(np.uint8)
    bit = ((code >> 1) & 1).astype(np.uint8)
    if np.any(bit[basis == 1]):
        i = start + int(np.flatnonzero((basis == 1) & (bit == 1))[0])
        raise RecordFileError(f"{path}: X-basis record with bit 1 at byte offset {i * RECORD_BYTES}")
    return PulseTrain(np.asarray(rec["slot"]).astype(np.int64), basis, bit, ((code >> 2) & 1).astype(np.uint8))


def write_alice(path, pulses: PulseTrain):
    alice_records(pulses).tofile(path)


def read_alice(path) -> PulseTrain:
    return pulses_from_records(open_alice(path), path=path)


class RecordWriter:
    """Append-only writer for record arrays."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "wb")
        self.count = 0

    def write(self, rec: np.ndarray):
        if rec.size:
            self._fh.write(rec.tobytes())
            self.count += rec.size

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# JSON / CSV


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("dayqkd").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    """Canonical JSON text (sorted keys, non-finite floats as null)."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj, schema: str | None = None):
    data = _plain(obj)
    if schema is not None:
        jsonschema.validate(data, load_schema(schema))
    Path(path).write_text(dumps(data))


def read_json(path, schema: str | None = None) -> dict:
    data = json.loads(Path(path).read_text())
    if schema is not None:
        jsonschema.validate(data, load_schema(schema))
    return data


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_csv(path, rows, columns=CSV_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
