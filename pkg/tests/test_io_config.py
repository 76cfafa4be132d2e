import dataclasses
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dayqkd import io
from dayqkd.config import PRESETS, ExperimentConfig, RunSettings, preset
from dayqkd.decoy import DecoyCounts, KeyBudget
from dayqkd.protocol import ProtocolParams, RandomSource, sample_pulse_train


def test_tag_round_trip(tmp_path):
    t = np.array([0, 81, 162, 2 ** 63], dtype=np.uint64)
    ch = np.array([0, 3, 255, 1], dtype=np.uint8)
    io.write_tags(tmp_path / "t.bin", t, ch)
    assert (tmp_path / "t.bin").stat().st_size == 4 * io.RECORD_BYTES
    got_t, got_ch = io.read_tags(tmp_path / "t.bin")
    assert got_t[:3].tolist() == [0, 81, 162] and got_ch.tolist() == ch.tolist()


def test_tag_layout_is_little_endian(tmp_path):
    io.write_tags(tmp_path / "t.bin", [0x0102030405060708], [2])
    assert (tmp_path / "t.bin").read_bytes() == bytes([8, 7, 6, 5, 4, 3, 2, 1, 2])


def test_truncated_record_names_offset(tmp_path):
    p = tmp_path / "t.bin"
    io.write_tags(p, np.arange(10), np.zeros(10, np.uint8))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(io.RecordFileError, match="byte offset 81"):
        io.read_tags(p)


def test_bad_channel_names_offset(tmp_path):
    p = tmp_path / "t.bin"
    io.write_tags(p, np.arange(5), [0, 1, 2, 9, 3])
    with pytest.raises(io.RecordFileError, match="invalid channel 9 at byte offset 35"):
        io.read_tags(p)


def test_negative_timestamps_rejected():
    with pytest.raises(ValueError):
        io.tag_records([-1], [0])


def test_alice_round_trip(tmp_path):
    pulses = sample_pulse_train(5000, ProtocolParams(), RandomSource(2))
    io.write_alice(tmp_path / "a.bin", pulses)
    back = io.read_alice(tmp_path / "a.bin")
    for f in ("slot", "basis", "bit", "intensity"):
        assert np.array_equal(getattr(back, f), getattr(pulses, f))


def test_alice_rejects_minus_state(tmp_path):
    rec = np.zeros(3, dtype=io.ALICE_DTYPE)
    rec["slot"] = [1, 2, 3]
    rec["code"] = [0, 1, 3]  # X basis with bit 1
    rec.tofile(tmp_path / "a.bin")
    with pytest.raises(io.RecordFileError, match="byte offset 18"):
        io.read_alice(tmp_path / "a.bin")


def test_record_writer_streams(tmp_path):
    with io.RecordWriter(tmp_path / "t.bin") as w:
        w.write(io.tag_records([1, 2], [0, 0]))
        w.write(io.tag_records([], []))
        w.write(io.tag_records([3], [1]))
    assert w.count == 3
    assert io.read_tags(tmp_path / "t.bin")[0].tolist() == [1, 2, 3]


def test_empty_file_is_valid(tmp_path):
    (tmp_path / "t.bin").write_bytes(b"")
    assert io.open_tags(tmp_path / "t.bin").size == 0


@pytest.mark.parametrize("name", ["decoy_counts", "key_budget", "run_summary", "sweep"])
def test_schemas_are_valid(name):
    jsonschema.Draft202012Validator.check_schema(io.load_schema(name))


def test_artifacts_validate(tmp_path):
    io.write_json(tmp_path / "c.json", DecoyCounts(n_z_mu1=5, duration=1.0).to_dict(), schema="decoy_counts")
    io.write_json(tmp_path / "k.json", KeyBudget().to_dict(), schema="key_budget")
    assert io.read_json(tmp_path / "c.json", schema="decoy_counts")["n_z_mu1"] == 5
    with pytest.raises(jsonschema.ValidationError):
        io.write_json(tmp_path / "bad.json", {"n_z_mu1": 1}, schema="decoy_counts")


def test_json_is_canonical():
    assert io.dumps({"b": np.float64(np.inf), "a": np.int64(3)}) == '{\n  "a": 3,\n  "b": null\n}\n'


def test_csv_round_trip(tmp_path):
    rows = [dict(zip(io.CSV_COLUMNS, [240.0, 96000.5, float("inf"), 0.005, 0.004, 6e4, 1e3, 0.0]))]
    io.write_csv(tmp_path / "s.csv", rows)
    assert io.read_csv(tmp_path / "s.csv") == rows


# ---------------------------------------------------------------------------
# configuration


@pytest.mark.parametrize("name", PRESETS)
def test_yaml_round_trip(name):
    cfg = preset(name)
    assert ExperimentConfig.from_yaml(cfg.to_yaml()) == cfg


@pytest.mark.parametrize("name", PRESETS)
def test_shipped_configs_match_presets(name):
    text = resources.files("dayqkd").joinpath("configs", f"{name}.yaml").read_text()
    assert ExperimentConfig.from_yaml(text) == preset(name)


def test_partial_yaml_merges_defaults():
    cfg = ExperimentConfig.from_yaml("detectors: {window_width: 5e-10}\nrun: {duration: 3}\n")
    assert cfg.detectors.window_width == 5e-10
    assert cfg.detectors.efficiency == (0.85, 0.85, 0.9, 0.3)
    assert cfg.run.duration == 3 and cfg.run.n_z_target is None


def test_overrides():
    cfg = preset("paper").with_overrides(["link.background_rate=300", "run.duration=10", "protocol.mu2_z=0.2"])
    assert cfg.link.background_rate == 300 and cfg.protocol.mu2_z == 0.2
    assert cfg.run.n_z_target is None
    with pytest.raises(KeyError):
        preset("paper").with_overrides(["link.colour=blue"])
    with pytest.raises(ValueError):
        preset("paper").with_overrides(["link.background_rate"])


@pytest.mark.parametrize("override", ["run.duration=0", "protocol.mu2_z=0.9", "clock.offset_ps=6000",
                                      "link.background_rate=-1", "detectors.window_width=abc"])
def test_invalid_configs_rejected(override):
    with pytest.raises(ValueError):
        preset("paper").with_overrides([override])


def test_unknown_keys_rejected():
    with pytest.raises(KeyError):
        ExperimentConfig.from_yaml("protocol: {mu3: 0.1}\n")


def test_run_sizing_is_exclusive():
    with pytest.raises(ValueError):
        RunSettings(duration=10.0, n_z_target=1e6)
    with pytest.raises(ValueError):
        RunSettings(duration=None, n_z_target=None)


def test_resolved_duration():
    cfg = preset("paper")
    assert 1400 < cfg.resolved_duration() < 1700
    small = dataclasses.replace(cfg, run=RunSettings(n_z_target=1e6))
    assert small.resolved_duration() == pytest.approx(cfg.resolved_duration() / 100, abs=1)
    assert preset("quick").resolved_duration() == 20.0


def test_schedule_interpolation():
    cfg = preset("april18")
    c0, b0 = cfg.schedule_at(0.0)
    c_mid, b_mid = cfg.schedule_at(4500.0)
    assert (c0, b0) == (0.0248, 220.0)
    assert c_mid == pytest.approx((0.0248 + 0.034) / 2)
    assert cfg.schedule_at(1e6)[1] == 400.0
    with pytest.raises(ValueError):
        dataclasses.replace(cfg, schedule=((0, 0.02, 220), (0, 0.03, 220)))


@given(st.floats(0.3, 0.9), st.floats(250.0, 1e4))
def test_override_values_survive_yaml(mu, bg):
    cfg = preset("paper").with_overrides([f"protocol.mu1_z={mu!r}", f"link.background_rate={bg!r}"])
    assert ExperimentConfig.from_yaml(cfg.to_yaml()) == cfg
