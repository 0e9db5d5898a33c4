from __future__ import annotations

import json
import math

import numpy as np
import pytest

from otdr_mtl.cli import (
    CONSTRAINTS,
    DEFAULTS,
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_OK,
    check_reflector,
    detect_events,
    main,
    parse_config,
)
from otdr_mtl.errors import ConfigurationError
from otdr_mtl.nn import save_model
from otdr_mtl.trace_sim import AcquisitionConfig, load_trace, reflectance_to_peak_height, save_trace, synthesize_trace

TINY = ["n_traces=30", "max_epochs=2", "patience=2", "n_c=4", "tower_width=3", "batch_size=16"]


def sets(items):
    out = []
    for item in items:
        out += ["--set", item]
    return out


# -- configuration -----------------------------------------------------------------

def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg.values == DEFAULTS
    assert cfg.defaulted == sorted(DEFAULTS)
    p.write_text("{}")
    assert parse_config(p).values == DEFAULTS


def test_override_wins_and_is_recorded(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"n_avg": 64, "fiber_length_m": 500}))
    cfg = parse_config(p, ["n_avg=128"])
    assert cfg["n_avg"] == 128 and cfg["fiber_length_m"] == 500.0
    m = cfg.manifest()
    assert m["overrides"] == {"n_avg": 128}
    assert m["config"]["n_avg"] == 128
    assert "n_avg" not in m["defaulted_keys"] and "seed" in m["defaulted_keys"]


def test_constraint_violation_names_invariant():
    with pytest.raises(ConfigurationError, match="n_avg >= 1"):
        parse_config(None, ["n_avg=0"])


def test_unknown_key_suggests_nearest(tmp_path):
    with pytest.raises(ConfigurationError, match="did you mean 'n_avg'"):
        parse_config(None, ["n_agv=5"])
    p = tmp_path / "c.json"
    p.write_text('{"window_length": 35}')
    with pytest.raises(ConfigurationError, match="window_len"):
        parse_config(p)


def test_parse_error_reports_line_and_column(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "n_avg": 10,\n  "seed": ,\n}')
    with pytest.raises(ConfigurationError, match=r"bad\.json:3:11"):
        parse_config(p)


def test_type_errors():
    with pytest.raises(ConfigurationError, match="integer"):
        parse_config(None, ["n_avg=2.5"])
    with pytest.raises(ConfigurationError, match="number"):
        parse_config(None, ["learning_rate=fast"])
    with pytest.raises(ConfigurationError, match="null"):
        parse_config(None, ["n_avg=null"])
    assert parse_config(None, ["stride=null"])["stride"] is None
    assert parse_config(None, ["feature_set=snr"])["feature_set"] == "snr"


def test_every_key_documented():
    from pathlib import Path
    doc = (Path(__file__).resolve().parents[1] / "docs" / "config.md").read_text()
    missing = [k for k in DEFAULTS if f"`{k}`" not in doc]
    assert not missing
    for key, _, text in CONSTRAINTS:
        assert key in DEFAULTS


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("OTDR_MTL_OUTPUT", str(tmp_path / "root"))
    assert parse_config(None).output_dir == str(tmp_path / "root")


# -- commands ------------------------------------------------------------------------------

def test_simulate_writes_trace_and_manifest(tmp_path):
    out = tmp_path / "sim"
    rc = main(["simulate", "--out", str(out), "--seed", "4"] + sets(["n_avg=128", "fiber_length_m=1500"]))
    assert rc == EXIT_OK
    trace = load_trace(out / "trace.otdr")
    assert trace.config.n_avg == 128 and trace.config.seed == 4
    m = json.loads((out / "simulate_manifest.json").read_text())
    assert m["overrides"]["n_avg"] == 128 and m["config"]["seed"] == 4
    assert "trace.otdr" in m["outputs"]


def test_simulate_is_byte_reproducible(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--out", str(tmp_path / d)]) == EXIT_OK
    for name in ("trace.otdr", "simulate_manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_exit_codes(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--set", "n_avg=0"]) == EXIT_CONFIG
    assert main(["simulate", "--out", str(tmp_path), "--set", "bogus=1"]) == EXIT_CONFIG
    assert main(["detect", "--out", str(tmp_path), "--model", str(tmp_path / "none.otdrm"),
                 "--trace", str(tmp_path / "none")]) == EXIT_DATA
    # event list that runs off the fiber end
    assert main(["simulate", "--out", str(tmp_path)] + sets(
        ["fiber_length_m=100", "event_positions_m=[99.0]"])) == EXIT_DATA


def test_build_train_evaluate_chain(tmp_path):
    corpus_dir = tmp_path / "corpus"
    assert main(["build-corpus", "--out", str(corpus_dir)] + sets(TINY)) == EXIT_OK
    assert (corpus_dir / "samples.csv").exists()
    train_dir = tmp_path / "train"
    assert main(["train", "--corpus", str(corpus_dir), "--out", str(train_dir)] + sets(TINY)) == EXIT_OK
    model = train_dir / "model.otdrm"
    assert model.exists() and (train_dir / "learning_curves.csv").exists()
    m = json.loads((train_dir / "train_manifest.json").read_text())
    assert m["inputs"]["corpus"]["sha256"]
    eval_dir = tmp_path / "eval"
    assert main(["evaluate", "--corpus", str(corpus_dir), "--model", str(model),
                 "--out", str(eval_dir)] + sets(TINY)) == EXIT_OK
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    assert 0.0 <= metrics["accuracy"] <= 1.0


def test_train_and_study_are_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / d / "train")] + sets(TINY)) == EXIT_OK
        assert main(["study", "--kind", "feature_ablation", "--out", str(tmp_path / d / "study")]
                    + sets(TINY + ['feature_sets=["base","snr"]'])) == EXIT_OK
    for sub in ("train", "study"):
        names = sorted(p.name for p in (tmp_path / "a" / sub).iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b" / sub).iterdir())
        for name in names:
            assert (tmp_path / "a" / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes()


def test_study_without_model_is_config_error(tmp_path):
    assert main(["study", "--kind", "snr_sweep", "--out", str(tmp_path)] + sets(TINY)) == EXIT_CONFIG


def test_compare_rejects_bad_pfa(tmp_path):
    assert main(["compare", "--model", "x", "--pfa", "1.5", "--out", str(tmp_path)]) in (EXIT_CONFIG, EXIT_DATA)


# -- operational detection with the reference model ----------------------------------------

def trace_at_snr(events, snr_db, seed, length=10_000.0, refl=-40.0):
    """Events given as positions; the first one lands on ``snr_db``."""
    c = AcquisitionConfig(length, seed=seed, n_avg=1000)
    if events:
        gain = 10 * math.log10(10 ** (snr_db / 10) * c.noise_sigma / reflectance_to_peak_height(refl, c))
        c = AcquisitionConfig(length, seed=seed, n_avg=1000, laser_power_dbm=gain)
    return synthesize_trace(c, [(p, refl) for p in events])


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(3))
def test_detect_single_event(reference_model, seed):
    events = detect_events(reference_model, trace_at_snr([8785.0], 20.0, seed))
    assert len(events) == 1
    assert abs(events[0].position_m - 8785.0) <= 2.0


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(3))
def test_detect_event_free_trace(reference_model, seed):
    assert detect_events(reference_model, trace_at_snr([], 20.0, 100 + seed)) == []


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(3))
def test_detect_two_close_events(reference_model, seed):
    events = detect_events(reference_model, trace_at_snr([5000.0, 5009.0], 20.0, seed))
    assert len(events) == 2
    assert [round(e.position_m) for e in events] == [5000, 5009]
    assert events[1].position_index - events[0].position_index > 6


@pytest.mark.slow
def test_integrity_check(reference_model):
    healthy = trace_at_snr([9000.0], 20.0, 5, refl=-20.0)
    assert check_reflector(reference_model, healthy, 9000.0).passed
    broken = trace_at_snr([], 20.0, 5)
    assert not check_reflector(reference_model, broken, 9000.0).passed


@pytest.mark.slow
def test_detect_command_end_to_end(reference_model, tmp_path):
    model = save_model(reference_model, tmp_path / "ref.otdrm")
    trace = save_trace(trace_at_snr([3000.0, 9000.0], 20.0, 1, refl=-40.0), tmp_path / "t.otdr")
    out = tmp_path / "det"
    assert main(["detect", "--model", str(model), "--trace", str(trace), "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "events.json").read_text())
    assert report["full_analysis"] and report["n_events"] == 2
    pos = [e["position_m"] for e in report["events"]]
    assert pos == sorted(pos)
    # healthy reflector at 9000 m: integrity passes and the full scan is skipped
    out2 = tmp_path / "det2"
    assert main(["detect", "--model", str(model), "--trace", str(trace), "--out", str(out2),
                 "--reflector-pos", "9000"]) == EXIT_OK
    report = json.loads((out2 / "events.json").read_text())
    assert report["integrity"]["passed"] and not report["full_analysis"] and report["n_events"] == 0
    # forced full analysis reports the other event only
    out3 = tmp_path / "det3"
    assert main(["detect", "--model", str(model), "--trace", str(trace), "--out", str(out3),
                 "--reflector-pos", "9000", "--full"]) == EXIT_OK
    report = json.loads((out3 / "events.json").read_text())
    assert [round(e["position_m"]) for e in report["events"]] == [3000]
    assert main(["detect", "--model", str(model), "--trace", str(trace), "--out", str(out3),
                 "--set", "window_len=40"]) == EXIT_DATA


def test_detect_with_untrained_model_keeps_invariants(tmp_path):
    from otdr_mtl.nn import ArchSpec, init_params
    m = init_params(ArchSpec(n_c=4, tower_width=3), seed=0)
    # bias the detector towards positives so merging gets exercised
    m.params["detect.head.b"][:] = 5.0
    trace = trace_at_snr([300.0, 309.0], 25.0, 0, length=1500.0)
    events = detect_events(m, trace, min_support=1, min_snr_db=None)
    idx = [e.position_index for e in events]
    assert idx == sorted(idx)
    assert all(b - a > 6 for a, b in zip(idx, idx[1:]))
    assert np.all([0 <= e.p_event <= 1 for e in events])
