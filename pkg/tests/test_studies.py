from __future__ import annotations

import json

import numpy as np
import pytest

from otdr_mtl.dataset import SimulationGrid, build_corpus, simulate_grid_trace
from otdr_mtl.errors import ConfigurationError, InvalidArgument
from otdr_mtl.eval import CompareSpec, StudyReport, StudySpec, compare_detectors, evaluate_model, run_study
from otdr_mtl.eval.studies import (
    DETECTORS,
    STUDY_KINDS,
    averaging_curve,
    paired_windows,
    robustness_grids,
    snr_bin_index,
    snr_sweep_corpus,
)
from otdr_mtl.nn import ArchSpec, TrainConfig, predict, train_model

TINY_GRID = SimulationGrid(n_traces=40, fiber_length_m=1000.0)
CURVE_GRID = SimulationGrid(n_traces=40)
TINY_TRAIN = TrainConfig(max_epochs=2, patience=2, batch_size=32)


@pytest.fixture(scope="module")
def tiny_model():
    c = build_corpus(TINY_GRID, seed=1)
    model, _ = train_model(c, ArchSpec(n_c=6, tower_width=4), TINY_TRAIN)
    return model


def tiny_spec(**kw):
    base = dict(seed=3, grid=TINY_GRID, train=TINY_TRAIN, traces_per_bin=5, snr_bins=(2, 6),
                robustness_traces=10, window_lens=(35, 60))
    base.update(kw)
    return StudySpec(**base)


# -- report container ---------------------------------------------------------------

def test_report_axis_must_increase():
    with pytest.raises(InvalidArgument):
        StudyReport("snr_sweep", "snr_db", [3, 2], ["a", "b"])


def test_report_files(tmp_path):
    r = StudyReport("snr_sweep", "snr_db", [2, 3], ["2dB", "3dB"])
    r.add_point("model", 0, {"accuracy": 0.5, "precision": None}, {"accuracy": (0.4, 0.6)})
    r.add_point("model", 1, {"accuracy": 0.75, "precision": 1.0})
    r.provenance = {"corpus_hash": "abc123"}
    csv_path, json_path = r.write(tmp_path)
    assert csv_path.name == "snr_sweep_abc123.csv" and json_path.name == "snr_sweep_abc123.json"
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "kind,series,axis_name,axis_value,label,metric,value,lower,upper"
    assert "snr_sweep,model,snr_db,2,2dB,accuracy,0.5,0.4,0.6" in lines
    assert "snr_sweep,model,snr_db,2,2dB,precision,,," in lines
    manifest = json.loads(json_path.read_text())
    assert manifest["kind"] == "snr_sweep" and "tool_version" in manifest
    assert r.values("model", "accuracy") == [0.5, 0.75]


# -- helpers ----------------------------------------------------------------------------

def test_snr_bins_are_floor_based():
    assert list(snr_bin_index(np.array([2.0, 2.99, 3.0, 29.5]))) == [2, 2, 3, 29]


def test_snr_sweep_corpus_is_stratified():
    c = snr_sweep_corpus(TINY_GRID, seed=0, traces_per_bin=4, bins=(2, 5))
    idx = snr_bin_index(c.snr_db)
    assert [int(np.sum(idx == b)) for b in (2, 3, 4)] == [8, 8, 8]
    assert len(np.unique(c.trace_index)) == 12


def test_robustness_grids():
    g = robustness_grids(TINY_GRID, 7)
    assert set(g) == {"snr_30_40", "low_reflectance", "two_event"}
    assert all(v.n_traces == 7 for v in g.values())
    assert g["two_event"].events_per_trace == 2
    assert g["low_reflectance"].reflectance_db[1] <= -60.0


def test_evaluate_model_units(tiny_model):
    c = build_corpus(TINY_GRID, seed=9, split=False)
    m = evaluate_model(tiny_model, c, threshold=0.3)
    p, pos, refl = predict(tiny_model, c.features)
    tp = (p > 0.3) & (c.id_class == 1)
    assert m.accuracy == pytest.approx(np.mean((p > 0.3) == (c.id_class == 1)))
    err_m = (pos[tp] - c.position_target[tp]) * 34 * 0.8
    err_db = (refl[tp] - c.reflectance_target[tp]) * 55.0
    assert m.rmse_position_m == pytest.approx(np.sqrt(np.mean(err_m ** 2)))
    assert m.mae_reflectance_db == pytest.approx(np.mean(np.abs(err_db)))


# -- study kinds -------------------------------------------------------------------------

def test_every_kind_runs(tiny_model):
    for kind in STUDY_KINDS:
        spec = tiny_spec(model=tiny_model, n_seeds=1,
                         feature_sets=("base", "snr") if kind == "feature_ablation" else
                         ("base", "setup", "snr", "all", "snr_setup"))
        r = run_study(kind, spec)
        assert r.kind == kind
        assert r.axis == sorted(r.axis)
        assert r.csv_text().count("\n") > 1


def test_snr_sweep_report_shape(tiny_model):
    r = run_study("snr_sweep", tiny_spec(model=tiny_model))
    assert r.axis == [2, 3, 4, 5]
    assert r.values("model", "n_windows") == [10, 10, 10, 10]


def test_single_vs_multi_series(tiny_model):
    r = run_study("single_vs_multi", tiny_spec(n_seeds=2))
    assert set(r.series) == {"multi", "single", "delta"}
    assert r.axis == [0, 1]
    assert "multi.rmse_position_m.std" in r.summary
    assert "single.accuracy.mean" in r.summary


@pytest.mark.parametrize("kind", ["snr_sweep", "robustness"])
def test_missing_model_is_configuration_error(kind):
    with pytest.raises(ConfigurationError, match="model"):
        run_study(kind, tiny_spec())


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        StudySpec(kind="nope")


def test_study_files_are_byte_identical(tmp_path, tiny_model):
    a = run_study("feature_ablation", tiny_spec(feature_sets=("base", "snr"))).write(tmp_path / "a")
    b = run_study("feature_ablation", tiny_spec(feature_sets=("base", "snr"))).write(tmp_path / "b")
    for x, y in zip(a, b):
        assert x.name == y.name
        assert x.read_bytes() == y.read_bytes()


# -- detector comparison ------------------------------------------------------------------

def test_paired_windows_geometry():
    traces = [simulate_grid_trace(TINY_GRID, 0, i) for i in range(6)]
    pw = paired_windows(traces, seed=1)
    pos = pw.label == 1
    assert pos.sum() == 6 and (~pos).sum() == 6
    assert pw.ml.shape[1] == 35 and pw.glrt.shape[1] == 100
    # positives hold the complete pulse in both windows
    off_ml = pw.event_index[pos] - pw.ml_origin[pos]
    off_glrt = pw.event_index[pos] - pw.glrt_origin[pos]
    assert np.all((off_ml >= 0) & (off_ml <= 29))
    assert np.all((off_glrt >= 0) & (off_glrt <= 94))
    assert np.all(pw.ml.min(axis=1) == 0.0)


def test_compare_detectors_small(tiny_model):
    spec = CompareSpec(seed=2, grid=CURVE_GRID, traces_per_bin=10, snr_bins=(2, 4),
                       n_calibration=1000, curve_n_avg=(62, 250), curve_traces=10)
    r = compare_detectors(tiny_model, spec)
    assert set(r.series) == set(DETECTORS)
    for det in DETECTORS:
        assert len(r.values(det, "p_d")) == 2
        assert all(0.0 <= v <= 1.0 for v in r.values(det, "p_fa"))
    curve = r.provenance["averaging_curve"]
    assert curve["n_avg"] == [62, 250]
    assert curve["averaging_time_s"][0] == pytest.approx(62 * 2 * 2000 * 1.468 / 2.9979e8)
    again = compare_detectors(tiny_model, spec)
    assert again.csv_text() == r.csv_text()


def test_averaging_curve_lengths(tiny_model):
    spec = CompareSpec(seed=2, grid=CURVE_GRID, n_calibration=1000, curve_n_avg=(62, 124, 250),
                       curve_traces=8)
    curve = averaging_curve(tiny_model, spec)
    assert all(len(curve[d]) == 3 for d in DETECTORS)
    with pytest.raises(ConfigurationError, match="too short"):
        averaging_curve(tiny_model, CompareSpec(grid=TINY_GRID, n_calibration=1000, curve_traces=2))
