from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otdr_mtl.dataset import (
    FEATURE_SETS,
    Corpus,
    SimulationGrid,
    WindowSample,
    build_corpus,
    decode_position,
    decode_reflectance,
    encode_targets,
    extract_training_windows,
    load_corpus,
    normalize_window,
    resolve_feature_set,
    save_corpus,
    segment_trace,
    split_corpus,
    trace_seed,
)
from otdr_mtl.errors import ExtractionFailure, InvalidArgument
from otdr_mtl.trace_sim import AcquisitionConfig, EventTruth, synthesize_trace

SMALL_GRID = SimulationGrid(n_traces=40)


def truth(idx, refl=-40.0):
    return EventTruth(idx, idx * 0.8, refl, 1.0)


def long_trace(idx=5000, seed=1, n_avg=100):
    c = AcquisitionConfig(fiber_length_m=8000.0, n_avg=n_avg, seed=seed)
    return synthesize_trace(c, [(idx * 0.8, -30.0)])


# -- normalization ---------------------------------------------------------------

def test_normalize_simple():
    np.testing.assert_allclose(normalize_window([0, 5, 10]), [0, 0.5, 1])


def test_normalize_constant():
    np.testing.assert_array_equal(normalize_window([2.0, 2.0, 2.0]), [0, 0, 0])


def test_normalize_rejects_bad_input():
    with pytest.raises(InvalidArgument):
        normalize_window([])
    with pytest.raises(InvalidArgument):
        normalize_window([1.0, math.nan])


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(arrays(float, st.integers(2, 60), elements=finite))
def test_normalize_range(x):
    y = normalize_window(x)
    assert np.all((y >= 0) & (y <= 1))
    if np.ptp(x) > 0:
        assert y.min() == 0.0 and y.max() == 1.0


@given(arrays(float, st.integers(2, 60), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_normalize_affine_invariant(x, s, b):
    if np.ptp(x) < 1e-6:
        return
    np.testing.assert_allclose(normalize_window(s * x + b), normalize_window(x), atol=1e-7)


# -- target encoding -----------------------------------------------------------------

def test_encode_event_at_origin():
    assert encode_targets(100, truth(100))[:2] == (1, 0.0)


def test_encode_event_at_last_sample():
    assert encode_targets(100, truth(134))[:2] == (1, 1.0)


def test_encode_reflectance_pc_connector():
    assert encode_targets(100, truth(110, -40.0))[2] == pytest.approx(0.4545, abs=1e-4)


def test_encode_partial_overlap_is_clamped():
    cls, pos, _ = encode_targets(100, truth(96))  # pulse 96..101 overlaps the first two samples
    assert cls == 1 and pos == 0.0


def test_encode_miss_has_undefined_targets():
    cls, pos, refl = encode_targets(100, truth(94))  # pulse ends at 99
    assert cls == 0 and math.isnan(pos) and math.isnan(refl)


def test_encode_reflectance_clamped_and_range_checked():
    assert encode_targets(0, truth(3, -80.0))[2] == 0.0
    assert encode_targets(0, truth(3, -2.0))[2] == 1.0
    with pytest.raises(InvalidArgument):
        encode_targets(0, truth(3), reflectance_range=(-10.0, -65.0))


@given(st.integers(0, 34), st.integers(0, 10_000), st.floats(-65, -10))
def test_encode_decode_round_trip(rel, origin, r):
    cls, pos, refl = encode_targets(origin, truth(origin + rel, r))
    assert cls == 1
    assert int(decode_position(pos, origin)) == origin + rel
    assert float(decode_reflectance(refl)) == pytest.approx(r)


# -- segmentation --------------------------------------------------------------------

def test_segment_right_aligned_tail():
    assert [w.window_origin for w in segment_trace(np.arange(100.0), 35, 35)] == [0, 35, 65]


@pytest.mark.parametrize("stride", [1, 7, 35, 100])
def test_segment_single_window(stride):
    assert [w.window_origin for w in segment_trace(np.arange(35.0), 35, stride)] == [0]


def test_segment_stride_one_count():
    assert len(segment_trace(np.arange(70.0), 35, 1)) == 36


def test_segment_default_stride_is_half_window():
    origins = [w.window_origin for w in segment_trace(np.arange(200.0), 35)]
    assert origins[:3] == [0, 17, 34]


def test_segment_errors():
    with pytest.raises(InvalidArgument):
        segment_trace(np.arange(20.0), 35)
    with pytest.raises(InvalidArgument):
        segment_trace(np.arange(100.0), 35, 0)


@given(st.integers(35, 400), st.integers(1, 35))
def test_segment_covers_every_sample(n, stride):
    covered = np.zeros(n, dtype=bool)
    for w in segment_trace(np.arange(float(n)), 35, stride):
        covered[w.window_origin:w.window_origin + 35] = True
        assert len(w.features) == 35
    assert covered.all()


# -- training extraction ---------------------------------------------------------------

def test_extract_windows_origin_ranges():
    t = long_trace(5000)
    for seed in range(50):
        ev, noise = extract_training_windows(t, 35, seed)
        assert 5000 - 34 <= ev.window_origin <= 5000 + 5
        assert ev.id_class == 1 and noise.id_class == 0
        lo, hi = noise.window_origin, noise.window_origin + 34
        assert hi < 5000 or lo > 5005
        assert np.all((ev.features >= 0) & (ev.features <= 1))


def test_extract_is_deterministic():
    t = long_trace()
    a = extract_training_windows(t, 35, 9)
    b = extract_training_windows(t, 35, 9)
    assert a[0].window_origin == b[0].window_origin and a[1].window_origin == b[1].window_origin


def test_extract_event_at_trace_start_clamps_origin():
    c = AcquisitionConfig(fiber_length_m=400.0, seed=0)
    t = synthesize_trace(c, [(0.8, -30.0)])  # index 1, the first placeable sample
    t.events[0] = EventTruth(0, 0.0, -30.0, t.events[0].peak_height)
    for seed in range(20):
        ev, _ = extract_training_windows(t, 35, seed)
        assert 0 <= ev.window_origin <= 5


def test_extract_complete_only():
    t = long_trace(5000)
    for seed in range(30):
        ev, _ = extract_training_windows(t, 35, seed, complete_only=True)
        assert 5000 - 29 <= ev.window_origin <= 5000


def test_extract_no_noise_window():
    c = AcquisitionConfig(fiber_length_m=56.0, seed=0)
    t = synthesize_trace(c, [(27.2, -30.0)])  # 70 samples, pulse 34..39: every 35-window meets it
    with pytest.raises(ExtractionFailure):
        extract_training_windows(t, 35, 0)


def test_extract_preconditions():
    c = AcquisitionConfig(fiber_length_m=400.0, seed=0)
    with pytest.raises(InvalidArgument):
        extract_training_windows(synthesize_trace(c, []), 35, 0)


# -- corpus ----------------------------------------------------------------------------

def test_build_corpus_balanced_and_labelled_truthfully():
    c = build_corpus(SMALL_GRID, seed=5)
    assert len(c) == 80
    assert int(c.id_class.sum()) == 40
    pos = c.id_class == 1
    off = c.event_offsets[:, 0]
    # pulse span [off, off + 5] meets the window [0, 34] exactly for positives
    meets = (off <= 34) & (off + 5 >= 0)
    np.testing.assert_array_equal(meets, pos)
    assert np.all(np.isfinite(c.position_target[pos]))
    assert np.all(np.isnan(c.position_target[~pos]))
    assert np.all((c.position_target[pos] >= 0) & (c.position_target[pos] <= 1))
    assert np.all((c.snr_db >= 2) & (c.snr_db <= 30))


def test_build_corpus_empty_grid():
    c = build_corpus(SimulationGrid(n_traces=0))
    assert len(c) == 0


def test_build_corpus_deterministic():
    a = build_corpus(SMALL_GRID, seed=2)
    b = build_corpus(SMALL_GRID, seed=2)
    assert a.content_hash() == b.content_hash()
    assert build_corpus(SMALL_GRID, seed=3).content_hash() != a.content_hash()


def test_build_corpus_high_snr_band():
    c = build_corpus(SimulationGrid(n_traces=20, snr_db=(30.0, 40.0), reflectance_db=(-60.0, -5.0)))
    assert np.all((c.snr_db >= 30) & (c.snr_db <= 40))


def test_feature_sets_and_aux():
    c = build_corpus(SMALL_GRID, feature_set="snr_setup", seed=1)
    assert c.feature_set == ("snr", "laser_power", "n_avg")
    a = c.aux_matrix()
    assert a.shape == (80, 3)
    np.testing.assert_allclose(a[:, 0], c.snr_db)
    assert resolve_feature_set("base") == ()
    assert set(FEATURE_SETS) == {"base", "setup", "snr", "all", "snr_setup"}
    with pytest.raises(InvalidArgument):
        resolve_feature_set("nope")


def test_estimated_snr_feature_tracks_truth():
    c = build_corpus(SimulationGrid(n_traces=100, snr_db=(15.0, 25.0)), feature_set="snr",
                     seed=4, snr_feature="estimated")
    pos = c.id_class == 1
    err = c.aux[pos, 0] - c.snr_db[pos]
    assert abs(float(np.median(err))) < 1.5


def test_trace_seeds_do_not_collide_across_corpus_seeds():
    seen = {trace_seed(s, i) for s in range(5) for i in range(1000)}
    assert len(seen) == 5000


def test_window_sample_view():
    c = build_corpus(SMALL_GRID, feature_set="snr", seed=5)
    s = c[0]
    assert isinstance(s, WindowSample)
    assert s.aux.shape == (1,)
    assert (s.position_target is None) == (s.id_class == 0)


# -- splitting -----------------------------------------------------------------------------

def _dummy(m):
    return Corpus.from_samples([WindowSample(np.zeros(35), id_class=0) for _ in range(m)])


def test_split_ten():
    assert split_corpus(_dummy(10), seed=0).split_counts() == {"train": 6, "val": 2, "test": 2}


def test_split_reference_scale():
    assert split_corpus(_dummy(12600), seed=0).split_counts() == {
        "train": 7560, "val": 2520, "test": 2520}


def test_split_deterministic():
    a = split_corpus(_dummy(50), seed=3).split
    b = split_corpus(_dummy(50), seed=3).split
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("fr", [(0.7, 0.2, 0.2), (1.2, -0.1, -0.1), (0.5, 0.5)])
def test_split_rejects_bad_fractions(fr):
    with pytest.raises(InvalidArgument):
        split_corpus(_dummy(10), fr)


@settings(max_examples=50)
@given(st.integers(0, 500), st.floats(0, 1), st.integers(0, 2**31))
def test_split_exhaustive_and_proportional(m, f_train, seed):
    f_val = (1 - f_train) / 2
    fr = (f_train, f_val, 1 - f_train - f_val)
    c = split_corpus(_dummy(m), fr, seed)
    counts = c.split_counts()
    assert sum(counts.values()) == m
    assert np.all(c.split >= 0)
    for name, f in zip(("train", "val", "test"), fr):
        assert abs(counts[name] - f * m) <= 1 + 1e-9


# -- persistence -------------------------------------------------------------------------------

def test_corpus_round_trip(tmp_path):
    c = build_corpus(SimulationGrid(n_traces=10, events_per_trace=2), feature_set="all", seed=8)
    save_corpus(c, tmp_path / "c")
    back = load_corpus(tmp_path / "c")
    assert back.content_hash() == c.content_hash()
    np.testing.assert_array_equal(back.event_offsets, c.event_offsets)
    assert back.manifest["content_hash"] == c.content_hash()
    assert back.manifest["split_counts"] == c.split_counts()


def test_save_corpus_is_byte_stable(tmp_path):
    c = build_corpus(SMALL_GRID, seed=1)
    save_corpus(c, tmp_path / "a")
    save_corpus(c, tmp_path / "b")
    for name in ("samples.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_concat_keeps_trace_indices_unique():
    a = build_corpus(SimulationGrid(n_traces=5), seed=1, split=False)
    b = build_corpus(SimulationGrid(n_traces=5, events_per_trace=2), seed=2, split=False)
    c = Corpus.concat([a, b])
    assert len(c) == 20
    assert len(np.unique(c.trace_index)) == 10
    assert c.event_offsets.shape == (20, 2)
