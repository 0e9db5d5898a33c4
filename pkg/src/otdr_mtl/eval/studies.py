"""Study runners: sweeps over SNR, input features, window length and test scenarios,
the single-task versus multitask comparison, and the ML versus classical detector
comparison.

Every study returns a :class:`StudyReport` whose CSV/JSON rendering is a pure
function of its inputs, so repeated runs with the same seeds are byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .. import __version__
from ..baselines import (
    calibrate_threshold,
    gaussian_noise_windows,
    r1msde_statistic,
    two_point_statistic,
)
from ..dataset import (
    DEFAULT_WINDOW_LEN,
    FEATURE_SETS,
    Corpus,
    SimulationGrid,
    _aux_row,
    _noise_origins,
    build_corpus,
    normalize_window,
    resolve_feature_set,
    simulate_grid_trace,
    trace_seed,
)
from ..errors import ConfigurationError, InvalidArgument
from ..nn.model import ArchSpec, ModelParams, predict
from ..nn.train import TrainConfig, train_model
from ..trace_sim import NOISE_TAIL_SAMPLES, AcquisitionConfig, averaging_time, synthesize_trace
from .metrics import (
    ERROR_FIELDS,
    ConfusionCounts,
    Metrics,
    classification_metrics,
    detection_rates,
    improvement_delta,
    regression_metrics,
)

STUDY_KINDS = ("snr_sweep", "feature_ablation", "sequence_length", "robustness", "single_vs_multi")
FEATURE_ABLATION_ORDER = ("base", "setup", "snr", "all", "snr_setup")
RESOLUTION_LIMIT_M = 0.2  # annotated on position reports, not enforced

# single-task loss weights: only the named head receives gradient
SINGLE_TASK_WEIGHTS = {
    "detect": (1.0, 0.0, 0.0),
    "position": (0.0, 1.0, 0.0),
    "reflectance": (0.0, 0.0, 1.0),
}


# -- report ------------------------------------------------------------------

@dataclass
class StudyReport:
    """Plot-ready results of one study.

    ``series[name][i]`` maps metric names to values at ``axis[i]``;
    ``intervals`` mirrors it with ``(lower, upper)`` bounds where defined.
    """
    kind: str
    axis_name: str
    axis: list[float]
    labels: list[str]
    series: dict[str, list[dict[str, float | None]]] = field(default_factory=dict)
    intervals: dict[str, list[dict[str, tuple[float, float]]]] = field(default_factory=dict)
    summary: dict[str, float | int | None] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        a = [float(v) for v in self.axis]
        if any(b <= a_ for a_, b in zip(a, a[1:])):
            raise InvalidArgument("study axis must be strictly increasing")
        if len(self.labels) != len(a):
            raise InvalidArgument("one label per axis point required")

    def add_point(self, series: str, index: int, values: dict, intervals: dict | None = None):
        rows = self.series.setdefault(series, [dict() for _ in self.axis])
        bounds = self.intervals.setdefault(series, [dict() for _ in self.axis])
        rows[index].update(values)
        bounds[index].update(intervals or {})

    def values(self, series: str, metric: str) -> list[float | None]:
        return [row.get(metric) for row in self.series[series]]

    @property
    def corpus_hash(self) -> str:
        return str(self.provenance.get("corpus_hash", "nocorpus"))

    def csv_text(self) -> str:
        lines = ["kind,series,axis_name,axis_value,label,metric,value,lower,upper"]
        for name in sorted(self.series):
            for i, row in enumerate(self.series[name]):
                bounds = self.intervals.get(name, [{}] * len(self.axis))[i]
                for metric in sorted(row):
                    lo, hi = bounds.get(metric, (None, None))
                    lines.append(",".join([
                        self.kind, name, self.axis_name, _fmt(self.axis[i]), self.labels[i],
                        metric, _fmt(row[metric]), _fmt(lo), _fmt(hi)]))
        return "\n".join(lines) + "\n"

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "axis_name": self.axis_name,
            "axis": [float(v) for v in self.axis],
            "labels": list(self.labels),
            "summary": self.summary,
            "provenance": self.provenance,
            "tool_version": __version__,
        }

    def write(self, directory) -> tuple[Path, Path]:
        """Write ``<kind>_<corpus hash>.csv`` and ``.json`` atomically."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        stem = f"{self.kind}_{self.corpus_hash}"
        csv_path = _atomic_write(d / f"{stem}.csv", self.csv_text())
        json_path = _atomic_write(d / f"{stem}.json",
                                  json.dumps(_jsonable(self.manifest()), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _atomic_write(path: Path, text: str) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def _metric_values(m: Metrics) -> tuple[dict, dict]:
    values = {k: v for k, v in m.to_dict().items() if k != "intervals"}
    return values, dict(m.intervals)


# -- model evaluation --------------------------------------------------------

def _nearest_offset(pred_offset: np.ndarray, offsets: np.ndarray, window_len: int) -> np.ndarray:
    """Per window, the true event offset (clamped into the window) closest to the prediction."""
    clamped = np.clip(offsets, 0, window_len - 1)
    dist = np.where(np.isnan(clamped), np.inf, np.abs(clamped - pred_offset[:, None]))
    j = np.argmin(dist, axis=1)
    return clamped[np.arange(len(clamped)), j]


def evaluate_model(model: ModelParams, corpus: Corpus, threshold: float = 0.5,
                   sampling_interval_m: float = 0.8, nearest_event: bool = False,
                   z: float = 1.96, regress_all_positives: bool = False) -> Metrics:
    """Score a model on every window of ``corpus``.

    Regression errors are computed over true-positive windows, de-normalized
    to meters and dB.  ``regress_all_positives`` widens that to every
    positive-class window whatever the detector says, which puts models with
    an untrained detection head on the same footing.  With ``nearest_event``
    the position error is measured against the closest true event.
    """
    if len(corpus) == 0:
        raise InvalidArgument("cannot evaluate on an empty corpus")
    L = corpus.window_len
    aux = corpus.aux_matrix(model.feature_set) if model.feature_set else None
    p, pos, refl = predict(model, corpus.features, aux)
    y = corpus.id_class == 1
    hit = p > threshold
    m = classification_metrics(ConfusionCounts.from_predictions(y, hit), z)
    if not regress_all_positives:
        y = y & hit
    if np.any(y):
        pred_off = pos[y] * (L - 1)
        if nearest_event:
            true_off = _nearest_offset(pred_off, corpus.event_offsets[y], L)
        else:
            true_off = corpus.position_target[y] * (L - 1)
        m.rmse_position_m, m.mae_position_m = regression_metrics(
            pred_off * sampling_interval_m, true_off * sampling_interval_m)
        span = model.reflectance_range[1] - model.reflectance_range[0]
        m.rmse_reflectance_db, m.mae_reflectance_db = regression_metrics(
            refl[y] * span, corpus.reflectance_target[y] * span)
    return m


# -- study inputs -------------------------------------------------------------------

@dataclass(frozen=True)
class StudySpec:
    """Inputs of a study.  Unused fields are ignored by kinds that do not need them."""
    kind: str = "snr_sweep"
    seed: int = 0
    grid: SimulationGrid = SimulationGrid()
    window_len: int = DEFAULT_WINDOW_LEN
    feature_set: str = "base"
    train: TrainConfig = TrainConfig()
    n_seeds: int = 1
    model: ModelParams | None = None
    traces_per_bin: int = 100
    snr_bins: tuple[int, int] = (2, 30)
    feature_sets: tuple[str, ...] = FEATURE_ABLATION_ORDER
    window_lens: tuple[int, ...] = (35, 75, 100, 150, 200)
    robustness_traces: int = 1000
    threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in STUDY_KINDS:
            raise ConfigurationError(f"unknown study kind {self.kind!r}; choose from {STUDY_KINDS}")
        if self.n_seeds < 1 or self.traces_per_bin < 1 or self.robustness_traces < 1:
            raise ConfigurationError("n_seeds, traces_per_bin and robustness_traces must be >= 1")
        if not self.snr_bins[0] < self.snr_bins[1]:
            raise ConfigurationError("snr_bins must satisfy low < high")


def _require_model(spec: StudySpec) -> ModelParams:
    if spec.model is None:
        raise ConfigurationError(f"study {spec.kind!r} needs a trained model (model path not set)")
    return spec.model


def _spec_provenance(spec: StudySpec) -> dict:
    return {
        "seed": spec.seed,
        "grid": spec.grid.to_dict(),
        "window_len": spec.window_len,
        "feature_set": spec.feature_set,
        "train_config": _jsonable(asdict(spec.train)),
        "n_seeds": spec.n_seeds,
        "threshold": spec.threshold,
    }


def _model_provenance(model: ModelParams) -> dict:
    from ..nn.io import dump_model
    return {"model_sha256": hashlib.sha256(dump_model(model)).hexdigest(),
            "model_provenance": model.provenance}


def _hash_of(parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode())
    return h.hexdigest()[:16]


def _sub_seed(seed: int, *tags: int) -> int:
    """Deterministic 32-bit seed derived from a base seed and integer tags."""
    digest = hashlib.sha256(json.dumps([int(seed), *map(int, tags)]).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def snr_sweep_corpus(grid: SimulationGrid, seed: int, traces_per_bin: int, bins=(2, 30),
                     window_len: int = DEFAULT_WINDOW_LEN, complete_only: bool = False) -> Corpus:
    """Stratified test corpus: ``traces_per_bin`` traces (two windows each) per integer-dB bin.

    Bin ``b`` holds true SNRs in ``[b, b + 1)``.
    """
    parts = []
    for b in range(int(bins[0]), int(bins[1])):
        g = replace(grid, n_traces=traces_per_bin, snr_db=(float(b), float(b + 1)))
        parts.append(build_corpus(g, window_len, "base", seed=_sub_seed(seed, b), split=False,
                                  complete_only=complete_only))
    return Corpus.concat(parts)


def snr_bin_index(snr_db: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(snr_db, dtype=float)).astype(int)


# -- study kinds -------------------------------------------------------------

def _snr_sweep(spec: StudySpec) -> StudyReport:
    model = _require_model(spec)
    corpus = snr_sweep_corpus(spec.grid, spec.seed, spec.traces_per_bin, spec.snr_bins,
                              model.arch.window_len)
    bins = list(range(spec.snr_bins[0], spec.snr_bins[1]))
    report = StudyReport("snr_sweep", "snr_db", bins, [f"{b}dB" for b in bins])
    idx = snr_bin_index(corpus.snr_db)
    for i, b in enumerate(bins):
        sub = corpus.subset(idx == b)
        m = evaluate_model(model, sub, spec.threshold, spec.grid.sampling_interval_m)
        values, bounds = _metric_values(m)
        values["n_windows"] = len(sub)
        report.add_point("model", i, values, bounds)
    report.summary = {"resolution_limit_m": RESOLUTION_LIMIT_M}
    report.provenance = {**_spec_provenance(spec), **_model_provenance(model),
                         "traces_per_bin": spec.traces_per_bin,
                         "corpus_hash": corpus.content_hash()}
    return report


def _train_eval(corpus: Corpus, feature_set, cfg: TrainConfig, sampling_interval_m: float,
                threshold: float = 0.5, regress_all_positives: bool = False,
                ) -> tuple[ModelParams, Metrics]:
    fs = resolve_feature_set(feature_set)
    model, _ = train_model(corpus.with_feature_set(fs), cfg=cfg)
    test = corpus.part("test").with_feature_set(fs)
    return model, evaluate_model(model, test, threshold, sampling_interval_m,
                                 regress_all_positives=regress_all_positives)


def _mean_std(rows: list[dict], key: str) -> tuple[float | None, float | None]:
    vals = [r[key] for r in rows if r.get(key) is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def _seed_configs(spec: StudySpec) -> list[TrainConfig]:
    return [replace(spec.train, seed=spec.train.seed + k) for k in range(spec.n_seeds)]


def _feature_ablation(spec: StudySpec) -> StudyReport:
    corpus = build_corpus(spec.grid, spec.window_len, "base", seed=spec.seed)
    names = list(spec.feature_sets)
    for n in names:
        if n not in FEATURE_SETS:
            raise ConfigurationError(f"unknown feature set {n!r}")
    report = StudyReport("feature_ablation", "feature_set_index", list(range(len(names))), names)
    means = {}
    for i, name in enumerate(names):
        rows = []
        for k, cfg in enumerate(_seed_configs(spec)):
            _, m = _train_eval(corpus, name, cfg, spec.grid.sampling_interval_m, spec.threshold)
            values, bounds = _metric_values(m)
            report.add_point(f"seed{k}", i, values, bounds)
            rows.append(values)
        agg = {}
        for key in rows[0]:
            mu, sd = _mean_std(rows, key)
            agg[key], agg[key + "_std"] = mu, sd
        report.add_point("mean", i, agg)
        means[name] = agg["accuracy"]
    base = means.get("base")
    report.summary = {f"accuracy_gain_{n}": (None if base is None else means[n] - base)
                      for n in names if n != "base"}
    report.provenance = {**_spec_provenance(spec), "corpus_hash": corpus.content_hash()}
    return report


def _sequence_length(spec: StudySpec) -> StudyReport:
    lens = sorted(int(v) for v in spec.window_lens)
    report = StudyReport("sequence_length", "window_len", lens, [f"L{v}" for v in lens])
    hashes = []
    for i, L in enumerate(lens):
        corpus = build_corpus(spec.grid, L, spec.feature_set, seed=spec.seed)
        hashes.append(corpus.content_hash())
        rows = []
        for cfg in _seed_configs(spec):
            _, m = _train_eval(corpus, spec.feature_set, cfg, spec.grid.sampling_interval_m,
                               spec.threshold)
            rows.append(_metric_values(m)[0])
        agg = {}
        for key in rows[0]:
            agg[key], agg[key + "_std"] = _mean_std(rows, key)
        report.add_point("mean", i, agg)
    report.provenance = {**_spec_provenance(spec), "corpus_hashes": hashes,
                         "corpus_hash": _hash_of(hashes)}
    return report


def robustness_grids(grid: SimulationGrid, n_traces: int) -> dict[str, SimulationGrid]:
    """Test-only scenarios: a higher SNR band, reflectances below the training range,
    and traces with two closely spaced events."""
    return {
        "snr_30_40": replace(grid, n_traces=n_traces, snr_db=(30.0, 40.0), reflectance_db=(-60.0, -5.0)),
        # wider setup ranges so weak reflectors still reach the 2 dB floor
        "low_reflectance": replace(grid, n_traces=n_traces, reflectance_db=(-65.0, -60.0),
                                   laser_power_dbm=(0.0, 12.0), attenuation_db=(0.0, 20.0),
                                   n_avg=(62, 64000)),
        "two_event": replace(grid, n_traces=n_traces, events_per_trace=2),
    }


def _robustness(spec: StudySpec) -> StudyReport:
    model = _require_model(spec)
    grids = robustness_grids(spec.grid, spec.robustness_traces)
    names = list(grids)
    report = StudyReport("robustness", "scenario_index", list(range(len(names))), names)
    hashes = []
    for i, name in enumerate(names):
        corpus = build_corpus(grids[name], model.arch.window_len, "base",
                              seed=_sub_seed(spec.seed, i), split=False)
        hashes.append(corpus.content_hash())
        m = evaluate_model(model, corpus, spec.threshold, spec.grid.sampling_interval_m,
                           nearest_event=name == "two_event")
        values, bounds = _metric_values(m)
        values["n_windows"] = len(corpus)
        report.add_point("model", i, values, bounds)
    report.provenance = {**_spec_provenance(spec), **_model_provenance(model),
                         "scenario_grids": {k: g.to_dict() for k, g in grids.items()},
                         "corpus_hashes": hashes, "corpus_hash": _hash_of(hashes)}
    return report


def _single_vs_multi(spec: StudySpec) -> StudyReport:
    corpus = build_corpus(spec.grid, spec.window_len, spec.feature_set, seed=spec.seed)
    seeds = [cfg.seed for cfg in _seed_configs(spec)]
    report = StudyReport("single_vs_multi", "train_seed", seeds, [f"seed{s}" for s in seeds])
    per = {"multi": [], "single": [], "delta": []}
    for i, cfg in enumerate(_seed_configs(spec)):
        # regression scored on every positive window: single-task regressors
        # have no trained detector to select true positives with
        _, multi = _train_eval(corpus, spec.feature_set, cfg, spec.grid.sampling_interval_m,
                               spec.threshold, regress_all_positives=True)
        heads = {}
        for task, w in SINGLE_TASK_WEIGHTS.items():
            _, heads[task] = _train_eval(corpus, spec.feature_set, replace(cfg, loss_weights=w),
                                         spec.grid.sampling_interval_m, spec.threshold,
                                         regress_all_positives=True)
        d, p, r = heads["detect"], heads["position"], heads["reflectance"]
        single = Metrics(d.accuracy, d.precision, d.recall, d.f1,
                         p.rmse_position_m, p.mae_position_m,
                         r.rmse_reflectance_db, r.mae_reflectance_db, dict(d.intervals))
        delta = improvement_delta(multi, single)
        for name, m in (("multi", multi), ("single", single)):
            values, bounds = _metric_values(m)
            report.add_point(name, i, values, bounds)
            per[name].append(values)
        report.add_point("delta", i, delta)
        per["delta"].append(delta)
    summary = {}
    for name, rows in per.items():
        for key in rows[0]:
            mu, sd = _mean_std(rows, key)
            summary[f"{name}.{key}.mean"] = mu
            # spread across seeds is reported for error metrics; rates carry Wilson intervals
            if key in ERROR_FIELDS:
                summary[f"{name}.{key}.std"] = sd
    report.summary = summary
    report.provenance = {**_spec_provenance(spec), "corpus_hash": corpus.content_hash(),
                         "single_task_loss_weights": {k: list(v) for k, v in SINGLE_TASK_WEIGHTS.items()}}
    return report


_RUNNERS: dict[str, Callable[[StudySpec], StudyReport]] = {
    "snr_sweep": _snr_sweep,
    "feature_ablation": _feature_ablation,
    "sequence_length": _sequence_length,
    "robustness": _robustness,
    "single_vs_multi": _single_vs_multi,
}


def run_study(kind: str, spec: StudySpec | None = None) -> StudyReport:
    spec = StudySpec(kind=kind) if spec is None else replace(spec, kind=kind)
    return _RUNNERS[kind](spec)


# -- ML versus classical detectors -------------------------------------------

@dataclass(frozen=True)
class CompareSpec:
    seed: int = 0
    grid: SimulationGrid = SimulationGrid()
    target_pfa: float = 0.1
    ml_window_len: int = DEFAULT_WINDOW_LEN
    glrt_window_len: int = 100
    two_point_half_width: int = 5
    traces_per_bin: int = 200
    snr_bins: tuple[int, int] = (2, 16)
    n_calibration: int = 20000
    # averaging-time curve: fixed acquisition setup, swept averaging count
    curve_reflectance_db: float = -45.0
    curve_laser_power_dbm: float = 6.0
    curve_attenuation_db: float = 11.0
    curve_n_avg: tuple[int, ...] = tuple(int(round(62 * 2 ** (k / 4))) for k in range(0, 25))
    curve_traces: int = 500
    accuracy_target: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.target_pfa < 1.0:
            raise ConfigurationError("target_pfa must lie in (0, 1)")
        if self.glrt_window_len < self.ml_window_len:
            raise ConfigurationError("glrt_window_len must be >= ml_window_len")
        if any(b <= a for a, b in zip(self.curve_n_avg, self.curve_n_avg[1:])):
            raise ConfigurationError("curve_n_avg must be strictly increasing")


@dataclass
class PairedWindows:
    """Nested windows cut from the same traces: the short one sits centered in the long one."""
    ml: np.ndarray  # normalized, (M, ml_len)
    glrt: np.ndarray  # raw, (M, glrt_len)
    aux: np.ndarray  # (M, 4) raw setup values
    label: np.ndarray  # 1 = complete event, 0 = no event
    event_index: np.ndarray  # absolute event start (or -1)
    ml_origin: np.ndarray
    glrt_origin: np.ndarray
    snr_db: np.ndarray

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.ml, self.glrt, self.label, self.event_index, self.snr_db):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def subset(self, mask) -> "PairedWindows":
        return PairedWindows(*(getattr(self, f)[mask] for f in (
            "ml", "glrt", "aux", "label", "event_index", "ml_origin", "glrt_origin", "snr_db")))


def paired_windows(traces, seed: int, ml_len: int = DEFAULT_WINDOW_LEN,
                   glrt_len: int = 100) -> PairedWindows:
    """One complete-event pair and one event-free pair per trace."""
    lead = (glrt_len - ml_len) // 2
    rows = {k: [] for k in ("ml", "glrt", "aux", "label", "event_index", "ml_origin",
                            "glrt_origin", "snr_db")}
    rng = np.random.default_rng(seed)
    for trace in traces:
        x = trace.samples
        n = len(x)
        pw = trace.config.pulse_width_samples
        ev = trace.events[0]
        p = ev.position_index
        lo = max(p - (ml_len - pw), lead)
        hi = min(p, n - glrt_len + lead)
        if lo > hi:
            raise InvalidArgument(f"event at index {p} too close to the trace ends for paired windows")
        o_ml = int(rng.integers(lo, hi + 1))
        free = _noise_origins(n, glrt_len, trace.events, pw)
        if free.size == 0:
            raise InvalidArgument("trace has no event-free long window")
        o_g_noise = int(free[rng.integers(free.size)])
        aux = _aux_row(trace, trace.snr_db[0])
        for label, o_g in ((1, o_ml - lead), (0, o_g_noise)):
            o_m = o_g + lead
            rows["ml"].append(normalize_window(x[o_m:o_m + ml_len]))
            rows["glrt"].append(x[o_g:o_g + glrt_len].copy())
            rows["aux"].append(aux)
            rows["label"].append(label)
            rows["event_index"].append(p if label else -1)
            rows["ml_origin"].append(o_m)
            rows["glrt_origin"].append(o_g)
            rows["snr_db"].append(trace.snr_db[0])
    return PairedWindows(
        np.array(rows["ml"]).reshape(-1, ml_len), np.array(rows["glrt"]).reshape(-1, glrt_len),
        np.array(rows["aux"]).reshape(-1, 4), np.array(rows["label"], dtype=int),
        np.array(rows["event_index"], dtype=int), np.array(rows["ml_origin"], dtype=int),
        np.array(rows["glrt_origin"], dtype=int), np.array(rows["snr_db"], dtype=float))


def _concat_pairs(parts: list[PairedWindows]) -> PairedWindows:
    return PairedWindows(*(np.concatenate([getattr(p, f) for p in parts]) for f in (
        "ml", "glrt", "aux", "label", "event_index", "ml_origin", "glrt_origin", "snr_db")))


class _Detectors:
    """Scores and position estimates of the ML model and both classical detectors."""

    def __init__(self, model: ModelParams, spec: CompareSpec, calib_aux: np.ndarray | None):
        if model.arch.window_len != spec.ml_window_len:
            raise InvalidArgument("model window length does not match ml_window_len")
        self.model = model
        self.spec = spec
        self.calib_aux = calib_aux

    def _ml_aux(self, aux_rows: np.ndarray | None, n: int):
        if not self.model.feature_set:
            return None
        if aux_rows is None:
            raise ConfigurationError("model uses setup features; calibration needs aux rows")
        from ..dataset import AUX_NAMES
        cols = [AUX_NAMES.index(f) for f in self.model.feature_set]
        return np.resize(aux_rows[:, cols], (n, len(cols)))

    def score(self, name: str, pw: PairedWindows):
        """``(statistic, absolute event-start estimate)`` per window."""
        if name == "ml":
            p, pos, _ = predict(self.model, pw.ml, self._ml_aux(pw.aux, len(pw.ml)))
            return p, pw.ml_origin + np.rint(pos * (self.spec.ml_window_len - 1)).astype(int)
        if name == "r1msde":
            s, k = r1msde_statistic(pw.glrt, self._pulse_width)
            return s, pw.glrt_origin + k
        s, k = two_point_statistic(pw.glrt, self.spec.two_point_half_width)
        return s, pw.glrt_origin + k

    @property
    def _pulse_width(self) -> int:
        return self.spec.grid.pulse_width_samples

    def calibrate(self, name: str, seed: int) -> float:
        spec = self.spec
        if name == "ml":
            def det(w):
                return predict(self.model, normalize_window(w),
                               self._ml_aux(self.calib_aux, len(w)))[0]
            length = spec.ml_window_len
        elif name == "r1msde":
            def det(w):
                return r1msde_statistic(w, self._pulse_width)[0]
            length = spec.glrt_window_len
        else:
            def det(w):
                return two_point_statistic(w, spec.two_point_half_width)[0]
            length = spec.glrt_window_len
        return calibrate_threshold(det, lambda n, s: gaussian_noise_windows(n, length, s),
                                   spec.target_pfa, spec.n_calibration, seed)


DETECTORS = ("ml", "r1msde", "two_point")


def _bin_traces(spec: CompareSpec, b: int):
    g = replace(spec.grid, n_traces=spec.traces_per_bin, snr_db=(float(b), float(b + 1)),
                events_per_trace=1)
    seed = _sub_seed(spec.seed, 1, b)
    return (simulate_grid_trace(g, seed, i) for i in range(spec.traces_per_bin))


def _curve_traces(spec: CompareSpec, n_avg: int):
    g = spec.grid
    seed = _sub_seed(spec.seed, 2, n_avg)
    rng = np.random.default_rng(seed)
    n = AcquisitionConfig(g.fiber_length_m, g.sampling_interval_m).n_samples
    lo, hi = 2 * spec.glrt_window_len, n - NOISE_TAIL_SAMPLES - 2 * spec.glrt_window_len
    if hi <= lo:
        raise ConfigurationError(
            f"fiber of {g.fiber_length_m} m is too short for the averaging-curve event placement")
    for i in range(spec.curve_traces):
        cfg = AcquisitionConfig(
            fiber_length_m=g.fiber_length_m, sampling_interval_m=g.sampling_interval_m,
            pulse_width_samples=g.pulse_width_samples, laser_power_dbm=spec.curve_laser_power_dbm,
            attenuation_db=spec.curve_attenuation_db, n_avg=n_avg,
            base_noise_sigma=g.base_noise_sigma, refractive_index=g.refractive_index,
            seed=trace_seed(seed, i))
        pos = int(rng.integers(lo, hi)) * g.sampling_interval_m
        yield synthesize_trace(cfg, [(pos, spec.curve_reflectance_db)])


def compare_detectors(model: ModelParams, spec: CompareSpec | None = None) -> StudyReport:
    """ML model versus the rank-1 GLRT scan and the two-point method.

    All detectors are thresholded at ``target_pfa`` calibrated on simulated
    noise windows of their own length.  Reported per SNR bin: detection
    probability, measured false-alarm probability and position RMSE over all
    complete-event windows.  A second series sweeps the averaging count at a
    fixed setup and records accuracy against averaging time.
    """
    spec = spec or CompareSpec()
    dx = spec.grid.sampling_interval_m
    bins = list(range(spec.snr_bins[0], spec.snr_bins[1]))
    per_bin = [paired_windows(_bin_traces(spec, b), _sub_seed(spec.seed, 3, b),
                              spec.ml_window_len, spec.glrt_window_len) for b in bins]
    pooled = _concat_pairs(per_bin)
    dets = _Detectors(model, spec, pooled.aux)
    thresholds = {name: dets.calibrate(name, _sub_seed(spec.seed, 4, k))
                  for k, name in enumerate(DETECTORS)}

    report = StudyReport("compare", "snr_db", bins, [f"{b}dB" for b in bins])
    for i, pw in enumerate(per_bin):
        ev = pw.label == 1
        for name in DETECTORS:
            stat, est = dets.score(name, pw)
            counts = ConfusionCounts.from_predictions(ev, stat > thresholds[name])
            p_d, p_fa = detection_rates(counts)
            rmse, mae = regression_metrics(est[ev] * dx, pw.event_index[ev] * dx)
            m = classification_metrics(counts)
            report.add_point(name, i, {"p_d": p_d, "p_fa": p_fa, "accuracy": m.accuracy,
                                       "rmse_position_m": rmse, "mae_position_m": mae},
                             {"p_d": m.intervals.get("recall")})

    curve = averaging_curve(model, spec, dets, thresholds)
    first = {name: None for name in DETECTORS}
    for name in DETECTORS:
        for n_avg, acc in zip(spec.curve_n_avg, curve[name]):
            if acc >= spec.accuracy_target:
                first[name] = n_avg
                break
    g = spec.grid
    report.summary = {"threshold_" + k: v for k, v in thresholds.items()}
    for name in DETECTORS:
        report.summary[f"first_n_avg_at_target_{name}"] = first[name]
        report.summary[f"first_tau_s_at_target_{name}"] = (
            None if first[name] is None
            else float(averaging_time(first[name], g.fiber_length_m, g.refractive_index)))
    report.provenance = {
        "compare_spec": _jsonable({k: v for k, v in asdict(spec).items() if k != "grid"}),
        "grid": g.to_dict(),
        "corpus_hash": pooled.content_hash(),
        **_model_provenance(model),
        "averaging_curve": {
            "n_avg": list(spec.curve_n_avg),
            "averaging_time_s": [float(averaging_time(n, g.fiber_length_m, g.refractive_index))
                                 for n in spec.curve_n_avg],
            **{f"accuracy_{k}": v for k, v in curve.items()},
        },
    }
    return report


def averaging_curve(model: ModelParams, spec: CompareSpec, dets: _Detectors | None = None,
                    thresholds: dict[str, float] | None = None) -> dict[str, list[float]]:
    """Balanced accuracy-at-threshold of each detector for every averaging count."""
    if dets is None or thresholds is None:
        dets = _Detectors(model, spec, None)
        thresholds = {name: dets.calibrate(name, _sub_seed(spec.seed, 4, k))
                      for k, name in enumerate(DETECTORS)}
    out = {name: [] for name in DETECTORS}
    for n_avg in spec.curve_n_avg:
        pw = paired_windows(_curve_traces(spec, n_avg), _sub_seed(spec.seed, 5, n_avg),
                            spec.ml_window_len, spec.glrt_window_len)
        ev = pw.label == 1
        for name in DETECTORS:
            stat, _ = dets.score(name, pw)
            out[name].append(float(np.mean((stat > thresholds[name]) == ev)))
    return out
