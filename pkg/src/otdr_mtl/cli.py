"""Command-line pipeline: simulate, build-corpus, train, evaluate, study, detect, compare.

Configuration is a flat JSON object (schema in ``docs/config.md``) merged
with ``--set key=value`` overrides.  Every command writes its outputs
atomically together with a manifest that echoes the effective configuration.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    FEATURE_SETS,
    SimulationGrid,
    build_corpus,
    decode_reflectance,
    load_corpus,
    normalize_window,
    save_corpus,
    segment_trace,
)
from .errors import (
    CalibrationFailure,
    ConfigurationError,
    ExtractionFailure,
    InvalidArgument,
    LoadError,
    NumericOverflow,
    TrainingFailure,
)
from .trace_sim import (
    NOISE_TAIL_SAMPLES,
    AcquisitionConfig,
    OtdrTrace,
    estimate_noise_sigma,
    load_trace,
    ratio_to_db,
    save_trace,
    synthesize_trace,
)

log = logging.getLogger("otdr_mtl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

OUTPUT_ROOT_ENV = "OTDR_MTL_OUTPUT"
DEFAULT_OUTPUT_ROOT = "otdr_runs"

COMMANDS = ("simulate", "build-corpus", "train", "evaluate", "study", "detect", "compare")

# key -> default value; types are taken from the defaults (ints accepted for floats)
DEFAULTS: dict[str, object] = {
    "seed": 0,
    # single-trace acquisition (simulate)
    "fiber_length_m": 2000.0,
    "sampling_interval_m": 0.8,
    "pulse_width_samples": 6,
    "laser_power_dbm": 6.0,
    "attenuation_db": 11.0,
    "n_avg": 1000,
    "base_noise_sigma": 5e-5,
    "refractive_index": 1.468,
    "event_positions_m": [1000.0],
    "event_reflectances_db": [-40.0],
    "trace_encoding": "f8le",
    # corpus grid (build-corpus, train, study)
    "n_traces": 6300,
    "snr_min_db": 2.0,
    "snr_max_db": 30.0,
    "laser_power_min_dbm": 4.0,
    "laser_power_max_dbm": 8.0,
    "attenuation_min_db": 8.0,
    "attenuation_max_db": 14.0,
    "n_avg_min": 250,
    "n_avg_max": 4000,
    "reflectance_min_db": -60.0,
    "reflectance_max_db": -14.0,
    "events_per_trace": 1,
    "window_len": 35,
    "feature_set": "base",
    "snr_feature": "truth",
    "complete_only": False,
    # model and training
    "n_c": 30,
    "tower_width": 15,
    "tower_depth": 1,
    "aux_mode": "concat",
    "learning_rate": 1e-3,
    "batch_size": 64,
    "max_epochs": 300,
    "patience": 20,
    "clip_norm": 5.0,
    "loss_weights": [0.5, 0.3, 0.2],
    # evaluation and studies
    "threshold": 0.5,
    "n_seeds": 1,
    "traces_per_bin": 100,
    "robustness_traces": 1000,
    "window_lens": [35, 75, 100, 150, 200],
    "feature_sets": ["base", "setup", "snr", "all", "snr_setup"],
    # detector comparison
    "target_pfa": 0.1,
    "compare_traces_per_bin": 200,
    "compare_snr_max_db": 16,
    "n_calibration": 20000,
    "glrt_window_len": 100,
    "curve_traces": 500,
    # operational detection
    "stride": None,
    "detect_threshold": 0.5,
    "min_support": 3,
    "min_event_snr_db": 8.0,
    "reflector_min_db": None,
    "reflector_max_db": None,
}

# keys whose default is null, with the type a non-null value must have
_NULLABLE = {"stride": int, "reflector_min_db": float, "reflector_max_db": float}


def _positive(v):
    return v > 0


# (key, predicate over the full config, invariant text)
CONSTRAINTS = [
    ("seed", lambda c: c["seed"] >= 0, "seed >= 0"),
    ("fiber_length_m", lambda c: c["fiber_length_m"] > 0, "fiber_length_m > 0"),
    ("sampling_interval_m", lambda c: c["sampling_interval_m"] > 0, "sampling_interval_m > 0"),
    ("pulse_width_samples", lambda c: c["pulse_width_samples"] >= 1, "pulse_width_samples >= 1"),
    ("n_avg", lambda c: c["n_avg"] >= 1, "n_avg >= 1"),
    ("base_noise_sigma", lambda c: c["base_noise_sigma"] > 0, "base_noise_sigma > 0"),
    ("refractive_index", lambda c: c["refractive_index"] >= 1, "refractive_index >= 1"),
    ("event_reflectances_db",
     lambda c: len(c["event_reflectances_db"]) == len(c["event_positions_m"]),
     "one reflectance per event position"),
    ("event_reflectances_db", lambda c: all(r <= 0 for r in c["event_reflectances_db"]),
     "event reflectances <= 0 dB"),
    ("trace_encoding", lambda c: c["trace_encoding"] in ("f8le", "csv"), "trace_encoding in {f8le, csv}"),
    ("n_traces", lambda c: c["n_traces"] >= 1, "n_traces >= 1"),
    ("snr_max_db", lambda c: c["snr_min_db"] < c["snr_max_db"], "snr_min_db < snr_max_db"),
    ("laser_power_max_dbm", lambda c: c["laser_power_min_dbm"] <= c["laser_power_max_dbm"],
     "laser_power_min_dbm <= laser_power_max_dbm"),
    ("attenuation_max_db", lambda c: c["attenuation_min_db"] <= c["attenuation_max_db"],
     "attenuation_min_db <= attenuation_max_db"),
    ("n_avg_min", lambda c: 1 <= c["n_avg_min"] <= c["n_avg_max"], "1 <= n_avg_min <= n_avg_max"),
    ("reflectance_max_db", lambda c: c["reflectance_min_db"] < c["reflectance_max_db"] <= 0,
     "reflectance_min_db < reflectance_max_db <= 0"),
    ("events_per_trace", lambda c: c["events_per_trace"] in (1, 2), "events_per_trace in {1, 2}"),
    ("window_len", lambda c: c["window_len"] >= 2, "window_len >= 2"),
    ("feature_set", lambda c: c["feature_set"] in FEATURE_SETS,
     "feature_set in " + "{" + ", ".join(FEATURE_SETS) + "}"),
    ("snr_feature", lambda c: c["snr_feature"] in ("truth", "estimated"), "snr_feature in {truth, estimated}"),
    ("n_c", lambda c: c["n_c"] >= 1, "n_c >= 1"),
    ("tower_width", lambda c: c["tower_width"] >= 1, "tower_width >= 1"),
    ("tower_depth", lambda c: c["tower_depth"] >= 1, "tower_depth >= 1"),
    ("aux_mode", lambda c: c["aux_mode"] in ("concat", "replicate"), "aux_mode in {concat, replicate}"),
    ("learning_rate", lambda c: c["learning_rate"] > 0, "learning_rate > 0"),
    ("batch_size", lambda c: c["batch_size"] >= 1, "batch_size >= 1"),
    ("max_epochs", lambda c: c["max_epochs"] >= 1, "max_epochs >= 1"),
    ("patience", lambda c: c["patience"] >= 1, "patience >= 1"),
    ("clip_norm", lambda c: c["clip_norm"] > 0, "clip_norm > 0"),
    ("loss_weights", lambda c: len(c["loss_weights"]) == 3 and min(c["loss_weights"]) >= 0
     and max(c["loss_weights"]) > 0, "three non-negative loss weights, not all zero"),
    ("threshold", lambda c: 0 < c["threshold"] < 1, "0 < threshold < 1"),
    ("n_seeds", lambda c: c["n_seeds"] >= 1, "n_seeds >= 1"),
    ("traces_per_bin", lambda c: c["traces_per_bin"] >= 1, "traces_per_bin >= 1"),
    ("robustness_traces", lambda c: c["robustness_traces"] >= 1, "robustness_traces >= 1"),
    ("window_lens", lambda c: len(c["window_lens"]) >= 1 and min(c["window_lens"]) >= 2,
     "window_lens non-empty, each >= 2"),
    ("feature_sets", lambda c: all(f in FEATURE_SETS for f in c["feature_sets"]),
     "feature_sets drawn from the named feature sets"),
    ("target_pfa", lambda c: 0 < c["target_pfa"] < 1, "0 < target_pfa < 1"),
    ("compare_traces_per_bin", lambda c: c["compare_traces_per_bin"] >= 1, "compare_traces_per_bin >= 1"),
    ("compare_snr_max_db", lambda c: c["compare_snr_max_db"] > c["snr_min_db"],
     "compare_snr_max_db > snr_min_db"),
    ("n_calibration", lambda c: c["n_calibration"] >= 100 / c["target_pfa"],
     "n_calibration >= 100 / target_pfa"),
    ("glrt_window_len", lambda c: c["glrt_window_len"] >= c["window_len"], "glrt_window_len >= window_len"),
    ("curve_traces", lambda c: c["curve_traces"] >= 1, "curve_traces >= 1"),
    ("stride", lambda c: c["stride"] is None or c["stride"] >= 1, "stride >= 1 (or null)"),
    ("detect_threshold", lambda c: 0 < c["detect_threshold"] < 1, "0 < detect_threshold < 1"),
    ("min_support", lambda c: c["min_support"] >= 1, "min_support >= 1"),
    ("reflector_max_db", lambda c: None in (c["reflector_min_db"], c["reflector_max_db"])
     or c["reflector_min_db"] < c["reflector_max_db"],
     "reflector_min_db < reflector_max_db"),
]


# -- configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    """Effective configuration of one command invocation."""
    command: str
    values: dict
    overrides: dict = field(default_factory=dict)
    from_file: dict = field(default_factory=dict)
    config_path: str | None = None
    output_dir: str = DEFAULT_OUTPUT_ROOT

    def __getitem__(self, key):
        return self.values[key]

    @property
    def defaulted(self) -> list[str]:
        return sorted(k for k in DEFAULTS if k not in self.from_file and k not in self.overrides)

    def manifest(self) -> dict:
        return {
            "command": self.command,
            "config": self.values,
            "config_file": self.config_path,
            "overrides": self.overrides,
            "defaulted_keys": self.defaulted,
            "tool_version": __version__,
        }


def _unknown_key(key: str, where: str) -> ConfigurationError:
    close = difflib.get_close_matches(key, list(DEFAULTS), n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ConfigurationError(f"{where}: unknown key {key!r}{hint}")


def _coerce(key: str, value, where: str):
    default = DEFAULTS[key]
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigurationError(f"{where}: {key} must not be null")
    expected = type(default) if default is not None else _NULLABLE[key]
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: {key} must be true or false")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: {key} must be a number")
        return float(value)
    if expected is int:
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: {key} must be an integer")
        return value
    if expected is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{where}: {key} must be a list")
        if all(isinstance(v, str) for v in default):
            if not all(isinstance(v, str) for v in value):
                raise ConfigurationError(f"{where}: {key} must be a list of strings")
            return list(value)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigurationError(f"{where}: {key} must be a list of numbers")
        if all(isinstance(v, int) for v in default):
            if not all(float(v).is_integer() for v in value):
                raise ConfigurationError(f"{where}: {key} must be a list of integers")
            return [int(v) for v in value]
        return [float(v) for v in value]
    if expected is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: {key} must be a string")
        return value
    return value


def _parse_override(item: str):
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def parse_config(path=None, overrides=(), command: str = "simulate",
                 output_dir: str | None = None, seed: int | None = None) -> RunConfig:
    """Merge defaults, an optional JSON file and ``key=value`` overrides, then validate."""
    from_file: dict = {}
    where = str(path) if path is not None else "<defaults>"
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc.strerror}") from exc
        if text.strip():
            try:
                from_file = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(
                    f"{path}:{exc.lineno}:{exc.colno}: JSON parse error: {exc.msg}") from exc
            if not isinstance(from_file, dict):
                raise ConfigurationError(f"{path}: top level must be a JSON object")
    values = dict(DEFAULTS)
    for key, value in from_file.items():
        if key not in DEFAULTS:
            raise _unknown_key(key, where)
        values[key] = _coerce(key, value, where)
    ov: dict = {}
    for item in overrides:
        key, value = _parse_override(item)
        if key not in DEFAULTS:
            raise _unknown_key(key, "override")
        values[key] = ov[key] = _coerce(key, value, "override")
    if seed is not None:
        values["seed"] = ov["seed"] = _coerce("seed", seed, "--seed")
    for key, check, text in CONSTRAINTS:
        try:
            ok = check(values)
        except (TypeError, ValueError, ZeroDivisionError):
            ok = False
        if not ok:
            raise ConfigurationError(f"{key}={values[key]!r} violates invariant: {text}")
    out = output_dir or os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT
    return RunConfig(command, values, ov, dict(from_file),
                     None if path is None else str(path), str(out))


def grid_from_config(cfg: RunConfig) -> SimulationGrid:
    return SimulationGrid(
        n_traces=cfg["n_traces"],
        snr_db=(cfg["snr_min_db"], cfg["snr_max_db"]),
        laser_power_dbm=(cfg["laser_power_min_dbm"], cfg["laser_power_max_dbm"]),
        attenuation_db=(cfg["attenuation_min_db"], cfg["attenuation_max_db"]),
        n_avg=(cfg["n_avg_min"], cfg["n_avg_max"]),
        reflectance_db=(cfg["reflectance_min_db"], cfg["reflectance_max_db"]),
        fiber_length_m=cfg["fiber_length_m"],
        sampling_interval_m=cfg["sampling_interval_m"],
        pulse_width_samples=cfg["pulse_width_samples"],
        base_noise_sigma=cfg["base_noise_sigma"],
        refractive_index=cfg["refractive_index"],
        events_per_trace=cfg["events_per_trace"],
    )


def train_config_from(cfg: RunConfig, seed: int | None = None):
    from .nn.train import TrainConfig
    return TrainConfig(learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
                       max_epochs=cfg["max_epochs"], patience=cfg["patience"],
                       clip_norm=cfg["clip_norm"], seed=cfg["seed"] if seed is None else seed,
                       loss_weights=tuple(cfg["loss_weights"]))


# -- output helpers ----------------------------------------------------------

def _write_atomic(path: Path, data: bytes | str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_text(obj) -> str:
    from .eval.studies import _jsonable
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _write_manifest(cfg: RunConfig, out: Path, inputs: dict[str, str], outputs: list[Path],
                    extra: dict | None = None) -> Path:
    manifest = cfg.manifest()
    manifest["inputs"] = {k: {"path": str(v), "sha256": _sha256(v)} for k, v in inputs.items()}
    manifest["outputs"] = {p.name: _sha256(p) for p in outputs}
    if extra:
        manifest.update(extra)
    return _write_atomic(out / f"{cfg.command}_manifest.json", _json_text(manifest))


# -- operational detection ---------------------------------------------------

@dataclass(frozen=True)
class DetectedEvent:
    position_m: float
    position_index: int
    reflectance_db: float
    p_event: float
    support: int
    snr_db: float | None


def _window_scores(model, x: np.ndarray, origins: np.ndarray):
    from .nn.model import predict
    L = model.arch.window_len
    feats = normalize_window(np.stack([x[o:o + L] for o in origins]))
    aux = None
    if model.feature_set:
        raise InvalidArgument("operational detection needs a model trained without setup features")
    p, pos, refl = predict(model, feats, aux)
    return p, origins + np.rint(pos * (L - 1)).astype(int), refl


def _pulse_snr_db(x: np.ndarray, idx: int, pw: int, sigma: float) -> float:
    # top-2 mean over the pulse span only, so a neighbouring event cannot lend its height
    span = x[idx:idx + pw]
    a = float(np.sort(span)[-2:].mean()) if len(span) >= 2 else float(span.max())
    if sigma == 0.0:
        return math.inf if a > 0 else -math.inf
    return float(ratio_to_db(a / sigma)) if a > 0 else -math.inf


def detect_events(model, trace: OtdrTrace, window_len: int | None = None, stride: int | None = None,
                  threshold: float = 0.5, min_support: int = 3,
                  min_snr_db: float | None = 8.0) -> list[DetectedEvent]:
    """Scan a trace with the model and merge positive windows into events.

    A coarse pass at ``stride`` finds positive windows; every origin within
    one stride of them is then scored (stride 1).  Window-level position
    estimates are merged by non-maximum suppression on ``p_event``: the most
    confident estimate is kept and all estimates within one pulse width of
    it are absorbed.  A kept event needs ``min_support`` positive windows
    agreeing within a pulse width; its position and reflectance are the
    medians over them.

    Windows are min-max normalized, so a pure-noise window can look like a
    weak event and a long trace offers hundreds of chances for that.  Events
    whose SNR against the trace's noise floor is below ``min_snr_db`` are
    therefore dropped; pass ``None`` to keep everything.
    """
    L = model.arch.window_len
    if window_len is not None and window_len != L:
        raise InvalidArgument(f"window_len {window_len} does not match the model's {L}")
    x = np.asarray(trace.samples, dtype=float)
    n = len(x)
    pw = trace.config.pulse_width_samples
    dx = trace.config.sampling_interval_m
    coarse = np.array([w.window_origin for w in segment_trace(x, L, stride, normalize=False)])
    step = int(coarse[1] - coarse[0]) if len(coarse) > 1 else 1
    p, _, _ = _window_scores(model, x, coarse)
    hits = coarse[p > threshold]
    if hits.size == 0:
        return []
    fine = np.unique(np.concatenate([np.arange(o - step, o + step + 1) for o in hits]))
    fine = fine[(fine >= 0) & (fine <= n - L)]
    p, est, refl = _window_scores(model, x, fine)
    keep = p > threshold
    p, est, refl = p[keep], est[keep], refl[keep]
    # prefer estimates whose pulse sits completely inside their window
    offset = est - fine[keep]
    interior = (offset >= 0) & (offset <= L - pw)
    order = np.lexsort((-p, ~interior))
    taken = np.zeros(len(p), dtype=bool)
    sigma = estimate_noise_sigma(x, min(NOISE_TAIL_SAMPLES, n))
    events: list[DetectedEvent] = []
    for i in order:
        if taken[i]:
            continue
        near = ~taken & (np.abs(est - est[i]) <= pw)
        taken |= near
        if int(near.sum()) < min_support:
            continue
        idx = int(np.rint(np.median(est[near])))
        if any(abs(idx - e.position_index) <= pw for e in events):
            continue
        r = float(decode_reflectance(np.median(refl[near]), model.reflectance_range))
        snr = _pulse_snr_db(x, idx, pw, sigma)
        if min_snr_db is not None and snr < min_snr_db:
            continue
        events.append(DetectedEvent(idx * dx, idx, r, float(p[i]), int(near.sum()), snr))
    return sorted(events, key=lambda e: e.position_index)


@dataclass(frozen=True)
class IntegrityResult:
    passed: bool
    reflector_pos_m: float
    p_event: float
    position_m: float
    reflectance_db: float
    window_origin: int


def check_reflector(model, trace: OtdrTrace, reflector_pos_m: float,
                    reflectance_range_db=None, threshold: float = 0.5) -> IntegrityResult:
    """Score only the window centred on the reference reflector.

    The link passes when that window is positive and its position estimate
    falls within one pulse width of the reflector.  ``reflectance_range_db``
    adds a bound on the estimated reflectance; leave it unset for models
    trained without setup features, whose reflectance estimates cannot
    separate reflector strength from acquisition gain.
    """
    L = model.arch.window_len
    x = np.asarray(trace.samples, dtype=float)
    dx = trace.config.sampling_interval_m
    pw = trace.config.pulse_width_samples
    idx = int(round(reflector_pos_m / dx))
    if not 0 <= idx < len(x):
        raise InvalidArgument(f"reflector position {reflector_pos_m} m lies outside the trace")
    origin = min(max(idx - (L - pw) // 2, 0), len(x) - L)
    p, est, refl = _window_scores(model, x, np.array([origin]))
    r = float(decode_reflectance(refl[0], model.reflectance_range))
    ok = bool(p[0] > threshold and abs(int(est[0]) - idx) <= pw)
    if reflectance_range_db is not None:
        ok = ok and reflectance_range_db[0] <= r <= reflectance_range_db[1]
    return IntegrityResult(ok, float(reflector_pos_m), float(p[0]), float(est[0]) * dx, r, origin)


# -- commands ----------------------------------------------------------------

def _out_dir(cfg: RunConfig, args) -> Path:
    d = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir) / cfg.command
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_simulate(cfg: RunConfig, args) -> int:
    acq = AcquisitionConfig(
        fiber_length_m=cfg["fiber_length_m"], sampling_interval_m=cfg["sampling_interval_m"],
        pulse_width_samples=cfg["pulse_width_samples"], laser_power_dbm=cfg["laser_power_dbm"],
        attenuation_db=cfg["attenuation_db"], n_avg=cfg["n_avg"],
        base_noise_sigma=cfg["base_noise_sigma"], refractive_index=cfg["refractive_index"],
        seed=cfg["seed"])
    events = list(zip(cfg["event_positions_m"], cfg["event_reflectances_db"]))
    trace = synthesize_trace(acq, events)
    out = _out_dir(cfg, args)
    path = save_trace(trace, out / "trace.otdr", cfg["trace_encoding"])
    _write_manifest(cfg, out, {}, [path], {"snr_db": trace.snr_db})
    print(path)
    return EXIT_OK


def _corpus_for(cfg: RunConfig, args):
    if getattr(args, "corpus", None):
        corpus = load_corpus(args.corpus)
        return corpus.with_feature_set(cfg["feature_set"]), {"corpus": Path(args.corpus) / "samples.csv"}
    corpus = build_corpus(grid_from_config(cfg), cfg["window_len"], cfg["feature_set"],
                          seed=cfg["seed"], snr_feature=cfg["snr_feature"],
                          complete_only=cfg["complete_only"])
    return corpus, {}


def cmd_build_corpus(cfg: RunConfig, args) -> int:
    corpus, _ = _corpus_for(cfg, argparse.Namespace())
    out = _out_dir(cfg, args)
    save_corpus(corpus, out)
    _write_manifest(cfg, out, {}, [out / "samples.csv", out / "manifest.json"],
                    {"content_hash": corpus.content_hash()})
    print(out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    from .nn.io import save_model
    from .nn.model import ArchSpec
    from .nn.train import train_model
    corpus, inputs = _corpus_for(cfg, args)
    arch = ArchSpec(window_len=corpus.window_len, n_c=cfg["n_c"], tower_width=cfg["tower_width"],
                    tower_depth=cfg["tower_depth"], n_aux=len(corpus.feature_set),
                    aux_mode=cfg["aux_mode"])
    model, curves = train_model(corpus, arch, train_config_from(cfg))
    out = _out_dir(cfg, args)
    mpath = save_model(model, out / "model.otdrm")
    rows = ["epoch,train_loss,val_loss"] + [f"{i},{t!r},{v!r}" for i, (t, v) in
                                            enumerate(zip(curves.train_loss, curves.val_loss))]
    cpath = _write_atomic(out / "learning_curves.csv", "\n".join(rows) + "\n")
    _write_manifest(cfg, out, inputs, [mpath, cpath],
                    {"corpus_hash": corpus.content_hash(), "best_epoch": curves.best_epoch})
    print(mpath)
    return EXIT_OK


def _load_model_arg(args):
    from .nn.io import load_model
    if not getattr(args, "model", None):
        raise ConfigurationError(f"{args.command} requires --model")
    return load_model(args.model)


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from .eval.studies import evaluate_model
    model = _load_model_arg(args)
    corpus, inputs = _corpus_for(cfg, args)
    test = corpus.part("test") if np.any(corpus.split == 2) else corpus
    m = evaluate_model(model, test.with_feature_set(model.feature_set), cfg["threshold"],
                       cfg["sampling_interval_m"])
    out = _out_dir(cfg, args)
    mpath = _write_atomic(out / "metrics.json", _json_text(m.to_dict()))
    _write_manifest(cfg, out, {"model": args.model, **inputs}, [mpath],
                    {"corpus_hash": corpus.content_hash()})
    print(mpath)
    return EXIT_OK


def cmd_study(cfg: RunConfig, args) -> int:
    from .eval.studies import STUDY_KINDS, StudySpec, run_study
    from .nn.io import load_model
    if args.kind not in STUDY_KINDS:
        raise ConfigurationError(f"unknown study kind {args.kind!r}; choose from {STUDY_KINDS}")
    model = load_model(args.model) if args.model else None
    spec = StudySpec(
        kind=args.kind, seed=cfg["seed"], grid=grid_from_config(cfg), window_len=cfg["window_len"],
        feature_set=cfg["feature_set"], train=train_config_from(cfg), n_seeds=cfg["n_seeds"],
        model=model, traces_per_bin=cfg["traces_per_bin"],
        snr_bins=(int(math.floor(cfg["snr_min_db"])), int(math.ceil(cfg["snr_max_db"]))),
        feature_sets=tuple(cfg["feature_sets"]), window_lens=tuple(cfg["window_lens"]),
        robustness_traces=cfg["robustness_traces"], threshold=cfg["threshold"])
    report = run_study(args.kind, spec)
    out = _out_dir(cfg, args)
    paths = report.write(out)
    _write_manifest(cfg, out, {"model": args.model} if args.model else {}, list(paths),
                    {"study_kind": args.kind})
    print(paths[0])
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    from .eval.studies import CompareSpec, compare_detectors
    model = _load_model_arg(args)
    pfa = cfg["target_pfa"] if args.pfa is None else args.pfa
    if not 0 < pfa < 1:
        raise ConfigurationError(f"--pfa {pfa} violates invariant: 0 < target_pfa < 1")
    spec = CompareSpec(seed=cfg["seed"], grid=grid_from_config(cfg), target_pfa=pfa,
                       ml_window_len=cfg["window_len"], glrt_window_len=cfg["glrt_window_len"],
                       traces_per_bin=cfg["compare_traces_per_bin"],
                       snr_bins=(int(math.floor(cfg["snr_min_db"])), int(cfg["compare_snr_max_db"])),
                       n_calibration=cfg["n_calibration"], curve_traces=cfg["curve_traces"])
    report = compare_detectors(model, spec)
    out = _out_dir(cfg, args)
    paths = report.write(out)
    _write_manifest(cfg, out, {"model": args.model}, list(paths), {"target_pfa": pfa})
    print(paths[0])
    return EXIT_OK


def cmd_detect(cfg: RunConfig, args) -> int:
    model = _load_model_arg(args)
    if not args.trace:
        raise ConfigurationError("detect requires --trace")
    trace = load_trace(args.trace)
    if cfg["window_len"] != model.arch.window_len and "window_len" in (cfg.overrides | cfg.from_file):
        raise InvalidArgument(
            f"window_len {cfg['window_len']} does not match the model's {model.arch.window_len}")
    report: dict = {"trace": str(args.trace), "model": str(args.model)}
    run_full = True
    if args.reflector_pos is not None:
        bounds = None
        if cfg["reflector_min_db"] is not None or cfg["reflector_max_db"] is not None:
            lo, hi = cfg["reflector_min_db"], cfg["reflector_max_db"]
            bounds = (-math.inf if lo is None else lo, math.inf if hi is None else hi)
        res = check_reflector(model, trace, args.reflector_pos, bounds, cfg["detect_threshold"])
        report["integrity"] = asdict(res)
        # a healthy link needs no full analysis unless requested
        run_full = args.full or not res.passed
    events = []
    if run_full:
        events = detect_events(model, trace, model.arch.window_len, cfg["stride"],
                               cfg["detect_threshold"], cfg["min_support"], cfg["min_event_snr_db"])
        if args.reflector_pos is not None:
            dx = trace.config.sampling_interval_m
            guard = model.arch.window_len // 2
            ref_idx = int(round(args.reflector_pos / dx))
            events = [e for e in events if abs(e.position_index - ref_idx) > guard]
    report["full_analysis"] = run_full
    report["n_events"] = len(events)
    report["events"] = [asdict(e) for e in events]
    out = _out_dir(cfg, args)
    epath = _write_atomic(out / "events.json", _json_text(report))
    _write_manifest(cfg, out, {"model": args.model, "trace": args.trace}, [epath])
    print(epath)
    return EXIT_OK


_HANDLERS = {
    "simulate": cmd_simulate,
    "build-corpus": cmd_build_corpus,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "study": cmd_study,
    "detect": cmd_detect,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otdr-mtl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "evaluate", "build-corpus"):
            p.add_argument("--corpus", help="existing corpus directory instead of simulating one")
        if name in ("evaluate", "study", "detect", "compare"):
            p.add_argument("--model", help="model file")
        if name == "study":
            p.add_argument("--kind", required=True)
        if name == "detect":
            p.add_argument("--trace", help="trace file")
            p.add_argument("--reflector-pos", type=float, help="reference reflector position in m")
            p.add_argument("--full", action="store_true", help="full analysis even when integrity passes")
        if name == "compare":
            p.add_argument("--pfa", type=float, help="target false-alarm probability")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, args.overrides, args.command, args.out, args.seed)
        return _HANDLERS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LoadError, ExtractionFailure, InvalidArgument, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingFailure, NumericOverflow, CalibrationFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
