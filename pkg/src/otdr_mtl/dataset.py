"""Window extraction, normalization, target encoding and corpus assembly."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ExtractionFailure, InvalidArgument
from .trace_sim import (
    NOISE_TAIL_SAMPLES,
    AcquisitionConfig,
    EventTruth,
    OtdrTrace,
    estimate_noise_sigma,
    ratio_to_db,
    synthesize_trace,
)

DEFAULT_WINDOW_LEN = 35
REFLECTANCE_RANGE_DB = (-65.0, -10.0)
SPLIT_NAMES = ("train", "val", "test")

# Setup parameters available as auxiliary inputs, in storage order.
AUX_NAMES = ("snr", "laser_power", "n_avg", "attenuation")
FEATURE_SETS = {
    "base": (),
    "setup": ("laser_power", "n_avg", "attenuation"),
    "snr": ("snr",),
    "all": ("snr", "laser_power", "n_avg", "attenuation"),
    "snr_setup": ("snr", "laser_power", "n_avg"),
}


def resolve_feature_set(feature_set) -> tuple[str, ...]:
    """Accept a named feature set or an explicit tuple of aux names."""
    if isinstance(feature_set, str):
        try:
            return FEATURE_SETS[feature_set]
        except KeyError:
            raise InvalidArgument(
                f"unknown feature set {feature_set!r}; choose from {sorted(FEATURE_SETS)}") from None
    names = tuple(feature_set)
    for name in names:
        if name not in AUX_NAMES:
            raise InvalidArgument(f"unknown aux feature {name!r}")
    return names


@dataclass
class WindowSample:
    features: np.ndarray
    aux: np.ndarray | None = None
    id_class: int | None = None
    position_target: float | None = None
    reflectance_target: float | None = None
    window_origin: int = 0
    snr_db: float = math.nan


# -- window primitives -------------------------------------------------------

def normalize_window(raw) -> np.ndarray:
    """Per-window min-max scaling to [0, 1]; a constant window maps to zeros."""
    x = np.asarray(raw, dtype=float)
    if x.size == 0:
        raise InvalidArgument("cannot normalize an empty window")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("window contains non-finite values")
    lo = x.min(axis=-1, keepdims=True)
    span = x.max(axis=-1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.0)


def encode_targets(window_origin: int, truth: EventTruth, window_len: int = DEFAULT_WINDOW_LEN,
                   reflectance_range=REFLECTANCE_RANGE_DB, pulse_width_samples: int = 6):
    """Return ``(id_class, position_target, reflectance_target)``.

    Regression targets are NaN for windows that miss the event pulse.
    """
    r_min, r_max = reflectance_range
    if not r_min < r_max:
        raise InvalidArgument("reflectance_range must satisfy min < max")
    p = truth.position_index
    hit = p <= window_origin + window_len - 1 and p + pulse_width_samples - 1 >= window_origin
    if not hit:
        return 0, math.nan, math.nan
    rel = min(max(p - window_origin, 0), window_len - 1)
    refl = (truth.reflectance_db - r_min) / (r_max - r_min)
    return 1, rel / (window_len - 1), min(max(refl, 0.0), 1.0)


def decode_position(position_target, window_origin, window_len: int = DEFAULT_WINDOW_LEN):
    """Absolute sample index encoded by a position target."""
    return window_origin + np.rint(np.asarray(position_target) * (window_len - 1)).astype(int)


def decode_reflectance(reflectance_target, reflectance_range=REFLECTANCE_RANGE_DB):
    r_min, r_max = reflectance_range
    return r_min + np.asarray(reflectance_target, dtype=float) * (r_max - r_min)


def segment_trace(trace, window_len: int = DEFAULT_WINDOW_LEN, stride: int | None = None,
                  normalize: bool = True) -> list[WindowSample]:
    """Cut a trace into sliding windows, appending a right-aligned tail window."""
    x = np.asarray(trace.samples if isinstance(trace, OtdrTrace) else trace, dtype=float)
    n = len(x)
    if stride is None:
        stride = max(window_len // 2, 1)
    if stride < 1:
        raise InvalidArgument("stride must be >= 1")
    if window_len > n:
        raise InvalidArgument(f"window_len {window_len} exceeds trace length {n}")
    origins = list(range(0, n - window_len + 1, stride))
    if origins[-1] != n - window_len:
        origins.append(n - window_len)
    out = []
    for o in origins:
        raw = x[o:o + window_len]
        out.append(WindowSample(normalize_window(raw) if normalize else raw.copy(), window_origin=o))
    return out


def _noise_origins(n: int, window_len: int, events: Sequence[EventTruth], pw: int) -> np.ndarray:
    valid = np.ones(n - window_len + 1, dtype=bool)
    for ev in events:
        lo = max(ev.position_index - window_len + 1, 0)
        hi = min(ev.position_index + pw - 1, n - window_len)
        if lo <= hi:
            valid[lo:hi + 1] = False
    return np.flatnonzero(valid)


def _aux_row(trace: OtdrTrace, snr_db: float) -> np.ndarray:
    c = trace.config
    return np.array([snr_db, c.laser_power_dbm, float(c.n_avg), c.attenuation_db])


def extract_training_windows(trace: OtdrTrace, window_len: int = DEFAULT_WINDOW_LEN, seed: int = 0,
                             reflectance_range=REFLECTANCE_RANGE_DB, complete_only: bool = False):
    """Draw one event window and one event-free window from ``trace``.

    The event window origin is uniform over all placements whose span meets
    the pulse of a randomly chosen event (partial overlaps included unless
    ``complete_only``).  The noise window origin is uniform over placements
    that meet no event.
    """
    if not trace.events:
        raise InvalidArgument("trace has no events")
    n = len(trace.samples)
    if n < 2 * window_len:
        raise InvalidArgument(f"trace length {n} < 2 * window_len")
    pw = trace.config.pulse_width_samples
    rng = np.random.default_rng(seed)
    k = int(rng.integers(len(trace.events)))
    ev = trace.events[k]
    if complete_only:
        lo, hi = ev.position_index - window_len + pw, ev.position_index
    else:
        lo, hi = ev.position_index - window_len + 1, ev.position_index + pw - 1
    lo, hi = max(lo, 0), min(hi, n - window_len)
    if lo > hi:
        raise ExtractionFailure(f"no event window fits around index {ev.position_index}")
    event_origin = int(rng.integers(lo, hi + 1))
    candidates = _noise_origins(n, window_len, trace.events, pw)
    if candidates.size == 0:
        raise ExtractionFailure("no event-free window exists in trace")
    noise_origin = int(candidates[rng.integers(candidates.size)])

    snr = trace.snr_db[k]
    aux = _aux_row(trace, snr)
    cls, pos, refl = encode_targets(event_origin, ev, window_len, reflectance_range, pw)
    event_win = WindowSample(normalize_window(trace.samples[event_origin:event_origin + window_len]),
                             aux.copy(), cls, pos, refl, event_origin, snr)
    noise_win = WindowSample(normalize_window(trace.samples[noise_origin:noise_origin + window_len]),
                             aux.copy(), 0, math.nan, math.nan, noise_origin, snr)
    return event_win, noise_win


# -- corpus ------------------------------------------------------------------

@dataclass
class Corpus:
    """Array-backed collection of window samples.

    ``aux`` always stores every setup parameter (``AUX_NAMES`` order); the
    active ``feature_set`` picks which ones a model consumes.  ``split`` codes
    index ``SPLIT_NAMES``; -1 means unassigned.  ``event_offsets`` holds the
    start of every true event relative to the window origin (NaN padded), used
    to score windows containing more than one event.
    """
    features: np.ndarray
    aux: np.ndarray
    id_class: np.ndarray
    position_target: np.ndarray
    reflectance_target: np.ndarray
    window_origin: np.ndarray
    snr_db: np.ndarray
    trace_index: np.ndarray
    event_offsets: np.ndarray
    split: np.ndarray
    feature_set: tuple[str, ...] = ()
    manifest: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, window_len: int = DEFAULT_WINDOW_LEN, feature_set=()) -> "Corpus":
        return cls.from_samples([], window_len, feature_set)

    @classmethod
    def from_samples(cls, samples: Sequence[WindowSample], window_len: int = DEFAULT_WINDOW_LEN,
                     feature_set=(), trace_index=None, event_offsets=None) -> "Corpus":
        m = len(samples)
        nan = math.nan
        feats = np.array([s.features for s in samples], dtype=float).reshape(m, window_len)
        aux = np.array([s.aux if s.aux is not None else [nan] * len(AUX_NAMES) for s in samples],
                       dtype=float).reshape(m, len(AUX_NAMES))
        tidx = np.asarray(trace_index if trace_index is not None else np.arange(m), dtype=int)
        offs = (np.asarray(event_offsets, dtype=float).reshape(m, -1)
                if event_offsets is not None and m else np.full((m, 1), nan))
        return cls(
            features=feats,
            aux=aux,
            id_class=np.array([-1 if s.id_class is None else s.id_class for s in samples], dtype=int),
            position_target=np.array([nan if s.position_target is None else s.position_target
                                      for s in samples], dtype=float),
            reflectance_target=np.array([nan if s.reflectance_target is None else s.reflectance_target
                                         for s in samples], dtype=float),
            window_origin=np.array([s.window_origin for s in samples], dtype=int),
            snr_db=np.array([s.snr_db for s in samples], dtype=float),
            trace_index=tidx,
            event_offsets=offs,
            split=np.full(m, -1, dtype=int),
            feature_set=resolve_feature_set(feature_set),
        )

    def __len__(self) -> int:
        return len(self.id_class)

    @property
    def window_len(self) -> int:
        return self.features.shape[1]

    def aux_matrix(self, feature_set=None) -> np.ndarray | None:
        names = self.feature_set if feature_set is None else resolve_feature_set(feature_set)
        if not names:
            return None
        return self.aux[:, [AUX_NAMES.index(n) for n in names]]

    def __getitem__(self, i: int) -> WindowSample:
        cls = int(self.id_class[i])
        aux = self.aux_matrix()
        return WindowSample(
            features=self.features[i],
            aux=None if aux is None else aux[i],
            id_class=None if cls < 0 else cls,
            position_target=None if cls != 1 else float(self.position_target[i]),
            reflectance_target=None if cls != 1 else float(self.reflectance_target[i]),
            window_origin=int(self.window_origin[i]),
            snr_db=float(self.snr_db[i]),
        )

    @property
    def samples(self) -> list[WindowSample]:
        return [self[i] for i in range(len(self))]

    @property
    def split_tags(self) -> list[str | None]:
        return [SPLIT_NAMES[s] if s >= 0 else None for s in self.split]

    def subset(self, mask) -> "Corpus":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=int)
        return Corpus(
            self.features[idx], self.aux[idx], self.id_class[idx], self.position_target[idx],
            self.reflectance_target[idx], self.window_origin[idx], self.snr_db[idx],
            self.trace_index[idx], self.event_offsets[idx], self.split[idx],
            self.feature_set, dict(self.manifest))

    @classmethod
    def concat(cls, parts: Sequence["Corpus"]) -> "Corpus":
        """Stack corpora with equal window length; trace indices are offset to stay unique."""
        if not parts:
            raise InvalidArgument("nothing to concatenate")
        if len({c.window_len for c in parts}) != 1:
            raise InvalidArgument("corpora differ in window length")
        width = max(c.event_offsets.shape[1] for c in parts)
        offs, tidx, base = [], [], 0
        for c in parts:
            pad = np.full((len(c), width - c.event_offsets.shape[1]), math.nan)
            offs.append(np.hstack([c.event_offsets, pad]))
            tidx.append(c.trace_index + base)
            base += int(c.trace_index.max()) + 1 if len(c) else 0

        def cat(name):
            return np.concatenate([getattr(c, name) for c in parts])
        return cls(cat("features"), cat("aux"), cat("id_class"), cat("position_target"),
                   cat("reflectance_target"), cat("window_origin"), cat("snr_db"),
                   np.concatenate(tidx), np.concatenate(offs), cat("split"),
                   parts[0].feature_set, {"parts": [c.manifest for c in parts]})

    def part(self, name: str) -> "Corpus":
        return self.subset(self.split == SPLIT_NAMES.index(name))

    def with_feature_set(self, feature_set) -> "Corpus":
        return replace(self, feature_set=resolve_feature_set(feature_set), manifest=dict(self.manifest))

    def split_counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.split == k)) for k, name in enumerate(SPLIT_NAMES)}

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.aux, self.id_class, self.position_target,
                    self.reflectance_target, self.window_origin, self.snr_db, self.split):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps(list(self.feature_set)).encode())
        return h.hexdigest()[:16]


def split_corpus(corpus: Corpus, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Corpus:
    """Tag samples train/val/test by a seeded permutation and contiguous cuts."""
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(not 0.0 <= f <= 1.0 for f in fr):
        raise InvalidArgument("fractions must be three values in [0, 1]")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise InvalidArgument("fractions must sum to 1")
    m = len(corpus)
    n_train = int(round(fr[0] * m))
    n_val = min(int(round(fr[1] * m)), m - n_train)
    perm = np.random.default_rng(seed).permutation(m)
    split = np.empty(m, dtype=int)
    split[perm[:n_train]] = 0
    split[perm[n_train:n_train + n_val]] = 1
    split[perm[n_train + n_val:]] = 2
    out = replace(corpus, split=split, manifest=dict(corpus.manifest))
    out.manifest["split_counts"] = out.split_counts()
    out.manifest["split_seed"] = seed
    return out


# -- simulation grid ---------------------------------------------------------

@dataclass(frozen=True)
class SimulationGrid:
    """Distribution of simulated acquisitions.

    Each trace draws a target SNR uniformly from ``snr_db`` together with a
    laser power, an attenuation and a log-uniform averaging count; the
    reflectance is then solved so the event lands on the target SNR.  Draws
    whose reflectance leaves ``reflectance_db`` are rejected.  The spread of
    the setup parameters therefore controls how much the reflectance varies
    at fixed SNR.
    """
    n_traces: int = 6300
    snr_db: tuple[float, float] = (2.0, 30.0)
    laser_power_dbm: tuple[float, float] = (4.0, 8.0)
    attenuation_db: tuple[float, float] = (8.0, 14.0)
    n_avg: tuple[int, int] = (250, 4000)
    reflectance_db: tuple[float, float] = (-60.0, -14.0)
    fiber_length_m: float = 2000.0
    sampling_interval_m: float = 0.8
    pulse_width_samples: int = 6
    base_noise_sigma: float = 5e-5
    refractive_index: float = 1.468
    events_per_trace: int = 1
    event_spacing_m: tuple[float, ...] = (9.0, 12.0, 15.0, 18.0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def trace_seed(seed: int, index: int) -> int:
    """Per-trace seed: the corpus seed shifted past the index range, xor the index."""
    return ((int(seed) & 0xFFFFFFFF) << 32) ^ int(index)


def sample_setup(grid: SimulationGrid, rng: np.random.Generator, max_tries: int = 10_000):
    """Draw ``(laser_power, attenuation, n_avg, reflectance_db, snr_db)`` for one trace."""
    k_db = float(ratio_to_db(1.0 / grid.base_noise_sigma))
    log_lo, log_hi = np.log10(grid.n_avg[0]), np.log10(grid.n_avg[1])
    for _ in range(max_tries):
        snr = rng.uniform(*grid.snr_db)
        p = rng.uniform(*grid.laser_power_dbm)
        att = rng.uniform(*grid.attenuation_db)
        n_avg = int(round(10.0 ** rng.uniform(log_lo, log_hi)))
        # snr = k_db + R + P - att + 5 log10(n_avg) with the 10 log10 convention
        refl = snr - k_db - p + att - float(ratio_to_db(math.sqrt(n_avg)))
        if grid.reflectance_db[0] <= refl <= grid.reflectance_db[1] and refl <= 0:
            return p, att, n_avg, refl, snr
    raise InvalidArgument("simulation grid admits no reflectance inside reflectance_db")


def simulate_grid_trace(grid: SimulationGrid, seed: int, index: int) -> OtdrTrace:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(index), 1])
    p, att, n_avg, refl, _ = sample_setup(grid, rng)
    cfg = AcquisitionConfig(
        fiber_length_m=grid.fiber_length_m,
        sampling_interval_m=grid.sampling_interval_m,
        pulse_width_samples=grid.pulse_width_samples,
        laser_power_dbm=p,
        attenuation_db=att,
        n_avg=n_avg,
        base_noise_sigma=grid.base_noise_sigma,
        refractive_index=grid.refractive_index,
        seed=trace_seed(seed, index),
    )
    dx = grid.sampling_interval_m
    n = cfg.n_samples
    pw = grid.pulse_width_samples
    lo = 2 * DEFAULT_WINDOW_LEN
    hi = n - NOISE_TAIL_SAMPLES - 4 * pw - 2 * DEFAULT_WINDOW_LEN
    if grid.events_per_trace == 1:
        events = [(int(rng.integers(lo, hi)) * dx, refl)]
    elif grid.events_per_trace == 2:
        spacing = float(rng.choice(grid.event_spacing_m))
        gap = int(round(spacing / dx))
        start = int(rng.integers(lo, hi - gap))
        # second event: independent reflectance from the same setup distribution
        refl2 = sample_setup(replace(grid, laser_power_dbm=(p, p), attenuation_db=(att, att),
                                     n_avg=(n_avg, n_avg)), rng)[3]
        events = [(start * dx, refl), ((start + gap) * dx, refl2)]
    else:
        raise InvalidArgument("events_per_trace must be 1 or 2")
    return synthesize_trace(cfg, events)


def _window_snr_estimate(trace: OtdrTrace, origin: int, window_len: int) -> float:
    """SNR re-estimated from the raw window and the trace's noise tail."""
    tail = trace.samples[-NOISE_TAIL_SAMPLES:]
    sigma = estimate_noise_sigma(trace, NOISE_TAIL_SAMPLES)
    raw = trace.samples[origin:origin + window_len]
    a = np.sort(raw)[-2:].mean() - tail.mean()
    return float(ratio_to_db(max(a / sigma, 1e-3)))


def build_corpus(grid: SimulationGrid, window_len: int = DEFAULT_WINDOW_LEN, feature_set="base",
                 seed: int = 0, split: bool = True, snr_feature: str = "truth",
                 complete_only: bool = False, reflectance_range=REFLECTANCE_RANGE_DB) -> Corpus:
    """Simulate ``grid.n_traces`` traces and extract two windows from each.

    ``snr_feature="estimated"`` replaces the true SNR aux value with one
    re-estimated from each window.
    """
    if snr_feature not in ("truth", "estimated"):
        raise InvalidArgument("snr_feature must be 'truth' or 'estimated'")
    samples: list[WindowSample] = []
    tidx: list[int] = []
    offsets: list[list[float]] = []
    n_ev = max(grid.events_per_trace, 1)
    for i in range(grid.n_traces):
        trace = simulate_grid_trace(grid, seed, i)
        pair = extract_training_windows(trace, window_len, seed=trace_seed(seed, i) ^ 0x5EED,
                                        reflectance_range=reflectance_range,
                                        complete_only=complete_only)
        for w in pair:
            if snr_feature == "estimated":
                w.aux[0] = _window_snr_estimate(trace, w.window_origin, window_len)
            samples.append(w)
            tidx.append(i)
            offsets.append([ev.position_index - w.window_origin for ev in trace.events]
                           + [math.nan] * (n_ev - len(trace.events)))
    corpus = Corpus.from_samples(samples, window_len, feature_set, tidx,
                                 np.array(offsets, dtype=float).reshape(len(samples), n_ev))
    corpus.manifest = {
        "grid": grid.to_dict(),
        "window_len": window_len,
        "feature_set": list(corpus.feature_set),
        "seed": seed,
        "snr_feature": snr_feature,
        "complete_only": complete_only,
        "reflectance_range_db": list(reflectance_range),
    }
    if split and len(corpus):
        corpus = split_corpus(corpus, seed=seed)
    return corpus


# -- persistence -------------------------------------------------------------

def save_corpus(corpus: Corpus, directory) -> Path:
    """Write ``manifest.json`` and ``samples.csv`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    L = corpus.window_len
    n_off = corpus.event_offsets.shape[1]
    header = ([f"f{i}" for i in range(L)] + list(AUX_NAMES)
              + ["id_class", "position_target", "reflectance_target", "snr_db", "split",
                 "window_origin", "trace_index"] + [f"event_offset{i}" for i in range(n_off)])
    tmp = d / "samples.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(corpus)):
            split = SPLIT_NAMES[corpus.split[i]] if corpus.split[i] >= 0 else ""
            w.writerow([repr(float(v)) for v in corpus.features[i]]
                       + [repr(float(v)) for v in corpus.aux[i]]
                       + [int(corpus.id_class[i]), repr(float(corpus.position_target[i])),
                          repr(float(corpus.reflectance_target[i])), repr(float(corpus.snr_db[i])),
                          split, int(corpus.window_origin[i]), int(corpus.trace_index[i])]
                       + [repr(float(v)) for v in corpus.event_offsets[i]])
    tmp.replace(d / "samples.csv")
    manifest = dict(corpus.manifest)
    manifest.update({
        "window_len": L,
        "feature_set": list(corpus.feature_set),
        "n_samples": len(corpus),
        "split_counts": corpus.split_counts(),
        "content_hash": corpus.content_hash(),
    })
    mtmp = d / "manifest.json.tmp"
    mtmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    mtmp.replace(d / "manifest.json")
    return d


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    L = int(manifest["window_len"])
    with open(d / "samples.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_off = sum(1 for h in header if h.startswith("event_offset"))
    m = len(body)
    a = len(AUX_NAMES)

    def col(j, typ=float):
        return np.array([typ(r[j]) for r in body], dtype=typ).reshape(m)

    feats = np.array([[float(v) for v in r[:L]] for r in body], dtype=float).reshape(m, L)
    aux = np.array([[float(v) for v in r[L:L + a]] for r in body], dtype=float).reshape(m, a)
    base = L + a
    split = np.array([SPLIT_NAMES.index(r[base + 4]) if r[base + 4] else -1 for r in body], dtype=int)
    offs = np.array([[float(v) for v in r[base + 7:base + 7 + n_off]] for r in body],
                    dtype=float).reshape(m, n_off)
    return Corpus(feats, aux, col(base, int), col(base + 1), col(base + 2), col(base + 5, int),
                  col(base + 3), col(base + 6, int), offs, split,
                  resolve_feature_set(tuple(manifest.get("feature_set", ()))), manifest)
