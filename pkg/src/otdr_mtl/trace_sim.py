"""Synthetic OTDR traces with rectangular reflective events.

Traces live in the low-dynamic-range regime: the Rayleigh backscatter is
buried below the noise floor, so a trace is a flat baseline, one rectangle
per reflective event and additive Gaussian noise whose standard deviation
shrinks as ``1 / sqrt(n_avg)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgument

SPEED_OF_LIGHT = 2.9979e8  # m/s
REFERENCE_AMPLITUDE = 1.0  # A_ref, absolute scale is removed by window normalization
SNR_DB_FACTOR = 10.0  # snr_db = SNR_DB_FACTOR * log10(a / sigma)
BASELINE = 0.0
NOISE_TAIL_SAMPLES = 1000


@dataclass(frozen=True)
class AcquisitionConfig:
    fiber_length_m: float
    sampling_interval_m: float = 0.8
    pulse_width_samples: int = 6
    laser_power_dbm: float = 0.0
    attenuation_db: float = 0.0
    n_avg: int = 1
    base_noise_sigma: float = 5e-5
    refractive_index: float = 1.468
    seed: int = 0

    def __post_init__(self):
        for name in ("fiber_length_m", "sampling_interval_m", "laser_power_dbm",
                     "attenuation_db", "base_noise_sigma", "refractive_index"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidArgument(f"{name} must be finite")
        if self.sampling_interval_m <= 0:
            raise InvalidArgument("sampling_interval_m must be > 0")
        if self.pulse_width_samples < 1:
            raise InvalidArgument("pulse_width_samples must be >= 1")
        if self.n_avg < 1:
            raise InvalidArgument("n_avg must be >= 1")
        if self.base_noise_sigma <= 0:
            raise InvalidArgument("base_noise_sigma must be > 0")
        if self.fiber_length_m / self.sampling_interval_m < 2 * self.pulse_width_samples:
            raise InvalidArgument(
                "fiber_length_m / sampling_interval_m must be >= 2 * pulse_width_samples")

    @property
    def n_samples(self) -> int:
        # the epsilon absorbs representation error, e.g. 2000 / 0.8
        return int(math.floor(self.fiber_length_m / self.sampling_interval_m + 1e-9))

    @property
    def noise_sigma(self) -> float:
        """Noise std of the averaged trace."""
        return self.base_noise_sigma / math.sqrt(self.n_avg)


@dataclass(frozen=True)
class EventTruth:
    position_index: int
    position_m: float
    reflectance_db: float
    peak_height: float


@dataclass
class OtdrTrace:
    samples: np.ndarray
    config: AcquisitionConfig
    events: list[EventTruth] = field(default_factory=list)
    snr_db: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


class SnrEstimate(NamedTuple):
    ratio: float
    snr_db: float

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.ratio)


def ratio_to_db(ratio):
    return SNR_DB_FACTOR * np.log10(ratio)


def db_to_ratio(snr_db):
    return 10.0 ** (np.asarray(snr_db, dtype=float) / SNR_DB_FACTOR)


def reflectance_to_peak_height(reflectance_db: float, config: AcquisitionConfig,
                               a_ref: float = REFERENCE_AMPLITUDE) -> float:
    """Linear peak height of an event with the given reflectance.

    The received pulse scales with the reflectance, the launched laser power
    and the attenuation in front of the receiver, all in dB.
    """
    if not math.isfinite(reflectance_db):
        raise InvalidArgument("reflectance_db must be finite")
    if reflectance_db > 0:
        raise InvalidArgument("reflectance_db must be <= 0")
    gain_db = config.laser_power_dbm - config.attenuation_db
    return a_ref * 10.0 ** (reflectance_db / 10.0) * 10.0 ** (gain_db / 10.0)


def _position_index(position_m: float, config: AcquisitionConfig) -> int:
    return int(round(position_m / config.sampling_interval_m))


def synthesize_trace(config: AcquisitionConfig,
                     events: Sequence[tuple[float, float]] = ()) -> OtdrTrace:
    """Simulate one averaged OTDR record.

    ``events`` holds ``(position_m, reflectance_db)`` pairs sorted by position.
    Event starts are snapped to the sampling grid.  Consecutive events need a
    start-to-start separation larger than the pulse width so their rectangles
    stay disjoint.
    """
    n = config.n_samples
    pw = config.pulse_width_samples
    truths: list[EventTruth] = []
    prev = None
    for position_m, reflectance_db in events:
        if not (0.0 < position_m < config.fiber_length_m):
            raise InvalidArgument(f"event position {position_m} m outside (0, fiber_length_m)")
        idx = _position_index(position_m, config)
        if idx + pw > n:
            raise InvalidArgument(f"event at {position_m} m does not fit in the trace")
        if prev is not None:
            if idx < prev:
                raise InvalidArgument("events must be sorted by position")
            if idx - prev <= pw:
                raise InvalidArgument(
                    f"events at indices {prev} and {idx} overlap (pulse width {pw})")
        height = reflectance_to_peak_height(reflectance_db, config)
        truths.append(EventTruth(idx, idx * config.sampling_interval_m, float(reflectance_db), height))
        prev = idx

    samples = np.full(n, BASELINE, dtype=float)
    for ev in truths:
        samples[ev.position_index:ev.position_index + pw] += ev.peak_height
    rng = np.random.default_rng(config.seed)
    sigma = config.noise_sigma
    samples += sigma * rng.standard_normal(n)
    snr = [float(ratio_to_db(ev.peak_height / sigma)) for ev in truths]
    return OtdrTrace(samples, config, truths, snr)


def _samples_of(trace) -> np.ndarray:
    return np.asarray(trace.samples if isinstance(trace, OtdrTrace) else trace, dtype=float)


def estimate_noise_sigma(trace, n: int = NOISE_TAIL_SAMPLES) -> float:
    """Population std of the last ``n`` samples, ``sqrt(<x^2> - <x>^2)``.

    The expression is shift invariant, so it is evaluated on samples centred
    by their mean to avoid cancellation when the baseline dominates.
    """
    x = _samples_of(trace)
    if n < 1 or n > len(x):
        raise InvalidArgument(f"noise window n={n} must be in [1, {len(x)}]")
    tail = x[len(x) - n:]
    d = tail - tail.mean()
    var = np.mean(d * d) - np.mean(d) ** 2
    return float(math.sqrt(max(var, 0.0)))


def estimate_peak_height(trace, position_index: int, pulse_width_samples: int | None = None) -> float:
    """Mean of the two largest samples in ``[p, p + 2 * pulse_width]``."""
    x = _samples_of(trace)
    if pulse_width_samples is None:
        if not isinstance(trace, OtdrTrace):
            raise InvalidArgument("pulse_width_samples required for raw sample arrays")
        pulse_width_samples = trace.config.pulse_width_samples
    stop = position_index + 2 * pulse_width_samples
    if position_index < 0 or stop >= len(x):
        raise InvalidArgument(f"peak window [{position_index}, {stop}] exceeds trace of length {len(x)}")
    window = x[position_index:stop + 1]
    top2 = np.partition(window, len(window) - 2)[-2:]
    return float(top2.mean())


def compute_snr(trace, position_index: int, n_noise: int = NOISE_TAIL_SAMPLES,
                pulse_width_samples: int | None = None) -> SnrEstimate:
    a = estimate_peak_height(trace, position_index, pulse_width_samples)
    sigma = estimate_noise_sigma(trace, n_noise)
    if sigma == 0.0:
        return SnrEstimate(math.inf, math.inf)
    ratio = a / sigma
    snr_db = float(ratio_to_db(ratio)) if ratio > 0 else -math.inf
    return SnrEstimate(ratio, snr_db)


def averaging_time(n_avg, fiber_length_m, refractive_index):
    """Acquisition time of ``n_avg`` round trips over the fiber, in seconds."""
    return 2.0 * n_avg * fiber_length_m * refractive_index / SPEED_OF_LIGHT


# -- trace files -------------------------------------------------------------

TRACE_FORMAT_VERSION = 1


def save_trace(trace: OtdrTrace, path, encoding: str = "f8le") -> Path:
    """Write a trace as one JSON header line followed by the samples.

    ``encoding`` selects the sample block: ``"f8le"`` for raw little-endian
    float64 bytes, ``"csv"`` for one sample per text row.
    """
    if encoding not in ("f8le", "csv"):
        raise InvalidArgument(f"unknown trace encoding {encoding!r}")
    header = {
        "format": "otdr-trace",
        "version": TRACE_FORMAT_VERSION,
        "encoding": encoding,
        "n_samples": len(trace.samples),
        "config": asdict(trace.config),
        "events": [asdict(ev) for ev in trace.events],
        "snr_db": list(trace.snr_db),
    }
    path = Path(path)
    head = (json.dumps(header, sort_keys=True) + "\n").encode()
    if encoding == "f8le":
        body = np.asarray(trace.samples, dtype="<f8").tobytes()
    else:
        body = "".join(f"{v!r}\n" for v in map(float, trace.samples)).encode()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(head + body)
    tmp.replace(path)
    return path


def load_trace(path) -> OtdrTrace:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise InvalidArgument(f"{path}: missing trace header")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"{path}: malformed trace header: {exc}") from exc
    if header.get("format") != "otdr-trace":
        raise InvalidArgument(f"{path}: not a trace file")
    body = raw[nl + 1:]
    n = header["n_samples"]
    if header["encoding"] == "f8le":
        if len(body) != 8 * n:
            raise InvalidArgument(f"{path}: expected {n} samples, found {len(body) // 8}")
        samples = np.frombuffer(body, dtype="<f8").astype(float)
    else:
        samples = np.array([float(v) for v in body.decode().split()], dtype=float)
        if len(samples) != n:
            raise InvalidArgument(f"{path}: expected {n} samples, found {len(samples)}")
    config = AcquisitionConfig(**header["config"])
    events = [EventTruth(**ev) for ev in header["events"]]
    return OtdrTrace(samples, config, events, list(header["snr_db"]))
