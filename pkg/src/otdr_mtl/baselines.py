"""Classical event detectors: two-point least-squares edge test and a rank-1 GLRT scan.

Both detectors come in a vectorized form that scores a stack of windows
``(M, L)`` at once and returns ``(statistic, position)`` arrays, plus a
single-window form that applies a threshold and returns a DetectorDecision.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CalibrationFailure, InvalidArgument

# residual energy below this fraction of the window energy counts as an exact fit
EXACT_FIT_RTOL = 1e-12


@dataclass(frozen=True)
class DetectorDecision:
    detected: bool
    position_index: int | None
    statistic: float
    threshold: float


def _as_stack(windows) -> np.ndarray:
    x = np.asarray(windows, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def two_point_statistic(windows, fit_half_width: int = 5):
    """Largest normalized rising jump between left and right least-squares lines.

    For each split ``k`` a line is fitted to ``x[k-h:k]`` and another to
    ``x[k:k+h]``; both are evaluated at the boundary between samples ``k-1``
    and ``k``.  The jump is divided by the pooled residual std of the two fits.
    Returns the max over splits and the split index (the event start).
    """
    x = _as_stack(windows)
    h = int(fit_half_width)
    L = x.shape[1]
    if h < 3:
        raise InvalidArgument("fit_half_width must be >= 3 to leave residual degrees of freedom")
    if L < 2 * h + 1:
        raise InvalidArgument(f"window length {L} < 2 * fit_half_width + 1")
    arms = sliding_window_view(x, h, axis=1)  # (M, L-h+1, h); arm starting at s
    u = np.arange(h) - (h - 1) / 2.0
    suu = float(u @ u)
    mean = arms.mean(axis=2)
    dev = arms - mean[..., None]
    slope = dev @ u / suu
    ssr = np.maximum(np.einsum("msh,msh->ms", dev, dev) - slope * slope * suu, 0.0)
    # split k: left arm starts at k-h, right arm at k, for k = h .. L-h
    left = slice(0, L - 2 * h + 1)
    right = slice(h, L - h + 1)
    half = h / 2.0
    jump = (mean[:, right] - half * slope[:, right]) - (mean[:, left] + half * slope[:, left])
    pooled = (ssr[:, left] + ssr[:, right]) / (2 * h - 4)
    energy = np.einsum("ml,ml->m", x - x.mean(axis=1, keepdims=True),
                       x - x.mean(axis=1, keepdims=True))[:, None] / L
    exact = pooled <= EXACT_FIT_RTOL * np.maximum(energy, np.finfo(float).tiny)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(exact, np.where(jump > 0, np.inf, 0.0), jump / np.sqrt(pooled))
    k = np.argmax(stat, axis=1)
    return stat[np.arange(len(x)), k], k + h


def r1msde_statistic(windows, pulse_width_samples: int = 6):
    """Rank-1 GLRT energy ratio scanned over every rectangle placement.

    The window is mean-removed and each candidate rectangle is projected
    onto the zero-mean subspace before normalization, so the statistic is
    invariant to offset and positive scale.  ``T_k = p_k^2 / (|x|^2 - p_k^2)``
    where ``p_k`` is the projection onto template ``k``.
    """
    x = _as_stack(windows)
    L = x.shape[1]
    w = int(pulse_width_samples)
    if w < 1 or L < w:
        raise InvalidArgument(f"window length {L} < pulse_width_samples {w}")
    if w == L:
        return np.zeros(len(x)), np.zeros(len(x), dtype=int)
    xt = x - x.mean(axis=1, keepdims=True)
    energy = np.einsum("ml,ml->m", xt, xt)[:, None]
    csum = np.concatenate([np.zeros((len(x), 1)), np.cumsum(xt, axis=1)], axis=1)
    sums = csum[:, w:] - csum[:, :-w]  # (M, L-w+1)
    proj2 = sums * sums / (w * (1.0 - w / L))
    resid = energy - proj2
    exact = resid <= EXACT_FIT_RTOL * energy
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(energy == 0, 0.0, np.where(exact, np.inf, proj2 / resid))
    k = np.argmax(stat, axis=1)
    return stat[np.arange(len(x)), k], k


def _decide(stat: float, pos: int, threshold: float) -> DetectorDecision:
    detected = bool(stat > threshold)
    return DetectorDecision(detected, int(pos) if detected else None, float(stat), float(threshold))


def two_point_detect(window, fit_half_width: int = 5, threshold: float = 0.0) -> DetectorDecision:
    stat, pos = two_point_statistic(window, fit_half_width)
    return _decide(stat[0], pos[0], threshold)


def r1msde_detect(window, pulse_width_samples: int = 6, threshold: float = 0.0) -> DetectorDecision:
    stat, pos = r1msde_statistic(window, pulse_width_samples)
    return _decide(stat[0], pos[0], threshold)


def gaussian_noise_windows(n_windows: int, window_len: int, seed: int = 0,
                           sigma: float = 1.0) -> np.ndarray:
    """Event-free windows under the simulator's noise model (flat baseline, white noise)."""
    return sigma * np.random.default_rng(seed).standard_normal((n_windows, window_len))


def calibrate_threshold(detector: Callable, noise_window_source: Callable, target_pfa: float,
                        n_windows: int, seed: int = 0) -> float:
    """Empirical ``1 - target_pfa`` quantile of the detector statistic on pure noise.

    ``detector(windows)`` returns statistics (or ``(statistic, position)``);
    ``noise_window_source(n_windows, seed)`` returns an ``(n, L)`` stack.
    """
    if not 0.0 < target_pfa < 1.0:
        raise InvalidArgument("target_pfa must lie in (0, 1)")
    if n_windows < 100.0 / target_pfa:
        raise InvalidArgument(f"n_windows must be >= 100 / target_pfa = {100.0 / target_pfa:g}")
    stats = detector(noise_window_source(n_windows, seed))
    if isinstance(stats, tuple):
        stats = stats[0]
    stats = np.asarray(stats, dtype=float)
    if np.all(stats == stats[0]):
        raise CalibrationFailure("detector statistic is constant on the noise windows")
    return float(np.quantile(stats, 1.0 - target_pfa))
