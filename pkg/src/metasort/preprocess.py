"""Peak alignment, cropping and z-score normalization of spike waveforms."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

WINDOW = 48
ANCHOR = 16
FLAT_STD = 1e-12


class DegenerateWaveformError(ValueError):
    """Waveform cannot be aligned or normalized (all-zero or flat)."""


@dataclass(frozen=True)
class AlignedSpike:
    samples: np.ndarray
    label: int | None
    peak_index_in_source: int
    mu: float
    sigma: float


def detect_peak(x: np.ndarray) -> int:
    """Index of the largest absolute sample; ties go to the smallest index."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    if not np.any(a > 0):
        raise DegenerateWaveformError("all-zero waveform has no peak")
    return int(np.argmax(a))


def align_and_crop(x: np.ndarray, p: int, window: int = WINDOW, anchor: int = ANCHOR) -> np.ndarray:
    """48-sample window with source sample ``p`` at index ``anchor``.

    Source positions outside ``x`` replicate the nearest edge sample.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= p < len(x):
        raise IndexError(f"peak index {p} outside waveform of length {len(x)}")
    src = np.clip(np.arange(window) + (p - anchor), 0, len(x) - 1)
    return x[src]


def zscore(w: np.ndarray, label: int | None = None, peak_index: int = ANCHOR) -> AlignedSpike:
    w = np.asarray(w, dtype=np.float64)
    mu = float(np.mean(w))
    sigma = float(np.std(w))
    if sigma <= FLAT_STD:
        raise DegenerateWaveformError("flat waveform cannot be z-scored")
    return AlignedSpike((w - mu) / sigma, label, int(peak_index), mu, sigma)


def preprocess_spike(x: np.ndarray, label: int | None = None) -> AlignedSpike:
    p = detect_peak(x)
    return zscore(align_and_crop(x, p), label=label, peak_index=p)


def preprocess_batch(waves: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pipeline over rows of ``waves``.

    Returns ``(windows, peaks, keep)``; rows that are all-zero or flat after
    cropping have ``keep == False`` and zero-filled windows.
    """
    waves = np.asarray(waves, dtype=np.float64)
    n, length = waves.shape
    a = np.abs(waves)
    peaks = np.argmax(a, axis=1)
    keep = np.any(a > 0, axis=1)
    src = np.clip(np.arange(WINDOW)[None, :] + (peaks[:, None] - ANCHOR), 0, length - 1)
    win = np.take_along_axis(waves, src, axis=1)
    mu = win.mean(axis=1, keepdims=True)
    sd = win.std(axis=1, keepdims=True)
    keep &= sd[:, 0] > FLAT_STD
    out = np.zeros_like(win)
    out[keep] = (win[keep] - mu[keep]) / sd[keep]
    return out, peaks, keep


def preprocess_dataset(ds):
    """Return a preprocessed copy of a ``LabelledDataset``, dropping degenerate spikes."""
    if ds.preprocessed:
        return ds
    win, _, keep = preprocess_batch(ds.waveforms)
    return dataclasses.replace(
        ds, waveforms=win[keep], labels=ds.labels[keep], splits=ds.splits[keep], preprocessed=True
    )
