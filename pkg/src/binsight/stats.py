"""Byte histograms, Shannon entropy, packedness and padding heuristics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .binary import RawBinary

DEFAULT_WINDOW = 64
DEFAULT_STRIDE = 64
DEFAULT_MIN_RUN = 4096


@dataclass(frozen=True)
class Histogram256:
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (256,):
            raise ValueError("histogram must have 256 buckets")
        if (counts < 0).any() or counts.sum() < 1:
            raise ValueError("histogram counts must be non-negative with total >= 1")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self):
        return [int(c) for c in self.counts]


@dataclass(frozen=True)
class EntropyProfile:
    window_size: int
    stride: int
    values: np.ndarray

    def to_list(self):
        return [float(v) for v in self.values]


@dataclass(frozen=True)
class PaddingRegion:
    start_offset: int
    length: int
    fill_byte: int

    def to_dict(self):
        return {"start_offset": self.start_offset, "length": self.length, "fill_byte": self.fill_byte}


def _as_array(data) -> np.ndarray:
    if isinstance(data, RawBinary):
        data = data.data
    return np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data


def byte_histogram(binary) -> Histogram256:
    arr = _as_array(binary)
    return Histogram256(np.bincount(arr, minlength=256))


def shannon_entropy(hist: Histogram256) -> float:
    counts = hist.counts[hist.counts > 0].astype(np.float64)
    p = counts / counts.sum()
    h = float(-(p * np.log2(p)).sum())
    # -0.0 and tiny negative rounding for single-bucket inputs
    return min(max(h, 0.0), 8.0)


def uniformity_score(hist: Histogram256) -> float:
    """Normalized entropy in [0, 1]; higher means a flatter byte distribution."""
    return shannon_entropy(hist) / 8.0


def sliding_entropy(binary, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE) -> EntropyProfile:
    """Entropy of each ``window``-byte slice taken every ``stride`` bytes.

    A window larger than the file degrades to a single whole-file window.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    arr = _as_array(binary)
    n = len(arr)
    if window >= n:
        return EntropyProfile(n, stride, np.array([shannon_entropy(byte_histogram(arr))]))
    starts = range(0, n - window + 1, stride)
    values = np.array([shannon_entropy(byte_histogram(arr[s:s + window])) for s in starts])
    return EntropyProfile(window, stride, values)


def _plogp_table(window: int) -> np.ndarray:
    # d[k] = k log2 k - (k-1) log2 (k-1): increment of sum(c log2 c) when a bucket grows to k
    k = np.arange(window + 1, dtype=np.float64)
    clogc = np.zeros_like(k)
    clogc[1:] = k[1:] * np.log2(k[1:])
    d = np.zeros_like(k)
    d[1:] = clogc[1:] - clogc[:-1]
    return d


def windowed_entropy_all(data, window: int = DEFAULT_WINDOW, chunk: int = 1 << 15) -> np.ndarray:
    """Entropy of every length-``window`` slice (stride 1), vectorized.

    Returns an array of length ``max(len - window + 1, 1)``; files shorter
    than the window yield the whole-file entropy.
    """
    arr = _as_array(data)
    n = len(arr)
    if window >= n:
        return np.array([shannon_entropy(byte_histogram(arr))])
    d = _plogp_table(window)
    windows = np.lib.stride_tricks.sliding_window_view(arr, window)
    out = np.empty(len(windows))
    idx = np.arange(window)
    for lo in range(0, len(windows), chunk):
        w = np.sort(windows[lo:lo + chunk], axis=1)
        # rank of each element within its run of equal values (1-based)
        new_run = np.ones(w.shape, dtype=bool)
        new_run[:, 1:] = w[:, 1:] != w[:, :-1]
        run_start = np.maximum.accumulate(np.where(new_run, idx, 0), axis=1)
        rank = idx - run_start + 1
        s = d[rank].sum(axis=1)
        out[lo:lo + chunk] = np.log2(window) - s / window
    return np.clip(out, 0.0, 8.0)


def centered_entropy(data, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Per-byte entropy of the ``window`` bytes centered on each offset.

    Windows are clamped at the file edges so each one stays inside the file.
    """
    arr = _as_array(data)
    n = len(arr)
    values = windowed_entropy_all(arr, window)
    if window >= n:
        return np.full(n, values[0])
    starts = np.clip(np.arange(n) - window // 2, 0, n - window)
    return values[starts]


def detect_padding(binary, min_run: int = DEFAULT_MIN_RUN) -> Optional[PaddingRegion]:
    """Longest trailing run of a single repeated byte, if at least ``min_run`` long."""
    if min_run < 1:
        raise ValueError("min_run must be >= 1")
    arr = _as_array(binary)
    n = len(arr)
    last = arr[-1]
    differs = np.flatnonzero(arr != last)
    start = int(differs[-1]) + 1 if len(differs) else 0
    length = n - start
    if length < min_run:
        return None
    return PaddingRegion(start_offset=start, length=length, fill_byte=int(last))
