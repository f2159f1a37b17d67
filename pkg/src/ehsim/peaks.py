"""Greedy extremum picking with a minimum separation."""
from __future__ import annotations

import numpy as np

from .exceptions import DomainError, ShapeError


def _unpack(w, fs):
    if fs is None:
        return np.asarray(w.samples, dtype=float), float(w.fs)
    return np.asarray(w, dtype=float), float(fs)


def detect_peaks(w, min_distance, polarity="max", height=None, fs=None):
    """Indices of strict local extrema at least ``min_distance`` s apart.

    Conflicts are resolved greedily by magnitude; equal magnitudes keep the
    earlier index.  ``w`` is a :class:`~ehsim.integrate.Waveform`, or a raw
    array when ``fs`` is given.  ``height`` drops extrema below the
    threshold (applied to ``-w`` for ``polarity='min'``).
    """
    x, fs = _unpack(w, fs)
    if len(x) < 3:
        raise ShapeError("peak detection needs at least three samples")
    if not min_distance > 0:
        raise DomainError("min_distance must be positive")
    if polarity == "min":
        x = -x
    elif polarity != "max":
        raise DomainError(f"polarity must be 'max' or 'min', got {polarity!r}")

    cand = np.flatnonzero((x[1:-1] > x[:-2]) & (x[1:-1] > x[2:])) + 1
    if height is not None:
        cand = cand[x[cand] >= height]
    if len(cand) == 0:
        return np.array([], dtype=int)

    dist = min_distance * fs
    # lexsort: primary key descending magnitude, secondary ascending index
    order = cand[np.lexsort((cand, -x[cand]))]
    kept = []
    for i in order:
        if all(abs(i - j) >= dist for j in kept):
            kept.append(int(i))
    return np.array(sorted(kept), dtype=int)


def event_peaks(w, min_distance=0.3, polarity="max", rel_height=0.5, fs=None):
    """Dominant beat events: extrema above ``rel_height`` of the median-to-max span."""
    x, fs = _unpack(w, fs)
    y = -x if polarity == "min" else x
    med = float(np.median(y))
    span = float(np.max(y)) - med
    if span <= 0:
        return np.array([], dtype=int)
    return detect_peaks(x, min_distance, polarity, height=med + rel_height * span, fs=fs)


def _smooth(x, n):
    if n <= 1:
        return x
    return np.convolve(x, np.ones(n) / n, mode="same")


def r_peaks(w, fs=None, min_distance=0.3, rel_height=0.3, search=0.06):
    """R-peak indices located through the QRS slope envelope.

    QRS slopes dominate P/T slopes, so peaks of the smoothed absolute
    derivative mark complexes; the R sample is then the extremum of the
    signal (largest deviation from the median, either polarity) within
    ``search`` seconds.
    """
    x, fs = _unpack(w, fs)
    if len(x) < 3:
        raise ShapeError("peak detection needs at least three samples")
    env = _smooth(np.abs(np.gradient(x)), max(1, int(round(0.04 * fs))))
    top = float(env.max())
    if top <= 0:
        return np.array([], dtype=int)
    marks = detect_peaks(env, min_distance, "max", height=rel_height * top, fs=fs)
    dev = x - np.median(x)
    half = int(round(search * fs))
    out = []
    for m in marks:
        lo, hi = max(0, m - half), min(len(x), m + half + 1)
        out.append(lo + int(np.argmax(np.abs(dev[lo:hi]))))
    out = sorted(set(out))
    # merge candidates closer than the refractory distance, keeping the larger
    kept = []
    for i in out:
        if kept and i - kept[-1] < min_distance * fs:
            if abs(dev[i]) > abs(dev[kept[-1]]):
                kept[-1] = i
        else:
            kept.append(i)
    return np.array(kept, dtype=int)


def systolic_peaks(w, fs=None, min_distance=0.3, rel_height=0.3, search=0.3):
    """Systolic maxima following each steep PPG upstroke."""
    x, fs = _unpack(w, fs)
    if len(x) < 3:
        raise ShapeError("peak detection needs at least three samples")
    up = np.clip(np.gradient(x), 0.0, None)
    top = float(up.max())
    if top <= 0:
        return np.array([], dtype=int)
    marks = detect_peaks(up, min_distance, "max", height=rel_height * top, fs=fs)
    span = int(round(search * fs))
    out = []
    for m in marks:
        hi = min(len(x), m + span + 1)
        seg = x[m:hi]
        # first local maximum after the upstroke, else the segment maximum
        inner = np.flatnonzero((seg[1:-1] >= seg[:-2]) & (seg[1:-1] > seg[2:])) + 1
        out.append(m + int(inner[0] if len(inner) else np.argmax(seg)))
    return np.array(sorted(set(out)), dtype=int)
