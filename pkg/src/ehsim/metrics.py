"""Waveform-fidelity and ECG fiducial metrics.

Delineation thresholds are module constants so reports can cite them.
:func:`oracle_fiducials` derives reference landmarks from the phase-locked
component geometry of a simulated window and is what the delineator is
validated against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from scipy import linalg

from .exceptions import DomainError, ShapeError
from .integrate import DEFAULT_FINE_FS, DEFAULT_WARMUP, ECG_FS, Waveform, simulate
from .peaks import r_peaks
from .simcore import SimParams, TWO_PI

DERIV_FRAC = 0.05       # QRS on/off: |x'| below this fraction of its QRS maximum
AMP_FRAC = 0.10         # P/T on/off: this fraction of the wave amplitude
P_SEARCH = 0.30         # s before R
T_GAP = 0.08            # s after QRS_off
T_REACH = 0.55          # s after R
QRS_REACH = 0.12        # s around R bounding the on/off search
BASELINE_SPAN = 0.30    # s of signal searched for a wave's local baseline
BASELINE_REACH = 3.0    # half-widths from the peak bounding the baseline
J_OFFSET = 0.060        # s after QRS_off
PR_FALLBACK = 0.080     # s before QRS_on when P_off is absent

LANDMARKS = ("P_on", "P_off", "QRS_on", "R", "QRS_off", "T_on", "T_off")
MEASUREMENTS = ("PR", "QRS", "QT", "QTcF", "ST-J60", "P dur.", "T dur.")
WAVEFORM_METRICS = ("MAE", "RMSE", "FD", "HR MAE")


def _pair(a, b):
    a = a.samples if isinstance(a, Waveform) else np.asarray(a, dtype=float)
    b = b.samples if isinstance(b, Waveform) else np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.shape} vs {b.shape}")
    return a, b


def mae(a, b):
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def rmse(a, b):
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def hr_from_peaks(peaks, fs):
    """Mean heart rate (bpm); NaN with fewer than two peaks."""
    peaks = np.asarray(peaks)
    if len(peaks) < 2:
        return math.nan
    return 60.0 * fs / float(np.mean(np.diff(peaks)))


def hr_mae(gen_hr: Sequence[float], ref_hr: Sequence[float]):
    """Mean ``|gen - ref|`` over segments where both rates are defined."""
    g = np.asarray(gen_hr, dtype=float)
    r = np.asarray(ref_hr, dtype=float)
    if g.shape != r.shape:
        raise ShapeError("segment counts differ")
    ok = np.isfinite(g) & np.isfinite(r)
    if not ok.any():
        return math.nan
    return float(np.mean(np.abs(g[ok] - r[ok])))


def frechet_curve_distance(a, b):
    """Discrete Fréchet distance with pointwise cost ``|a_i - b_j|``.

    Filled along anti-diagonals, each of which depends only on the two
    preceding ones.
    """
    a = np.asarray(a.samples if isinstance(a, Waveform) else a, dtype=float)
    b = np.asarray(b.samples if isinstance(b, Waveform) else b, dtype=float)
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ShapeError("curves must be non-empty")
    F = np.full((n, m), np.inf)
    for k in range(n + m - 1):
        i = np.arange(max(0, k - m + 1), min(n, k + 1))
        j = k - i
        d = np.abs(a[i] - b[j])
        if k == 0:
            F[0, 0] = d[0]
            continue
        up = np.where(i > 0, F[np.maximum(i - 1, 0), j], np.inf)
        left = np.where(j > 0, F[i, np.maximum(j - 1, 0)], np.inf)
        diag = np.where((i > 0) & (j > 0), F[np.maximum(i - 1, 0), np.maximum(j - 1, 0)], np.inf)
        F[i, j] = np.maximum(d, np.minimum(np.minimum(up, left), diag))
    return float(F[-1, -1])


def frechet_gaussian_distance(A, B):
    """Fréchet distance between Gaussians fitted to two sample sets (rows)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ShapeError("sample dimensions differ")
    if len(A) < 2 or len(B) < 2:
        raise ShapeError("need at least two samples per set")
    mu = A.mean(axis=0) - B.mean(axis=0)
    ca, cb = np.atleast_2d(np.cov(A, rowvar=False)), np.atleast_2d(np.cov(B, rowvar=False))
    # tr sqrt(ca cb) via the symmetric form sqrt(ca) cb sqrt(ca), stable for rank-deficient covariances
    lam, U = linalg.eigh(ca)
    root = (U * np.sqrt(np.clip(lam, 0.0, None))) @ U.T
    cross = np.sqrt(np.clip(linalg.eigvalsh(root @ cb @ root), 0.0, None)).sum()
    return float(max(mu @ mu + np.trace(ca) + np.trace(cb) - 2.0 * cross, 0.0))


# -- delineation -----------------------------------------------------------------

@dataclass(frozen=True)
class Fiducials:
    """Landmark sample indices of one beat; ``None`` marks an absent landmark."""

    R: int
    P_on: int | None = None
    P_off: int | None = None
    QRS_on: int | None = None
    QRS_off: int | None = None
    T_on: int | None = None
    T_off: int | None = None

    def present(self, name):
        return getattr(self, name) is not None

    def ordered(self):
        """Check ``P_on < P_off <= QRS_on < R < QRS_off <= T_on < T_off`` on present landmarks."""
        seq = [(k, getattr(self, k)) for k in LANDMARKS if getattr(self, k) is not None]
        weak = {("P_off", "QRS_on"), ("QRS_off", "T_on")}
        for (ka, a), (kb, b) in zip(seq, seq[1:]):
            if (ka, kb) in weak:
                if a > b:
                    return False
            elif a >= b:
                return False
        return True

    def as_dict(self):
        return {k: getattr(self, k) for k in LANDMARKS}


def _quiet_edge(active, start, step, limit):
    """Walk from ``start`` by ``step`` until two consecutive inactive samples.

    Returns the first inactive sample adjacent to the active run, or None
    when ``limit`` is reached first.  Single-sample dips inside the
    complex (Q/S troughs) are bridged.
    """
    i = start
    while (i - limit) * step < 0:
        j = i + step
        if not (active[j] or active[min(max(j + step, 0), len(active) - 1)]):
            return j
        i = j
    return None


def _side_baseline(side):
    """Baseline of one flank (``side[0]`` is the peak).

    The minimum within ``BASELINE_REACH`` half-widths of the peak, where the
    half-width is the first half-amplitude crossing against the flank
    minimum.  Scaling with the wave keeps slow drifts of the surrounding
    segment out of the estimate.
    """
    lo = side.min()
    below = np.flatnonzero(side < 0.5 * (side[0] + lo))
    if len(below) == 0:
        return lo
    reach = int(math.ceil(BASELINE_REACH * below[0]))
    return side[:reach + 1].min()


def _wave(x, lo, hi, fs, left_floor, right_ceiling, amp_frac=AMP_FRAC):
    """Peak of a positive wave in ``[lo, hi)`` and its 10%-amplitude edges."""
    lo, hi = max(lo, 1), min(hi, len(x) - 1)
    if hi - lo < 3:
        return None
    seg = x[lo:hi]
    inner = np.flatnonzero((seg[1:-1] > seg[:-2]) & (seg[1:-1] >= seg[2:])) + 1
    if len(inner) == 0:
        return None
    pk = lo + int(inner[np.argmax(seg[inner])])
    span = int(round(BASELINE_SPAN * fs))
    lb = _side_baseline(x[max(left_floor, pk - span):pk + 1][::-1])
    rb = _side_baseline(x[pk:min(right_ceiling, pk + span) + 1])
    if x[pk] <= max(lb, rb):
        return None
    # each edge is measured against the baseline on its own side
    lv = lb + amp_frac * (x[pk] - lb)
    rv = rb + amp_frac * (x[pk] - rb)
    on = pk
    while on > left_floor and x[on] > lv:
        on -= 1
    off = pk
    while off < right_ceiling and x[off] > rv:
        off += 1
    if x[on] > lv or x[off] > rv:
        return None
    # snap to whichever neighbour sits closer to the crossing level
    if abs(x[on + 1] - lv) < abs(x[on] - lv):
        on += 1
    if abs(x[off - 1] - rv) < abs(x[off] - rv):
        off -= 1
    return on, pk, off


def delineate(ecg: Waveform, r_indices=None, deriv_frac=DERIV_FRAC, amp_frac=AMP_FRAC) -> list[Fiducials]:
    """Per-beat landmarks of a z-scored single-lead ECG.

    Inverted complexes are handled by flipping the beat so R is positive.
    """
    x0 = np.asarray(ecg.samples, dtype=float)
    fs = ecg.fs
    if np.ptp(x0) == 0:
        return []
    rs = r_peaks(ecg) if r_indices is None else np.asarray(r_indices, dtype=int)
    if len(rs) == 0:
        return []
    n = len(x0)
    med = float(np.median(x0))
    out = []
    for k, r in enumerate(rs):
        sign = 1.0 if x0[r] >= med else -1.0
        x = sign * (x0 - med)
        d = np.gradient(x)
        reach = int(round(QRS_REACH * fs))
        lo, hi = max(r - reach, 0), min(r + reach, n - 1)
        dmax = np.max(np.abs(d[lo:hi + 1]))
        active = np.abs(d) >= deriv_frac * dmax
        qrs_on = _quiet_edge(active, r, -1, lo)
        qrs_off = _quiet_edge(active, r, 1, hi)

        prev_r = rs[k - 1] if k > 0 else 0
        next_r = rs[k + 1] if k + 1 < len(rs) else n - 1
        p = t = None
        if qrs_on is not None:
            p_lo = r - int(round(P_SEARCH * fs))
            if p_lo > prev_r:
                p = _wave(x, p_lo, qrs_on + 1, fs, prev_r, qrs_on, amp_frac)
        if qrs_off is not None:
            t_lo = qrs_off + int(round(T_GAP * fs))
            t_hi = r + int(round(T_REACH * fs))
            if t_hi < next_r:
                t = _wave(x, t_lo, t_hi + 1, fs, qrs_off, next_r, amp_frac)
        f = Fiducials(
            R=int(r),
            P_on=None if p is None else int(p[0]),
            P_off=None if p is None else int(p[2]),
            QRS_on=None if qrs_on is None else int(qrs_on),
            QRS_off=None if qrs_off is None else int(qrs_off),
            T_on=None if t is None else int(t[0]),
            T_off=None if t is None else int(t[2]),
        )
        if not f.ordered():
            # keep the complex, drop the waves that broke the ordering
            f = Fiducials(R=f.R, QRS_on=f.QRS_on, QRS_off=f.QRS_off)
        out.append(f)
    return out


# -- simulator oracle ----------------------------------------------------------------

def _bump(th, comps):
    total = np.zeros_like(th)
    for c in comps:
        d = np.mod(th - c.center + math.pi, TWO_PI) - math.pi
        total += c.amplitude * c.width ** 2 * np.exp(-0.5 * (d / c.width) ** 2)
    return total


def _slope(th, comps):
    total = np.zeros_like(th)
    for c in comps:
        d = np.mod(th - c.center + math.pi, TWO_PI) - math.pi
        total -= c.amplitude * d * np.exp(-0.5 * (d / c.width) ** 2)
    return total


def geometric_landmarks(params: SimParams, resolution=1e-4):
    """Landmark phases relative to the R component center.

    P and T edges sit at the 10%-amplitude points of their Gaussian bumps;
    QRS edges are the outermost points where the Q/R/S slope magnitude
    reaches 5% of its maximum; R is the extremum of the Q/R/S bump sum.
    """
    comps = params.ecg.components
    tr = params.ecg.theta_r
    qrs = [comps[k] for k in ("Q", "R", "S")]
    rel = np.arange(-math.pi, math.pi, resolution)
    th = tr + rel
    bump = _bump(th, qrs)
    core = np.abs(rel) < 0.6
    sgn = 1.0 if comps["R"].amplitude >= 0 else -1.0
    r_rel = rel[core][np.argmax(sgn * bump[core])]
    slope = np.abs(_slope(th, qrs))
    act = np.flatnonzero(core & (slope >= DERIV_FRAC * slope[core].max()))
    edge = math.sqrt(2.0 * math.log(1.0 / AMP_FRAC))
    out = {"R": r_rel, "QRS_on": rel[act[0]], "QRS_off": rel[act[-1]]}
    for w in ("P", "T"):
        c = comps[w]
        mid = float(np.mod(c.center - tr + math.pi, TWO_PI) - math.pi)
        out[f"{w}_on"] = mid - edge * c.width
        out[f"{w}_off"] = mid + edge * c.width
    return out


def oracle_fiducials(params: SimParams, duration=10.0, warmup=DEFAULT_WARMUP, fine_fs=DEFAULT_FINE_FS,
                     fs=ECG_FS):
    """Simulated ECG window and the geometric landmarks of every full beat.

    Landmark phases are mapped to sample indices through the simulated
    (unwrapped) phase track.
    """
    traj = simulate(params, warmup + duration, fine_fs)
    stride = int(round(fine_fs / fs))
    w0 = int(round(warmup * fine_fs))
    n = int(round(duration * fs))
    idx = w0 + stride * np.arange(n)
    ecg = Waveform(traj.e[idx], fs)
    theta = np.unwrap(np.arctan2(traj.y[idx], traj.x[idx]))
    geo = geometric_landmarks(params)
    tr = params.ecg.theta_r
    k0 = math.ceil((theta[0] - tr) / TWO_PI)
    beats = []
    pos = np.arange(n, dtype=float)
    while tr + TWO_PI * k0 <= theta[-1]:
        base = tr + TWO_PI * k0
        marks = {}
        for name, rel in geo.items():
            target = base + rel
            marks[name] = (int(round(np.interp(target, theta, pos)))
                           if theta[0] <= target <= theta[-1] else None)
        if all(v is not None for v in marks.values()):
            beats.append(Fiducials(**marks))
        k0 += 1
    return ecg, beats


# -- interval measurements -------------------------------------------------------

@dataclass(frozen=True)
class FiducialMeasurements:
    PR: float | None = None
    QRS: float | None = None
    QT: float | None = None
    QTcF: float | None = None
    ST_J60: float | None = None
    P_dur: float | None = None
    T_dur: float | None = None

    def as_report(self):
        """Values keyed by the report column names."""
        return dict(zip(MEASUREMENTS, (getattr(self, f.name) for f in fields(self))))


def qtcf(qt_ms, rr_s):
    """Fridericia-corrected QT."""
    if not rr_s > 0:
        raise DomainError("RR must be positive")
    return qt_ms / rr_s ** (1.0 / 3.0)


def intervals(f: Fiducials, fs, rr_s, st=None) -> FiducialMeasurements:
    """Interval durations in ms; absent landmarks give absent measurements."""
    if not rr_s > 0:
        raise DomainError("RR must be positive")

    def span(a, b):
        va, vb = getattr(f, a), getattr(f, b)
        return None if va is None or vb is None else (vb - va) / fs * 1000.0

    qt = span("QRS_on", "T_off")
    return FiducialMeasurements(
        PR=span("P_on", "QRS_on"),
        QRS=span("QRS_on", "QRS_off"),
        QT=qt,
        QTcF=None if qt is None else qtcf(qt, rr_s),
        ST_J60=st,
        P_dur=span("P_on", "P_off"),
        T_dur=span("T_on", "T_off"),
    )


def st_j60(ecg, f: Fiducials, fs=None):
    """Amplitude 60 ms after QRS_off relative to the PR-segment mean."""
    x, fs = (np.asarray(ecg.samples), ecg.fs) if fs is None else (np.asarray(ecg, float), fs)
    if f.QRS_off is None or f.QRS_on is None:
        return None
    j = f.QRS_off + int(round(J_OFFSET * fs))
    if j >= len(x):
        return None
    if f.P_off is not None and f.P_off <= f.QRS_on:
        seg = x[f.P_off:f.QRS_on + 1]
    else:
        seg = x[max(0, f.QRS_on - int(round(PR_FALLBACK * fs))):f.QRS_on]
    if len(seg) == 0:
        return None
    return float(x[j] - seg.mean())


def measure(ecg: Waveform, beats: Sequence[Fiducials] | None = None, **delineate_kw) -> list[FiducialMeasurements]:
    """Delineate (unless ``beats`` is given) and measure every beat."""
    beats = delineate(ecg, **delineate_kw) if beats is None else beats
    rs = np.array([b.R for b in beats])
    rr = float(np.median(np.diff(rs))) / ecg.fs if len(rs) > 1 else 1.0
    return [intervals(b, ecg.fs, rr, st_j60(ecg, b)) for b in beats]


def pair_beats(gen: Sequence[Fiducials], ref: Sequence[Fiducials], tolerance):
    """Greedy nearest-R pairing within ``tolerance`` samples; unmatched refs pair with None."""
    used = set()
    out = []
    for rb in ref:
        best, dist = None, tolerance + 1
        for i, gb in enumerate(gen):
            dd = abs(gb.R - rb.R)
            if i not in used and dd <= tolerance and dd < dist:
                best, dist = i, dd
        if best is not None:
            used.add(best)
        out.append((None if best is None else gen[best], rb))
    return out


def fiducial_mae(gen: Sequence[FiducialMeasurements | None], ref: Sequence[FiducialMeasurements]):
    """Per-measurement MAE over beats with both sides present, plus coverage.

    ``gen`` and ``ref`` are aligned beat lists; ``None`` on the generated
    side marks an unmatched beat.
    """
    if len(gen) != len(ref):
        raise ShapeError("gen and ref beat lists differ in length")
    table = {}
    for name, field in zip(MEASUREMENTS, (f.name for f in fields(FiducialMeasurements))):
        diffs = []
        for g, r in zip(gen, ref):
            a = None if g is None else getattr(g, field)
            b = getattr(r, field)
            if a is not None and b is not None:
                diffs.append(abs(a - b))
        cover = len(diffs) / len(ref) if ref else 0.0
        table[name] = {"mae": float(np.mean(diffs)) if diffs else None, "coverage": cover}
    return table
