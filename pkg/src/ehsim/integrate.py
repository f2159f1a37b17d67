"""Fixed-step explicit Euler integration, modality sampling and residuals.

The phase oscillator does not depend on the readouts, so :func:`simulate`
integrates it once (cached per ``omega``/grid/initial state) and advances
the two affine readouts with a first-order recurrence.  The recurrence is
algebraically the explicit Euler update; :func:`euler_step` is the scalar
reference it is tested against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import lfilter

from .exceptions import ConfigError, DomainError, IntegrationBlowupError, ShapeError
from .simcore import (
    PhaseState,
    SimParams,
    ecg_drive,
    ecg_velocity,
    phase,
    phase_velocity,
    ppg_drive,
    ppg_velocity,
)

BLOWUP_LIMIT = 1e6
ECG_FS = 120
PPG_FS = 40
DEFAULT_FINE_FS = 480
DEFAULT_WARMUP = 2.0
WINDOW_SECONDS = 10.0


@dataclass(frozen=True)
class Grid:
    dt: float
    n: int

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if self.n < 2:
            raise ShapeError("a grid needs at least two samples")

    @property
    def duration(self):
        return self.dt * (self.n - 1)


@dataclass(frozen=True)
class Trajectory:
    """Integrated states on a uniform grid starting at ``t0``."""

    x: np.ndarray
    y: np.ndarray
    e: np.ndarray
    p: np.ndarray
    grid: Grid
    t0: float = 0.0

    @property
    def times(self):
        return self.t0 + self.grid.dt * np.arange(self.grid.n)

    @property
    def states(self):
        return PhaseState(self.x, self.y)

    @property
    def theta(self):
        return phase(self.states)

    def __getitem__(self, sl):
        if not isinstance(sl, slice) or sl.step not in (None, 1):
            raise TypeError("trajectories support contiguous slices only")
        start = 0 if sl.start is None else sl.start
        start = start + self.grid.n if start < 0 else start
        x = self.x[sl]
        return Trajectory(x, self.y[sl], self.e[sl], self.p[sl],
                          Grid(self.grid.dt, len(x)), self.t0 + start * self.grid.dt)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    fs: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or len(s) < 2:
            raise ShapeError("a waveform is a 1-D array of at least two samples")
        if not self.fs > 0:
            raise DomainError("fs must be positive")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.fs

    @property
    def times(self):
        return np.arange(len(self.samples)) / self.fs


@dataclass(frozen=True)
class ResidualSeries:
    values: np.ndarray
    dt: float

    @property
    def max_abs(self):
        return float(np.max(np.abs(self.values)))

    @property
    def mean_sq(self):
        return float(np.mean(self.values ** 2))


def _check_state(name, value, index=None):
    v = np.asarray(value)
    bad = ~np.isfinite(v) | (np.abs(v) > BLOWUP_LIMIT)
    if np.any(bad):
        first = int(np.argmax(bad)) if v.ndim else index
        raise IntegrationBlowupError(
            f"integration blew up in coordinate {name!r} at index {first}",
            index=first, coordinate=name)


def euler_step(state, params: SimParams, t, dt):
    """One fully explicit Euler step of ``(PhaseState, e, p)``."""
    if not dt > 0:
        raise DomainError("dt must be positive")
    s, e, p = state
    dx, dy = phase_velocity(s, params.omega)
    if s.x == 0.0 and s.y == 0.0:
        # the phase is undefined at the fixed point; drives are taken as zero
        de = -(e - params.ecg.baseline_at(t))
        dp = -params.ppg.lambda_p * (p - params.ppg.baseline_at(t))
    else:
        de = float(ecg_velocity(s, e, t, params.ecg))
        dp = float(ppg_velocity(s, p, t, params.ppg, params.ecg.theta_r))
    out = (s.x + dx * dt, s.y + dy * dt, e + de * dt, p + dp * dt)
    for name, v in zip(("x", "y", "e", "p"), out):
        _check_state(name, v)
    return PhaseState(out[0], out[1]), out[2], out[3]


@lru_cache(maxsize=64)
def _phase_track(omega, dt, n, x0, y0):
    xs = np.empty(n)
    ys = np.empty(n)
    x, y = x0, y0
    hypot = math.hypot
    for i in range(n):
        xs[i] = x
        ys[i] = y
        a = 1.0 - hypot(x, y)
        x, y = x + (a * x - omega * y) * dt, y + (a * y + omega * x) * dt
    xs.flags.writeable = False
    ys.flags.writeable = False
    return xs, ys


def phase_track(omega, dt, n, init: PhaseState | None = None):
    """Euler-integrated oscillator states, shape ``(n,)`` each."""
    init = init or PhaseState(1.0, 0.0)
    xs, ys = _phase_track(float(omega), float(dt), int(n), float(init.x), float(init.y))
    _check_state("x", xs)
    _check_state("y", ys)
    return xs, ys


def readout_recurrence(drive, baseline, rate, dt, h0):
    """Advance ``h' = drive - rate * (h - baseline)`` along a fixed drive.

    ``drive`` and ``baseline`` are sampled at the first ``n - 1`` grid
    points (a scalar baseline broadcasts); returns ``n`` samples with
    ``h[0] = h0``.  Equivalent to the explicit Euler recurrence.
    """
    drive = np.asarray(drive, dtype=float)
    u = dt * (drive[:-1] + rate * np.broadcast_to(baseline, drive.shape)[:-1])
    x = np.concatenate(([h0], u))
    return lfilter([1.0], [1.0, -(1.0 - rate * dt)], x)


def _theta(xs, ys):
    if np.any((xs == 0.0) & (ys == 0.0)):
        # only reachable when starting exactly at the fixed point
        th = np.arctan2(ys, xs)
        return np.where((xs == 0.0) & (ys == 0.0), np.nan, th)
    return np.arctan2(ys, xs)


def _drives(params, theta):
    at_origin = np.isnan(theta)
    th = np.where(at_origin, 0.0, theta)
    de = np.where(at_origin, 0.0, ecg_drive(th, params.ecg))
    dp = np.where(at_origin, 0.0, ppg_drive(th, params.ppg, params.ecg.theta_r))
    return de, dp


def simulate(params: SimParams, duration, fine_fs=DEFAULT_FINE_FS, init=None, t0=0.0) -> Trajectory:
    """Integrate the coupled system for ``duration`` seconds.

    ``init`` is ``(PhaseState, e, p)``; defaults to the unit-cycle point
    ``(1, 0)`` with both readouts at their baselines.
    """
    if not duration > 0:
        raise DomainError("duration must be positive")
    if not fine_fs > 0:
        raise DomainError("fine_fs must be positive")
    if init is None:
        init = (PhaseState(1.0, 0.0), params.ecg.baseline_at(t0), params.ppg.baseline_at(t0))
    s0, e0, p0 = init
    for name, v in (("x", s0.x), ("y", s0.y), ("e", e0), ("p", p0)):
        if not np.isfinite(v):
            raise DomainError(f"initial {name} must be finite")
    dt = 1.0 / fine_fs
    n = int(round(duration * fine_fs)) + 1
    xs, ys = phase_track(params.omega, dt, n, s0)
    theta = _theta(xs, ys)
    de, dp = _drives(params, theta)
    t = t0 + dt * np.arange(n)
    e = readout_recurrence(de, params.ecg.baseline_at(t), 1.0, dt, e0)
    p = readout_recurrence(dp, params.ppg.baseline_at(t), params.ppg.lambda_p, dt, p0)
    _check_state("e", e)
    _check_state("p", p)
    return Trajectory(xs, ys, e, p, Grid(dt, n), t0)


def _stride(fine_fs, fs):
    ratio = fine_fs / fs
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9:
        raise ConfigError(f"fine rate {fine_fs} Hz is not a multiple of {fs} Hz")
    return k


def sample_modalities(traj: Trajectory, ecg_fs=ECG_FS, ppg_fs=PPG_FS, drop_last=True):
    """Strided ECG/PPG readouts of a fine trajectory.

    With ``drop_last`` the closing grid point is dropped so a window of
    ``T`` seconds yields ``T * fs`` samples per modality.
    """
    fine_fs = 1.0 / traj.grid.dt
    se, sp = _stride(fine_fs, ecg_fs), _stride(fine_fs, ppg_fs)
    e = traj.e[::se]
    p = traj.p[::sp]
    if drop_last:
        e, p = e[:-1], p[:-1]
    return Waveform(np.array(e), ecg_fs), Waveform(np.array(p), ppg_fs)


def simulate_window(params: SimParams, duration=WINDOW_SECONDS, fine_fs=DEFAULT_FINE_FS,
                    warmup=DEFAULT_WARMUP, ecg_fs=ECG_FS, ppg_fs=PPG_FS):
    """Simulate ``warmup + duration`` seconds and return the sampled window."""
    traj = simulate(params, warmup + duration, fine_fs)
    start = int(round(warmup * fine_fs))
    return sample_modalities(traj[start:], ecg_fs, ppg_fs)


def _as_states(phase_refs):
    if isinstance(phase_refs, PhaseState):
        return np.atleast_1d(np.asarray(phase_refs.x, float)), np.atleast_1d(np.asarray(phase_refs.y, float))
    arr = np.asarray(phase_refs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeError("phase_refs must be a PhaseState or an (n, 2) array")
    return arr[:, 0], arr[:, 1]


def modality_field(params: SimParams, modality):
    """Return ``(drive_fn(theta), rate, baseline_fn(t))`` for ``'e'`` or ``'p'``."""
    if modality == "e":
        return (lambda th: ecg_drive(th, params.ecg)), 1.0, params.ecg.baseline_at
    if modality == "p":
        return ((lambda th: ppg_drive(th, params.ppg, params.ecg.theta_r)),
                params.ppg.lambda_p, params.ppg.baseline_at)
    raise DomainError(f"modality must be 'e' or 'p', got {modality!r}")


def readout_along(phase_refs, params: SimParams, modality, dt, h0, t0=0.0):
    """Euler trajectory of one readout along a prescribed phase track."""
    xs, ys = _as_states(phase_refs)
    drive_fn, rate, base_fn = modality_field(params, modality)
    t = t0 + dt * np.arange(len(xs))
    h = readout_recurrence(drive_fn(phase(PhaseState(xs, ys))), base_fn(t), rate, dt, h0)
    _check_state(modality, h)
    return h


def euler_residual(h, phase_refs, modality, params: SimParams, dt, t0=0.0) -> ResidualSeries:
    """Finite-difference residual of ``h`` against the simulator field.

    ``r[l] = (h[l+1] - h[l]) / dt - f(s[l], h[l], t[l])`` for the first
    ``L - 1`` samples.
    """
    h = np.asarray(h, dtype=float)
    xs, ys = _as_states(phase_refs)
    if h.ndim != 1 or len(h) != len(xs):
        raise ShapeError(f"waveform length {h.shape} does not match {len(xs)} phase states")
    if len(h) < 2:
        raise ShapeError("need at least two samples")
    if not dt > 0:
        raise DomainError("dt must be positive")
    drive_fn, rate, base_fn = modality_field(params, modality)
    t = t0 + dt * np.arange(len(h) - 1)
    th = phase(PhaseState(xs[:-1], ys[:-1]))
    f = drive_fn(th) - rate * (h[:-1] - base_fn(t))
    return ResidualSeries(np.diff(h) / dt - f, dt)


def field_lipschitz(params: SimParams, modality):
    """Lipschitz constant of the readout field in its own state."""
    return modality_field(params, modality)[1]


@dataclass(frozen=True)
class GronwallReport:
    bound: float
    deviation: float

    @property
    def ratio(self):
        if self.bound == 0.0:
            return 0.0 if self.deviation == 0.0 else math.inf
        return self.deviation / self.bound

    @property
    def holds(self):
        return self.deviation <= self.bound


def gronwall_bound(res: ResidualSeries, K, h_generated, params: SimParams, phase_refs,
                   modality="e", t0=0.0) -> GronwallReport:
    """Residual bound ``dt * exp(K T) * sum|r|`` and the observed deviation.

    The deviation is measured against the simulator trajectory started
    from ``h_generated[0]`` along the same phase references.
    """
    h = np.asarray(h_generated, dtype=float)
    if len(res.values) != len(h) - 1:
        raise ShapeError("residual series must have one fewer sample than the waveform")
    dt = res.dt
    T = (len(h) - 1) * dt
    bound = dt * math.exp(K * T) * float(np.sum(np.abs(res.values)))
    ref = readout_along(phase_refs, params, modality, dt, h[0], t0)
    return GronwallReport(bound, float(np.max(np.abs(h - ref))))
