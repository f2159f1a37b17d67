"""Vector fields of the coupled phase / ECG / PPG oscillator.

The cardiac phase lives on a 2-D limit-cycle oscillator.  The ECG and PPG
readouts are driven by sums of phase-locked Gaussian kernels and relax
towards constant baselines.  All functions are pure and broadcast over
numpy arrays.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .exceptions import DomainError

TWO_PI = 2.0 * math.pi

ECG_KEYS = ("P", "Q", "R", "S", "T")
PPG_KEYS = ("foot", "sys", "notch", "dia")


def _require_finite(value, name):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{name} must be finite")


def wrap_pi(angle):
    """Wrap angles into ``[-pi, pi)``.

    Works on scalars and arrays; scalars come back as ``float``.
    """
    a = np.asarray(angle, dtype=float)
    _require_finite(a, "angle")
    out = np.mod(a + math.pi, TWO_PI) - math.pi
    # mod can round up to exactly 2*pi, which lands on +pi
    out = np.where(out >= math.pi, out - TWO_PI, out)
    return float(out) if out.ndim == 0 else out


def circ_sq_dist(a, b):
    """Squared circular distance ``atan2(sin(a-b), cos(a-b))**2``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _require_finite(a, "a")
    _require_finite(b, "b")
    d = np.arctan2(np.sin(a - b), np.cos(a - b)) ** 2
    return float(d) if d.ndim == 0 else d


@dataclass(frozen=True)
class PhaseState:
    """Point of the phase oscillator; ``x`` and ``y`` may be arrays."""

    x: float
    y: float

    def __post_init__(self):
        _require_finite(self.x, "x")
        _require_finite(self.y, "y")

    @property
    def radius(self):
        return np.hypot(self.x, self.y)

    def as_array(self):
        return np.stack([np.asarray(self.x, float), np.asarray(self.y, float)], axis=-1)


def phase(state: PhaseState):
    """Cardiac phase ``atan2(y, x)`` in ``[-pi, pi]``."""
    x = np.asarray(state.x, dtype=float)
    y = np.asarray(state.y, dtype=float)
    if np.any((x == 0.0) & (y == 0.0)):
        raise DomainError("phase is undefined at the origin")
    th = np.arctan2(y, x)
    return float(th) if th.ndim == 0 else th


def phase_velocity(state: PhaseState, omega):
    """Return ``(dx/dt, dy/dt)`` of the limit-cycle oscillator."""
    if not omega > 0:
        raise DomainError(f"omega must be positive, got {omega}")
    x = np.asarray(state.x, dtype=float)
    y = np.asarray(state.y, dtype=float)
    alpha = 1.0 - np.hypot(x, y)
    dx = alpha * x - omega * y
    dy = alpha * y + omega * x
    if dx.ndim == 0:
        return float(dx), float(dy)
    return dx, dy


@dataclass(frozen=True)
class GaussianComponent:
    """One phase-locked kernel: center (rad), amplitude, width (rad)."""

    center: float
    amplitude: float
    width: float

    def __post_init__(self):
        for name in ("center", "amplitude", "width"):
            _require_finite(getattr(self, name), name)
        if not self.width > 0:
            raise DomainError(f"component width must be positive, got {self.width}")
        object.__setattr__(self, "center", wrap_pi(self.center))

    def to_dict(self):
        return {"center": self.center, "amplitude": self.amplitude, "width": self.width}


def _components_from(mapping, keys, label):
    if set(mapping) != set(keys):
        raise DomainError(f"{label} components must be exactly {keys}, got {sorted(mapping)}")
    out = {}
    for k in keys:
        c = mapping[k]
        out[k] = c if isinstance(c, GaussianComponent) else GaussianComponent(**c)
    return out


@dataclass(frozen=True)
class Wander:
    """Optional slow sinusoidal baseline wander (off when amplitude is 0)."""

    amplitude: float = 0.0
    freq: float = 0.0

    def __call__(self, t):
        if self.amplitude == 0.0:
            return 0.0
        return self.amplitude * np.sin(TWO_PI * self.freq * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class EcgParams:
    components: Mapping[str, GaussianComponent]
    baseline: float = 0.0
    wander: Wander = field(default_factory=Wander)

    def __post_init__(self):
        object.__setattr__(self, "components", _components_from(self.components, ECG_KEYS, "ECG"))
        _require_finite(self.baseline, "baseline")

    @property
    def theta_r(self):
        return self.components["R"].center

    def baseline_at(self, t):
        return self.baseline + self.wander(t)

    def ordered(self):
        """True when P < Q < R < S < T after unwrapping around R."""
        rel = [wrap_pi(self.components[k].center - self.theta_r) for k in ECG_KEYS]
        return all(a < b for a, b in zip(rel, rel[1:]))


@dataclass(frozen=True)
class PpgParams:
    components: Mapping[str, GaussianComponent]
    delta_pat: float = 1.5
    lambda_p: float = 1.0
    baseline: float = 0.0
    wander: Wander = field(default_factory=Wander)

    def __post_init__(self):
        object.__setattr__(self, "components", _components_from(self.components, PPG_KEYS, "PPG"))
        _require_finite(self.delta_pat, "delta_pat")
        _require_finite(self.baseline, "baseline")
        d = float(np.mod(self.delta_pat, TWO_PI))
        object.__setattr__(self, "delta_pat", 0.0 if d >= TWO_PI else d)
        if not (np.isfinite(self.lambda_p) and self.lambda_p > 0):
            raise DomainError(f"lambda_p must be positive, got {self.lambda_p}")

    def baseline_at(self, t):
        return self.baseline + self.wander(t)


@dataclass(frozen=True)
class SimParams:
    omega: float
    ecg: EcgParams
    ppg: PpgParams

    def __post_init__(self):
        if not (np.isfinite(self.omega) and self.omega > 0):
            raise DomainError(f"omega must be positive, got {self.omega}")

    @property
    def heart_rate(self):
        """Mean heart rate in beats per minute."""
        return 60.0 * self.omega / TWO_PI

    def replace(self, **changes):
        return replace(self, **changes)

    # -- serialization -------------------------------------------------
    def to_dict(self):
        ecg = {k: c.to_dict() for k, c in self.ecg.components.items()}
        ecg["baseline"] = self.ecg.baseline
        ppg = {k: c.to_dict() for k, c in self.ppg.components.items()}
        ppg.update(delta_pat=self.ppg.delta_pat, lambda_p=self.ppg.lambda_p,
                   baseline=self.ppg.baseline)
        for sub, w in ((ecg, self.ecg.wander), (ppg, self.ppg.wander)):
            if w.amplitude != 0.0:
                sub["wander"] = {"amplitude": w.amplitude, "freq": w.freq}
        return {"omega": self.omega, "ecg": ecg, "ppg": ppg}

    @classmethod
    def from_dict(cls, doc):
        try:
            e = doc["ecg"]
            p = doc["ppg"]
            ecg = EcgParams(
                components={k: e[k] for k in ECG_KEYS},
                baseline=float(e.get("baseline", 0.0)),
                wander=Wander(**e["wander"]) if "wander" in e else Wander(),
            )
            ppg = PpgParams(
                components={k: p[k] for k in PPG_KEYS},
                delta_pat=float(p["delta_pat"]),
                lambda_p=float(p["lambda_p"]),
                baseline=float(p.get("baseline", 0.0)),
                wander=Wander(**p["wander"]) if "wander" in p else Wander(),
            )
            return cls(omega=float(doc["omega"]), ecg=ecg, ppg=ppg)
        except (KeyError, TypeError) as exc:
            raise DomainError(f"malformed SimParams document: {exc!r}") from exc

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _drive(theta, components, offset=0.0):
    """Sum of ``a * d * exp(-d^2 / (2 b^2))`` with wrapped offsets ``d``."""
    theta = np.asarray(theta, dtype=float)
    total = np.zeros_like(theta)
    for c in components.values():
        # inline wrap; inputs are already validated phases
        d = np.mod(theta - offset - c.center + math.pi, TWO_PI) - math.pi
        total += c.amplitude * d * np.exp(-0.5 * (d / c.width) ** 2)
    return total


def ecg_drive(theta, params: EcgParams):
    """Phase-only part of the ECG field (sign included)."""
    return -_drive(theta, params.components)


def ppg_drive(theta, params: PpgParams, theta_r):
    """Phase-only part of the PPG field, delayed by ``theta_r + delta_pat``."""
    return _drive(theta, params.components, offset=theta_r + params.delta_pat)


def ecg_velocity(state: PhaseState, e, t, params: EcgParams):
    """``de/dt``: phase-locked drive minus unit relaxation to the baseline."""
    return ecg_drive(phase(state), params) - (np.asarray(e, float) - params.baseline_at(t))


def ppg_velocity(state: PhaseState, p, t, params: PpgParams, theta_r=None):
    """``dp/dt``: delayed drive minus ``lambda_p`` relaxation to the baseline.

    ``theta_r`` is the ECG R-peak phase; callers holding a full
    :class:`SimParams` should pass ``params.ecg.theta_r``.
    """
    if theta_r is None:
        raise DomainError("theta_r must be supplied (usually SimParams.ecg.theta_r)")
    drive = ppg_drive(phase(state), params, theta_r)
    return drive - params.lambda_p * (np.asarray(p, float) - params.baseline_at(t))


def default_params(heart_rate=60.0) -> SimParams:
    """ECGSYN-style ECG morphology with a four-wave PPG pulse.

    Centers and widths are fixed in phase, so the waveform time-scales with
    the heart rate.
    """
    deg = math.pi / 180.0
    ecg = EcgParams(components={
        "P": GaussianComponent(-70 * deg, 1.2, 0.25),
        "Q": GaussianComponent(-15 * deg, -5.0, 0.1),
        "R": GaussianComponent(0.0, 30.0, 0.1),
        "S": GaussianComponent(15 * deg, -7.5, 0.1),
        "T": GaussianComponent(100 * deg, 0.75, 0.4),
    })
    # PPG drive carries the opposite sign, so a negative amplitude is a bump
    ppg = PpgParams(
        components={
            "foot": GaussianComponent(-0.6, 4.0, 0.3),
            "sys": GaussianComponent(0.0, -8.0, 0.45),
            "notch": GaussianComponent(1.1, 6.0, 0.2),
            "dia": GaussianComponent(1.5, -3.0, 0.45),
        },
        delta_pat=1.5,
        lambda_p=1.0,
    )
    return SimParams(omega=TWO_PI * heart_rate / 60.0, ecg=ecg, ppg=ppg)


def random_params(rng, base: SimParams | None = None, hr_range=(55.0, 95.0)) -> SimParams:
    """Draw a plausible parameter set around ``base``.

    Documented ranges: heart rate uniform in ``hr_range``; centers jittered
    by +/-0.03 rad for Q and S, +/-0.1 rad for P, T and the PPG waves (R fixed); amplitudes scaled
    by U(0.8, 1.2); widths scaled by U(0.85, 1.15); delta_pat U(1.2, 1.8);
    lambda_p U(0.6, 1.5).  ECG component ordering is preserved.
    """
    base = base or default_params()
    rng = np.random.default_rng(rng)

    def jitter(c, dc):
        return GaussianComponent(
            c.center + rng.uniform(-dc, dc),
            c.amplitude * rng.uniform(0.8, 1.2),
            c.width * rng.uniform(0.85, 1.15),
        )

    ecg_dc = {"P": 0.1, "Q": 0.03, "R": 0.0, "S": 0.03, "T": 0.1}
    ecg = EcgParams(
        components={k: jitter(c, ecg_dc[k]) for k, c in base.ecg.components.items()},
        baseline=base.ecg.baseline,
    )
    ppg = PpgParams(
        components={k: jitter(c, 0.1) for k, c in base.ppg.components.items()},
        delta_pat=rng.uniform(1.2, 1.8),
        lambda_p=rng.uniform(0.6, 1.5),
        baseline=base.ppg.baseline,
    )
    omega = TWO_PI * rng.uniform(*hr_range) / 60.0
    return SimParams(omega=omega, ecg=ecg, ppg=ppg)
