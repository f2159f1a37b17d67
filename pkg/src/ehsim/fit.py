"""Composite simulator fitting with a staged ECG-first curriculum.

The objective mixes waveform MSE, first-difference MSE and event-window
MSE around detected R-peaks / systolic peaks.  Parameters are optimized by
Adam on central-difference gradients in a transformed coordinate system
that keeps every probe feasible (log for positive quantities).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ConfigError, DomainError, FitDivergenceError, IntegrationBlowupError
from .integrate import (
    DEFAULT_FINE_FS,
    DEFAULT_WARMUP,
    ECG_FS,
    PPG_FS,
    Waveform,
    simulate_window,
)
from .peaks import detect_peaks, r_peaks, systolic_peaks
from .simcore import (
    ECG_KEYS,
    PPG_KEYS,
    TWO_PI,
    EcgParams,
    GaussianComponent,
    PpgParams,
    SimParams,
    default_params,
)

log = logging.getLogger(__name__)

__all__ = [
    "FitWeights", "FitConfig", "TargetPair", "LossComponents", "FitResult",
    "detect_peaks", "fit_loss_components", "total_fit_loss", "numeric_gradient",
    "fit_simulator", "fit_groups", "normalize_params", "SimulatorFitter",
]


@dataclass(frozen=True)
class FitWeights:
    w_ecg: float = 5.0
    w_ppg: float = 0.25
    w_deriv: float = 3.0
    w_peak: float = 12.0

    def __post_init__(self):
        if min(self.w_ecg, self.w_ppg, self.w_deriv, self.w_peak) < 0:
            raise ConfigError("fit weights must be non-negative")


@dataclass(frozen=True)
class FitConfig:
    weights: FitWeights = field(default_factory=FitWeights)
    rho_ecg: float = 0.5
    peak_pre: float = 0.20
    peak_post: float = 0.60
    max_iters: int = 200
    step_size: float = 0.01
    fd_eps: float = 1e-4
    # schedule: step size decays by cosine to step_size * final_lr_frac
    final_lr_frac: float = 0.05
    fine_fs: int = DEFAULT_FINE_FS
    warmup_s: float = DEFAULT_WARMUP
    zscore: bool = True
    seed_omega: bool = True
    r_min_distance: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.rho_ecg <= 1.0:
            raise ConfigError("rho_ecg must lie in [0, 1]")
        if self.peak_pre < 0 or self.peak_post < 0:
            raise ConfigError("peak windows must be non-negative")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if not (self.step_size > 0 and self.fd_eps > 0):
            raise ConfigError("step_size and fd_eps must be positive")

    @property
    def n_warmup(self):
        return math.ceil(self.rho_ecg * self.max_iters)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "weights" in doc:
            doc["weights"] = FitWeights(**doc["weights"])
        return cls(**doc)


@dataclass(frozen=True)
class TargetPair:
    ecg: Waveform
    ppg: Waveform
    group_id: str | None = None

    def __post_init__(self):
        tol = max(1.0 / self.ecg.fs, 1.0 / self.ppg.fs)
        if abs(self.ecg.duration - self.ppg.duration) > tol:
            raise DomainError("ECG and PPG durations differ by more than one sample period")

    @property
    def duration(self):
        return self.ecg.duration


def zscore(x):
    x = np.asarray(x, dtype=float)
    sd = x.std()
    return (x - x.mean()) / (sd if sd > 0 else 1.0)


@dataclass(frozen=True)
class LossComponents:
    ecg: float
    ppg: float
    deriv_e: float
    deriv_p: float
    peak_e: float
    peak_p: float
    peak_fallback: bool = False

    @property
    def deriv(self):
        return self.deriv_e + self.deriv_p

    @property
    def peak(self):
        return self.peak_e + self.peak_p

    def as_tuple(self):
        """``(L_ecg, L_ppg, L_deriv, L_peak)``."""
        return (self.ecg, self.ppg, self.deriv, self.peak)


def _window_weights(events, n, pre, post):
    """Concatenated window indices and weights so that sum(w * sq[idx]) is the mean of window MSEs."""
    idx, wts = [], []
    for tau in events:
        lo, hi = max(0, tau - pre), min(n - 1, tau + post)
        win = np.arange(lo, hi + 1)
        idx.append(win)
        wts.append(np.full(len(win), 1.0 / (len(win) * len(events))))
    return np.concatenate(idx), np.concatenate(wts)


class _Target:
    """Target prepared once: normalized arrays, differences and event windows."""

    def __init__(self, target: TargetPair, cfg: FitConfig):
        self.e = zscore(target.ecg.samples) if cfg.zscore else target.ecg.samples.copy()
        self.p = zscore(target.ppg.samples) if cfg.zscore else target.ppg.samples.copy()
        self.fs_e, self.fs_p = target.ecg.fs, target.ppg.fs
        self.de, self.dp = np.diff(self.e), np.diff(self.p)
        self.duration = len(self.e) / self.fs_e
        self.r_peaks = r_peaks(self.e, self.fs_e, cfg.r_min_distance)
        self.s_peaks = systolic_peaks(self.p, self.fs_p, cfg.r_min_distance)
        self.fallback = len(self.r_peaks) == 0 or len(self.s_peaks) == 0
        self.win_e = self.win_p = None
        if len(self.r_peaks):
            self.win_e = _window_weights(self.r_peaks, len(self.e), round(cfg.peak_pre * self.fs_e),
                                         round(cfg.peak_post * self.fs_e))
        if len(self.s_peaks):
            self.win_p = _window_weights(self.s_peaks, len(self.p), round(cfg.peak_pre * self.fs_p),
                                         round(cfg.peak_post * self.fs_p))

    def components(self, sim_e, sim_p):
        re, rp = sim_e - self.e, sim_p - self.p
        sq_e, sq_p = re ** 2, rp ** 2
        pe = float(np.dot(self.win_e[1], sq_e[self.win_e[0]])) if self.win_e else float(sq_e.mean())
        pp = float(np.dot(self.win_p[1], sq_p[self.win_p[0]])) if self.win_p else float(sq_p.mean())
        return LossComponents(
            ecg=float(sq_e.mean()),
            ppg=float(sq_p.mean()),
            deriv_e=float(np.mean((np.diff(sim_e) - self.de) ** 2)),
            deriv_p=float(np.mean((np.diff(sim_p) - self.dp) ** 2)),
            peak_e=pe,
            peak_p=pp,
            peak_fallback=self.fallback,
        )


def _simulate_for(params, prep: _Target, cfg: FitConfig):
    e, p = simulate_window(params, prep.duration, cfg.fine_fs, cfg.warmup_s, prep.fs_e, prep.fs_p)
    e, p = e.samples, p.samples
    if cfg.zscore:
        e, p = zscore(e), zscore(p)
    return e, p


def fit_loss_components(params: SimParams, target: TargetPair, cfg: FitConfig | None = None) -> LossComponents:
    """All four fitting losses (with their ECG/PPG splits) for ``params``.

    With ``cfg.zscore`` both the target and the simulated window are
    z-scored before comparison; otherwise raw values are compared.
    """
    cfg = cfg or FitConfig()
    prep = target if isinstance(target, _Target) else _Target(target, cfg)
    return prep.components(*_simulate_for(params, prep, cfg))


def total_fit_loss(components: LossComponents | Sequence[float], weights: FitWeights | None = None,
                   stage="full"):
    """Weighted objective; ``warmup`` keeps only the ECG-side terms.

    ``components`` may be a :class:`LossComponents` or the plain 4-tuple
    ``(L_ecg, L_ppg, L_deriv, L_peak)``; a tuple carries no ECG/PPG split,
    so in that form ``warmup`` needs a :class:`LossComponents`.
    """
    w = weights or FitWeights()
    if not isinstance(components, LossComponents):
        if stage != "full":
            raise DomainError("warmup needs LossComponents with ECG/PPG splits")
        l_ecg, l_ppg, l_deriv, l_peak = components
        return w.w_ecg * l_ecg + w.w_ppg * l_ppg + w.w_deriv * l_deriv + w.w_peak * l_peak
    c = components
    if stage == "full":
        return w.w_ecg * c.ecg + w.w_ppg * c.ppg + w.w_deriv * c.deriv + w.w_peak * c.peak
    if stage == "warmup":
        return w.w_ecg * c.ecg + w.w_deriv * c.deriv_e + w.w_peak * c.peak_e
    raise DomainError(f"stage must be 'warmup' or 'full', got {stage!r}")


def numeric_gradient(loss_fn: Callable[[np.ndarray], float], theta, fd_eps=1e-4, mask=None, names=None):
    """Central-difference gradient with step ``fd_eps * max(1, |theta_i|)``.

    Coordinates outside ``mask`` are left at zero without probing.
    """
    if not fd_eps > 0:
        raise DomainError("fd_eps must be positive")
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for i in range(len(theta)):
        if mask is not None and not mask[i]:
            continue
        h = fd_eps * max(1.0, abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        try:
            fu, fd = loss_fn(up), loss_fn(dn)
        except IntegrationBlowupError as exc:
            fu = fd = math.nan
            cause = exc
        else:
            cause = None
        if not (math.isfinite(fu) and math.isfinite(fd)):
            label = names[i] if names is not None else str(i)
            raise FitDivergenceError(f"non-finite loss when probing coordinate {label}") from cause
        grad[i] = (fu - fd) / (2.0 * h)
    return grad


# -- parameter transform layer ------------------------------------------

class ParamCodec:
    """Maps :class:`SimParams` to an unconstrained vector and back.

    Layout: log omega; per ECG wave (center, amplitude/scale, log width);
    ECG baseline; per PPG wave likewise; delta_pat; log lambda_p; PPG
    baseline.  Amplitudes are divided by their initial magnitude so every
    coordinate lives on an O(1) scale, and log omega is multiplied by the
    phase accumulated over ``horizon`` seconds so a unit step shifts the
    final beat by about one radian, like a center coordinate.
    """

    def __init__(self, ref: SimParams, horizon=12.0):
        self.omega_scale = ref.omega * horizon
        self.ecg_scale = {k: max(abs(c.amplitude), 1e-12) for k, c in ref.ecg.components.items()}
        self.ppg_scale = {k: max(abs(c.amplitude), 1e-12) for k, c in ref.ppg.components.items()}
        self.base_scale_e = max(abs(ref.ecg.baseline), 1.0)
        self.base_scale_p = max(abs(ref.ppg.baseline), 1.0)
        names = ["log_omega"]
        for k in ECG_KEYS:
            names += [f"ecg.{k}.center", f"ecg.{k}.amplitude", f"ecg.{k}.log_width"]
        names.append("ecg.baseline")
        for k in PPG_KEYS:
            names += [f"ppg.{k}.center", f"ppg.{k}.amplitude", f"ppg.{k}.log_width"]
        names += ["ppg.delta_pat", "ppg.log_lambda_p", "ppg.baseline"]
        self.names = names
        self.ppg_mask = np.array([n.startswith("ppg.") for n in names])

    def encode(self, p: SimParams):
        v = [self.omega_scale * math.log(p.omega)]
        for k in ECG_KEYS:
            c = p.ecg.components[k]
            v += [c.center, c.amplitude / self.ecg_scale[k], math.log(c.width)]
        v.append(p.ecg.baseline / self.base_scale_e)
        for k in PPG_KEYS:
            c = p.ppg.components[k]
            v += [c.center, c.amplitude / self.ppg_scale[k], math.log(c.width)]
        v += [p.ppg.delta_pat, math.log(p.ppg.lambda_p), p.ppg.baseline / self.base_scale_p]
        return np.array(v)

    def decode(self, v) -> SimParams:
        v = list(map(float, v))
        omega = math.exp(v[0] / self.omega_scale)
        i = 1
        ecg = {}
        for k in ECG_KEYS:
            ecg[k] = GaussianComponent(v[i], v[i + 1] * self.ecg_scale[k], math.exp(v[i + 2]))
            i += 3
        e_base = v[i] * self.base_scale_e
        i += 1
        ppg = {}
        for k in PPG_KEYS:
            ppg[k] = GaussianComponent(v[i], v[i + 1] * self.ppg_scale[k], math.exp(v[i + 2]))
            i += 3
        return SimParams(
            omega=omega,
            ecg=EcgParams(ecg, baseline=e_base),
            ppg=PpgParams(ppg, delta_pat=v[i] % TWO_PI, lambda_p=math.exp(v[i + 1]),
                          baseline=v[i + 2] * self.base_scale_p),
        )


def normalize_params(params: SimParams, duration=10.0, fine_fs=DEFAULT_FINE_FS, warmup=DEFAULT_WARMUP):
    """Rescale amplitudes and baselines so the simulated window is z-scored.

    Both readouts are affine in (amplitudes, baseline) when started at the
    baseline, so this is exact for constant baselines.
    """
    e, p = simulate_window(params, duration, fine_fs, warmup)
    me, se = e.samples.mean(), e.samples.std()
    mp, sp = p.samples.mean(), p.samples.std()
    if se == 0 or sp == 0:
        return params
    ecg = EcgParams(
        {k: GaussianComponent(c.center, c.amplitude / se, c.width) for k, c in params.ecg.components.items()},
        baseline=(params.ecg.baseline - me) / se,
        wander=params.ecg.wander,
    )
    ppg = PpgParams(
        {k: GaussianComponent(c.center, c.amplitude / sp, c.width) for k, c in params.ppg.components.items()},
        delta_pat=params.ppg.delta_pat, lambda_p=params.ppg.lambda_p,
        baseline=(params.ppg.baseline - mp) / sp,
        wander=params.ppg.wander,
    )
    return SimParams(params.omega, ecg, ppg)


def _rr_omega(peaks, fs):
    if len(peaks) < 2:
        return None
    rr = np.diff(peaks).mean() / fs
    return TWO_PI / rr


@dataclass
class FitResult:
    params: SimParams
    trace: list
    best_loss: float
    best_iter: int
    n_warmup: int
    peak_fallback: bool = False

    def trace_rows(self):
        cols = ("iter", "stage", "L_ecg", "L_ppg", "L_deriv", "L_peak", "total")
        return [tuple(r[c] for c in cols) for r in self.trace]


def fit_simulator(target: TargetPair, init: SimParams, cfg: FitConfig | None = None) -> FitResult:
    """Staged Adam fit of the simulator to one ECG/PPG pair.

    The first ``ceil(rho_ecg * max_iters)`` iterations minimize the ECG-only
    warm-up objective, the rest the full objective.  Returns the iterate
    with the lowest full objective, rescaled by :func:`normalize_params`
    when ``cfg.zscore`` is set.
    """
    cfg = cfg or FitConfig()
    prep = _Target(target, cfg)
    if prep.fallback:
        log.warning("no events detected in target; peak loss falls back to whole-window MSE")

    def comps_at(params):
        return prep.components(*_simulate_for(params, prep, cfg))

    start = init
    if cfg.seed_omega:
        omega_rr = _rr_omega(prep.r_peaks, prep.fs_e)
        if omega_rr is not None and abs(omega_rr / init.omega - 1) > 1e-6:
            cand = init.replace(omega=omega_rr)
            if total_fit_loss(comps_at(cand), cfg.weights) < total_fit_loss(comps_at(init), cfg.weights):
                start = cand

    codec = ParamCodec(start, cfg.warmup_s + prep.duration)
    theta = codec.encode(start)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    n_warm = cfg.n_warmup
    trace = []
    best = (math.inf, 0, theta.copy())

    def objective(stage):
        def f(th):
            return total_fit_loss(comps_at(codec.decode(th)), cfg.weights, stage)
        return f

    for it in range(cfg.max_iters):
        stage = "warmup" if it < n_warm else "full"
        c = comps_at(codec.decode(theta))
        full = total_fit_loss(c, cfg.weights, "full")
        cur = full if stage == "full" else total_fit_loss(c, cfg.weights, "warmup")
        trace.append({"iter": it, "stage": stage, "L_ecg": c.ecg, "L_ppg": c.ppg,
                      "L_deriv": c.deriv, "L_peak": c.peak, "total": cur})
        if not math.isfinite(cur):
            raise FitDivergenceError(f"loss became non-finite at iteration {it}", trace)
        if full < best[0]:
            best = (full, it, theta.copy())
        mask = ~codec.ppg_mask if stage == "warmup" else None
        g = numeric_gradient(objective(stage), theta, cfg.fd_eps, mask, codec.names)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (it + 1))
        vhat = v / (1 - b2 ** (it + 1))
        frac = it / max(cfg.max_iters - 1, 1)
        lr = cfg.step_size * (cfg.final_lr_frac + (1 - cfg.final_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)

    # the final update is evaluated too, so the last step is never wasted
    c = comps_at(codec.decode(theta))
    full = total_fit_loss(c, cfg.weights, "full")
    if math.isfinite(full) and full < best[0]:
        best = (full, cfg.max_iters, theta.copy())

    params = codec.decode(best[2])
    if cfg.zscore:
        params = normalize_params(params, prep.duration, cfg.fine_fs, cfg.warmup_s)
    return FitResult(params, trace, best[0], best[1], n_warm, prep.fallback)


def medoid_index(ecgs: Sequence[np.ndarray]):
    """Index minimizing the summed ECG MSE to the others (first on ties)."""
    X = np.stack([np.asarray(e, dtype=float) for e in ecgs])
    sq = np.sum(X ** 2, axis=1)
    d = (sq[:, None] + sq[None, :] - 2 * X @ X.T) / X.shape[1]
    return int(np.argmin(d.sum(axis=1)))


def fit_groups(dataset: Sequence[TargetPair], cfg: FitConfig | None = None, init: SimParams | None = None,
               groups: Sequence[str] | None = None):
    """Fit one parameter set per group against the group's medoid pair.

    Returns ``(params_by_group, warnings)``.  Groups listed in ``groups``
    but absent from ``dataset`` are skipped with a warning entry.
    """
    cfg = cfg or FitConfig()
    init = init or default_params()
    by_group: dict = {}
    for rec in dataset:
        if rec.group_id is None:
            raise DomainError("every record must carry a group_id")
        by_group.setdefault(rec.group_id, []).append(rec)
    warnings = []
    names = list(groups) if groups is not None else sorted(by_group)
    out = {}
    for gid in names:
        members = by_group.get(gid, [])
        if not members:
            warnings.append(f"group {gid!r} is empty; skipped")
            log.warning("group %r is empty; skipped", gid)
            continue
        rep = members[medoid_index([zscore(r.ecg.samples) for r in members])]
        out[gid] = fit_simulator(rep, init, cfg).params
    return out, warnings


class SimulatorFitter(BaseEstimator):
    """Estimator wrapper around :func:`fit_simulator`.

    ``fit(ecg, ppg)`` takes 1-D arrays at ``ecg_fs``/``ppg_fs``;
    ``predict()`` returns the fitted simulator's ``(ecg, ppg)`` window.
    """

    def __init__(self, init=None, w_ecg=5.0, w_ppg=0.25, w_deriv=3.0, w_peak=12.0, rho_ecg=0.5,
                 peak_pre=0.20, peak_post=0.60, max_iters=200, step_size=0.01, fd_eps=1e-4,
                 fine_fs=DEFAULT_FINE_FS, ecg_fs=ECG_FS, ppg_fs=PPG_FS):
        self.init = init
        self.w_ecg = w_ecg
        self.w_ppg = w_ppg
        self.w_deriv = w_deriv
        self.w_peak = w_peak
        self.rho_ecg = rho_ecg
        self.peak_pre = peak_pre
        self.peak_post = peak_post
        self.max_iters = max_iters
        self.step_size = step_size
        self.fd_eps = fd_eps
        self.fine_fs = fine_fs
        self.ecg_fs = ecg_fs
        self.ppg_fs = ppg_fs

    def _config(self):
        return FitConfig(
            weights=FitWeights(self.w_ecg, self.w_ppg, self.w_deriv, self.w_peak),
            rho_ecg=self.rho_ecg, peak_pre=self.peak_pre, peak_post=self.peak_post,
            max_iters=self.max_iters, step_size=self.step_size, fd_eps=self.fd_eps,
            fine_fs=self.fine_fs,
        )

    def fit(self, ecg, ppg):
        target = TargetPair(Waveform(ecg, self.ecg_fs), Waveform(ppg, self.ppg_fs))
        res = fit_simulator(target, self.init or default_params(), self._config())
        self.params_ = res.params
        self.trace_ = res.trace
        self.duration_ = target.duration
        return self

    def predict(self, duration=None):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "params_")
        e, p = simulate_window(self.params_, duration or self.duration_, self.fine_fs,
                               DEFAULT_WARMUP, self.ecg_fs, self.ppg_fs)
        return e.samples, p.samples
