"""Rectified-flow transport in a pooled latent space.

The vector field is linear in a fixed feature map of ``(z, t, z_cond)``,
so flow matching has a closed-form ridge solution.  Also here: the toy
latent codec, Euler sampling, beat crops, simulator-guided residual
losses and the linear ECG-to-PPG forward mapper.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import PolynomialFeatures

from .exceptions import DomainError, IntegrationBlowupError, ShapeError, SingularFitError
from .integrate import (
    DEFAULT_WARMUP,
    ECG_FS,
    PPG_FS,
    Waveform,
    euler_residual,
    readout_along,
    simulate,
)
from .peaks import r_peaks
from .simcore import SimParams

DEFAULT_K = 8
DEFAULT_LAMBDA_E = 0.1
DEFAULT_LAMBDA_P = 0.1


# -- codec -----------------------------------------------------------------

class ToyLatentCodec(TransformerMixin, BaseEstimator):
    """Mean-pool encoder with a linear-interpolation decoder.

    ``encode`` averages non-overlapping blocks of ``down_factor`` samples;
    ``decode`` places each latent value at its block center and linearly
    interpolates (extrapolating the end segments) back to full length.
    Affine signals survive ``encode(decode(z))`` exactly; with
    ``down_factor=1`` both maps are the identity.
    """

    def __init__(self, down_factor=20):
        self.down_factor = down_factor

    def _check(self):
        if int(self.down_factor) != self.down_factor or self.down_factor < 1:
            raise DomainError("down_factor must be an integer >= 1")
        return int(self.down_factor)

    def fit(self, X, y=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.encode(X)
        self.n_samples_ = X.shape[-1]
        return self

    def encode(self, x):
        f = self._check()
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        if n % f:
            raise ShapeError(f"length {n} is not a multiple of down_factor {f}")
        return x.reshape(*x.shape[:-1], n // f, f).mean(axis=-1)

    def decode(self, z, length=None):
        f = self._check()
        z = np.asarray(z, dtype=float)
        m = z.shape[-1]
        length = m * f if length is None else int(length)
        if f == 1 and length == m:
            return z.copy()
        if m < 2:
            return np.repeat(z, length, axis=-1)
        centers = np.arange(m) * f + (f - 1) / 2.0
        pos = np.arange(length, dtype=float)
        # segment index per output sample, clamped so ends extrapolate
        k = np.clip(np.floor((pos - centers[0]) / f).astype(int), 0, m - 2)
        w = (pos - centers[k]) / f
        return z[..., k] * (1.0 - w) + z[..., k + 1] * w

    def transform(self, X):
        return self.encode(X)

    def inverse_transform(self, Z):
        return self.decode(Z, getattr(self, "n_samples_", None))


# -- feature map and linear flow -----------------------------------------------

@dataclass(frozen=True)
class FeatureMapSpec:
    """Polynomial features of ``[z, z_cond]`` tensored with a time basis.

    ``kind`` 'affine' is degree 1 and 'quadratic' degree 2; ``degree``
    overrides both.  The time basis is ``1, t, ..., t**time_degree`` plus
    ``1/(1-t)`` when ``inverse_time`` is set.  A constant feature is always
    included.
    """

    kind: str = "affine"
    degree: int | None = None
    time_degree: int = 1
    inverse_time: bool = False
    use_cond: bool = True

    def __post_init__(self):
        if self.kind not in ("affine", "quadratic"):
            raise DomainError(f"kind must be 'affine' or 'quadratic', got {self.kind!r}")
        if self.degree is not None and self.degree < 1:
            raise DomainError("degree must be >= 1")
        if self.time_degree < 0:
            raise DomainError("time_degree must be >= 0")

    @property
    def poly_degree(self):
        if self.degree is not None:
            return int(self.degree)
        return 1 if self.kind == "affine" else 2

    def n_time(self):
        return self.time_degree + 1 + int(self.inverse_time)

    def n_features(self, z_dim, cond_dim=0):
        from math import comb
        d = z_dim + (cond_dim if self.use_cond else 0)
        return comb(d + self.poly_degree, self.poly_degree) * self.n_time()

    def time_basis(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > 1):
            raise DomainError("t must lie in [0, 1]")
        cols = [t ** k for k in range(self.time_degree + 1)]
        if self.inverse_time:
            if np.any(t >= 1):
                raise DomainError("inverse-time features need t < 1")
            cols.append(1.0 / (1.0 - t))
        return np.stack(cols, axis=-1)

    def transform(self, z, t, z_cond=None):
        """Design rows, shape ``(n, n_features)``; ``t`` is scalar or ``(n,)``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        n = len(z)
        parts = [z]
        if self.use_cond and z_cond is not None:
            zc = np.atleast_2d(np.asarray(z_cond, dtype=float))
            if len(zc) != n:
                raise ShapeError("z and z_cond differ in batch size")
            parts.append(zc)
        u = np.concatenate(parts, axis=1)
        poly = PolynomialFeatures(self.poly_degree, include_bias=True).fit_transform(u)
        tb = self.time_basis(np.broadcast_to(np.asarray(t, dtype=float), (n,)))
        return (poly[:, :, None] * tb[:, None, :]).reshape(n, -1)


def interp_path(z0, ze, t):
    """Straight path ``(1 - t) z0 + t ze``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise DomainError("t must lie in [0, 1]")
    z0 = np.asarray(z0, dtype=float)
    ze = np.asarray(ze, dtype=float)
    if z0.shape != ze.shape:
        raise ShapeError(f"shape mismatch {z0.shape} vs {ze.shape}")
    if t_arr.ndim == 1 and z0.ndim == 2:
        t_arr = t_arr[:, None]
    return (1.0 - t_arr) * z0 + t_arr * ze


def _as_batch(*arrays):
    out = [None if a is None else np.atleast_2d(np.asarray(a, dtype=float)) for a in arrays]
    n = len(out[0])
    for a in out[1:]:
        if a is not None and len(a) != n:
            raise ShapeError("inputs differ in batch size")
    return out


def _sample_times(n_pairs, time_samples, seed, times):
    if times is not None:
        times = np.asarray(times, dtype=float)
        return np.tile(times, n_pairs), np.repeat(np.arange(n_pairs), len(times))
    if time_samples < 1:
        raise DomainError("time_samples must be >= 1")
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, 1.0, size=n_pairs * time_samples)
    return t, np.repeat(np.arange(n_pairs), time_samples)


def fit_flow_ridge(z0, ze, z_cond=None, spec: FeatureMapSpec | None = None, ridge=1e-6,
                   time_samples=4, seed=0, times=None):
    """Closed-form flow-matching fit; returns ``(W, design, targets)``.

    Each pair is expanded at ``time_samples`` uniform times (or at the
    explicit ``times`` for every pair).  ``W`` maps features to velocity.
    """
    spec = spec or FeatureMapSpec()
    if ridge < 0:
        raise DomainError("ridge must be >= 0")
    z0, ze, zc = _as_batch(z0, ze, z_cond)
    if z0.shape != ze.shape:
        raise ShapeError(f"shape mismatch {z0.shape} vs {ze.shape}")
    if len(z0) == 0:
        raise ShapeError("empty dataset")
    t, idx = _sample_times(len(z0), time_samples, seed, times)
    zt = interp_path(z0[idx], ze[idx], t)
    phi = spec.transform(zt, t, None if zc is None else zc[idx])
    target = ze[idx] - z0[idx]
    G = phi.T @ phi
    if ridge == 0 and np.linalg.matrix_rank(phi) < phi.shape[1]:
        raise SingularFitError("normal equations are singular; use ridge > 0")
    G[np.diag_indices_from(G)] += ridge
    try:
        W = np.ascontiguousarray(linalg.solve(G, phi.T @ target, assume_a="pos"))
    except linalg.LinAlgError as exc:
        raise SingularFitError("normal equations are singular; use ridge > 0") from exc
    return W, phi, target


class LinearFlowModel(BaseEstimator):
    """Velocity field ``v(z, t, z_cond) = phi(z, t, z_cond) @ W``."""

    def __init__(self, kind="affine", degree=None, time_degree=1, inverse_time=False,
                 use_cond=True, ridge=1e-6, time_samples=4, seed=0, times=None):
        self.kind = kind
        self.degree = degree
        self.time_degree = time_degree
        self.inverse_time = inverse_time
        self.use_cond = use_cond
        self.ridge = ridge
        self.time_samples = time_samples
        self.seed = seed
        self.times = times

    @property
    def spec(self):
        return FeatureMapSpec(self.kind, self.degree, self.time_degree, self.inverse_time, self.use_cond)

    def fit(self, z0, ze, z_cond=None):
        self.W_, _, _ = fit_flow_ridge(z0, ze, z_cond, self.spec, self.ridge,
                                       self.time_samples, self.seed, self.times)
        if not np.all(np.isfinite(self.W_)):
            raise SingularFitError("non-finite weights; increase ridge")
        return self

    def velocity(self, z, t, z_cond=None):
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        zc = None if z_cond is None else np.asarray(z_cond, dtype=float)
        v = self.spec.transform(z, t, zc) @ self.W_
        return v[0] if single else v

    __call__ = velocity

    def to_dict(self):
        return {"params": {k: v for k, v in self.get_params().items()},
                "W_shape": list(self.W_.shape), "W": self.W_.ravel().tolist()}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        m = cls(**doc["params"])
        m.W_ = np.asarray(doc["W"], dtype=float).reshape(doc["W_shape"])
        return m

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _field_fn(field):
    if field is None:
        return lambda z, t, zc: np.zeros_like(z)
    return field.velocity if hasattr(field, "velocity") else field


def rf_loss(model, z0, ze, z_cond=None, t=None):
    """Mean squared velocity error along the straight paths."""
    z0, ze, zc = _as_batch(z0, ze, z_cond)
    if z0.shape != ze.shape:
        raise ShapeError(f"shape mismatch {z0.shape} vs {ze.shape}")
    t = np.broadcast_to(np.asarray(0.5 if t is None else t, dtype=float), (len(z0),))
    v = _field_fn(model)(interp_path(z0, ze, t), t, zc)
    return float(np.mean(np.sum((v - (ze - z0)) ** 2, axis=1)))


def euler_sample(field, z0, z_cond=None, n_steps=DEFAULT_K):
    """Integrate ``dz/dt = v(z, t, z_cond)`` from 0 to 1 in ``n_steps`` Euler steps."""
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    f = _field_fn(field)
    z = np.array(z0, dtype=float)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        z = z + dt * f(z, k * dt, z_cond)
        if not np.all(np.isfinite(z)):
            raise IntegrationBlowupError(f"non-finite state at step {k}", index=k)
    return z


def terminal_estimate(field, z0, z_cond=None, K=DEFAULT_K, codec: ToyLatentCodec | None = None,
                      length=None):
    """Terminal latent after ``K`` Euler steps and its decoded waveform."""
    z = euler_sample(field, z0, z_cond, K)
    codec = codec or ToyLatentCodec()
    return z, codec.decode(z, length)


def gaussian_oracle_velocity(z, t, target_mean=0.0, target_var=1.0):
    """``E[z1 - z0 | z_t = z]`` for ``z0 ~ N(0, 1)`` and independent ``z1 ~ N(m, s2)``.

    Per-dimension joint-Gaussian conditioning:
    ``m + (t s2 - (1 - t)) / ((1 - t)^2 + t^2 s2) * (z - t m)``.
    """
    if not 0.0 <= t < 1.0:
        raise DomainError("t must lie in [0, 1)")
    s2 = np.asarray(target_var, dtype=float)
    if np.any(s2 <= 0):
        raise DomainError("target_var must be positive")
    m = np.asarray(target_mean, dtype=float)
    gain = (t * s2 - (1.0 - t)) / ((1.0 - t) ** 2 + t ** 2 * s2)
    return m + gain * (np.asarray(z, dtype=float) - t * m)


def flow_total(l_rf, l_sim_e, l_sim_p, lambda_e=DEFAULT_LAMBDA_E, lambda_p=DEFAULT_LAMBDA_P):
    vals = (l_rf, l_sim_e, l_sim_p)
    if not all(np.isfinite(v) for v in vals):
        raise DomainError("loss terms must be finite")
    if lambda_e < 0 or lambda_p < 0:
        raise DomainError("lambdas must be non-negative")
    return float(l_rf + lambda_e * l_sim_e + lambda_p * l_sim_p)


# -- beat crops --------------------------------------------------------------

@dataclass(frozen=True)
class BeatCrop:
    samples: np.ndarray
    start: int
    pad_left: int
    pad_right: int

    @property
    def padded(self):
        return bool(self.pad_left or self.pad_right)

    def valid(self):
        """The in-bounds part of the crop."""
        return self.samples[self.pad_left:len(self.samples) - self.pad_right]


def crop_beat(w, anchor, pre=0.2, post=0.6, fs=None):
    """Slice ``[anchor - pre*fs, anchor + post*fs]`` with zero padding at edges."""
    if fs is None and not isinstance(w, Waveform):
        raise DomainError("fs is required when cropping a raw array")
    x, fs = (np.asarray(w.samples), w.fs) if fs is None else (np.asarray(w, float), float(fs))
    if pre < 0 or post < 0:
        raise DomainError("pre and post must be non-negative")
    if not 0 <= anchor < len(x):
        raise DomainError(f"anchor {anchor} out of bounds")
    lo = anchor - int(round(pre * fs))
    hi = anchor + int(round(post * fs)) + 1
    out = np.zeros(hi - lo)
    a, b = max(lo, 0), min(hi, len(x))
    if b <= a:
        raise ShapeError("empty crop")
    out[a - lo:b - lo] = x[a:b]
    return BeatCrop(out, lo, a - lo, hi - b)


# -- forward mapper --------------------------------------------------------------

def _diff_matrix(n):
    return np.diff(np.eye(n), axis=0)


class ForwardMapper(BaseEstimator):
    """Linear map from a rate-matched ECG crop to the PPG crop.

    The ECG crop is decimated by ``stride`` onto the PPG grid.  Weights
    minimise the waveform and first-difference squared errors plus a ridge
    penalty; the intercept is unpenalised.
    """

    def __init__(self, ridge=1e-3, stride=ECG_FS // PPG_FS):
        self.ridge = ridge
        self.stride = stride

    def _inputs(self, ecg):
        x = np.atleast_2d(np.asarray(ecg, dtype=float))
        return x[:, ::self.stride]

    def fit(self, ecg_crops, ppg_crops):
        if not self.ridge > 0:
            raise DomainError("ridge must be positive")
        X = self._inputs(ecg_crops)
        Y = np.atleast_2d(np.asarray(ppg_crops, dtype=float))
        if len(X) != len(Y):
            raise ShapeError("ECG and PPG crop counts differ")
        xm, ym = X.mean(axis=0), Y.mean(axis=0)
        Xc, Yc = X - xm, Y - ym
        D = _diff_matrix(Y.shape[1])
        M = np.eye(Y.shape[1]) + D.T @ D
        # stationarity: Xc'Xc A M + ridge A = Xc'Yc M, diagonalised on both sides
        lam, U = np.linalg.eigh(Xc.T @ Xc)
        sig, V = np.linalg.eigh(M)
        denom = np.clip(lam, 0.0, None)[:, None] * sig[None, :] + self.ridge
        if np.min(denom) <= 1e-12 * max(1.0, float(np.max(denom))):
            raise SingularFitError("mapper normal equations are singular; increase ridge")
        rhs = U.T @ (Xc.T @ Yc @ M) @ V
        self.coef_ = np.ascontiguousarray(U @ (rhs / denom) @ V.T)
        self.intercept_ = ym - xm @ self.coef_
        return self

    def predict(self, ecg):
        ecg = np.asarray(ecg, dtype=float)
        y = self._inputs(ecg) @ self.coef_ + self.intercept_
        return y[0] if ecg.ndim == 1 else y

    def to_dict(self):
        return {"params": self.get_params(), "coef_shape": list(self.coef_.shape),
                "coef": self.coef_.ravel().tolist(), "intercept": self.intercept_.tolist()}

    @classmethod
    def from_dict(cls, doc):
        m = cls(**doc["params"])
        m.coef_ = np.asarray(doc["coef"], dtype=float).reshape(doc["coef_shape"])
        m.intercept_ = np.asarray(doc["intercept"], dtype=float)
        return m


class SimulatorMapper:
    """The group simulator's own PPG readout, used as a reference mapper.

    Integrates the PPG field at the PPG rate along the phase references
    handed over by :func:`sim_guided_losses`.
    """

    def __init__(self, params: SimParams, ppg_fs=PPG_FS):
        self.params = params
        self.ppg_fs = ppg_fs

    def predict_along(self, ecg_crop, phase_refs, t0):
        return readout_along(phase_refs, self.params, "p", 1.0 / self.ppg_fs,
                             self.params.ppg.baseline, t0)


# -- simulator-guided losses ----------------------------------------------------------

@dataclass(frozen=True)
class SimGuidedResult:
    l_sim_e: float
    l_sim_p: float
    anchor: int
    degraded: bool


def _reference_track(params: SimParams, n_window, warmup, fs):
    traj = simulate(params, warmup + n_window / fs, fs)
    w0 = int(round(warmup * fs))
    refs = np.column_stack([traj.x, traj.y])
    sim_ecg = Waveform(traj.e[w0:w0 + n_window], fs)
    return refs, w0, sim_ecg


def sim_guided_losses(x_e, params: SimParams, mapper, pre=0.2, post=0.6, warmup=DEFAULT_WARMUP,
                      ppg_fs=PPG_FS) -> SimGuidedResult:
    """Residual losses of a decoded ECG window and its mapped PPG crop.

    The reference phase track is the group simulator's Euler track at the
    ECG rate; it is aligned so the simulator's R-peak nearest the detected
    R of ``x_e`` coincides with it.  The ECG crop around that R is scored
    against the ECG field; the mapper's PPG crop (stride ``fs/ppg_fs``) is
    scored against the PPG field.
    """
    if not isinstance(x_e, Waveform):
        x_e = Waveform(np.asarray(x_e, dtype=float), ECG_FS)
    fs = x_e.fs
    stride = int(round(fs / ppg_fs))
    n = len(x_e)
    n_pre, n_post = int(round(pre * fs)), int(round(post * fs))
    refs, w0, sim_ecg = _reference_track(params, n, warmup, fs)

    detected = r_peaks(x_e)
    inside = [int(i) for i in detected if i - n_pre >= 0 and i + n_post < n]
    degraded = not inside
    if degraded:
        i_r = n // 2
    else:
        i_r = min(inside, key=lambda i: abs(i - n // 2))
    sim_r = r_peaks(sim_ecg)
    j_r = w0 + (i_r if len(sim_r) == 0 else int(sim_r[np.argmin(np.abs(sim_r - i_r))]))

    crop = crop_beat(x_e, i_r, pre, post)
    lo = crop.start + crop.pad_left
    h_e = crop.valid()
    ref_lo = j_r + (lo - i_r)
    ref_e = refs[ref_lo:ref_lo + len(h_e)]
    dt = 1.0 / fs
    l_e = euler_residual(h_e, ref_e, "e", params, dt, ref_lo * dt).mean_sq

    ref_p = ref_e[::stride]
    if hasattr(mapper, "predict_along"):
        h_p = mapper.predict_along(crop.samples, ref_p, ref_lo * dt)
    else:
        h_p = mapper.predict(crop.samples)
        h_p = np.asarray(h_p, dtype=float)[crop.pad_left // stride:][:len(ref_p)]
    if len(h_p) != len(ref_p):
        raise ShapeError(f"mapped PPG crop has {len(h_p)} samples, expected {len(ref_p)}")
    l_p = euler_residual(h_p, ref_p, "p", params, stride * dt, ref_lo * dt).mean_sq
    return SimGuidedResult(l_e, l_p, i_r, degraded)


def ppg_crop_for(ppg, ecg_anchor, pre=0.2, post=0.6, stride=ECG_FS // PPG_FS, fs=PPG_FS):
    """PPG crop on the grid of the decimated ECG crop; the anchor must be stride-aligned.

    ``fs`` applies to raw arrays; a :class:`Waveform` carries its own rate.
    """
    if ecg_anchor % stride:
        raise DomainError(f"ECG anchor {ecg_anchor} is not a multiple of {stride}")
    if isinstance(ppg, Waveform):
        return crop_beat(ppg, ecg_anchor // stride, pre, post)
    return crop_beat(ppg, ecg_anchor // stride, pre, post, fs)


def reference_ecg(params: SimParams, n_samples=1200, warmup=DEFAULT_WARMUP, fs=ECG_FS):
    """The simulator's own Euler ECG window at the ECG rate."""
    return _reference_track(params, n_samples, warmup, fs)[2]
