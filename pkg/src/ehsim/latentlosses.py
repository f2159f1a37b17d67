"""Network-free autoencoder training losses.

Reductions: KL-type terms sum over latent elements and average over the
batch; batched tensors are ``(B, C, T)``, unbatched ones ``(C, T)`` or any
lower rank.  ``mse`` is a plain elementwise mean.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .exceptions import DomainError, ShapeError
from .simcore import circ_sq_dist, wrap_pi


@dataclass(frozen=True)
class DiagGaussian:
    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        lv = np.asarray(self.logvar, dtype=float)
        if mu.shape != lv.shape:
            raise ShapeError(f"mu {mu.shape} and logvar {lv.shape} differ")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(lv))):
            raise DomainError("posterior parameters must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "logvar", lv)

    @property
    def var(self):
        return np.exp(self.logvar)

    @classmethod
    def standard(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass(frozen=True)
class PaeWeights:
    """Loss weights; ``w_pat`` has no published value (default 1e-2)."""

    w_pat: float = 1e-2
    w_kl: float = 5e-5
    w_gpa: float = 5e-5
    w_lid: float = 1e-3
    w_csd: float = 5e-4

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise DomainError("PAE weights must be non-negative")


def _reduce(elementwise):
    """Sum over latent elements, mean over the batch axis of 3-D tensors."""
    if elementwise.ndim == 3:
        return float(elementwise.reshape(elementwise.shape[0], -1).sum(axis=1).mean())
    return float(elementwise.sum())


def mse(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def kl_to_standard(q: DiagGaussian):
    """KL(q || N(0, I))."""
    return _reduce(0.5 * (q.mu ** 2 + q.var - 1.0 - q.logvar))


def kl_between(q1: DiagGaussian, q2: DiagGaussian):
    """KL(q1 || q2) for diagonal Gaussians."""
    if q1.mu.shape != q2.mu.shape:
        raise ShapeError(f"shape mismatch {q1.mu.shape} vs {q2.mu.shape}")
    el = 0.5 * (q2.logvar - q1.logvar + (q1.var + (q1.mu - q2.mu) ** 2) / q2.var - 1.0)
    return _reduce(el)


def gpa_loss(qe: DiagGaussian, qp: DiagGaussian):
    """Squared mean gap plus the symmetrized KL."""
    if qe.mu.shape != qp.mu.shape:
        raise ShapeError(f"shape mismatch {qe.mu.shape} vs {qp.mu.shape}")
    gap = _reduce((qe.mu - qp.mu) ** 2)
    return gap + 0.5 * (kl_between(qe, qp) + kl_between(qp, qe))


def pool_normalize(z):
    """Temporal mean pool of ``(B, C, T)`` latents, flattened and L2-normalized to ``(B, C)``."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 3:
        raise ShapeError("expected a (B, C, T) latent batch")
    pooled = z.mean(axis=2)
    norms = np.linalg.norm(pooled, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("cannot normalize a zero pooled latent")
    return pooled / norms


def infonce_bidirectional(zp, ze, tau=0.1):
    """Symmetric InfoNCE between matched rows of ``zp`` and ``ze``."""
    zp = np.asarray(zp, dtype=float)
    ze = np.asarray(ze, dtype=float)
    if zp.shape != ze.shape or zp.ndim != 2:
        raise ShapeError("zp and ze must be matching (B, D) arrays")
    if not tau > 0:
        raise DomainError("tau must be positive")
    norms = np.concatenate([np.linalg.norm(zp, axis=1), np.linalg.norm(ze, axis=1)])
    if np.any(norms == 0):
        raise DomainError("rows must be non-zero unit vectors")
    logits = zp @ ze.T / tau
    diag = np.diag(logits)
    p2e = diag - logsumexp(logits, axis=1)
    e2p = diag - logsumexp(logits, axis=0)
    return float(-(p2e.sum() + e2p.sum()) / (2 * len(zp)))


def soft_argmax_time(x, fs, temperature=0.05):
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        raise ShapeError("need at least two samples")
    t = np.arange(len(x)) / fs
    if np.isinf(temperature):
        return float(t.mean())
    return float(np.dot(softmax(x / temperature), t))


def phase_estimate(w, omega, temperature=0.05, fs=None):
    """Soft peak phase ``wrap_pi(omega * t*)`` with a soft-argmax time.

    ``w`` is a :class:`~ehsim.integrate.Waveform` or an array with ``fs``.
    """
    if not omega > 0:
        raise DomainError("omega must be positive")
    if not temperature > 0:
        raise DomainError("temperature must be positive")
    x, fs = (w.samples, w.fs) if fs is None else (w, fs)
    return wrap_pi(omega * soft_argmax_time(x, fs, temperature))


def omega_from_rr(ecg):
    """Angular heart rate from the mean R-R interval of an ECG waveform."""
    from .peaks import r_peaks
    idx = r_peaks(ecg)
    if len(idx) < 2:
        raise DomainError("need at least two R-peaks to estimate omega")
    return 2 * np.pi * ecg.fs / float(np.mean(np.diff(idx)))


def pat_loss(xe_hat: Sequence, xp_hat: Sequence, delta_pat, omega=None, temperature=0.05):
    """Mean circular distance between estimated and simulator phase delays.

    ``omega`` is per sample (or shared); when None it is estimated from
    the R-R intervals of each ECG.
    """
    if len(xe_hat) != len(xp_hat):
        raise ShapeError("ECG and PPG batches differ in size")
    B = len(xe_hat)
    delta = np.broadcast_to(np.asarray(delta_pat, dtype=float), (B,))
    if omega is None:
        om = np.array([omega_from_rr(xe) for xe in xe_hat])
    else:
        om = np.broadcast_to(np.asarray(omega, dtype=float), (B,))
    total = 0.0
    for xe, xp, d, w in zip(xe_hat, xp_hat, delta, om):
        gap = wrap_pi(phase_estimate(xp, w, temperature) - phase_estimate(xe, w, temperature))
        total += circ_sq_dist(gap, d)
    return total / B


def rec_loss(xp_hat, xp, xe_hat, xe):
    """Reconstruction term: per-modality MSE, summed over modalities."""
    return mse(xp_hat, xp) + mse(xe_hat, xe)


def csd_loss(xe_from_p, xe, xp_from_e, xp):
    """Cross-modal decodability: decode each modality from the other's latent."""
    return mse(xe_from_p, xe) + mse(xp_from_e, xp)


PAE_TERMS = ("pat", "rec", "kl", "gpa", "lid", "csd")


def pae_total(terms, weights: PaeWeights | None = None):
    """Weighted aggregate; ``terms`` maps names in ``PAE_TERMS`` to values."""
    w = weights or PaeWeights()
    missing = set(PAE_TERMS) - set(terms)
    if missing:
        raise DomainError(f"missing PAE terms: {sorted(missing)}")
    vals = {k: float(terms[k]) for k in PAE_TERMS}
    if not all(np.isfinite(v) for v in vals.values()):
        raise DomainError("PAE terms must be finite")
    return (w.w_pat * vals["pat"] + vals["rec"] + w.w_kl * vals["kl"] + w.w_gpa * vals["gpa"]
            + w.w_lid * vals["lid"] + w.w_csd * vals["csd"])
