"""Variance-exploding noise schedule and the isotropic / normal-boosted kernels.

The normal-boosted kernel has covariance ``sigma^2 I + c^2 N N^T`` where
``c = sigma^alpha`` is held fixed (``c_niso``), so alpha itself is only a
diagnostic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidAlphaError


@dataclass(frozen=True)
class NoiseSchedule:
    """sigma(t) = sigma_min * (sigma_max / sigma_min) ** (t / T)."""

    sigma_min: float = 0.001
    sigma_max: float = 3.0
    T: float = 1.0

    def __post_init__(self):
        if not (self.sigma_min > 0 and self.sigma_max > self.sigma_min and self.T > 0):
            raise ValueError(
                f"need 0 < sigma_min < sigma_max and T > 0, got "
                f"({self.sigma_min}, {self.sigma_max}, {self.T})"
            )

    @property
    def log_ratio(self):
        return math.log(self.sigma_max / self.sigma_min)

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        # Tolerate accumulated round-off on the grid endpoints.
        if np.any(t < -1e-12) or np.any(t > self.T * (1 + 1e-12)):
            raise ValueError(f"t outside [0, {self.T}]")
        return np.clip(t, 0.0, self.T)

    def sigma_at(self, t):
        t = self._check(t)
        return self.sigma_min * np.exp(self.log_ratio * t / self.T)

    def g_squared(self, t):
        """d sigma_t^2 / dt."""
        return 2.0 * self.sigma_at(t) ** 2 * self.log_ratio / self.T

    def time_of_sigma(self, sigma):
        return self.T * np.log(np.asarray(sigma, float) / self.sigma_min) / self.log_ratio


@dataclass(frozen=True)
class NisoParams:
    c_niso: float

    def __post_init__(self):
        if not 0 <= self.c_niso < 1:
            raise ValueError("c_niso must lie in [0, 1)")

    def alpha_at(self, sigma):
        """alpha with sigma^alpha = c_niso; only meaningful for sigma < 1."""
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma >= 1) or np.any(sigma <= 0):
            raise InvalidAlphaError("alpha = log c / log sigma needs 0 < sigma < 1")
        if self.c_niso == 0:
            return np.full_like(sigma, np.inf)
        return np.log(self.c_niso) / np.log(sigma)


def _col(sigma, m):
    s = np.asarray(sigma, dtype=float)
    return np.broadcast_to(s.reshape(-1, 1) if s.ndim else s, (m, 1))


def perturb_iso(x, sigma, rng):
    """x + sigma * eps with eps ~ N(0, I)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    eps = rng.standard_normal(x.shape)
    return x + _col(sigma, len(x)) * eps


def perturb_niso(manifold, x, sigma, c_niso, rng, frame=None):
    """x + sigma * eps1 + c_niso * N(x) eps2.

    ``eps1`` is drawn before ``eps2`` so that, with ``c_niso = 0``, the result is
    identical to :func:`perturb_iso` on the same generator state.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c = c_niso.c_niso if isinstance(c_niso, NisoParams) else float(c_niso)
    eps1 = rng.standard_normal(x.shape)
    out = x + _col(sigma, len(x)) * eps1
    nf = manifold.normal_frame(x) if frame is None else frame
    eps2 = rng.standard_normal((len(x), nf.shape[-1]))
    if c != 0:
        out = out + c * np.einsum("mnk,mk->mn", nf, eps2)
    return out


def sigma_inverse_apply(manifold, x, sigma, alpha_scale, v, frame=None):
    """Apply (sigma^2 I + c^2 N N^T)^{-1} to ``v`` in projector form.

    ``alpha_scale`` is c = sigma^alpha. Tangential directions are scaled by
    1/sigma^2 and normal directions by 1/(sigma^2 + c^2).
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    vb = np.atleast_2d(v)
    s2 = _col(sigma, len(vb)) ** 2
    if np.any(s2 == 0):
        raise ZeroDivisionError("sigma must be positive")
    c = float(alpha_scale)
    if c == 0:
        out = vb / s2
    else:
        nf = manifold.normal_frame(np.atleast_2d(x)) if frame is None else frame
        vn = np.einsum("mnk,mk->mn", nf, np.einsum("mnk,mn->mk", nf, vb))
        out = (vb - vn) / s2 + vn / (s2 + c * c)
    return out[0] if single else out


class SigmaDet(NamedTuple):
    det: float
    logdet: float


def sigma_det(sigma, alpha_scale, n, d):
    """det(sigma^2 I + c^2 N N^T) = sigma^{2d} (sigma^2 + c^2)^{n-d}."""
    s2 = float(sigma) ** 2
    c2 = float(alpha_scale) ** 2
    logdet = d * math.log(s2) + (n - d) * math.log(s2 + c2)
    return SigmaDet(math.exp(logdet), logdet)


def isotropic_target(x, x_tilde, sigma):
    """grad log N(x_tilde; x, sigma^2 I) = -(x_tilde - x) / sigma^2."""
    return -(x_tilde - x) / _col(sigma, len(x_tilde)) ** 2
