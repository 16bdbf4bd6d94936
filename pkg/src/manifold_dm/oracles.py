"""Reference scores used to check the learned and perturbed score fields.

* a closed-form score for the planar Gaussian mixture embedded in R^3;
* quadrature scores of the perturbed density on a circle or a plane patch,
  accumulated in log space;
* power-law fits and the sweeps behind the small-noise scaling checks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import i0e, logsumexp

from .errors import DistanceTooFarError

GRID_MEANS = np.array([(a, b) for a in (-1.0, 0.0, 1.0) for b in (-1.0, 0.0, 1.0)])
GRID_STD = 0.3

# Kernel log-weights below this (before normalization) count as underflow.
_UNDERFLOW = -700.0


# ---------------------------------------------------------------------------
# planar Gaussian mixture
# ---------------------------------------------------------------------------
def _gmm_terms(x_tilde, sigma, means, s, c):
    x = np.atleast_2d(np.asarray(x_tilde, dtype=float))
    means = np.asarray(means, dtype=float)
    var_t = s * s + sigma * sigma
    var_n = sigma * sigma + c * c
    d = x[:, None, :2] - means[None]                       # (m, K, 2)
    logk = (-0.5 * np.sum(d * d, axis=2) / var_t
            - np.log(2 * np.pi * var_t)
            - 0.5 * x[:, None, 2] ** 2 / var_n - 0.5 * np.log(2 * np.pi * var_n))
    return x, d, logk, var_t, var_n


def gmm_plane_log_density(x_tilde, sigma, means=GRID_MEANS, s=GRID_STD, c=0.0):
    """log p_sigma for an equal-weight planar mixture lifted to z = 0.

    Each mode perturbed by N(0, sigma^2 I + c^2 e_z e_z^T) has covariance
    diag(s^2 + sigma^2, s^2 + sigma^2, sigma^2 + c^2).
    """
    x, _, logk, _, _ = _gmm_terms(x_tilde, sigma, means, s, c)
    out = logsumexp(logk, axis=1) - np.log(len(means))
    return out[0] if np.ndim(x_tilde) == 1 else out


def gmm_plane_score(x_tilde, sigma, means=GRID_MEANS, s=GRID_STD, c=0.0):
    x, d, logk, var_t, var_n = _gmm_terms(x_tilde, sigma, means, s, c)
    r = np.exp(logk - logsumexp(logk, axis=1, keepdims=True))
    out = np.empty_like(x)
    out[:, :2] = -np.einsum("mk,mkj->mj", r, d) / var_t
    out[:, 2] = -x[:, 2] / var_n
    return out[0] if np.ndim(x_tilde) == 1 else out


def gmm_2d_log_density(xy, means=GRID_MEANS, s=GRID_STD):
    """In-plane log density of the clean mixture (per unit area)."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    d = xy[:, None, :] - np.asarray(means, dtype=float)[None]
    logk = -0.5 * np.sum(d * d, axis=2) / (s * s) - np.log(2 * np.pi * s * s)
    return logsumexp(logk, axis=1) - np.log(len(means))


def gmm_plane_score_fn(schedule, means=GRID_MEANS, s=GRID_STD, c=0.0):
    """Exact perturbed score as a sampler-compatible callable."""
    def fn(x, t):
        return gmm_plane_score(x, float(schedule.sigma_at(t)), means, s, c)
    return fn


# ---------------------------------------------------------------------------
# densities on verification manifolds
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class VonMises:
    """p0(theta) proportional to exp(kappa cos(theta - mu)), w.r.t. arclength on
    a circle of radius ``radius``."""

    kappa: float = 1.0
    mu: float = 0.0
    radius: float = 1.0

    def log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        # log(2 pi r I0(k)) with the scaled Bessel function to avoid overflow
        lognorm = np.log(2 * np.pi * self.radius * i0e(self.kappa)) + abs(self.kappa)
        return self.kappa * np.cos(theta - self.mu) - lognorm

    def density(self, theta):
        return np.exp(self.log_density(theta))

    def dlog(self, theta):
        """d/dtheta log p0."""
        return -self.kappa * np.sin(np.asarray(theta, dtype=float) - self.mu)

    def sample(self, count, rng):
        return rng.vonmises(self.mu, self.kappa, size=count) if self.kappa > 0 \
            else rng.uniform(-np.pi, np.pi, size=count)


class Nodes(NamedTuple):
    points: np.ndarray      # (K, n)
    log_weights: np.ndarray  # (K,) log(p0 * volume weight)
    normals: np.ndarray     # (K, n, n - d)


class CircleQuadrature:
    """Uniform periodic trapezoid grid on a circle centred at the origin.

    The node count adapts to sigma (``points_per_sigma`` nodes per kernel
    width, at least ``min_nodes``); ``refine`` multiplies it for convergence
    checks.
    """

    ambient_dim = 2
    intrinsic_dim = 1

    def __init__(self, density=None, points_per_sigma=8, min_nodes=4096, refine=1):
        self.density = VonMises() if density is None else density
        self.radius = getattr(self.density, "radius", 1.0)
        self.points_per_sigma = points_per_sigma
        self.min_nodes = min_nodes
        self.refine = refine

    def n_nodes(self, sigma):
        k = max(self.min_nodes, int(np.ceil(2 * np.pi * self.radius * self.points_per_sigma / sigma)))
        return k * self.refine

    def nodes(self, x_tilde, sigma):
        k = self.n_nodes(sigma)
        theta = np.arange(k) * (2 * np.pi / k)
        u = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        logw = self.density.log_density(theta) + np.log(2 * np.pi * self.radius / k)
        return Nodes(self.radius * u, logw, u[:, :, None])

    def log_normalizer_check(self, sigma=0.01):
        nd = self.nodes(None, sigma)
        return float(np.exp(logsumexp(nd.log_weights)))

    def normal_at(self, x):
        x = np.asarray(x, dtype=float)
        return (x / np.linalg.norm(x))[:, None]


class PlanePatchQuadrature:
    """The plane z = 0 in R^3 with a density on [-L, L]^2.

    Nodes form a local tensor grid of half-width ``window * sigma`` around the
    foot of the query, clipped to the patch; the truncated mass is below
    exp(-window^2 / 2).
    """

    ambient_dim = 3
    intrinsic_dim = 2

    def __init__(self, log_density=None, half_width=4.0, points_per_sigma=6, window=12.0,
                 refine=1):
        self.log_density = log_density or gmm_2d_log_density
        self.half_width = half_width
        self.points_per_sigma = points_per_sigma
        self.window = window
        self.refine = refine

    def nodes(self, x_tilde, sigma):
        h = sigma / (self.points_per_sigma * self.refine)
        lo = np.maximum(x_tilde[:2] - self.window * sigma, -self.half_width)
        hi = np.minimum(x_tilde[:2] + self.window * sigma, self.half_width)
        gx = np.arange(lo[0], hi[0] + h / 2, h)
        gy = np.arange(lo[1], hi[1] + h / 2, h)
        xx, yy = np.meshgrid(gx, gy, indexing="ij")
        xy = np.stack([xx.ravel(), yy.ravel()], axis=1)
        pts = np.concatenate([xy, np.zeros((len(xy), 1))], axis=1)
        logw = self.log_density(xy) + 2 * np.log(h)
        normals = np.broadcast_to(np.array([0.0, 0.0, 1.0])[None, :, None], (len(xy), 3, 1))
        return Nodes(pts, logw, normals)

    def normal_at(self, x):
        return np.array([[0.0], [0.0], [1.0]])


def quadrature_score(qm, x_tilde, sigma, c_niso=0.0):
    """grad log p_sigma(x_tilde) by differentiating the quadrature sum.

    With ``c_niso > 0`` the kernel covariance at node x is
    sigma^2 I + c^2 N(x) N(x)^T; its determinant does not depend on x, so it
    cancels in the normalized weights.
    """
    x_tilde = np.asarray(x_tilde, dtype=float)
    if x_tilde.ndim == 2:
        return np.stack([quadrature_score(qm, xt, sigma, c_niso) for xt in x_tilde])
    nd = qm.nodes(x_tilde, sigma)
    d = x_tilde[None] - nd.points
    s2 = sigma * sigma
    if c_niso:
        dn = np.einsum("knj,kn->kj", nd.normals, d)
        vn = np.einsum("knj,kj->kn", nd.normals, dn)
        sinv_d = (d - vn) / s2 + vn / (s2 + c_niso ** 2)
    else:
        sinv_d = d / s2
    quad = -0.5 * np.sum(d * sinv_d, axis=1)
    if quad.max() < _UNDERFLOW:
        raise DistanceTooFarError(
            f"all kernel log-weights below {_UNDERFLOW} (max {quad.max():.1f}); "
            "query too far from the manifold for this sigma")
    lw = nd.log_weights + quad
    r = np.exp(lw - logsumexp(lw))
    return -(r[:, None] * sinv_d).sum(axis=0)


# ---------------------------------------------------------------------------
# decompositions and fits
# ---------------------------------------------------------------------------
def tangential_normal_decompose(manifold, x, v):
    """(P(x) v, (I - P(x)) v)."""
    v = np.asarray(v, dtype=float)
    v_tan = manifold.tangent_project(x, v)
    return v_tan, v - v_tan


class PowerFit(NamedTuple):
    slope: float
    intercept: float
    r2: float


def scale_exponent_fit(sigmas, norms):
    """Least-squares line through (log sigma, log norm)."""
    s = np.asarray(sigmas, dtype=float)
    y = np.asarray(norms, dtype=float)
    if s.size < 4 or s.size != y.size:
        raise ValueError("need at least 4 paired points")
    if np.any(s <= 0) or np.any(y <= 0):
        raise ValueError("sigmas and norms must be positive")
    lx, ly = np.log(s), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return PowerFit(float(slope), float(intercept), float(r2))


def riemannian_score_circle(theta, density, radius=None):
    """Ambient tangential vector of grad^M log p0 at angle theta."""
    theta = np.asarray(theta, dtype=float)
    r = getattr(density, "radius", 1.0) if radius is None else radius
    if hasattr(density, "dlog"):
        dl = density.dlog(theta)
    else:
        h = 1e-5
        p_plus, p_minus = density(theta + h), density(theta - h)
        if np.any(p_plus <= 0) or np.any(p_minus <= 0):
            raise ValueError("density must be positive")
        dl = (np.log(p_plus) - np.log(p_minus)) / (2 * h)
    e_theta = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    return (dl / r)[..., None] * e_theta


def projector_curvature_contraction(projector, x, h=1e-6):
    """sum_{j,j'} dP_{.j}/dx_{j'} (x) P_{jj'}(x) by central differences of ``projector``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    p = projector(x)
    total = np.zeros(n)
    for jp in range(n):
        e = np.zeros(n)
        e[jp] = h
        dp = (projector(x + e) - projector(x - e)) / (2 * h)
        total += dp @ p[:, jp]
    return total


def circle_curvature_contraction(x):
    """Closed form of the contraction for a circle about the origin: -x / |x|^2."""
    x = np.asarray(x, dtype=float)
    return -x / np.dot(x, x)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------
def log_sigmas(lo=-3.0, hi=-1.5, count=6):
    return np.logspace(lo, hi, count)


def normal_scale_sweep(qm, x_tilde, sigmas, c_niso=0.0):
    """Norm of the normal score component at a fixed off-manifold point."""
    nrm = qm.normal_at(x_tilde)
    out = []
    for s in sigmas:
        g = quadrature_score(qm, x_tilde, s, c_niso)
        out.append(float(np.linalg.norm(nrm @ (nrm.T @ g))))
    return np.array(out)


def circle_tangential_errors(qm, thetas, sigmas, c_niso=0.0):
    """max over ``thetas`` of |P grad log p_sigma - grad^M log p0| per sigma."""
    r = qm.radius
    errs = []
    for s in sigmas:
        worst = 0.0
        for th in thetas:
            x = r * np.array([np.cos(th), np.sin(th)])
            g = quadrature_score(qm, x, s, c_niso)
            u = x / r
            g_tan = g - u * (u @ g)
            ref = riemannian_score_circle(th, qm.density, r)
            worst = max(worst, float(np.linalg.norm(g_tan - ref)))
        errs.append(worst)
    return np.array(errs)


def niso_normal_check(qm, x_tilde, foot, sigmas, c_niso):
    """Normal score vs -(x_tilde - x*)_perp / (sigma^2 + c^2), per sigma.

    Returns ``(measured, expected)`` normal components along the frame at ``foot``.
    """
    nrm = qm.normal_at(foot)
    delta = nrm.T @ (np.asarray(x_tilde) - np.asarray(foot))
    measured, expected = [], []
    for s in sigmas:
        g = quadrature_score(qm, x_tilde, s, c_niso)
        measured.append(float((nrm.T @ g)[0]))
        expected.append(float(-delta[0] / (s * s + c_niso ** 2)))
    return np.array(measured), np.array(expected)
