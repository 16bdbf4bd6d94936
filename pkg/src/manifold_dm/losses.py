"""Training objectives: DSM, normal-boosted DSM, Tango/DSM switch and RSSM.

Each objective is split in two layers. ``*_objective(batch, s)`` takes score
values at the perturbed points and returns ``(loss, dloss/ds)``; this lets
analytic scores be plugged in directly. The model-level wrappers evaluate a
:class:`~manifold_dm.network.ScoreModel` and back-propagate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedMethodError
from .network import rescale_factor
from .noise import perturb_iso, perturb_niso, sigma_inverse_apply

METHODS = ("iso", "niso", "tango", "rssm")


def rescale_method_for(method, rescale):
    if not rescale:
        return "none"
    return {"iso": "iso", "niso": "niso", "tango": "tango", "rssm": "iso"}[method]


def method_constant(method, c_niso, c_tango):
    return {"niso": c_niso, "tango": c_tango}.get(method, 0.0)


def lambda_weight(method, sigma, rescale=False, c=0.0):
    """sigma^2 without rescaling, sigma * w_t with it."""
    sigma = np.asarray(sigma, dtype=float)
    if not rescale:
        return sigma ** 2
    return sigma * rescale_factor(rescale_method_for(method, True), sigma, c)


@dataclass
class LossBatch:
    method: str
    x: np.ndarray
    t: np.ndarray
    sigma: np.ndarray
    x_tilde: np.ndarray
    lam: np.ndarray
    c: float = 0.0
    frame: np.ndarray | None = None      # niso: N at x; rssm: N at x_tilde
    tango_mask: np.ndarray | None = None  # rows trained with the tangential loss
    tango_frame: np.ndarray | None = None  # N at x_tilde for masked rows
    probe: np.ndarray | None = None
    fd_step: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)


def make_batch(method, manifold, x, schedule, rng, *, c_niso=0.0, c_tango=0.0,
               rescale=False, t=None):
    """Draw times and perturbations for clean points ``x`` on the manifold."""
    if method not in METHODS:
        raise UnsupportedMethodError(f"unknown method {method!r}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m = len(x)
    if t is None:
        t = rng.uniform(0.0, schedule.T, size=m)
    t = np.broadcast_to(np.asarray(t, dtype=float), (m,)).copy()
    sigma = schedule.sigma_at(t)
    c = method_constant(method, c_niso, c_tango)
    lam = lambda_weight(method, sigma, rescale, c)
    batch = LossBatch(method, x, t, sigma, None, lam, c=c)
    if method == "iso":
        batch.x_tilde = perturb_iso(x, sigma, rng)
    elif method == "niso":
        batch.frame = manifold.normal_frame(x)
        batch.x_tilde = perturb_niso(manifold, x, sigma, c, rng, frame=batch.frame)
    elif method == "tango":
        batch.x_tilde = perturb_iso(x, sigma, rng)
        mask = sigma < c
        batch.tango_mask = mask
        batch.tango_frame = (manifold.normal_frame(batch.x_tilde[mask]) if np.any(mask)
                             else np.zeros((0, x.shape[1], manifold.codim)))
    else:
        # Baseline protocol stand-in: tangential Gaussian step at sigma_t, then project.
        eps = rng.standard_normal(x.shape)
        step = manifold.tangent_project(x, sigma[:, None] * eps)
        batch.x_tilde = manifold.project(x + step)
        batch.frame = manifold.normal_frame(batch.x_tilde)
        z = rng.standard_normal(x.shape)
        batch.probe = manifold.tangent_project(batch.x_tilde, z, frame=batch.frame)
        batch.fd_step = 1e-4 * (1.0 + np.linalg.norm(batch.x_tilde, axis=1))
    return batch


def _weighted_sq(diff, lam):
    return float(np.sum(lam * np.sum(diff ** 2, axis=1)) / len(diff))


def dsm_target(batch):
    return -(batch.x_tilde - batch.x) / batch.sigma[:, None] ** 2


def niso_target(batch):
    return -sigma_inverse_apply(None, batch.x, batch.sigma, batch.c,
                                batch.x_tilde - batch.x, frame=batch.frame)


def _project_rows(frame, v):
    coef = np.einsum("mnk,mn->mk", frame, v)
    return v - np.einsum("mnk,mk->mn", frame, coef)


def dsm_objective(batch, s):
    diff = s - dsm_target(batch)
    return _weighted_sq(diff, batch.lam), 2.0 * batch.lam[:, None] * diff / len(diff)


def niso_objective(batch, s):
    diff = s - niso_target(batch)
    return _weighted_sq(diff, batch.lam), 2.0 * batch.lam[:, None] * diff / len(diff)


def tango_objective(batch, s):
    """Per-sample switch: DSM where sigma_t >= c_tango, tangential loss below."""
    diff = s - dsm_target(batch)
    mask = batch.tango_mask
    if np.any(mask):
        diff = diff.copy()
        diff[mask] = _project_rows(batch.tango_frame, diff[mask])
    return _weighted_sq(diff, batch.lam), 2.0 * batch.lam[:, None] * diff / len(diff)


def rssm_objective(batch, s0, s_plus, s_minus):
    """|s|^2 + 2 v^T (ds/dx) v with v = P z and a central-difference JVP."""
    v = batch.probe
    h = batch.fd_step[:, None]
    jvp = (s_plus - s_minus) / (2 * h)
    lam = batch.lam
    b = len(s0)
    loss = float(np.sum(lam * (np.sum(s0 ** 2, axis=1) + 2 * np.sum(v * jvp, axis=1))) / b)
    g0 = 2.0 * lam[:, None] * s0 / b
    gp = lam[:, None] * v / (h * b)
    return loss, g0, gp, -gp


def rssm_points(batch):
    h = batch.fd_step[:, None]
    return batch.x_tilde + h * batch.probe, batch.x_tilde - h * batch.probe


_OBJECTIVES = {"iso": dsm_objective, "niso": niso_objective, "tango": tango_objective}


def evaluate_loss(batch, score_fn):
    """Loss value for an arbitrary callable ``score_fn(x, t) -> s``."""
    if batch.method == "rssm":
        xp, xm = rssm_points(batch)
        return rssm_objective(batch, score_fn(batch.x_tilde, batch.t),
                              score_fn(xp, batch.t), score_fn(xm, batch.t))[0]
    return _OBJECTIVES[batch.method](batch, score_fn(batch.x_tilde, batch.t))[0]


def loss_and_grad(model, batch, schedule):
    """``(loss, parameter gradients)`` for the batch's method."""
    if batch.method == "rssm":
        xp, xm = rssm_points(batch)
        pts = np.concatenate([batch.x_tilde, xp, xm])
        s, tape = model.forward(pts, np.tile(batch.t, 3), schedule)
        m = len(batch)
        loss, g0, gp, gm = rssm_objective(batch, s[:m], s[m:2 * m], s[2 * m:])
        return loss, model.backward(tape, np.concatenate([g0, gp, gm]))
    s, tape = model.forward(batch.x_tilde, batch.t, schedule)
    loss, gs = _OBJECTIVES[batch.method](batch, s)
    return loss, model.backward(tape, gs)


def _model_fn(model, schedule):
    return lambda x, t: model.forward(x, t, schedule)[0]


def dsm_loss(model, batch, schedule):
    return dsm_objective(batch, _model_fn(model, schedule)(batch.x_tilde, batch.t))[0]


def niso_loss(model, batch, schedule):
    return niso_objective(batch, _model_fn(model, schedule)(batch.x_tilde, batch.t))[0]


def tango_mixed_loss(model, batch, schedule):
    return tango_objective(batch, _model_fn(model, schedule)(batch.x_tilde, batch.t))[0]


def rssm_loss(model, batch, schedule):
    return evaluate_loss(batch, _model_fn(model, schedule))


def quad_loss_split(s, target, frame, lam=None):
    """Split lam*|s - target|^2 into tangential and normal parts.

    ``frame`` is the normal frame at each evaluation point. Returns
    ``(total, tangential, normal)`` batch means.
    """
    lam = np.ones(len(s)) if lam is None else np.asarray(lam)
    diff = s - target
    tan = _project_rows(frame, diff)
    nor = diff - tan
    return _weighted_sq(diff, lam), _weighted_sq(tan, lam), _weighted_sq(nor, lam)
