"""Generation: reverse-time SDE with a terminal projection, and the two-stage
annealing sampler whose second stage runs projected Langevin dynamics on the
manifold at each remaining time tick.

A score is any callable ``score_fn(x, t) -> array`` with ``x`` of shape
``(m, n)``. If it carries ``method == "tango"`` the reverse sampler refuses it:
such models never learn the normal component at small noise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ProjectionError, UnsupportedMethodError

log = logging.getLogger(__name__)


@dataclass
class SampleConfig:
    n_steps: int = 500
    n_langevin: int = 10
    alpha_ld: float = 0.01
    sigma_switch: float = 0.2
    n_chains: int = 1000

    def validate(self, schedule=None):
        if self.n_steps < 1 or self.n_langevin < 0 or self.alpha_ld < 0:
            raise ValueError("need n_steps >= 1, n_langevin >= 0, alpha_ld >= 0")
        if schedule is not None and not (
                schedule.sigma_min <= self.sigma_switch <= schedule.sigma_max):
            raise ValueError("sigma_switch must lie in [sigma_min, sigma_max]")


def _initial(schedule, n_chains, dim, rng):
    return schedule.sigma_max * rng.standard_normal((n_chains, dim))


def _em_step(score_fn, schedule, x, t, dt, rng):
    g2 = float(schedule.g_squared(t))
    z = rng.standard_normal(x.shape)
    return x + g2 * score_fn(x, t) * dt + np.sqrt(g2 * dt) * z


def reverse_sde_sample(score_fn, manifold, schedule, cfg, rng, x_init=None, project=True):
    """Euler-Maruyama on dX = -g^2 s dt + g dW from T down to 0, then project once."""
    if getattr(score_fn, "method", None) == "tango":
        raise UnsupportedMethodError("reverse SDE sampling is not applicable to Tango-trained models")
    dim = manifold.ambient_dim if manifold is not None else np.shape(x_init)[1]
    x = _initial(schedule, cfg.n_chains, dim, rng) if x_init is None else np.array(x_init, float)
    dt = schedule.T / cfg.n_steps
    for i in range(cfg.n_steps):
        x = _em_step(score_fn, schedule, x, schedule.T - i * dt, dt, rng)
    if project and manifold is not None:
        x = manifold.project(x)
    return x


def projected_langevin_step(score_fn, manifold, x, t, alpha_ld, rng):
    """x' = x + a P(x) s(x, t) + sqrt(2a) P(x) z, followed by projection.

    Chains whose projection fails are retried once from their pre-step state
    with fresh noise; a second failure aborts with the chain indices.
    """
    frame = manifold.normal_frame(x)
    drift = manifold.tangent_project(x, score_fn(x, t), frame=frame)

    def propose(rows):
        z = manifold.tangent_project(x[rows], rng.standard_normal(x[rows].shape), frame=frame[rows])
        return x[rows] + alpha_ld * drift[rows] + np.sqrt(2 * alpha_ld) * z

    rows = np.arange(len(x))
    x_new = propose(rows)
    try:
        return manifold.project(x_new)
    except ProjectionError as err:
        failed = np.asarray(err.indices, dtype=int)
        ok = np.setdiff1d(rows, failed)
        out = np.empty_like(x_new)
        out[ok] = manifold.project(x_new[ok])
        try:
            out[failed] = manifold.project(propose(failed))
        except ProjectionError as err2:
            bad = failed[np.asarray(err2.indices, dtype=int)]
            raise ProjectionError(
                f"projection failed twice at t={t:.6g} for chains {bad[:10].tolist()}",
                bad, err2.residuals) from err2
        return out


def annealing_sde_sample(score_fn, manifold, schedule, cfg, rng, return_trace=False):
    """Reverse SDE while sigma_t >= sigma_switch, project, then n_langevin
    projected Langevin steps per remaining tick of the same time grid."""
    cfg.validate(schedule)
    x = _initial(schedule, cfg.n_chains, manifold.ambient_dim, rng)
    dt = schedule.T / cfg.n_steps
    i = 0
    while i < cfg.n_steps and schedule.sigma_at(schedule.T - i * dt) >= cfg.sigma_switch:
        x = _em_step(score_fn, schedule, x, schedule.T - i * dt, dt, rng)
        i += 1
    log.debug("annealing sampler: stage 1 ran %d of %d steps", i, cfg.n_steps)
    x = manifold.project(x)
    trace = [x] if return_trace else None
    while i < cfg.n_steps:
        t = schedule.T - i * dt
        for _ in range(cfg.n_langevin):
            x = projected_langevin_step(score_fn, manifold, x, t, cfg.alpha_ld, rng)
            if return_trace:
                trace.append(x)
        i += 1
    return (x, trace) if return_trace else x


def langevin_chain(score_fn, manifold, x0, t, alpha_ld, n_steps, rng):
    """Run projected Langevin at a fixed time for ``n_steps``."""
    x = manifold.project(x0)
    for _ in range(n_steps):
        x = projected_langevin_step(score_fn, manifold, x, t, alpha_ld, rng)
    return x
