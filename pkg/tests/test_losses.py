import numpy as np
import pytest

from manifold_dm.errors import UnsupportedMethodError
from manifold_dm.losses import (LossBatch, dsm_loss, dsm_objective, evaluate_loss,
                                lambda_weight, loss_and_grad, make_batch, niso_loss,
                                niso_objective, quad_loss_split, rssm_objective, rssm_points,
                                tango_objective)
from manifold_dm.manifold import Hyperplane, Sphere
from manifold_dm.network import ScoreModel
from manifold_dm.noise import NoiseSchedule

SCHED = NoiseSchedule(0.001, 3.0, 1.0)
PLANE = Hyperplane()


def plane_points(m, rng):
    return np.concatenate([rng.standard_normal((m, 2)), np.zeros((m, 1))], axis=1)


def test_lambda_weights():
    assert np.isclose(lambda_weight("iso", 0.5), 0.25)
    assert np.isclose(lambda_weight("iso", 0.37, rescale=True), 0.37 ** 2)
    assert np.isclose(lambda_weight("tango", 0.001, rescale=True, c=0.2), 2e-4)
    assert np.isclose(lambda_weight("niso", 0.1, rescale=True, c=0.2), 0.1 * np.sqrt(0.05))


def test_dsm_oracle_injection_gives_zero():
    rng = np.random.default_rng(0)
    b = make_batch("iso", PLANE, plane_points(64, rng), SCHED, rng)
    s = -(b.x_tilde - b.x) / b.sigma[:, None] ** 2
    assert dsm_objective(b, s)[0] == 0.0


def test_dsm_zero_score_expectation_is_dimension():
    rng = np.random.default_rng(1)
    b = make_batch("iso", PLANE, plane_points(200_000, rng), SCHED, rng)
    loss = dsm_objective(b, np.zeros_like(b.x))[0]
    assert abs(loss - 3.0) < 0.03


def test_dsm_single_sample_by_hand():
    x = np.array([[0.0, 0.0, 0.0]])
    xt = np.array([[0.1, -0.2, 0.05]])
    b = LossBatch("iso", x, np.array([0.5]), np.array([0.1]), xt, np.array([0.01]))
    s = np.array([[1.0, 2.0, 3.0]])
    # target = (-10, 20, -5); diff = (11, -18, 8); |diff|^2 = 121 + 324 + 64 = 509
    assert np.isclose(dsm_objective(b, s)[0], 0.01 * 509)


def test_niso_reduces_to_dsm_for_zero_c():
    rng = np.random.default_rng(2)
    x = plane_points(32, rng)
    a = make_batch("niso", PLANE, x, SCHED, np.random.default_rng(5), c_niso=0.0)
    b = make_batch("iso", PLANE, x, SCHED, np.random.default_rng(5))
    model = ScoreModel(3, 8, 2, rng=np.random.default_rng(0))
    assert np.isclose(niso_loss(model, a, SCHED), dsm_loss(model, b, SCHED), rtol=1e-13)


def test_niso_target_on_hyperplane():
    sigma, c, h = 0.1, 0.2, 0.03
    x = np.zeros((1, 3))
    b = LossBatch("niso", x, np.array([0.4]), np.array([sigma]), np.array([[0.0, 0.0, h]]),
                  np.array([1.0]), c=c, frame=PLANE.normal_frame(x))
    s = np.array([[0.0, 0.0, -h / (sigma ** 2 + c ** 2)]])
    assert np.isclose(niso_objective(b, s)[0], 0.0, atol=1e-20)


def test_niso_oracle_injection():
    rng = np.random.default_rng(3)
    sph = Sphere(3)
    x = sph.project(rng.standard_normal((40, 3)))
    b = make_batch("niso", sph, x, SCHED, rng, c_niso=0.2, rescale=True)
    d = b.x_tilde - b.x
    dn = np.einsum("mnk,mk->mn", b.frame, np.einsum("mnk,mn->mk", b.frame, d))
    s2 = b.sigma[:, None] ** 2
    target = -((d - dn) / s2 + dn / (s2 + 0.04))
    assert niso_objective(b, target)[0] < 1e-20


def test_tango_switch_boundary_uses_dsm():
    x = np.zeros((1, 3))
    t = SCHED.time_of_sigma(0.2)
    b = make_batch("tango", PLANE, x, SCHED, np.random.default_rng(0), c_tango=0.2,
                   t=np.array([t]))
    # sigma_t may differ from c_tango by round-off; force the boundary exactly
    b2 = make_batch("tango", PLANE, x, NoiseSchedule(0.2, 3.0), np.random.default_rng(0),
                    c_tango=0.2, t=np.array([0.0]))
    assert not b2.tango_mask[0]
    assert b.tango_mask[0] == (b.sigma[0] < 0.2)


def test_tango_ignores_normal_part_below_threshold():
    rng = np.random.default_rng(4)
    x = plane_points(50, rng)
    b = make_batch("tango", PLANE, x, SCHED, rng, c_tango=0.2, t=np.full(50, 0.1))
    assert b.tango_mask.all()
    base = rng.standard_normal((50, 3))
    bump = np.zeros_like(base)
    bump[:, 2] = 1e3 * rng.standard_normal(50)
    assert tango_objective(b, base)[0] == tango_objective(b, base + bump)[0]


def test_tango_target_on_hyperplane():
    sigma = 0.01
    x = np.zeros((1, 3))
    xt = np.array([[0.01, -0.02, 0.03]])
    b = LossBatch("tango", x, np.array([0.0]), np.array([sigma]), xt, np.array([1.0]), c=0.2,
                  tango_mask=np.array([True]), tango_frame=PLANE.normal_frame(xt))
    s = np.array([[-100.0, 200.0, 12345.0]])  # -(a, b, 0) / sigma^2 plus any normal part
    assert np.isclose(tango_objective(b, s)[0], 0.0, atol=1e-20)


def test_rssm_zero_score_gives_zero():
    rng = np.random.default_rng(5)
    b = make_batch("rssm", PLANE, plane_points(16, rng), SCHED, rng)
    assert evaluate_loss(b, lambda x, t: np.zeros_like(x)) == 0.0


def test_rssm_hutchinson_trace_of_linear_field():
    rng = np.random.default_rng(6)
    m = 100_000
    b = make_batch("rssm", PLANE, plane_points(m, rng), SCHED, rng)
    b.lam = np.ones(m)
    # s(x) = x: |s|^2 + 2 v^T v; subtract the |s|^2 part to isolate the trace term
    loss = evaluate_loss(b, lambda x, t: x)
    trace_term = loss - np.mean(np.sum(b.x_tilde ** 2, axis=1))
    assert abs(trace_term - 4.0) / 4.0 < 0.02


def test_rssm_points_stay_tangent_on_plane():
    rng = np.random.default_rng(7)
    b = make_batch("rssm", PLANE, plane_points(10, rng), SCHED, rng)
    assert np.all(b.x_tilde[:, 2] == 0)
    xp, xm = rssm_points(b)
    assert np.all(xp[:, 2] == 0) and np.all(xm[:, 2] == 0)


def test_rssm_fd_jvp_matches_analytic_jvp():
    rng = np.random.default_rng(8)
    sph = Sphere(3)
    model = ScoreModel(3, 6, 2, "iso", rng=rng)
    b = make_batch("rssm", sph, sph.project(rng.standard_normal((8, 3))), SCHED, rng)
    xp, xm = rssm_points(b)
    fd = (model.score(xp, b.t, SCHED) - model.score(xm, b.t, SCHED)) / (2 * b.fd_step[:, None])
    exact = model.jvp(b.x_tilde, b.t, SCHED, b.probe)
    assert np.allclose(fd, exact, rtol=1e-3, atol=1e-6 * np.abs(exact).max())


@pytest.mark.parametrize("method", ["iso", "niso", "tango", "rssm"])
def test_loss_and_grad_matches_finite_differences(method):
    rng = np.random.default_rng(9)
    sph = Sphere(3)
    model = ScoreModel(3, 4, 2, "iso", rng=np.random.default_rng(1))
    x = sph.project(rng.standard_normal((6, 3)))
    b = make_batch(method, sph, x, SCHED, rng, c_niso=0.2, c_tango=0.5, rescale=True)
    loss, grads = loss_and_grad(model, b, SCHED)
    assert np.isclose(loss, evaluate_loss(b, lambda xx, tt: model.score(xx, tt, SCHED)))
    p = model.params[0]
    h = 1e-6
    for idx in [(0, 0), (1, 2), (3, 1)]:
        old = p[idx]
        p[idx] = old + h
        up = loss_and_grad(model, b, SCHED)[0]
        p[idx] = old - h
        dn = loss_and_grad(model, b, SCHED)[0]
        p[idx] = old
        assert np.isclose(grads[0][idx], (up - dn) / (2 * h), rtol=1e-4, atol=1e-8)


def test_quad_loss_split_adds_up():
    rng = np.random.default_rng(10)
    s = rng.standard_normal((5, 3))
    target = rng.standard_normal((5, 3))
    total, tan, nrm = quad_loss_split(s, target, PLANE.normal_frame(np.zeros((5, 3))))
    assert np.isclose(total, tan + nrm)
    assert np.isclose(nrm, np.mean((s[:, 2] - target[:, 2]) ** 2))


def test_unknown_method_rejected():
    with pytest.raises(UnsupportedMethodError):
        make_batch("flow", PLANE, np.zeros((1, 3)), SCHED, np.random.default_rng(0))


def test_rssm_objective_gradient_signs():
    b = LossBatch("rssm", np.zeros((1, 2)), np.zeros(1), np.ones(1), np.zeros((1, 2)),
                  np.ones(1), probe=np.array([[1.0, 0.0]]), fd_step=np.array([0.5]))
    loss, g0, gp, gm = rssm_objective(b, np.array([[1.0, 1.0]]), np.array([[2.0, 0.0]]),
                                      np.array([[0.0, 0.0]]))
    # |s|^2 = 2, jvp = (2 - 0) / 1 = 2 along probe -> 2 * 2 = 4
    assert np.isclose(loss, 6.0)
    assert np.allclose(gp, -gm)
