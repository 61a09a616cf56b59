"""Benchmark definitions, the Lagrangian and pointwise KKT residuals."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kktnet.autodiff import Graph
from kktnet.oracle import lp_closed_form
from kktnet.problems import (PenaltySet, PrimalDual, get_problem,
                             kkt_point_residuals, kkt_residual_batch,
                             lagrangian, make_lp, make_pendulum,
                             make_rocket_car, make_scalar_demo,
                             penalty_option, point_values)


def _eval_fgh(problem, x, p):
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    P = np.atleast_2d(np.asarray(p, dtype=np.float64))
    f, g, h = point_values(problem, X, P)
    return (f.ravel()[0],
            g[0] if g is not None and problem.n_g else np.zeros(0),
            h[0] if h is not None and problem.n_h else np.zeros(0))


# ----- LP --------------------------------------------------------------------

def test_lp_dimensions_and_region():
    lp = make_lp()
    assert (lp.n_x, lp.n_p, lp.n_g, lp.n_h) == (2, 1, 5, 0)
    assert lp.region_lo[0] == -2400.0 and lp.region_hi[0] == 720.0
    assert not (lp.region_lo[0] <= 800.0 <= lp.region_hi[0])


def test_lp_constraints_at_published_point():
    # rows 1 and 2 are the active pair at this vertex (their multipliers
    # are strictly positive), rows 3-5 are slack
    lp = make_lp()
    f, g, _ = _eval_fgh(lp, [30.0, 10.0], [0.0])
    np.testing.assert_allclose(g, [0.0, 0.0, -0.12, -3.0, -1.0], atol=1e-14)
    assert f == pytest.approx(-5.5, abs=1e-14)
    # the cost ignores the parameter
    f2, _, _ = _eval_fgh(lp, [30.0, 10.0], [-1900.0])
    assert f2 == pytest.approx(-5.5, abs=1e-14)


def test_lp_bound_rows_masked():
    lp = make_lp()
    np.testing.assert_array_equal(lp.feas_g_mask(), [1.0, 1.0, 1.0, 0.0, 0.0])


def test_lp_residuals_zero_at_closed_form_for_all_options():
    lp = make_lp()
    s = lp_closed_form(0.0)
    np.testing.assert_allclose(s.x, [30.0, 10.0], atol=1e-14)
    np.testing.assert_allclose(s.mu[:2], [2.5, 1.875], atol=1e-14)
    for k in (1, 2, 3, 4):
        r = kkt_point_residuals(lp, s, [0.0], penalty_option(k))
        assert r.total() < 1e-12, f"option {k}: {r}"


def test_lp_stationarity_residual_with_zero_duals():
    lp = make_lp()
    y = PrimalDual(x=np.array([30.0, 10.0]), lam=np.zeros(0), mu=np.zeros(5))
    r = kkt_point_residuals(lp, y, [0.0], penalty_option(1))
    assert r.stat == pytest.approx(0.175, abs=1e-14)
    assert r.csl == 0.0
    assert r.feas_g == 0.0


def test_lp_feasibility_residual_for_violated_row():
    lp = make_lp()
    s = lp_closed_form(0.0)
    y = PrimalDual(x=np.array([40.0, 10.0]), lam=s.lam, mu=s.mu)
    r = kkt_point_residuals(lp, y, [0.0], penalty_option(1))
    assert r.feas_g > 0.0


def test_negative_multiplier_rejected():
    lp = make_lp()
    y = PrimalDual(x=np.array([30.0, 10.0]), lam=np.zeros(0),
                   mu=np.array([-0.1, 0, 0, 0, 0]))
    with pytest.raises(ValueError):
        kkt_point_residuals(lp, y, [0.0], penalty_option(1))


def test_lemma_both_directions_lp():
    """Residuals vanish exactly at solutions, never at tampered points."""
    lp = make_lp()
    rng = np.random.default_rng(7)
    for p in (-1500.0, -300.0, 0.0, 400.0, 700.0):
        s = lp_closed_form(p)
        for k in (1, 2, 3, 4):
            r = kkt_point_residuals(lp, s, [p], penalty_option(k))
            assert r.total() < 1e-12
        # coordinate bump on x
        i = int(rng.integers(2))
        bumped = PrimalDual(x=s.x + 0.1 * np.eye(2)[i], lam=s.lam, mu=s.mu)
        r = kkt_point_residuals(lp, bumped, [p], penalty_option(1))
        assert r.total() > 1e-4
        # zero out a positive multiplier
        j = int(np.argmax(s.mu))
        if s.mu[j] > 0:
            mu2 = s.mu.copy()
            mu2[j] = 0.0
            r = kkt_point_residuals(lp, PrimalDual(x=s.x, lam=s.lam, mu=mu2),
                                    [p], penalty_option(1))
            assert r.total() > 1e-4


# ----- Lagrangian ------------------------------------------------------------

def test_lagrangian_reduces_to_objective_without_duals():
    lp = make_lp()
    g = Graph()
    x = g.leaf(1, 2, "x")
    p = g.leaf(1, 1, "p")
    mu = g.const(np.zeros(5))
    L = lagrangian(lp, g, x, None, mu, p)
    val = g.evaluate({x: np.array([[12.0, 7.0]]), p: np.array([[100.0]])},
                     targets=[L])[L.id]
    assert val.ravel()[0] == pytest.approx(-0.1 * 12 - 0.25 * 7, abs=1e-14)


def test_lagrangian_scalar_demo_value():
    prob = make_scalar_demo()
    g = Graph()
    x = g.leaf(1, 1, "x")
    p = g.leaf(1, 1, "p")
    mu = g.leaf(1, 1, "mu")
    L = lagrangian(prob, g, x, None, mu, p)
    val = g.evaluate({x: np.array([[2.0]]), p: np.array([[0.5]]),
                      mu: np.array([[3.0]])}, targets=[L])[L.id]
    assert val.ravel()[0] == pytest.approx(1.0, abs=1e-14)


def test_lagrangian_pendulum_zero_duals_is_cost():
    pend = make_pendulum()
    rng = np.random.default_rng(3)
    xv = rng.normal(scale=0.2, size=pend.n_x)
    pv = np.array([10.0])
    g = Graph()
    x = g.leaf(1, pend.n_x, "x")
    p = g.leaf(1, 1, "p")
    lam = g.const(np.zeros(pend.n_h))
    mu = g.const(np.zeros(pend.n_g))
    L = lagrangian(pend, g, x, lam, mu, p)
    val = g.evaluate({x: xv.reshape(1, -1), p: pv.reshape(1, -1)},
                     targets=[L])[L.id].ravel()[0]
    torques = xv[2 * 99:]
    assert val == pytest.approx(0.1 * np.sum(torques ** 2), rel=1e-12)


# ----- nonconvex projection ---------------------------------------------------

def _cubic(t):
    return 2 * t ** 3 + 3 * t ** 2 + 2 * t + 1


def test_nonconvex_set_geometry():
    prob = get_problem("nonconvex")
    assert (prob.n_x, prob.n_p, prob.n_g, prob.n_h) == (2, 2, 4, 0)
    assert _cubic(0) == 1 and _cubic(-1) == 0
    _, g0, _ = _eval_fgh(prob, [0.0, 0.0], [0.0, 0.0])
    np.testing.assert_allclose(g0, [-1.0, -1.0, -1.0, -1.0], atol=1e-14)
    _, g1, _ = _eval_fgh(prob, [-1.0, 0.0], [0.0, 0.0])
    assert g1[0] == pytest.approx(0.0, abs=1e-14)
    assert g1[1] == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_array_less(g1[2:], -1.0)


def test_nonconvex_objective_zero_at_parameter():
    prob = get_problem("nonconvex")
    f, _, _ = _eval_fgh(prob, [0.3, -0.4], [0.3, -0.4])
    assert f == pytest.approx(0.0, abs=1e-14)


# ----- rocket car -------------------------------------------------------------

def test_rocket_car_dimensions():
    rc = make_rocket_car()
    assert (rc.n_x, rc.n_p, rc.n_g, rc.n_h) == (98, 1, 64, 68)
    assert rc.region_lo[0] == 0.0 and rc.region_hi[0] == 40.0
    assert len(rc.bound_g_rows) == 64  # every row restates the input box


def test_rocket_car_origin_solves_p_zero():
    rc = make_rocket_car()
    f, g, h = _eval_fgh(rc, np.zeros(98), [0.0])
    assert f == 0.0
    np.testing.assert_allclose(h, np.zeros(68), atol=1e-15)
    np.testing.assert_array_less(g, 0.0)


def test_rocket_car_dynamics_row():
    """One integration step must follow x+ = A x + B u with the stated matrices."""
    rc = make_rocket_car()
    A = np.array([[1.0, 0.4], [0.0, 1.0]])
    B = np.array([0.08, 0.4])
    x0 = np.array([1.0, 2.0])
    u0 = 3.0
    x1 = A @ x0 + B * u0
    xv = np.zeros(98)
    xv[0:2] = x0
    xv[2:4] = x1
    xv[66] = u0  # first input sits after the 66 state values
    _, _, h = _eval_fgh(rc, xv, [0.0])
    np.testing.assert_allclose(h[0:2], np.zeros(2), atol=1e-14)
    # breaking the step by one unit shows up in the same rows
    xv[2] += 1.0
    _, _, h2 = _eval_fgh(rc, xv, [0.0])
    assert abs(h2[0]) == pytest.approx(1.0, abs=1e-14)


def test_rocket_car_forward_simulation_zeroes_dynamics_rows():
    rc = make_rocket_car()
    rng = np.random.default_rng(5)
    u = rng.uniform(-1.0, 1.0, size=32)
    A = np.array([[1.0, 0.4], [0.0, 1.0]])
    B = np.array([0.08, 0.4])
    states = [np.zeros(2)]
    for k in range(32):
        states.append(A @ states[-1] + B * u[k])
    xv = np.concatenate([np.concatenate(states), u])
    _, g, h = _eval_fgh(rc, xv, [17.0])
    np.testing.assert_allclose(h[0:64], np.zeros(64), atol=1e-12)
    np.testing.assert_allclose(h[64:66], np.zeros(2), atol=1e-15)
    np.testing.assert_array_less(g, 1e-12)  # admissible inputs stay in the box


# ----- pendulum ---------------------------------------------------------------

def _rk4_step(state, tau, dt, m=1.0, l=1.0, grav=9.81):
    def f(s):
        return np.array([s[1], -(grav / l) * np.sin(s[0]) + tau / (m * l * l)])

    k1 = f(state)
    k2 = f(state + 0.5 * dt * k1)
    k3 = f(state + 0.5 * dt * k2)
    k4 = f(state + dt * k3)
    return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def test_pendulum_dimensions_and_step():
    pend = make_pendulum()
    assert (pend.n_x, pend.n_p, pend.n_g, pend.n_h) == (298, 1, 200, 200)
    assert pend.region_lo[0] == 6.0 and pend.region_hi[0] == 15.0
    assert pend.constants["n_steps"] == 100
    # time step scales with the parameter
    xv = np.zeros(298)
    xv[198:] = 2.0
    f10, _, _ = _eval_fgh(pend, xv, [10.0])
    f15, _, _ = _eval_fgh(pend, xv, [15.0])
    assert f10 == pytest.approx(0.1 * 400.0, rel=1e-12)
    assert f15 == pytest.approx(0.15 * 400.0, rel=1e-12)


def test_pendulum_equilibrium_is_rk4_fixed_point():
    assert np.allclose(_rk4_step(np.zeros(2), 0.0, 0.123), np.zeros(2))


def test_pendulum_forward_simulation_zeroes_interior_rows():
    """RK4 rollout from the fixed start matches the defect rows step by step."""
    pend = make_pendulum()
    rng = np.random.default_rng(11)
    N = 100
    p = 9.0
    dt = p / N
    tau = rng.uniform(-2.0, 2.0, size=N)
    states = [np.zeros(2)]
    for k in range(N):
        states.append(_rk4_step(states[-1], tau[k], dt))
    # decision vector holds interior states only; ends are pinned constants
    xv = np.concatenate([np.concatenate(states[1:N]), tau])
    assert xv.size == 298
    _, g, h = _eval_fgh(pend, xv, [p])
    # every defect row except the terminal pair is zero
    np.testing.assert_allclose(h[: 2 * N - 2], np.zeros(2 * N - 2), atol=1e-10)
    # the simulated endpoint is generally not the upright target
    terminal = np.array([np.pi, 0.0]) - states[N]
    np.testing.assert_allclose(h[2 * N - 2:], terminal, atol=1e-10)
    assert np.all(g <= 1e-12)


def test_pendulum_bound_rows_all_masked():
    pend = make_pendulum()
    assert pend.feas_g_mask().sum() == 0.0


# ----- batch API ----------------------------------------------------------------

def test_batch_residuals_match_pointwise():
    lp = make_lp()
    rng = np.random.default_rng(2)
    X = rng.uniform(0.0, 50.0, size=(6, 2))
    MU = rng.uniform(0.0, 2.0, size=(6, 5))
    P = rng.uniform(-2400.0, 720.0, size=(6, 1))
    batch = kkt_residual_batch(lp, X, np.zeros((6, 0)), MU, P, penalty_option(2))
    for i in range(6):
        y = PrimalDual(x=X[i], lam=np.zeros(0), mu=MU[i])
        r = kkt_point_residuals(lp, y, P[i], penalty_option(2))
        assert batch["stat"][i] == pytest.approx(r.stat, rel=1e-12)
        assert batch["feas_g"][i] == pytest.approx(r.feas_g, rel=1e-12)
        assert batch["csl"][i] == pytest.approx(r.csl, rel=1e-12)


def test_batch_rejects_negative_mu():
    lp = make_lp()
    with pytest.raises(ValueError):
        kkt_residual_batch(lp, np.ones((1, 2)), np.zeros((1, 0)),
                           -np.ones((1, 5)), np.zeros((1, 1)),
                           penalty_option(1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_residuals_are_nonnegative(seed):
    rng = np.random.default_rng(seed)
    lp = make_lp()
    y = PrimalDual(x=rng.uniform(-5.0, 60.0, 2), lam=np.zeros(0),
                   mu=rng.uniform(0.0, 3.0, 5))
    p = rng.uniform(-2400.0, 720.0, 1)
    for k in (1, 2, 3, 4):
        r = kkt_point_residuals(lp, y, p, penalty_option(k))
        assert r.stat >= 0 and r.feas_g >= 0 and r.feas_h >= 0 and r.csl >= 0


def test_penalty_option_table():
    assert penalty_option(1) == PenaltySet("abs", "abs", "abs", "abs")
    assert penalty_option(2) == PenaltySet("square", "square", "square", "square")
    o3 = penalty_option(3)
    assert o3.stat == "square" and o3.csl == "square"
    assert o3.feas_g == "abs_plus_square" and o3.feas_h == "abs_plus_square"
    assert penalty_option(4) == PenaltySet(*["abs_plus_square"] * 4)
    with pytest.raises(ValueError):
        penalty_option(5)


def test_get_problem_rejects_unknown_name():
    with pytest.raises(ValueError):
        get_problem("travelling_salesman")
