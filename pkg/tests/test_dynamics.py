"""Integrators: exact linear-flow oracles, RK4 order, guards, sensitivities."""

import numpy as np
import pytest
import scipy.linalg as sla

from neis import flows as F
from neis import targets as T
from neis.dynamics import (Trajectory, integrate_sensitivity,
                           integrate_trajectory)


def linear_case():
    A = np.array([[-0.4, 0.3], [-0.2, -0.6]])
    c = np.array([0.5, -0.1])
    return F.LinearFixedFlow(A, c), A, c


def exact_linear_map(A, c, x, t):
    # X_t = e^{tA} x + (e^{tA} - I) A^{-1} c
    E = sla.expm(t * A)
    return x @ E.T + (E - np.eye(A.shape[0])) @ np.linalg.solve(A, c)


def test_trajectory_matches_matrix_exponential():
    flow, A, c = linear_case()
    tp = T.make_gauss_mix_2d()
    x = tp.sample_base(6, 0)
    traj = integrate_trajectory(flow, tp, x, -0.5, 1.0, 100)
    assert traj.i0 == 50
    np.testing.assert_allclose(traj.grid[traj.i0], 0.0, atol=1e-14)
    np.testing.assert_array_equal(traj.states[:, traj.i0], x)
    for m in (0, 10, 50, 90, 150):
        t = traj.grid[m]
        np.testing.assert_allclose(traj.states[:, m],
                                   exact_linear_map(A, c, x, t),
                                   rtol=1e-8, atol=1e-10)
        # for linear b, log J_t = t tr(A) exactly
        np.testing.assert_allclose(traj.log_jac[:, m], t * np.trace(A),
                                   rtol=1e-9, atol=1e-12)
    assert np.all(traj.ok)


def test_trajectory_node_samples_match_direct_evaluation():
    flow, _, _ = linear_case()
    tp = T.make_gauss_mix_2d()
    x = tp.sample_base(4, 1)
    traj = integrate_trajectory(flow, tp, x, -0.2, 0.4, 20)
    flat = traj.states.reshape(-1, 2)
    np.testing.assert_array_equal(traj.u0_samples.ravel(), tp.u0(flat))
    np.testing.assert_array_equal(traj.u1_samples.ravel(), tp._u1_raw(flat))
    np.testing.assert_array_equal(traj.div_samples.ravel(),
                                  flow.evaluate(flat, need=("div",)).div_b)


def test_u1_query_tally_is_nodes_times_samples():
    flow, _, _ = linear_case()
    tp = T.make_gauss_mix_2d()
    tp.counter.reset()
    x = tp.sample_base(7, 2)
    traj = integrate_trajectory(flow, tp, x, -0.5, 1.0, 10)
    M = traj.grid.size
    assert M == 16
    assert tp.counter.u1 == 7 * M
    assert tp.counter.grad_u1 == 0


def test_rk4_fourth_order_convergence():
    flow = F.make_generic_mlp(2, 6, seed=3)
    tp = T.make_gauss_mix_2d()
    x = np.array([[0.3, -0.7]])
    ref = integrate_trajectory(flow, tp, x, 0.0, 1.0, 640).states[0, -1]

    def err(n_steps):
        got = integrate_trajectory(flow, tp, x, 0.0, 1.0, n_steps).states[0, -1]
        return np.linalg.norm(got - ref)

    r1 = err(10) / err(20)
    r2 = err(20) / err(40)
    assert 10.0 < r1 < 26.0
    assert 10.0 < r2 < 26.0


def test_backward_branch_is_inverse_of_forward():
    # integrating -b for time s from x, then +b for time s, returns x
    flow = F.make_generic_mlp(2, 6, seed=4)
    tp = T.make_gauss_mix_2d()
    x = tp.sample_base(5, 3)
    traj = integrate_trajectory(flow, tp, x, -0.5, 0.0, 200)
    back = traj.states[:, 0]
    fwd = integrate_trajectory(flow, tp, back, 0.0, 0.5, 200)
    np.testing.assert_allclose(fwd.states[:, -1], x, rtol=1e-9, atol=1e-10)
    # log-Jacobians compose to zero along the round trip
    np.testing.assert_allclose(traj.log_jac[:, 0] + fwd.log_jac[:, -1]
                               - fwd.log_jac[:, 0], 0.0, atol=1e-9)


def test_log_jacobian_matches_fd_determinant():
    flow = F.make_generic_mlp(2, 5, seed=6)
    tp = T.make_gauss_mix_2d()
    x = np.array([[0.4, -0.2]])
    t = 0.7
    h = 1e-5

    def phi(p):
        return integrate_trajectory(
            flow, tp, p, 0.0, t, round(t * 100)).states[:, -1]

    J = np.zeros((2, 2))
    for i in range(2):
        e = np.zeros((1, 2))
        e[0, i] = h
        J[:, i] = (phi(x + e)[0] - phi(x - e)[0]) / (2 * h)
    lj = integrate_trajectory(flow, tp, x, 0.0, t, round(t * 100)).log_jac[0, -1]
    assert lj == pytest.approx(np.log(np.linalg.det(J)), abs=1e-6)


def test_blowup_guard_flags_and_sinks():
    # dX/dt = 3 X blows past the guard radius within t ~ 5
    flow = F.LinearFixedFlow(3.0 * np.eye(2), np.zeros(2))
    tp = T.make_gauss_mix_2d()
    x = np.array([[1.0, 1.0], [1e-9, 0.0]])
    traj = integrate_trajectory(flow, tp, x, 0.0, 8.0, 20)
    assert not traj.ok[0]
    assert traj.ok[1]
    assert traj.log_jac[0, -1] == -np.inf
    assert np.all(np.isfinite(traj.states))


def test_time_range_validation():
    flow, _, _ = linear_case()
    tp = T.make_gauss_mix_2d()
    x = tp.sample_base(2, 0)
    with pytest.raises(ValueError):
        integrate_trajectory(flow, tp, x, 0.5, 1.0, 10)
    with pytest.raises(ValueError):
        integrate_trajectory(flow, tp, x, 0.0, 0.55, 10)


def test_sensitivity_states_match_fd():
    flow = F.make_generic_linear(2, seed=1)
    tp = T.make_gauss_mix_2d()
    x = tp.sample_base(3, 5)
    traj, sens = integrate_sensitivity(flow, tp, x, -0.4, 0.6, 50)
    h = 1e-6
    theta = flow.theta
    for p in range(0, flow.n_params, 2):
        e = np.zeros(flow.n_params)
        e[p] = h
        tp_p = integrate_trajectory(flow.with_theta(theta + e), tp, x,
                                    -0.4, 0.6, 50)
        tp_m = integrate_trajectory(flow.with_theta(theta - e), tp, x,
                                    -0.4, 0.6, 50)
        np.testing.assert_allclose(sens.delta_x[:, :, :, p],
                                   (tp_p.states - tp_m.states) / (2 * h),
                                   rtol=2e-5, atol=1e-7)
        # H + L is the parameter derivative of log J_t
        np.testing.assert_allclose(sens.H[:, :, p] + sens.L[:, :, p],
                                   (tp_p.log_jac - tp_m.log_jac) / (2 * h),
                                   rtol=2e-5, atol=1e-7)


def test_sensitivity_trajectory_agrees_with_plain_integration():
    flow = F.make_gradient_mlp(2, 4, seed=2)
    tp = T.make_gauss_mix_2d()
    x = tp.sample_base(4, 6)
    traj_a = integrate_trajectory(flow, tp, x, -0.3, 0.5, 40)
    traj_b, _ = integrate_sensitivity(flow, tp, x, -0.3, 0.5, 40)
    np.testing.assert_array_equal(traj_a.states, traj_b.states)
    np.testing.assert_array_equal(traj_a.log_jac, traj_b.log_jac)
    np.testing.assert_array_equal(traj_a.ok, traj_b.ok)


def test_sensitivity_zero_at_time_origin():
    flow = F.make_generic_linear(2, seed=3)
    tp = T.make_gauss_mix_2d()
    x = tp.sample_base(2, 7)
    traj, sens = integrate_sensitivity(flow, tp, x, -0.2, 0.2, 20)
    np.testing.assert_array_equal(sens.delta_x[:, traj.i0], 0.0)
    np.testing.assert_array_equal(sens.H[:, traj.i0], 0.0)
    np.testing.assert_array_equal(sens.L[:, traj.i0], 0.0)
