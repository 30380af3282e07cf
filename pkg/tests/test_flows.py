"""Velocity-field families: all closed-form derivatives against FD oracles."""

import math

import numpy as np
import pytest
import scipy.special as sp

from neis import flows as F
from neis import targets as T

NEED_ALL = ("b", "jac", "div", "grad_div", "dtheta_b", "dtheta_div")


def make_cases():
    rng = np.random.default_rng(42)
    cases = [
        ("constant", F.ConstantFlow([0.7, -1.2]), 2),
        ("linear-fixed", F.LinearFixedFlow(rng.normal(size=(3, 3)),
                                           rng.normal(size=3)), 3),
        ("generic-linear", F.make_generic_linear(3, seed=1), 3),
        ("two-param-funnel", F.TwoParamFunnelFlow(4, (1.3, -0.4)), 4),
        ("generic-mlp", F.make_generic_mlp(3, 5, seed=2), 3),
        ("gradient-mlp", F.make_gradient_mlp(3, 5, seed=3), 3),
        ("radial-mixture", F.mixture_radial_flow(T.make_gauss_mix_2d()), 2),
        ("block-mlp", F.BlockMLPFlow(
            5, 4, rng.normal(scale=0.5, size=4 * 2 + 4 + 4 + 2 * 3)), 5),
    ]
    return cases


CASES = make_cases()
IDS = [c[0] for c in CASES]


def points(dim, n=7, seed=0):
    return np.random.default_rng(seed).normal(scale=1.5, size=(n, dim))


@pytest.mark.parametrize("name,flow,dim", CASES, ids=IDS)
def test_jacobian_matches_fd(name, flow, dim):
    x = points(dim)
    ev = flow.evaluate(x, need=NEED_ALL)
    h = 1e-6
    jac = np.zeros_like(ev.jac_b)
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        bp = flow.evaluate(x + e).b
        bm = flow.evaluate(x - e).b
        jac[:, :, i] = (bp - bm) / (2 * h)
    np.testing.assert_allclose(ev.jac_b, jac, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("name,flow,dim", CASES, ids=IDS)
def test_divergence_is_jacobian_trace(name, flow, dim):
    x = points(dim)
    ev = flow.evaluate(x, need=NEED_ALL)
    np.testing.assert_allclose(ev.div_b, np.trace(ev.jac_b, axis1=1, axis2=2),
                               rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("name,flow,dim", CASES, ids=IDS)
def test_grad_div_matches_fd(name, flow, dim):
    x = points(dim)
    ev = flow.evaluate(x, need=NEED_ALL)
    h = 1e-6
    gd = np.zeros_like(ev.grad_div_b)
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        dp = flow.evaluate(x + e, need=("div",)).div_b
        dm = flow.evaluate(x - e, need=("div",)).div_b
        gd[:, i] = (dp - dm) / (2 * h)
    np.testing.assert_allclose(ev.grad_div_b, gd, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("name,flow,dim", CASES, ids=IDS)
def test_parameter_derivatives_match_fd(name, flow, dim):
    if flow.n_params == 0:
        pytest.skip("no free parameters")
    x = points(dim)
    ev = flow.evaluate(x, need=NEED_ALL)
    h = 1e-6
    theta = flow.theta
    for p in range(flow.n_params):
        e = np.zeros(flow.n_params)
        e[p] = h
        evp = flow.with_theta(theta + e).evaluate(x, need=("b", "div"))
        evm = flow.with_theta(theta - e).evaluate(x, need=("b", "div"))
        np.testing.assert_allclose(ev.dtheta_b[:, :, p],
                                   (evp.b - evm.b) / (2 * h),
                                   rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(ev.dtheta_div_b[:, p],
                                   (evp.div_b - evm.div_b) / (2 * h),
                                   rtol=1e-5, atol=1e-6)


def test_gradient_mlp_is_a_gradient_field():
    # curl-free: the Jacobian of b = grad(potential) is symmetric
    flow = F.make_gradient_mlp(3, 6, seed=5)
    x = points(3)
    jac = flow.evaluate(x, need=("jac",)).jac_b
    np.testing.assert_allclose(jac, np.swapaxes(jac, 1, 2),
                               rtol=1e-10, atol=1e-12)
    # and b matches FD of the scalar potential
    h = 1e-6
    g = np.zeros((x.shape[0], 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[:, i] = (flow.potential(x + e) - flow.potential(x - e)) / (2 * h)
    np.testing.assert_allclose(flow.evaluate(x).b, g, rtol=1e-5, atol=1e-7)


def test_radial_mixture_single_mode_value():
    # one isotropic mode: b(x) = [gamma(d/2, r^2/(2 s^2)) / (2 pi^{d/2})]
    #                              * (x - mu) / r^d  minus the base term
    flow = F.RadialMixtureFlow([1.0], [[5.0, 0.0]], [0.1])
    x = np.array([[0.0, 0.0]])
    b = flow.evaluate(x).b[0]
    d = 2
    r2 = 25.0

    def radial_coeff(r2_over_2s2, d):
        return sp.gamma(d / 2) * sp.gammainc(d / 2, r2_over_2s2) \
            / (2 * math.pi ** (d / 2))

    target_term = radial_coeff(r2 / (2 * 0.1), d) * (x[0] - [5.0, 0.0]) / r2
    base_term = radial_coeff(r2 / 2.0, d) * (x[0] - [0.0, 0.0]) / r2
    np.testing.assert_allclose(b, target_term - base_term, rtol=1e-10)


def test_radial_mixture_divergence_is_density_difference():
    tp = T.make_gauss_mix_2d()
    flow = F.mixture_radial_flow(tp)
    x = points(2, n=20, seed=3)
    div = flow.evaluate(x, need=("div",)).div_b
    rho1 = np.exp(-tp._u1_raw(x))
    rho0 = np.exp(-tp.u0(x))
    np.testing.assert_allclose(div, rho1 - rho0, rtol=1e-10, atol=1e-13)


def test_gaussian_linear_flow_coefficients():
    sig2 = [0.25, 4.0]
    varpi = [1.0, -2.0]
    flow = F.gaussian_linear_flow(sig2, varpi)
    # b(x) = Lam x + v with Lam = diag(-ln sigma), v_i = ln(sigma_i)
    # / (1 - sigma_i) * varpi_i
    x = np.array([[1.0, 1.0], [0.0, 0.0]])
    b = flow.evaluate(x).b
    lam = -np.log(np.sqrt(sig2))
    v = np.log(np.sqrt(sig2)) / (1.0 - np.sqrt(sig2)) * np.array(varpi)
    np.testing.assert_allclose(b, x * lam + v, rtol=1e-12)
    with pytest.raises(ValueError):
        F.gaussian_linear_flow([1.0], [2.0])  # sigma = 1 with an offset


def test_torus_grid_gradient_flow_curl_free_and_matches_modes():
    rng = np.random.default_rng(0)
    N = 32
    v_hat = np.zeros((N, N), dtype=complex)
    # a real potential: cos(2 pi x) + sin(2 pi (x + 2 y))
    v_hat[1, 0] = v_hat[-1, 0] = 0.5
    v_hat[1, 2] = -0.5j
    v_hat[-1, -2] = 0.5j
    flow = F.GridGradientFlow(v_hat, k_max=8)
    x = rng.random((10, 2))
    tp = 2 * math.pi

    def vref(p):
        return np.cos(tp * p[:, 0]) + np.sin(tp * (p[:, 0] + 2 * p[:, 1]))

    np.testing.assert_allclose(flow.potential_at(x), vref(x), rtol=1e-10)
    b = flow.evaluate(x, need=("b", "jac", "div")).b
    expect = np.stack([-tp * np.sin(tp * x[:, 0])
                       + tp * np.cos(tp * (x[:, 0] + 2 * x[:, 1])),
                       2 * tp * np.cos(tp * (x[:, 0] + 2 * x[:, 1]))], axis=1)
    np.testing.assert_allclose(b, expect, rtol=1e-10, atol=1e-12)
    jac = flow.evaluate(x, need=("jac",)).jac_b
    np.testing.assert_allclose(jac, np.swapaxes(jac, 1, 2), atol=1e-10)


def test_with_theta_returns_new_flow():
    flow = F.make_generic_linear(2, seed=0)
    theta2 = flow.theta + 1.0
    flow2 = flow.with_theta(theta2)
    assert flow2 is not flow
    np.testing.assert_array_equal(flow.theta + 1.0, flow2.theta)
    with pytest.raises(ValueError):
        flow.with_theta(np.zeros(flow.n_params + 1))
    with pytest.raises(ValueError):
        flow.with_theta(np.full(flow.n_params, np.nan))


def test_fixed_flows_reject_with_theta():
    fixed = F.LinearFixedFlow(np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        fixed.with_theta(np.zeros(0))


def test_unknown_need_rejected():
    flow = F.ConstantFlow([1.0])
    with pytest.raises(ValueError):
        flow.evaluate(np.zeros((1, 1)), need=("b", "curl"))


@pytest.mark.parametrize("maker", [
    lambda: F.ConstantFlow([0.3, -0.4]),
    lambda: F.make_generic_linear(3, seed=4),
    lambda: F.make_generic_mlp(2, 4, seed=5),
    lambda: F.make_gradient_mlp(2, 4, seed=6),
    lambda: F.make_two_param_funnel(5),
    lambda: F.make_block_mlp(10, 4, seed=7, tail_sigma2=0.5),
])
def test_save_load_round_trip(maker, tmp_path):
    flow = maker()
    path = tmp_path / "f.flow"
    F.save_flow(flow, path)
    # header is ASCII text followed by little-endian float64 payload
    raw = path.read_bytes()
    header, payload = raw.split(b"\n", 1)
    fields = header.decode("ascii").split()
    assert len(fields) == 5
    assert int(fields[4]) == flow.n_params
    assert len(payload) == 8 * flow.n_params
    np.testing.assert_array_equal(np.frombuffer(payload, dtype="<f8"),
                                  flow.theta)
    back = F.load_flow(path)
    assert type(back) is type(flow)
    assert back.dim == flow.dim
    np.testing.assert_array_equal(back.theta, flow.theta)
    x = np.random.default_rng(0).normal(size=(4, flow.dim))
    np.testing.assert_array_equal(back.evaluate(x).b, flow.evaluate(x).b)


def test_load_rejects_corrupted_file(tmp_path):
    flow = F.make_generic_linear(2, seed=0)
    path = tmp_path / "f.flow"
    F.save_flow(flow, path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])  # truncate one parameter
    with pytest.raises(ValueError):
        F.load_flow(path)


def test_mlp_initialization_deterministic():
    a = F.make_gradient_mlp(3, 8, seed=9)
    b = F.make_gradient_mlp(3, 8, seed=9)
    np.testing.assert_array_equal(a.theta, b.theta)
    c = F.make_gradient_mlp(3, 8, seed=10)
    assert not np.array_equal(a.theta, c.theta)


def test_block_mlp_composes_head_and_affine_tail():
    dim, m = 6, 5
    flow = F.make_block_mlp(dim, m, seed=11, tail_sigma2=0.25)
    head = F.make_gradient_mlp(2, m, seed=11)
    np.testing.assert_array_equal(flow.theta[: head.n_params], head.theta)
    lam = flow.theta[head.n_params: head.n_params + dim - 2]
    np.testing.assert_allclose(lam, 0.5 * math.log(0.25))
    np.testing.assert_array_equal(flow.theta[head.n_params + dim - 2:], 0.0)
    x = points(dim, n=5, seed=3)
    ev = flow.evaluate(x, need=("b", "div"))
    he = head.evaluate(x[:, :2], need=("b", "div"))
    np.testing.assert_allclose(ev.b[:, :2], he.b)
    np.testing.assert_allclose(ev.b[:, 2:], lam * x[:, 2:])
    np.testing.assert_allclose(ev.div_b, he.div_b + lam.sum())


def test_block_mlp_rejects_small_dimension():
    with pytest.raises(ValueError):
        F.BlockMLPFlow(2, 4)
    with pytest.raises(ValueError):
        F.make_block_mlp(5, 4, seed=0, tail_sigma2=-1.0)
