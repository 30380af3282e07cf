"""Target pairs: potentials, gradients, counters, sampling, exact variance."""

import math

import numpy as np
import pytest

from neis import targets as T


def fd_grad(fn, x, h=1e-6):
    x = np.atleast_2d(x)
    g = np.zeros_like(x)
    for i in range(x.shape[1]):
        xp, xm = x.copy(), x.copy()
        xp[:, i] += h
        xm[:, i] -= h
        g[:, i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


ALL_FACTORIES = [T.make_gauss_mix_2d, T.make_gauss_mix_10d, T.make_funnel_10d,
                 T.make_torus_mix_2d]


@pytest.mark.parametrize("factory", ALL_FACTORIES)
def test_grad_u1_matches_finite_differences(factory):
    tp = factory()
    x = tp.sample_base(20, 3)
    np.testing.assert_allclose(tp.grad_u1(x), fd_grad(tp._u1_raw, x),
                               rtol=2e-5, atol=2e-6)


def test_grad_u0_is_identity_on_gaussian_base():
    tp = T.make_gauss_mix_2d()
    x = tp.sample_base(10, 0)
    np.testing.assert_allclose(tp.grad_u0(x), x)
    # and exp(-u0) is the standard normal density
    u0 = tp.u0(x)
    ref = 0.5 * np.sum(x * x, axis=1) + math.log(2 * math.pi)
    np.testing.assert_allclose(u0, ref)


def test_torus_base_is_uniform():
    tp = T.make_torus_mix_2d()
    x = tp.sample_base(1000, 5)
    assert np.all((x >= 0) & (x < 1))
    assert np.all(tp.u0(x) == 0.0)
    assert np.all(tp.grad_u0(x) == 0.0)


@pytest.mark.parametrize("factory", ALL_FACTORIES)
def test_target_density_normalized(factory):
    # grid / Monte Carlo quadrature of exp(-U1) reproduces Z1 = 1
    tp = factory()
    if tp.dim == 2 and tp.domain == "torus":
        g = (np.arange(400) + 0.5) / 400
        X, Y = np.meshgrid(g, g, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        z = np.mean(np.exp(-tp._u1_raw(pts)))
        assert z == pytest.approx(1.0, rel=1e-10)
    elif tp.dim == 2:
        g = np.linspace(-9, 9, 1201)
        X, Y = np.meshgrid(g, g, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        vals = np.exp(-tp._u1_raw(pts)).reshape(1201, 1201)
        z = np.trapezoid(np.trapezoid(vals, g, axis=1), g)
        assert z == pytest.approx(1.0, rel=1e-6)
    else:
        # mixture of normalized components, or funnel: importance check
        # against the per-mode analytic normalization via sampling
        rng = np.random.default_rng(7)
        if isinstance(tp, T.GaussianMixtureTarget):
            # each component is a product of normal densities; sample from
            # the mixture and average rho1 / q = 1 exactly in expectation
            idx = rng.choice(len(tp.weights), size=20000, p=tp.weights)
            x = tp.means[idx] + rng.standard_normal((20000, tp.dim)) \
                * np.sqrt(tp.variances[idx])
            logq = np.array([
                T.GaussianMixtureTarget(tp.weights, tp.means, tp.variances)
                ._u1_raw(x)])[0]
            z = np.mean(np.exp(-tp._u1_raw(x) + logq))
            assert z == pytest.approx(1.0, rel=1e-12)
        else:
            # funnel: the potential must equal the log-density of the
            # generative law x1 ~ N(0, 9), x_i | x1 ~ N(0, e^{x1}),
            # assembled here independently term by term
            x1 = rng.normal(0.0, 3.0, size=5000)
            rest = rng.standard_normal((5000, tp.dim - 1)) \
                * np.exp(x1 / 2.0)[:, None]
            x = np.concatenate([x1[:, None], rest], axis=1)
            logq = (x1 ** 2 / 18.0 + 0.5 * math.log(18 * math.pi)
                    + 0.5 * np.sum(rest ** 2, axis=1) / np.exp(x1)
                    + 0.5 * (tp.dim - 1) * (math.log(2 * math.pi) + x1))
            np.testing.assert_allclose(tp._u1_raw(x), logq,
                                       rtol=1e-10, atol=1e-12)


def test_query_counter_tallies_and_reset():
    tp = T.make_gauss_mix_2d()
    tp.counter.reset()
    x = tp.sample_base(37, 1)
    tp.u1(x)
    tp.u1(x[:5])
    tp.grad_u1(x[:11])
    assert tp.counter.u1 == 42
    assert tp.counter.grad_u1 == 11
    tp.counter.reset()
    assert tp.counter.u1 == 0 and tp.counter.grad_u1 == 0


def test_ball_restriction_infinite_outside_and_grad_raises():
    tp = T.make_funnel_10d()
    far = np.zeros((1, 10))
    far[0, 0] = 30.0
    assert tp.u1(far)[0] == np.inf
    with pytest.raises(ValueError):
        tp.grad_u1(far)
    near = np.zeros((1, 10))
    near[0, 0] = 1.0
    assert np.isfinite(tp.u1(near)[0])


def test_funnel_potential_value():
    tp = T.make_funnel_10d()
    x = np.zeros((1, 10))
    x[0, 0] = 0.5
    x[0, 1] = 1.0
    t = 0.5
    expect = (t ** 2 / 18.0 + 0.5 * math.log(18 * math.pi)
              + 0.5 * 1.0 * math.exp(-t) + 0.5 * math.log(2 * math.pi * math.exp(t))
              + 8 * 0.5 * math.log(2 * math.pi * math.exp(t)))
    assert tp.u1(x)[0] == pytest.approx(expect, rel=1e-12)


def test_sample_base_deterministic_and_prefix_stable():
    tp = T.make_gauss_mix_10d()
    a = tp.sample_base(5000, 9)
    b = tp.sample_base(5000, 9)
    np.testing.assert_array_equal(a, b)
    # the first k samples do not depend on n
    c = tp.sample_base(9000, 9)
    np.testing.assert_array_equal(a, c[:5000])
    d = tp.sample_base(5000, 10)
    assert not np.array_equal(a, d)


def test_vanilla_variance_2d_against_quadrature():
    tp = T.make_gauss_mix_2d()
    exact = T.vanilla_variance_exact(tp)
    # independent oracle: E[w^2] = int rho1^2 / rho0 by dense quadrature
    g = np.linspace(-12, 12, 2401)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    integrand = np.exp(-2 * tp._u1_raw(pts) + tp.u0(pts)).reshape(2401, 2401)
    m2 = np.trapezoid(np.trapezoid(integrand, g, axis=1), g)
    assert exact == pytest.approx(m2 - 1.0, rel=1e-6)


def test_vanilla_variance_rejects_diverging_and_non_mixture():
    wide = T.GaussianMixtureTarget([1.0], [[0.0]], [[2.0]])
    with pytest.raises(ValueError):
        T.vanilla_variance_exact(wide)
    with pytest.raises(TypeError):
        T.vanilla_variance_exact(T.make_funnel_10d())


def test_gaussian_target_exact_normalization():
    tp = T.make_gaussian([0.25, 4.0], [1.0, -2.0])
    g = np.linspace(-20, 20, 4001)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    z = np.trapezoid(np.trapezoid(np.exp(-tp._u1_raw(pts)).reshape(4001, 4001),
                          g, axis=1), g)
    assert z == pytest.approx(1.0, rel=1e-8)


def test_custom_1d_target():
    tp = T.make_custom_1d(
        lambda t: 0.5 * (t - 1.0) ** 2 + 0.5 * math.log(2 * math.pi),
        lambda t: (t - 1.0))
    x = np.array([[0.3], [2.0]])
    np.testing.assert_allclose(tp.grad_u1(x), fd_grad(tp._u1_raw, x),
                               rtol=1e-6, atol=1e-9)


def test_dimension_mismatch_raises():
    tp = T.make_gauss_mix_2d()
    with pytest.raises(ValueError):
        tp.u1(np.zeros((3, 3)))
