"""Randomized invariants that must hold for arbitrary inputs."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from neis import flows as F
from neis import targets as T
from neis.config import _parse_budget
from neis.dynamics import integrate_trajectory
from neis.estimator import neis_pointwise
from neis.special import logsumexp
from neis.training import c_schedule

finite = st.floats(min_value=-30.0, max_value=30.0,
                   allow_nan=False, allow_infinity=False)


@given(st.lists(finite, min_size=2, max_size=12), finite)
@settings(max_examples=50, deadline=None)
def test_logsumexp_shift_invariance(vals, c):
    a = np.array(vals)
    lhs = logsumexp(a + c, axis=0)
    rhs = logsumexp(a, axis=0) + c
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(rhs))


@given(st.integers(min_value=0, max_value=2 ** 31), st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_flow_divergence_is_trace_of_jacobian(seed, dim):
    flow = F.make_generic_linear(dim, seed=seed % 1000)
    x = np.random.default_rng(seed).normal(size=(5, dim))
    ev = flow.evaluate(x, need=("jac", "div"))
    np.testing.assert_allclose(ev.div_b,
                               np.trace(ev.jac_b, axis1=1, axis2=2),
                               rtol=1e-10, atol=1e-12)


@given(st.integers(min_value=0, max_value=10 ** 6))
@settings(max_examples=30, deadline=None)
def test_time_reversal_returns_start(seed):
    rng = np.random.default_rng(seed)
    A = 0.5 * rng.standard_normal((2, 2))
    c = 0.5 * rng.standard_normal(2)
    flow = F.LinearFixedFlow(A, c)
    tp = T.make_gauss_mix_2d()
    x = rng.normal(size=(3, 2))
    fwd = integrate_trajectory(flow, tp, x, 0.0, 0.5, 100)
    back = integrate_trajectory(flow, tp, fwd.states[:, -1], -0.5, 0.0, 100)
    np.testing.assert_allclose(back.states[:, 0], x, rtol=1e-8, atol=1e-9)
    np.testing.assert_allclose(fwd.log_jac[:, -1] + back.log_jac[:, 0], 0.0,
                               atol=1e-8)


@given(st.integers(min_value=0, max_value=10 ** 6))
@settings(max_examples=10, deadline=None)
def test_weights_are_nonnegative(seed):
    tp = T.make_gauss_mix_2d()
    flow = F.make_generic_linear(2, seed=seed % 100)
    x = tp.sample_base(8, seed % 1000)
    a, ok = neis_pointwise(tp, flow, x, -0.5, 20)
    assert np.all(a[ok] >= 0.0)


@given(st.floats(0.0, 1.0), st.floats(0.05, 1.0), st.integers(2, 500),
       st.integers(0, 499))
@settings(max_examples=100, deadline=None)
def test_c_schedule_bounds_and_monotonicity(c, upsilon, steps, i):
    i = min(i, steps - 1)
    v = c_schedule(i, c, upsilon, steps)
    assert 0.0 <= v <= c
    assert c_schedule(i + 1, c, upsilon, steps) <= v


@given(st.integers(min_value=1, max_value=10 ** 9))
@settings(max_examples=100, deadline=None)
def test_parse_budget_round_trip(n):
    assert _parse_budget(str(n)) == n


@given(st.integers(2, 500), st.integers(1, 400), st.integers(0, 2 ** 31))
@settings(max_examples=25, deadline=None)
def test_sample_base_prefix_property(n, k, seed):
    tp = T.make_gauss_mix_2d()
    k = min(k, n)
    full = tp.sample_base(n, seed)
    np.testing.assert_array_equal(tp.sample_base(k, seed), full[:k])
