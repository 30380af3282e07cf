"""Importance-sampling estimators of the normalizing constant Z1.

Per-sample weights:
  vanilla            exp(-(U1 - U0)(x))
  finite-time flow   A(x) = int F1_t / (int_window F0_s ds) dt over a
                     unit-length placement window inside [-1, 1]
  zero-placement ODE the same weight with the window at [0, 1], computed
                     by pure ODE propagation (no stored trajectory)
  truncated full-line  ratio of the two integrals over [-T, T]
where F^k_t(x) = exp(-U_k(X_t(x))) J_t(x) along the flowline of b.
All window quadrature is trapezoidal on the uniform grid and evaluated
in the log domain.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import dynamics
from .flows import FlowField
from .special import logsumexp
from .targets import TargetPair

_CHUNK = 4096


@dataclass
class EstimateReport:
    """Batch estimation summary with exact query accounting."""

    method: str
    n: int
    mean: float
    variance: float
    stderr: float
    queries_u1: int
    queries_grad_u1: int
    seed: int
    excluded: int
    wall_time: float = 0.0

    def to_json_record(self) -> str:
        rec = {"method": self.method, "n": self.n, "mean": self.mean,
               "variance": self.variance, "stderr": self.stderr,
               "queries_u1": self.queries_u1,
               "queries_grad_u1": self.queries_grad_u1,
               "seed": self.seed, "excluded": self.excluded}
        return json.dumps(rec)


def _trapezoid_weights(k: int, dt: float) -> np.ndarray:
    w = np.full(k, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _log_f(traj: dynamics.Trajectory):
    """log F0 and log F1 at every node, (n, M) each."""
    with np.errstate(invalid="ignore"):
        lf0 = -traj.u0_samples + traj.log_jac
        lf1 = -traj.u1_samples + traj.log_jac
    # inf - inf from dead nodes -> weight zero
    return np.nan_to_num(lf0, nan=-np.inf, posinf=-np.inf), \
        np.nan_to_num(lf1, nan=-np.inf, posinf=-np.inf)


def window_values(traj: dynamics.Trajectory, t_minus: float, n_steps: int):
    """Finite-time weights A(x) from a trajectory over [-1, 1].

    Returns (a, ok): ok is False where the flow blew up or a placement
    window had an identically zero denominator.
    """
    dt = 1.0 / n_steps
    m_lo = round(t_minus * n_steps)
    if abs(t_minus * n_steps - m_lo) > 1e-9:
        raise ValueError("t_minus must be a multiple of 1/n_steps")
    if not -n_steps <= m_lo <= 0:
        raise ValueError("t_minus must lie in [-1, 0]")
    lf0, lf1 = _log_f(traj)
    i0 = traj.i0
    n = lf0.shape[0]
    w_in = _trapezoid_weights(n_steps + 1, dt)
    w_out = _trapezoid_weights(n_steps + 1, dt)
    a = np.zeros(n)
    ok = traj.ok.copy()
    # outer node m (offset from 0) runs over the placement window
    for j, m in enumerate(range(m_lo, m_lo + n_steps + 1)):
        sl = slice(i0 + m - (m_lo + n_steps), i0 + m - m_lo + 1)
        log_b = logsumexp(lf0[:, sl], axis=1, b=w_in[None, :])
        degenerate = ~np.isfinite(log_b)
        ok &= ~degenerate
        log_num = lf1[:, i0 + m]
        term = np.where(degenerate | ~np.isfinite(log_num),
                        np.where(np.isneginf(log_num) & ~degenerate, 0.0, np.nan),
                        np.exp(log_num - log_b))
        a += w_out[j] * np.nan_to_num(term, nan=0.0)
    return np.where(ok, a, np.nan), ok


def neis_pointwise(tp: TargetPair, f: FlowField, x, t_minus: float,
                   n_steps: int):
    """Finite-time weights for a batch of points; returns (a, ok)."""
    traj = dynamics.integrate_trajectory(f, tp, x, -1.0, 1.0, n_steps)
    return window_values(traj, t_minus, n_steps)


def neis_pointwise_ode(tp: TargetPair, f: FlowField, x, n_steps: int):
    """Zero-placement weights by the coupled ODE system; returns (a, ok)."""
    a, _, ok = dynamics.run_ode_estimator(tp, f, x, n_steps, with_grad=False)
    return a, ok


def neis_pointwise_truncated_inf(tp: TargetPair, f: FlowField, x, window: float,
                                 n_steps: int):
    """Full-line weights truncated to [-T, T]; returns (a, converged, ok).

    converged is True when both integrands have decayed below 1e-12 of
    their grid maximum at both endpoints.
    """
    traj = dynamics.integrate_trajectory(f, tp, x, -window, window, n_steps)
    lf0, lf1 = _log_f(traj)
    dt = 1.0 / n_steps
    w = _trapezoid_weights(lf0.shape[1], dt)
    li0 = logsumexp(lf0, axis=1, b=w[None, :])
    li1 = logsumexp(lf1, axis=1, b=w[None, :])
    # a blow-up freeze zeroes the tail integrand, which is benign here
    # (the guard radius makes both exp(-U_k) vanish first), so only a
    # degenerate denominator invalidates the value
    ok = np.isfinite(li0)
    a = np.where(ok, np.exp(li1 - li0), np.nan)
    thresh = np.log(1e-12)
    conv = np.ones(lf0.shape[0], dtype=bool)
    for lf in (lf0, lf1):
        peak = np.max(lf, axis=1)
        conv &= (lf[:, 0] - peak < thresh) & (lf[:, -1] - peak < thresh)
    return a, conv, ok


def vanilla_values(tp: TargetPair, x):
    """Plain importance weights exp(-(U1 - U0)); one U1 query per point."""
    return np.exp(-(tp.u1(x) - tp.u0(x)))


def _summary(values, ok, method, seed, q_u1, q_grad, t0) -> EstimateReport:
    vals = values[ok]
    n_eff = vals.size
    mean = float(np.mean(vals)) if n_eff else float("nan")
    var = float(np.var(vals, ddof=1)) if n_eff > 1 else 0.0
    stderr = float(np.sqrt(var / n_eff)) if n_eff else float("nan")
    return EstimateReport(method=method, n=int(values.size), mean=mean,
                          variance=var, stderr=stderr, queries_u1=int(q_u1),
                          queries_grad_u1=int(q_grad), seed=int(seed),
                          excluded=int(values.size - n_eff),
                          wall_time=time.perf_counter() - t0)


def estimate(tp: TargetPair, f: FlowField | None, method: str, n: int, seed: int,
             t_minus: float = 0.0, n_steps: int = 50, ais_k: int = 100,
             tau: float = 0.1) -> EstimateReport:
    """Batch estimate of Z1 by the named method over n base samples.

    method is one of "vanilla", "neis_integration", "neis_ode", "ais".
    Deterministic given seed; query tallies cover exactly this run.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    t0 = time.perf_counter()
    q_u1_before = tp.counter.u1
    q_grad_before = tp.counter.grad_u1
    if method == "ais":
        from .ais import AisConfig, ais_estimate
        rep = ais_estimate(tp, AisConfig(K=ais_k, tau=tau, n=n, seed=seed))
        rep.wall_time = time.perf_counter() - t0
        return rep

    x = tp.sample_base(n, seed)
    values = np.empty(n)
    ok = np.ones(n, dtype=bool)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        xb = x[lo:hi]
        if method == "vanilla":
            values[lo:hi] = vanilla_values(tp, xb)
        elif method == "neis_integration":
            values[lo:hi], ok[lo:hi] = neis_pointwise(tp, f, xb, t_minus, n_steps)
        elif method == "neis_ode":
            values[lo:hi], ok[lo:hi] = neis_pointwise_ode(tp, f, xb, n_steps)
        else:
            raise ValueError(f"unknown method {method!r}")
    tag = {"vanilla": "vanilla",
           "neis_integration": f"neis-int(t-={t_minus:g},Nt={n_steps})",
           "neis_ode": f"neis-ode(Nt={n_steps})"}[method]
    return _summary(values, ok, tag, seed,
                    tp.counter.u1 - q_u1_before,
                    tp.counter.grad_u1 - q_grad_before, t0)


def per_sample_query_cost(method: str, n_steps: int = 50, ais_k: int = 100):
    """(U1, grad U1) budget-arithmetic cost per sample.

    Flow estimators touch U1 at 2N grid nodes (N = 2 n_steps nodes per
    unit of the doubled window) or 4 RK4 stages per step; the annealed
    baseline pays 2K to each of U1 and grad U1 per chain.
    """
    if method == "vanilla":
        return 1, 0
    if method == "neis_integration":
        return 2 * (2 * n_steps), 0
    if method == "neis_ode":
        return 4 * n_steps, 0
    if method == "ais":
        return 2 * ais_k, 2 * ais_k
    raise ValueError(f"unknown method {method!r}")
