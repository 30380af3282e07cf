"""Exact parameter gradient of the second moment of the flow estimator.

The second moment M(theta) = E[A(x)^2] has gradient 2 E[A dA/dtheta];
per sample, dA is assembled from the forward sensitivities: with
dF^k = F^k (<-grad U_k(X_t), dX_t> + H_t + L_t), the window quotient
rule gives the integrand dF1/B - F1 dB/B^2.  Both propagation schemes
are provided: quadrature over a stored trajectory (any placement) and
the coupled ODE system (placement at 0).
"""

from __future__ import annotations

import numpy as np

from . import dynamics
from .estimator import _trapezoid_weights
from .flows import FlowField
from .targets import TargetPair

_CHUNK = 2048


def _node_f_and_df(tp: TargetPair, f: FlowField, traj, sens):
    """F0, F1, dF0, dF1 at every node, scaled by exp(U0(x)) per sample."""
    n, M, d = traj.states.shape
    shift = traj.u0_samples[:, traj.i0][:, None]
    with np.errstate(invalid="ignore", over="ignore"):
        f0 = np.exp(-traj.u0_samples + shift + traj.log_jac)
        f1 = np.exp(-traj.u1_samples + shift + traj.log_jac)
    f0 = np.nan_to_num(f0, nan=0.0, posinf=0.0)
    f1 = np.nan_to_num(f1, nan=0.0, posinf=0.0)

    flat = traj.states.reshape(n * M, d)
    gu0 = tp.grad_u0(flat).reshape(n, M, d)
    # grad U1 only where the state carries weight (inside the domain)
    gu1 = np.zeros((n, M, d))
    alive = np.isfinite(traj.u1_samples).ravel()
    if np.any(alive):
        gu1.reshape(n * M, d)[alive] = tp.grad_u1(flat[alive])

    common = sens.H + sens.L  # (n, M, P)
    df0 = f0[:, :, None] * ((-gu0[:, :, None, :] @ sens.delta_x)[:, :, 0, :] + common)
    df1 = f1[:, :, None] * ((-gu1[:, :, None, :] @ sens.delta_x)[:, :, 0, :] + common)
    return f0, f1, df0, df1


def grad_pointwise_integration(tp: TargetPair, f: FlowField, x, t_minus: float,
                               n_steps: int):
    """Per-sample (A, dA/dtheta, ok) by trajectory quadrature.

    Uses the same trapezoid stencils as the estimator on a batch of
    points x; t_minus must be a grid-aligned placement in [-1, 0].
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dt = 1.0 / n_steps
    m_lo = round(t_minus * n_steps)
    if abs(t_minus * n_steps - m_lo) > 1e-9 or not -n_steps <= m_lo <= 0:
        raise ValueError("t_minus must be a grid-aligned placement in [-1, 0]")
    traj, sens = dynamics.integrate_sensitivity(f, tp, x, -1.0, 1.0, n_steps)
    f0, f1, df0, df1 = _node_f_and_df(tp, f, traj, sens)
    n = x.shape[0]
    P = f.n_params
    i0 = traj.i0
    w = _trapezoid_weights(n_steps + 1, dt)
    a = np.zeros(n)
    da = np.zeros((n, P))
    ok = traj.ok.copy()
    for j, m in enumerate(range(m_lo, m_lo + n_steps + 1)):
        sl = slice(i0 + m - (m_lo + n_steps), i0 + m - m_lo + 1)
        B = f0[:, sl] @ w
        dB = np.einsum("nmp,m->np", df0[:, sl], w)
        good = B > 0
        ok &= good
        Bs = np.where(good, B, 1.0)
        a += w[j] * np.where(good, f1[:, i0 + m] / Bs, 0.0)
        da += w[j] * np.where(good[:, None],
                              df1[:, i0 + m] / Bs[:, None]
                              - (f1[:, i0 + m] / Bs ** 2)[:, None] * dB,
                              0.0)
    a = np.where(ok, a, np.nan)
    return a, da, ok


def grad_pointwise_ode(tp: TargetPair, f: FlowField, x, n_steps: int):
    """Per-sample (A, dA/dtheta, ok) by the coupled ODE system (t- = 0)."""
    a, da, ok = dynamics.run_ode_estimator(tp, f, x, n_steps, with_grad=True)
    return a, da, ok


def grad_batch(tp: TargetPair, f: FlowField, samples, t_minus: float,
               n_steps: int, center: bool = False, scheme: str = "auto"):
    """Batch loss and gradient of the (optionally centered) second moment.

    Uncentered: loss = mean(A^2), grad = 2 mean(A dA).  Centered: the
    batch mean of A substitutes for the centering expectation and is
    treated as a constant in the gradient.  Returns
    (loss, grad, values, ok).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n = samples.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    use_ode = scheme == "ode" or (scheme == "auto" and t_minus == 0.0)
    if scheme == "ode" and t_minus != 0.0:
        raise ValueError("ODE scheme requires placement at 0")
    a = np.empty(n)
    da = np.empty((n, f.n_params))
    ok = np.ones(n, dtype=bool)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        if use_ode:
            a[lo:hi], da[lo:hi], ok[lo:hi] = grad_pointwise_ode(
                tp, f, samples[lo:hi], n_steps)
        else:
            a[lo:hi], da[lo:hi], ok[lo:hi] = grad_pointwise_integration(
                tp, f, samples[lo:hi], t_minus, n_steps)
    vals = np.where(ok, a, 0.0)
    m = int(np.sum(ok))
    if m == 0:
        raise FloatingPointError("all samples invalid in gradient batch")
    resid = vals - (np.sum(vals) / m if center else 0.0)
    resid = np.where(ok, resid, 0.0)
    loss = float(np.sum(resid ** 2) / m)
    grad = 2.0 / m * np.einsum("n,np->p", resid, np.where(ok[:, None], da, 0.0))
    return loss, grad, a, ok
