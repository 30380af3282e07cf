"""RK4 integration of flow maps, log-Jacobians, and sensitivity states.

All integrators are batched over initial conditions (x of shape (n, d))
and use the classical fourth-order Runge-Kutta scheme with a uniform
step.  The backward branch of a trajectory is obtained by integrating
the reversed velocity -b forward in time.  A blow-up guard freezes any
sample whose state exceeds 1e6 in norm or turns non-finite; such samples
are flagged and their subsequent weights treated as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flows import FlowField
from .targets import TargetPair

BLOWUP_RADIUS = 1.0e6


@dataclass
class Trajectory:
    """Time-gridded record of a batch of flowlines.

    Attributes:
        grid: (M,) time nodes, uniform, containing 0.
        i0: index of t = 0 in grid.
        states: (n, M, d) flow-map states X_t(x).
        log_jac: (n, M) log Jacobian determinants (0 at t = 0).
        u0_samples: (n, M) base potential at the states.
        u1_samples: (n, M) target potential at the states (queries counted).
        div_samples: (n, M) velocity divergence at the states.
        ok: (n,) False where the blow-up guard fired; log_jac is -inf
            from the first bad node onward for those samples.
    """

    grid: np.ndarray
    i0: int
    states: np.ndarray
    log_jac: np.ndarray
    u0_samples: np.ndarray
    u1_samples: np.ndarray
    div_samples: np.ndarray
    ok: np.ndarray


def _rk4_step(rhs, y, dt):
    """One classical RK4 step for a tuple-of-arrays state."""
    k1 = rhs(y)
    k2 = rhs(tuple(a + 0.5 * dt * b for a, b in zip(y, k1)))
    k3 = rhs(tuple(a + 0.5 * dt * b for a, b in zip(y, k2)))
    k4 = rhs(tuple(a + dt * b for a, b in zip(y, k3)))
    return tuple(a + (dt / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
                 for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4))


def _guard(x, log_j, ok):
    """Freeze blown-up samples: mark ok False, pin state, sink log_jac."""
    bad = ~np.isfinite(log_j)
    bad |= ~np.all(np.isfinite(x), axis=1)
    bad |= np.sum(x * x, axis=1) > BLOWUP_RADIUS ** 2
    newly = bad & ok
    if np.any(newly):
        ok = ok & ~newly
        x = np.where(newly[:, None], 0.0, x)
        log_j = np.where(newly, -np.inf, log_j)
    # keep already-dead samples inert
    x = np.where(ok[:, None], x, np.where(np.isfinite(x), x, 0.0))
    return x, log_j, ok


def _integrate_branch(f: FlowField, x0, m_steps: int, dt: float, sign: float):
    """RK4 on (X, log J) with velocity sign*b; returns states and log_jac
    at all m_steps+1 nodes, plus the per-sample ok flags."""
    n, d = x0.shape
    states = np.empty((n, m_steps + 1, d))
    log_jac = np.empty((n, m_steps + 1))
    states[:, 0] = x0
    log_jac[:, 0] = 0.0
    ok = np.ones(n, dtype=bool)
    x = x0.copy()
    lj = np.zeros(n)

    def rhs(y):
        xx, _ = y
        xx = np.where(np.isfinite(xx), np.clip(xx, -10 * BLOWUP_RADIUS, 10 * BLOWUP_RADIUS), 0.0)
        ev = f.evaluate(xx, need={"b", "div"})
        return (sign * ev.b, sign * ev.div_b)

    for m in range(1, m_steps + 1):
        x, lj = _rk4_step(rhs, (x, lj), dt)
        x, lj, ok = _guard(x, lj, ok)
        states[:, m] = x
        log_jac[:, m] = lj
    log_jac[~ok] = np.where(np.isfinite(log_jac[~ok]), log_jac[~ok], -np.inf)
    return states, log_jac, ok


def integrate_trajectory(f: FlowField, tp: TargetPair, x, t_lo: float, t_hi: float,
                         n_steps: int) -> Trajectory:
    """Integrate the flow map of b over [t_lo, t_hi] from t = 0.

    n_steps is the node density per unit time (step dt = 1/n_steps);
    t_lo <= 0 <= t_hi and both must be multiples of dt.  Potentials and
    divergence are sampled at every grid node; each node evaluation of
    U1 counts one query per sample.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not (t_lo <= 0.0 <= t_hi):
        raise ValueError("time range must contain 0")
    dt = 1.0 / n_steps
    m_lo = round(-t_lo * n_steps)
    m_hi = round(t_hi * n_steps)
    if abs(-t_lo * n_steps - m_lo) > 1e-9 or abs(t_hi * n_steps - m_hi) > 1e-9:
        raise ValueError("t_lo and t_hi must be multiples of 1/n_steps")
    n = x.shape[0]
    grid = np.arange(-m_lo, m_hi + 1) * dt
    i0 = m_lo

    fwd_states, fwd_lj, ok_f = _integrate_branch(f, x, m_hi, dt, +1.0) \
        if m_hi > 0 else (x[:, None, :], np.zeros((n, 1)), np.ones(n, dtype=bool))
    bwd_states, bwd_lj, ok_b = _integrate_branch(f, x, m_lo, dt, -1.0) \
        if m_lo > 0 else (x[:, None, :], np.zeros((n, 1)), np.ones(n, dtype=bool))

    M = m_lo + m_hi + 1
    d = x.shape[1]
    states = np.empty((n, M, d))
    log_jac = np.empty((n, M))
    states[:, i0:] = fwd_states
    log_jac[:, i0:] = fwd_lj
    states[:, :i0] = bwd_states[:, 1:][:, ::-1]
    log_jac[:, :i0] = bwd_lj[:, 1:][:, ::-1]
    ok = ok_f & ok_b

    flat = states.reshape(n * M, d)
    u0 = tp.u0(flat).reshape(n, M)
    u1 = tp.u1(flat).reshape(n, M)
    div = f.evaluate(flat, need={"div"}).div_b.reshape(n, M)
    return Trajectory(grid, i0, states, log_jac, u0, u1, div, ok)


@dataclass
class SensitivityHistory:
    """Parameter-sensitivity states along a trajectory.

    Attributes:
        delta_x: (n, M, d, P) state sensitivities dX_t/dtheta.
        H: (n, M, P) accumulated grad(div b) . delta_x integrals from 0.
        L: (n, M, P) accumulated d_theta(div b) integrals from 0.
    """

    delta_x: np.ndarray
    H: np.ndarray
    L: np.ndarray


def _integrate_sens_branch(f: FlowField, x0, m_steps: int, dt: float, sign: float):
    n, d = x0.shape
    P = f.n_params
    xs = np.empty((n, m_steps + 1, d))
    ljs = np.empty((n, m_steps + 1))
    dxs = np.empty((n, m_steps + 1, d, P))
    Hs = np.empty((n, m_steps + 1, P))
    Ls = np.empty((n, m_steps + 1, P))
    xs[:, 0] = x0
    ljs[:, 0] = 0.0
    dxs[:, 0] = 0.0
    Hs[:, 0] = 0.0
    Ls[:, 0] = 0.0
    ok = np.ones(n, dtype=bool)
    y = (x0.copy(), np.zeros(n), np.zeros((n, d, P)), np.zeros((n, P)), np.zeros((n, P)))

    def rhs(yy):
        xx, _, dx, _, _ = yy
        xx = np.where(np.isfinite(xx), np.clip(xx, -10 * BLOWUP_RADIUS, 10 * BLOWUP_RADIUS), 0.0)
        ev = f.evaluate(xx, need={"b", "div", "jac", "grad_div", "dtheta_b", "dtheta_div"})
        ddx = ev.jac_b @ dx + ev.dtheta_b
        dH = (ev.grad_div_b[:, None, :] @ dx)[:, 0, :]
        return (sign * ev.b, sign * ev.div_b, sign * ddx, sign * dH, sign * ev.dtheta_div_b)

    for m in range(1, m_steps + 1):
        y = _rk4_step(rhs, y, dt)
        x, lj, dx, H, L = y
        x, lj, ok = _guard(x, lj, ok)
        y = (x, lj, dx, H, L)
        xs[:, m] = x
        ljs[:, m] = lj
        dxs[:, m] = dx
        Hs[:, m] = H
        Ls[:, m] = L
    return xs, ljs, dxs, Hs, Ls, ok


def integrate_sensitivity(f: FlowField, tp: TargetPair, x, t_lo: float, t_hi: float,
                          n_steps: int):
    """Jointly integrate trajectory and sensitivity states over [t_lo, t_hi].

    Returns (Trajectory, SensitivityHistory); the sensitivity ODE is
    d(delta X)/dt = grad b . delta X + d_theta b with delta X(0) = 0, and
    H, L accumulate the integrals entering the weight derivatives.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dt = 1.0 / n_steps
    m_lo = round(-t_lo * n_steps)
    m_hi = round(t_hi * n_steps)
    n, d = x.shape
    P = f.n_params

    def empty():
        return (x[:, None, :], np.zeros((n, 1)), np.zeros((n, 1, d, P)),
                np.zeros((n, 1, P)), np.zeros((n, 1, P)), np.ones(n, dtype=bool))

    fw = _integrate_sens_branch(f, x, m_hi, dt, +1.0) if m_hi > 0 else empty()
    bw = _integrate_sens_branch(f, x, m_lo, dt, -1.0) if m_lo > 0 else empty()

    M = m_lo + m_hi + 1
    i0 = m_lo

    def weave(a_f, a_b):
        out = np.empty((n, M) + a_f.shape[2:])
        out[:, i0:] = a_f
        out[:, :i0] = a_b[:, 1:][:, ::-1]
        return out

    states = weave(fw[0], bw[0])
    log_jac = weave(fw[1], bw[1])
    ok = fw[5] & bw[5]
    grid = np.arange(-m_lo, m_hi + 1) * dt

    flat = states.reshape(n * M, d)
    u0 = tp.u0(flat).reshape(n, M)
    u1 = tp.u1(flat).reshape(n, M)
    div = f.evaluate(flat, need={"div"}).div_b.reshape(n, M)
    traj = Trajectory(grid, i0, states, log_jac, u0, u1, div, ok)
    sens = SensitivityHistory(weave(fw[2], bw[2]), weave(fw[3], bw[3]),
                              weave(fw[4], bw[4]))
    return traj, sens


# ----------------------------------------------------------------------
# coupled forward/reversed system for the zero-placement estimator

def run_ode_estimator(tp: TargetPair, f: FlowField, x, n_steps: int,
                      with_grad: bool = False):
    """Estimator weight A_{0,1}(x) (and optionally its parameter gradient)
    by pure ODE propagation, with no stored trajectory.

    A reversed pass (velocity -b over one unit of time) supplies the
    lagged initial data X_{-1}, J_{-1}, the window integral over [-1, 0],
    and their sensitivities; the forward pass then advances the weight
    alpha_t and, when requested, its gradient d_t.  U1 is queried at every
    RK4 stage of the forward pass (4 n_steps per sample), and grad U1
    likewise when the gradient is requested.

    Returns (alpha, grad, ok): alpha (n,), grad (n, P) or None, ok (n,).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    P = f.n_params
    dt = 1.0 / n_steps
    # per-sample scaling e^{shift} applied to both F0 and F1 cancels in
    # alpha and its gradient; keeps the window integral well-scaled
    shift = tp.u0(x)

    ok = np.ones(n, dtype=bool)

    def f0(xx, lj):
        return np.exp(-tp.u0(xx) + shift + lj)

    # ---- reversed pass: s in [0, 1], states X_{-s} etc.
    if with_grad:
        y = (x.copy(), np.zeros(n), np.zeros(n),
             np.zeros((n, d, P)), np.zeros((n, P)), np.zeros((n, P)),
             np.zeros((n, P)))

        def rhs_rev(yy):
            xx, lj, _, dx, H, L, _ = yy
            xx = np.where(np.isfinite(xx), np.clip(xx, -10 * BLOWUP_RADIUS, 10 * BLOWUP_RADIUS), 0.0)
            ev = f.evaluate(xx, need={"b", "div", "jac", "grad_div", "dtheta_b", "dtheta_div"})
            F0 = f0(xx, lj)
            ddx = ev.jac_b @ dx + ev.dtheta_b
            dH = (ev.grad_div_b[:, None, :] @ dx)[:, 0, :]
            dF0 = F0[:, None] * ((-tp.grad_u0(xx)[:, None, :] @ dx)[:, 0, :] + H + L)
            return (-ev.b, -ev.div_b, F0, -ddx, -dH, -ev.dtheta_div_b, dF0)
    else:
        y = (x.copy(), np.zeros(n), np.zeros(n))

        def rhs_rev(yy):
            xx, lj, _ = yy
            xx = np.where(np.isfinite(xx), np.clip(xx, -10 * BLOWUP_RADIUS, 10 * BLOWUP_RADIUS), 0.0)
            ev = f.evaluate(xx, need={"b", "div"})
            return (-ev.b, -ev.div_b, f0(xx, lj))

    for _ in range(n_steps):
        y = _rk4_step(rhs_rev, y, dt)
        xr, ljr = y[0], y[1]
        xr, ljr, ok = _guard(xr, ljr, ok)
        y = (xr, ljr) + y[2:]

    if with_grad:
        x_lag0, lj_lag0, B0, dx_lag0, H_lag0, L_lag0, g0 = y
    else:
        x_lag0, lj_lag0, B0 = y
        dx_lag0 = H_lag0 = L_lag0 = g0 = None

    # ---- forward pass: t in [0, 1]
    if with_grad:
        y = (x.copy(), np.zeros(n), x_lag0, lj_lag0, B0, np.zeros(n),
             np.zeros((n, d, P)), np.zeros((n, P)), np.zeros((n, P)),
             dx_lag0, H_lag0, L_lag0, g0, np.zeros((n, P)))
    else:
        y = (x.copy(), np.zeros(n), x_lag0, lj_lag0, B0, np.zeros(n))

    def rhs_fwd(yy):
        xx, lj, xl, ljl = yy[0], yy[1], yy[2], yy[3]
        B = yy[4]
        xx = np.where(np.isfinite(xx), np.clip(xx, -10 * BLOWUP_RADIUS, 10 * BLOWUP_RADIUS), 0.0)
        xl = np.where(np.isfinite(xl), np.clip(xl, -10 * BLOWUP_RADIUS, 10 * BLOWUP_RADIUS), 0.0)
        need = {"b", "div"}
        if with_grad:
            need |= {"jac", "grad_div", "dtheta_b", "dtheta_div"}
        ev = f.evaluate(xx, need=need)
        evl = f.evaluate(xl, need=need)
        F0 = f0(xx, lj)
        F0l = f0(xl, ljl)
        u1 = tp.u1(xx)
        with np.errstate(over="ignore", invalid="ignore"):
            F1 = np.exp(-u1 + shift + lj)
        Bsafe = np.where(B > 0, B, 1.0)
        d_alpha = np.where(B > 0, F1 / Bsafe, 0.0)
        if not with_grad:
            return (ev.b, ev.div_b, evl.b, evl.div_b, F0 - F0l, d_alpha)
        dx, H, L = yy[6], yy[7], yy[8]
        dxl, Hl, Ll, g = yy[9], yy[10], yy[11], yy[12]
        ddx = ev.jac_b @ dx + ev.dtheta_b
        dH = (ev.grad_div_b[:, None, :] @ dx)[:, 0, :]
        ddxl = evl.jac_b @ dxl + evl.dtheta_b
        dHl = (evl.grad_div_b[:, None, :] @ dxl)[:, 0, :]
        # grad U1 at points with F1 > 0 only; outside-domain states
        # contribute zero weight and zero sensitivity
        gu1 = np.zeros((n, d))
        alive = F1 > 0
        if np.any(alive):
            gu1[alive] = tp.grad_u1(xx[alive])
        dF0 = F0[:, None] * ((-tp.grad_u0(xx)[:, None, :] @ dx)[:, 0, :] + H + L)
        dF0l = F0l[:, None] * ((-tp.grad_u0(xl)[:, None, :] @ dxl)[:, 0, :] + Hl + Ll)
        dF1 = F1[:, None] * ((-gu1[:, None, :] @ dx)[:, 0, :] + H + L)
        d_d = np.where(
            (B > 0)[:, None],
            dF1 / Bsafe[:, None] - (F1 / Bsafe ** 2)[:, None] * g,
            0.0)
        return (ev.b, ev.div_b, evl.b, evl.div_b, F0 - F0l, d_alpha,
                ddx, dH, ev.dtheta_div_b, ddxl, dHl, evl.dtheta_div_b,
                dF0 - dF0l, d_d)

    for _ in range(n_steps):
        y = _rk4_step(rhs_fwd, y, dt)
        xf, ljf = y[0], y[1]
        xf, ljf, ok = _guard(xf, ljf, ok)
        xl, ljl, okl = _guard(y[2], y[3], ok)
        ok = ok & okl
        y = (xf, ljf, xl, ljl) + y[4:]

    alpha = np.where(ok, y[5], np.nan)
    grad = y[13] if with_grad else None
    return alpha, grad, ok
