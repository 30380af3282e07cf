"""Parametric velocity fields with exact spatial and parameter derivatives.

Every family evaluates, in batch, any requested subset of:
b, the Jacobian grad b, the divergence div b, grad(div b), and the
parameter derivatives d_theta b and d_theta(div b).  All derivatives are
closed-form (softplus has analytic derivatives to third order); nothing
is finite-differenced.  Two-hidden-layer-free (single hidden layer,
depth 2) networks only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .special import logsumexp, lower_gamma_scaled, sigmoid, softplus


@dataclass
class FlowEval:
    """Batched evaluation record; unrequested fields stay None.

    Shapes for a batch of n points in d dimensions with P parameters:
    b (n, d); jac_b (n, d, d); div_b (n,); grad_div_b (n, d);
    dtheta_b (n, d, P); dtheta_div_b (n, P).
    """

    b: np.ndarray | None = None
    jac_b: np.ndarray | None = None
    div_b: np.ndarray | None = None
    grad_div_b: np.ndarray | None = None
    dtheta_b: np.ndarray | None = None
    dtheta_div_b: np.ndarray | None = None


ALL_NEEDS = frozenset({"b", "jac", "div", "grad_div", "dtheta_b", "dtheta_div"})


class FlowField:
    """Base class: immutable after construction; theta is a flat vector."""

    kind = "abstract"

    def __init__(self, dim: int, n_params: int):
        self.dim = int(dim)
        self.n_params = int(n_params)

    @property
    def theta(self) -> np.ndarray:
        return self._get_theta()

    def with_theta(self, theta: np.ndarray) -> "FlowField":
        """New flow of the same architecture with the given parameters."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError("theta length mismatch")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        return self._with_theta(theta)

    def evaluate(self, x: np.ndarray, need=("b",)) -> FlowEval:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise ValueError("point dimension mismatch")
        bad = set(need) - ALL_NEEDS
        if bad:
            raise ValueError(f"unknown derivative request {bad}")
        return self._evaluate(x, frozenset(need))

    def _get_theta(self) -> np.ndarray:
        return np.zeros(0)

    def _with_theta(self, theta: np.ndarray) -> "FlowField":
        raise ValueError(f"{self.kind} has no free parameters")

    def _evaluate(self, x: np.ndarray, need) -> FlowEval:
        raise NotImplementedError


def eval_flow(f: FlowField, x: np.ndarray, need=("b",)) -> FlowEval:
    """Functional alias for FlowField.evaluate."""
    return f.evaluate(x, need)


# ----------------------------------------------------------------------
# simple families

class ConstantFlow(FlowField):
    """b(x) = v with the offset v as the parameter vector."""

    kind = "constant"

    def __init__(self, v):
        v = np.atleast_1d(np.asarray(v, dtype=float))
        super().__init__(v.size, v.size)
        self.v = v

    def _get_theta(self):
        return self.v.copy()

    def _with_theta(self, theta):
        return ConstantFlow(theta)

    def _evaluate(self, x, need):
        n, d = x.shape
        out = FlowEval()
        if "b" in need:
            out.b = np.broadcast_to(self.v, (n, d)).copy()
        if "jac" in need:
            out.jac_b = np.zeros((n, d, d))
        if "div" in need:
            out.div_b = np.zeros(n)
        if "grad_div" in need:
            out.grad_div_b = np.zeros((n, d))
        if "dtheta_b" in need:
            out.dtheta_b = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        if "dtheta_div" in need:
            out.dtheta_div_b = np.zeros((n, d))
        return out


class LinearFixedFlow(FlowField):
    """b(x) = Lam x + v with fixed (non-trainable) Lam, v."""

    kind = "linear-fixed"

    def __init__(self, lam, v):
        lam = np.asarray(lam, dtype=float)
        v = np.atleast_1d(np.asarray(v, dtype=float))
        super().__init__(v.size, 0)
        self.lam = lam
        self.v = v

    def _evaluate(self, x, need):
        n, d = x.shape
        out = FlowEval()
        if "b" in need:
            out.b = x @ self.lam.T + self.v
        if "jac" in need:
            out.jac_b = np.broadcast_to(self.lam, (n, d, d)).copy()
        if "div" in need:
            out.div_b = np.full(n, np.trace(self.lam))
        if "grad_div" in need:
            out.grad_div_b = np.zeros((n, d))
        if "dtheta_b" in need:
            out.dtheta_b = np.zeros((n, d, 0))
        if "dtheta_div" in need:
            out.dtheta_div_b = np.zeros((n, 0))
        return out


class GenericLinearFlow(FlowField):
    """Trainable linear ansatz b(x) = W1 x + b1; theta = (W1 row-major, b1)."""

    kind = "generic-linear"

    def __init__(self, dim: int, theta=None):
        super().__init__(dim, dim * dim + dim)
        if theta is None:
            theta = np.zeros(self.n_params)
        self._theta = np.asarray(theta, dtype=float).copy()

    @property
    def w1(self):
        d = self.dim
        return self._theta[: d * d].reshape(d, d)

    @property
    def b1(self):
        return self._theta[self.dim * self.dim:]

    def _get_theta(self):
        return self._theta.copy()

    def _with_theta(self, theta):
        return GenericLinearFlow(self.dim, theta)

    def _evaluate(self, x, need):
        n, d = x.shape
        w1, b1 = self.w1, self.b1
        out = FlowEval()
        if "b" in need:
            out.b = x @ w1.T + b1
        if "jac" in need:
            out.jac_b = np.broadcast_to(w1, (n, d, d)).copy()
        if "div" in need:
            out.div_b = np.full(n, np.trace(w1))
        if "grad_div" in need:
            out.grad_div_b = np.zeros((n, d))
        if "dtheta_b" in need:
            dt = np.zeros((n, d, self.n_params))
            for i in range(d):
                dt[:, i, i * d:(i + 1) * d] = x  # dB_i / dW1[i, :]
                dt[:, i, d * d + i] = 1.0
            out.dtheta_b = dt
        if "dtheta_div" in need:
            dt = np.zeros((n, self.n_params))
            for i in range(d):
                dt[:, i * d + i] = 1.0  # trace picks diagonal W1 entries
            out.dtheta_div_b = dt
        return out


class TwoParamFunnelFlow(FlowField):
    """b(x) = -(beta, alpha x_2, ..., alpha x_d); theta = (alpha, beta)."""

    kind = "two-param-funnel"

    def __init__(self, dim: int, theta=(2.0, 2.0)):
        super().__init__(dim, 2)
        self._theta = np.asarray(theta, dtype=float).copy()

    def _get_theta(self):
        return self._theta.copy()

    def _with_theta(self, theta):
        return TwoParamFunnelFlow(self.dim, theta)

    def _evaluate(self, x, need):
        n, d = x.shape
        alpha, beta = self._theta
        out = FlowEval()
        if "b" in need:
            b = -alpha * x
            b[:, 0] = -beta
            out.b = b
        if "jac" in need:
            jac = np.zeros((n, d, d))
            for i in range(1, d):
                jac[:, i, i] = -alpha
            out.jac_b = jac
        if "div" in need:
            out.div_b = np.full(n, -(d - 1) * alpha)
        if "grad_div" in need:
            out.grad_div_b = np.zeros((n, d))
        if "dtheta_b" in need:
            dt = np.zeros((n, d, 2))
            dt[:, 1:, 0] = -x[:, 1:]
            dt[:, 0, 1] = -1.0
            out.dtheta_b = dt
        if "dtheta_div" in need:
            dt = np.zeros((n, 2))
            dt[:, 0] = -(d - 1)
            out.dtheta_div_b = dt
        return out


# ----------------------------------------------------------------------
# single-hidden-layer networks (softplus activation)

def _softplus_derivs(z):
    s = sigmoid(z)
    return s, s * (1.0 - s), s * (1.0 - s) * (1.0 - 2.0 * s)


class GenericMLPFlow(FlowField):
    """b(x) = W2 softplus(W1 x + b1) + b2; theta = (W1, b1, W2, b2).

    Attributes:
        m: hidden width.
    """

    kind = "generic-mlp"

    def __init__(self, dim: int, m: int, theta=None, ell: int = 2):
        if ell != 2:
            raise ValueError("only depth-2 (single hidden layer) networks are supported")
        super().__init__(dim, m * dim + m + dim * m + dim)
        self.m = int(m)
        self.ell = 2
        if theta is None:
            theta = np.zeros(self.n_params)
        self._theta = np.asarray(theta, dtype=float).copy()

    def _unpack(self):
        d, m = self.dim, self.m
        t = self._theta
        w1 = t[: m * d].reshape(m, d)
        b1 = t[m * d: m * d + m]
        w2 = t[m * d + m: m * d + m + d * m].reshape(d, m)
        b2 = t[m * d + m + d * m:]
        return w1, b1, w2, b2

    def _get_theta(self):
        return self._theta.copy()

    def _with_theta(self, theta):
        return GenericMLPFlow(self.dim, self.m, theta)

    def _evaluate(self, x, need):
        n, d = x.shape
        m = self.m
        w1, b1, w2, b2 = self._unpack()
        z = x @ w1.T + b1  # (n, m)
        s1, s2, s3 = _softplus_derivs(z)
        g = np.einsum("ji,ij->j", w1, w2)  # g_j = sum_i W1[j,i] W2[i,j]
        out = FlowEval()
        if "b" in need:
            out.b = softplus(z) @ w2.T + b2
        if "jac" in need:
            out.jac_b = np.einsum("ij,nj,jl->nil", w2, s1, w1)
        if "div" in need:
            out.div_b = s1 @ g
        if "grad_div" in need:
            out.grad_div_b = np.einsum("nj,jl,j->nl", s2, w1, g)
        off_w1, off_b1, off_w2 = 0, m * d, m * d + m
        off_b2 = off_w2 + d * m
        if "dtheta_b" in need:
            dt = np.zeros((n, d, self.n_params))
            # dB_i/dW1[j,k] = W2[i,j] s1_j x_k ; dB_i/db1[j] = W2[i,j] s1_j
            dw1 = np.einsum("ij,nj,nk->nijk", w2, s1, x)
            dt[:, :, off_w1:off_b1] = dw1.reshape(n, d, m * d)
            dt[:, :, off_b1:off_w2] = w2[None, :, :] * s1[:, None, :]
            # dB_i/dW2[p,j] = delta_ip eta(z_j)
            eta = softplus(z)
            dw2 = np.zeros((n, d, d, m))
            idx = np.arange(d)
            dw2[:, idx, idx, :] = eta[:, None, :]
            dt[:, :, off_w2:off_b2] = dw2.reshape(n, d, d * m)
            dt[:, idx, off_b2 + idx] = 1.0
            out.dtheta_b = dt
        if "dtheta_div" in need:
            dt = np.zeros((n, self.n_params))
            # d(div)/dW1[j,k] = s2_j x_k g_j + s1_j W2[k,j]
            dw1 = (np.einsum("nj,nk,j->njk", s2, x, g)
                   + s1[:, :, None] * w2.T[None, :, :])
            dt[:, off_w1:off_b1] = dw1.reshape(n, m * d)
            dt[:, off_b1:off_w2] = s2 * g
            # d(div)/dW2[i,j] = s1_j W1[j,i]
            dw2 = s1[:, None, :] * w1.T[None, :, :]  # (n, d, m) indexed [i, j]
            dt[:, off_w2:off_b2] = dw2.reshape(n, d * m)
            out.dtheta_div_b = dt
        return out


class GradientMLPFlow(FlowField):
    """Gradient field b = grad V of V(x) = w . softplus(W1 x + b1).

    theta = (W1, b1, w); the output bias is dropped as redundant.
    """

    kind = "gradient-mlp"

    def __init__(self, dim: int, m: int, theta=None, ell: int = 2):
        if ell != 2:
            raise ValueError("only depth-2 (single hidden layer) networks are supported")
        super().__init__(dim, m * dim + m + m)
        self.m = int(m)
        self.ell = 2
        if theta is None:
            theta = np.zeros(self.n_params)
        self._theta = np.asarray(theta, dtype=float).copy()

    def _unpack(self):
        d, m = self.dim, self.m
        t = self._theta
        return t[: m * d].reshape(m, d), t[m * d: m * d + m], t[m * d + m:]

    def _get_theta(self):
        return self._theta.copy()

    def _with_theta(self, theta):
        return GradientMLPFlow(self.dim, self.m, theta)

    def potential(self, x):
        """The scalar potential V with b = grad V."""
        w1, b1, w = self._unpack()
        return softplus(np.asarray(x, dtype=float) @ w1.T + b1) @ w

    def _evaluate(self, x, need):
        n, d = x.shape
        m = self.m
        w1, b1, w = self._unpack()
        z = x @ w1.T + b1
        s1, s2, s3 = _softplus_derivs(z)
        wn2 = np.sum(w1 * w1, axis=1)  # |W1_j|^2
        out = FlowEval()
        if "b" in need:
            out.b = (w * s1) @ w1
        if "jac" in need:
            scaled = (w[None, :] * s2)[:, :, None] * w1[None, :, :]  # (n, m, d)
            out.jac_b = np.matmul(scaled.transpose(0, 2, 1), np.broadcast_to(w1, (n, m, d)))
        if "div" in need:
            out.div_b = s2 @ (w * wn2)
        if "grad_div" in need:
            out.grad_div_b = (s3 * (w * wn2)[None, :]) @ w1
        off_w1, off_b1, off_w = 0, m * d, m * d + m
        if "dtheta_b" in need:
            dt = np.zeros((n, d, self.n_params))
            # dB_i/dW1[j,k] = w_j s2_j x_k W1[j,i] + w_j s1_j delta_ik
            c = w[None, :] * s2  # (n, m)
            dw1 = (c[:, None, :, None] * w1.T[None, :, :, None]
                   * x[:, None, None, :])
            diag = w[None, :] * s1  # (n, m)
            idx = np.arange(d)
            # advanced indexing on axes 1 and 3 puts the d axis first
            dw1[:, idx, :, idx] += diag[None, :, :]
            dt[:, :, off_w1:off_b1] = dw1.reshape(n, d, m * d)
            dt[:, :, off_b1:off_w] = c[:, None, :] * w1.T[None, :, :]
            dt[:, :, off_w:] = s1[:, None, :] * w1.T[None, :, :]
            out.dtheta_b = dt
        if "dtheta_div" in need:
            dt = np.zeros((n, self.n_params))
            # d(div)/dW1[j,k] = w_j s3_j x_k |W1_j|^2 + 2 w_j s2_j W1[j,k]
            dw1 = ((s3 * (w * wn2)[None, :])[:, :, None] * x[:, None, :]
                   + 2.0 * (w[None, :] * s2)[:, :, None] * w1[None, :, :])
            dt[:, off_w1:off_b1] = dw1.reshape(n, m * d)
            dt[:, off_b1:off_w] = s3 * (w * wn2)
            dt[:, off_w:] = s2 * wn2
            out.dtheta_div_b = dt
        return out


class BlockMLPFlow(FlowField):
    """Product-structure field for targets that factorize over coordinates.

    The leading two coordinates carry a gradient-MLP field (handling the
    multimodal part of the target); every remaining coordinate i gets a
    decoupled affine field lam_i x_i + v_i.  theta = (mlp theta, lam, v).
    """

    kind = "block-mlp"

    def __init__(self, dim: int, m: int, theta=None, ell: int = 2):
        if dim < 3:
            raise ValueError("block flow requires dimension >= 3")
        if ell != 2:
            raise ValueError("only depth-2 (single hidden layer) networks are supported")
        head_params = m * 2 + m + m
        super().__init__(dim, head_params + 2 * (dim - 2))
        self.m = int(m)
        self.ell = 2
        self._head_params = head_params
        if theta is None:
            theta = np.zeros(self.n_params)
        self._theta = np.asarray(theta, dtype=float).copy()
        self._head = GradientMLPFlow(2, m, self._theta[:head_params])

    @property
    def tail_lam(self):
        k = self.dim - 2
        return self._theta[self._head_params: self._head_params + k]

    @property
    def tail_v(self):
        return self._theta[self._head_params + (self.dim - 2):]

    def _get_theta(self):
        return self._theta.copy()

    def _with_theta(self, theta):
        return BlockMLPFlow(self.dim, self.m, theta)

    def _evaluate(self, x, need):
        n, d = x.shape
        ph, k = self._head_params, d - 2
        xt = x[:, 2:]
        lam, v = self.tail_lam, self.tail_v
        he = self._head.evaluate(x[:, :2], need)
        out = FlowEval()
        if "b" in need:
            out.b = np.concatenate([he.b, lam * xt + v], axis=1)
        if "jac" in need:
            jac = np.zeros((n, d, d))
            jac[:, :2, :2] = he.jac_b
            idx = np.arange(2, d)
            jac[:, idx, idx] = lam
            out.jac_b = jac
        if "div" in need:
            out.div_b = he.div_b + np.sum(lam)
        if "grad_div" in need:
            gd = np.zeros((n, d))
            gd[:, :2] = he.grad_div_b
            out.grad_div_b = gd
        if "dtheta_b" in need:
            dt = np.zeros((n, d, self.n_params))
            dt[:, :2, :ph] = he.dtheta_b
            idx = np.arange(k)
            dt[:, 2 + idx, ph + idx] = xt
            dt[:, 2 + idx, ph + k + idx] = 1.0
            out.dtheta_b = dt
        if "dtheta_div" in need:
            dt = np.zeros((n, self.n_params))
            dt[:, :ph] = he.dtheta_div_b
            dt[:, ph: ph + k] = 1.0
            out.dtheta_div_b = dt
        return out


# ----------------------------------------------------------------------
# analytic zero-variance constructions

class RadialMixtureFlow(FlowField):
    """Closed-form Poisson flow for an isotropic Gaussian mixture target.

    b(x) = (2 pi^{d/2})^{-1} [ sum_i w_i |x-mu_i|^{-d}
           gamma(d/2, |x-mu_i|^2/(2 s_i^2)) (x-mu_i)
           - |x|^{-d} gamma(d/2, |x|^2/2) x ],
    whose divergence is exactly rho1 - rho0.  The removable singularities
    at the centers are handled through the entire function
    gamma(a, u) u^{-a}.  Non-trainable; requires d >= 2 and per-mode
    isotropic variances.
    """

    kind = "radial-mixture"

    def __init__(self, weights, means, variances):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        d = means.shape[1]
        if d < 2:
            raise ValueError("radial construction requires dimension >= 2")
        variances = np.atleast_2d(np.asarray(variances, dtype=float))
        if not np.allclose(variances, variances[:, :1]):
            raise ValueError("per-mode variances must be isotropic")
        super().__init__(d, 0)
        self.weights = np.asarray(weights, dtype=float)
        self.means = means
        self.sigma2 = variances[:, 0]

    def _terms(self, x):
        """Per-mode h and dh/du pieces, plus the base-density term."""
        d = self.dim
        a = 0.5 * d
        C = 2.0 * math.pi ** (0.5 * d)
        diff = x[:, None, :] - self.means[None, :, :]       # (n, K, d)
        r2 = np.sum(diff * diff, axis=2)                    # (n, K)
        u = r2 / (2.0 * self.sigma2[None, :])
        pref = self.weights * (2.0 * self.sigma2) ** (-a) / C
        h = pref[None, :] * lower_gamma_scaled(a, u)
        hp = pref[None, :] * (-lower_gamma_scaled(a + 1.0, u))
        u0 = 0.5 * np.sum(x * x, axis=1)
        pref0 = 2.0 ** (-a) / C
        h0 = pref0 * lower_gamma_scaled(a, u0)
        h0p = pref0 * (-lower_gamma_scaled(a + 1.0, u0))
        return diff, u, h, hp, h0, h0p

    def _log_rho1_terms(self, x):
        diff = x[:, None, :] - self.means[None, :, :]
        quad = 0.5 * np.sum(diff * diff, axis=2) / self.sigma2[None, :]
        ln = -0.5 * self.dim * np.log(2.0 * math.pi * self.sigma2)
        return np.log(self.weights)[None, :] + ln[None, :] - quad

    def _evaluate(self, x, need):
        n, d = x.shape
        out = FlowEval()
        if need & {"b", "jac"}:
            diff, u, h, hp, h0, h0p = self._terms(x)
        if "b" in need:
            out.b = np.sum(h[:, :, None] * diff, axis=1) - h0[:, None] * x
        if "jac" in need:
            eye = np.eye(d)
            jac = np.einsum("nk,ij->nij", h, eye)
            jac += np.einsum("nk,nki,nkj->nij",
                             hp / self.sigma2[None, :], diff, diff)
            jac -= h0[:, None, None] * eye[None, :, :]
            jac -= np.einsum("n,ni,nj->nij", h0p, x, x)
            out.jac_b = jac
        if need & {"div", "grad_div"}:
            logs = self._log_rho1_terms(x)
            rho1 = np.exp(logsumexp(logs, axis=1))
            rho0 = np.exp(-0.5 * np.sum(x * x, axis=1)
                          - 0.5 * d * math.log(2.0 * math.pi))
            if "div" in need:
                out.div_b = rho1 - rho0
            if "grad_div" in need:
                comp = np.exp(logs)  # (n, K) component densities * weights
                diffm = x[:, None, :] - self.means[None, :, :]
                grad_rho1 = -np.sum(
                    comp[:, :, None] * diffm / self.sigma2[None, :, None], axis=1)
                grad_rho0 = -rho0[:, None] * x
                out.grad_div_b = grad_rho1 - grad_rho0
        if "dtheta_b" in need:
            out.dtheta_b = np.zeros((n, d, 0))
        if "dtheta_div" in need:
            out.dtheta_div_b = np.zeros((n, 0))
        return out


class GridGradientFlow(FlowField):
    """Gradient of a periodic potential given by truncated Fourier modes.

    Built from a grid solution V on the unit torus; off-grid evaluation
    uses spectral (trigonometric) interpolation with the mode set
    truncated to |k| <= k_max per axis, so b = grad V stays smooth and
    exactly curl-free.  Non-trainable.
    """

    kind = "grid-gradient"

    def __init__(self, v_hat: np.ndarray, k_max: int = 48):
        # v_hat: full (N, N) DFT of V / N^2 (i.e. Fourier coefficients)
        super().__init__(2, 0)
        N = v_hat.shape[0]
        ks = np.fft.fftfreq(N, d=1.0 / N).astype(int)
        keep = np.abs(ks) <= min(k_max, N // 2 - 1)
        self.k = ks[keep].astype(float)              # (M,)
        self.c = v_hat[np.ix_(keep, keep)]           # (M, M) coefficients

    def _phases(self, x):
        # e^{2 pi i x k} for integer k as powers of one exponential per point
        def axis_phases(xi):
            base = np.exp(2j * math.pi * xi)  # (n,)
            kmax = int(np.max(np.abs(self.k)))
            pos = np.empty((xi.shape[0], kmax + 1), dtype=complex)
            pos[:, 0] = 1.0
            pos[:, 1:] = base[:, None]
            np.cumprod(pos, axis=1, out=pos)
            idx = self.k.astype(int)
            e = np.empty((xi.shape[0], idx.size), dtype=complex)
            neg = idx < 0
            e[:, ~neg] = pos[:, idx[~neg]]
            e[:, neg] = np.conj(pos[:, -idx[neg]])
            return e

        return axis_phases(x[:, 0]), axis_phases(x[:, 1])

    def _evaluate(self, x, need):
        n, d = x.shape
        e1, e2 = self._phases(x)
        tp = 2.0 * math.pi
        k = self.k
        c = self.c
        out = FlowEval()

        def field(coef):
            return np.real(np.sum((e1 @ coef) * e2, axis=1))

        if "b" in need:
            out.b = np.stack([field(1j * tp * k[:, None] * c),
                              field(1j * tp * k[None, :] * c)], axis=1)
        if "jac" in need:
            h11 = field(-(tp * k[:, None]) ** 2 * c)
            h22 = field(-(tp * k[None, :]) ** 2 * c)
            h12 = field(-(tp ** 2) * k[:, None] * k[None, :] * c)
            jac = np.empty((n, 2, 2))
            jac[:, 0, 0] = h11
            jac[:, 1, 1] = h22
            jac[:, 0, 1] = jac[:, 1, 0] = h12
            out.jac_b = jac
        if need & {"div", "grad_div"}:
            lap_c = -(tp ** 2) * (k[:, None] ** 2 + k[None, :] ** 2) * c
            if "div" in need:
                out.div_b = field(lap_c)
            if "grad_div" in need:
                out.grad_div_b = np.stack(
                    [field(1j * tp * k[:, None] * lap_c),
                     field(1j * tp * k[None, :] * lap_c)], axis=1)
        if "dtheta_b" in need:
            out.dtheta_b = np.zeros((n, d, 0))
        if "dtheta_div" in need:
            out.dtheta_div_b = np.zeros((n, 0))
        return out

    def potential_at(self, x):
        e1, e2 = self._phases(np.asarray(x, dtype=float))
        return np.real(np.sum((e1 @ self.c) * e2, axis=1))


# ----------------------------------------------------------------------
# constructors

def mixture_radial_flow(spec) -> RadialMixtureFlow:
    """Zero-variance radial flow for an isotropic Gaussian-mixture target.

    spec may be a GaussianMixtureTarget or a (weights, means, variances)
    triple; the base density is the standard Gaussian.
    """
    if hasattr(spec, "weights"):
        return RadialMixtureFlow(spec.weights, spec.means, spec.variances)
    weights, means, variances = spec
    return RadialMixtureFlow(weights, means, variances)


def gaussian_linear_flow(sigma2, varpi) -> LinearFixedFlow:
    """Zero-variance linear dynamics for a Gaussian target N(varpi, diag(sigma2)):
    Lam = ln(Sigma^{-1/2}) and v = -(I - Sigma^{1/2})^{-1} ln(Sigma^{-1/2}) varpi."""
    sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=float))
    varpi = np.atleast_1d(np.asarray(varpi, dtype=float))
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    sigma = np.sqrt(sigma2)
    lam_diag = -np.log(sigma)
    v = np.zeros_like(varpi)
    deg = np.isclose(sigma, 1.0)
    if np.any(deg & (varpi != 0)):
        raise ValueError("unit variance with nonzero shift has no linear solution")
    nz = ~deg
    v[nz] = np.log(sigma[nz]) / (1.0 - sigma[nz]) * varpi[nz]
    return LinearFixedFlow(np.diag(lam_diag), v)


def _fan_in_uniform(gen, shape, fan_in):
    lim = 1.0 / math.sqrt(fan_in)
    return gen.uniform(-lim, lim, size=shape)


def make_generic_mlp(dim: int, m: int, seed: int) -> GenericMLPFlow:
    gen = np.random.Generator(np.random.Philox(key=[seed, 0]))
    theta = np.zeros(m * dim + m + dim * m + dim)
    theta[: m * dim] = _fan_in_uniform(gen, m * dim, dim)
    off = m * dim + m
    theta[off: off + dim * m] = _fan_in_uniform(gen, dim * m, m)
    return GenericMLPFlow(dim, m, theta)


def make_gradient_mlp(dim: int, m: int, seed: int) -> GradientMLPFlow:
    gen = np.random.Generator(np.random.Philox(key=[seed, 0]))
    theta = np.zeros(m * dim + m + m)
    theta[: m * dim] = _fan_in_uniform(gen, m * dim, dim)
    theta[m * dim + m:] = _fan_in_uniform(gen, m, m)
    return GradientMLPFlow(dim, m, theta)


def make_generic_linear(dim: int, seed: int) -> GenericLinearFlow:
    gen = np.random.Generator(np.random.Philox(key=[seed, 0]))
    theta = np.zeros(dim * dim + dim)
    theta[: dim * dim] = gen.normal(0.0, 1.0 / math.sqrt(dim), size=dim * dim)
    return GenericLinearFlow(dim, theta)


def make_two_param_funnel(dim: int) -> TwoParamFunnelFlow:
    return TwoParamFunnelFlow(dim, (2.0, 2.0))


def make_block_mlp(dim: int, m: int, seed: int,
                   tail_sigma2: float | None = None) -> BlockMLPFlow:
    """Block flow with a seeded gradient-MLP head; when tail_sigma2 is
    given, the affine tail starts at the exact transport for centered
    Gaussian tail coordinates of that variance (lam_i = ln sqrt(sigma2))."""
    head = make_gradient_mlp(2, m, seed)
    theta = np.zeros(head.n_params + 2 * (dim - 2))
    theta[: head.n_params] = head.theta
    if tail_sigma2 is not None:
        if tail_sigma2 <= 0:
            raise ValueError("tail_sigma2 must be positive")
        theta[head.n_params: head.n_params + dim - 2] = 0.5 * math.log(tail_sigma2)
    return BlockMLPFlow(dim, m, theta)


# ----------------------------------------------------------------------
# serialization: ASCII header line + raw little-endian float64 parameters

_KINDS = {
    "constant": lambda dim, m, theta: ConstantFlow(theta),
    "generic-linear": lambda dim, m, theta: GenericLinearFlow(dim, theta),
    "two-param-funnel": lambda dim, m, theta: TwoParamFunnelFlow(dim, theta),
    "generic-mlp": lambda dim, m, theta: GenericMLPFlow(dim, m, theta),
    "gradient-mlp": lambda dim, m, theta: GradientMLPFlow(dim, m, theta),
    "block-mlp": lambda dim, m, theta: BlockMLPFlow(dim, m, theta),
}


def save_flow(f: FlowField, path) -> None:
    if f.kind not in _KINDS:
        raise ValueError(f"{f.kind} is not serializable")
    m = getattr(f, "m", 0)
    ell = getattr(f, "ell", 0)
    with open(path, "wb") as fh:
        fh.write(f"{f.kind} {f.dim} {ell} {m} {f.n_params}\n".encode("ascii"))
        fh.write(f.theta.astype("<f8").tobytes())


def load_flow(path) -> FlowField:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        kind, dim, _ell, m, n_params = (header[0], int(header[1]), int(header[2]),
                                        int(header[3]), int(header[4]))
        theta = np.frombuffer(fh.read(), dtype="<f8").copy()
    if theta.size != n_params:
        raise ValueError("parameter payload length mismatch")
    if kind not in _KINDS:
        raise ValueError(f"unknown flow kind {kind!r}")
    flow = _KINDS[kind](dim, m, theta)
    if flow.n_params != n_params:
        raise ValueError("architecture/parameter count mismatch")
    return flow
