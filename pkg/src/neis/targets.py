"""Base and target densities for normalizing-constant estimation benchmarks.

A TargetPair bundles the base potential U0 with a benchmark target
potential U1 (rescaled so that the exact normalizer is Z1 = 1), exposes
analytic gradients of U1, and keeps exact tallies of how many times U1
and grad U1 have been queried.  All evaluators are batched: points are
arrays of shape (n, d).
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .special import logsumexp

_CHUNK = 4096  # counter-based RNG chunk size; output depends only on (seed, n, d)

# log I0(2), modified Bessel function of the first kind at 2,
# from the rapidly converging series sum_k (1/(k!)^2); used to
# normalize the periodic three-mode benchmark density.
_LOG_I0_2 = math.log(sum(1.0 / math.factorial(k) ** 2 for k in range(40)))


class QueryCounter:
    """Thread-safe tallies of potential and gradient evaluations."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.u1 = 0
        self.grad_u1 = 0

    def add_u1(self, n: int) -> None:
        with self._lock:
            self.u1 += int(n)

    def add_grad_u1(self, n: int) -> None:
        with self._lock:
            self.grad_u1 += int(n)

    def reset(self) -> None:
        with self._lock:
            self.u1 = 0
            self.grad_u1 = 0


class TargetPair:
    """Base density plus target potential with gradient and bookkeeping.

    Attributes:
        dim: space dimension d.
        name: target family tag.
        domain: one of "full", "ball", "torus".
        ball_radius: radius of the restriction ball when domain == "ball".
        exact_log_z1: exact log normalizer when known (0 for benchmarks).
        counter: query tallies for U1 and grad U1.
    """

    def __init__(self, dim: int, name: str, domain: str = "full",
                 ball_radius: float = math.inf, exact_log_z1: float | None = 0.0):
        if dim < 1:
            raise ValueError("dim must be a positive integer")
        self.dim = int(dim)
        self.name = name
        self.domain = domain
        self.ball_radius = ball_radius
        self.exact_log_z1 = exact_log_z1
        self.counter = QueryCounter()

    # -- base potential ------------------------------------------------

    def u0(self, x: np.ndarray) -> np.ndarray:
        """Base potential; standard Gaussian on R^d, uniform on the torus."""
        x = self._check(x)
        if self.domain == "torus":
            return np.zeros(x.shape[0])
        return 0.5 * np.sum(x * x, axis=1) + 0.5 * self.dim * math.log(2.0 * math.pi)

    def grad_u0(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        if self.domain == "torus":
            return np.zeros_like(x)
        return x

    # -- target potential ----------------------------------------------

    def u1(self, x: np.ndarray) -> np.ndarray:
        """Target potential U1; +inf outside the domain. Counts queries."""
        x = self._check(x)
        self.counter.add_u1(x.shape[0])
        vals = self._u1_raw(x)
        if self.domain == "ball":
            outside = np.sum(x * x, axis=1) > self.ball_radius ** 2
            vals = np.where(outside, np.inf, vals)
        return vals

    def grad_u1(self, x: np.ndarray) -> np.ndarray:
        """Gradient of U1; errors outside the domain interior. Counts queries."""
        x = self._check(x)
        if self.domain == "ball":
            if np.any(np.sum(x * x, axis=1) >= self.ball_radius ** 2):
                raise ValueError("grad_u1 evaluated outside the domain interior")
        self.counter.add_grad_u1(x.shape[0])
        return self._grad_u1_raw(x)

    def _u1_raw(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _grad_u1_raw(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        return x

    # -- base sampling --------------------------------------------------

    def sample_base(self, n: int, seed: int) -> np.ndarray:
        """n i.i.d. base samples, bit-reproducible given (seed, n, dim).

        Uses counter-based (Philox) streams keyed by (seed, chunk index),
        so the i-th sample is the same regardless of batch size or any
        parallel split of the work.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        d = self.dim
        out = np.empty((n, d))
        for j in range((n + _CHUNK - 1) // _CHUNK):
            lo = j * _CHUNK
            hi = min(lo + _CHUNK, n)
            gen = np.random.Generator(np.random.Philox(key=[seed, j]))
            block = (gen.random((_CHUNK, d)) if self.domain == "torus"
                     else gen.standard_normal((_CHUNK, d)))
            out[lo:hi] = block[: hi - lo]
        return out


class GaussianMixtureTarget(TargetPair):
    """Normalized Gaussian mixture with diagonal covariances (Z1 = 1).

    Attributes:
        weights: (K,) probability vector.
        means: (K, d) mode centers.
        variances: (K, d) per-mode diagonal variances.
    """

    def __init__(self, weights, means, variances, name="gauss-mix"):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        super().__init__(means.shape[1], name)
        self.weights = np.asarray(weights, dtype=float)
        self.means = means
        self.variances = np.atleast_2d(np.asarray(variances, dtype=float))
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be strictly positive")
        # per-mode log normalizers of the Gaussian densities
        self._log_norm = -0.5 * np.sum(np.log(2.0 * math.pi * self.variances), axis=1)

    def _component_logs(self, x: np.ndarray) -> np.ndarray:
        """(n, K) log of weight_k * N(x; mu_k, Sigma_k)."""
        diff = x[:, None, :] - self.means[None, :, :]
        quad = 0.5 * np.sum(diff * diff / self.variances[None, :, :], axis=2)
        return np.log(self.weights)[None, :] + self._log_norm[None, :] - quad

    def _u1_raw(self, x: np.ndarray) -> np.ndarray:
        return -logsumexp(self._component_logs(x), axis=1)

    def _grad_u1_raw(self, x: np.ndarray) -> np.ndarray:
        logs = self._component_logs(x)
        r = np.exp(logs - logsumexp(logs, axis=1)[:, None])  # responsibilities
        diff = x[:, None, :] - self.means[None, :, :]
        return np.sum(r[:, :, None] * diff / self.variances[None, :, :], axis=1)


class GaussianTarget(GaussianMixtureTarget):
    """Single normalized Gaussian N(varpi, diag(sigma2))."""

    def __init__(self, sigma2, varpi):
        sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=float))
        varpi = np.atleast_1d(np.asarray(varpi, dtype=float))
        super().__init__([1.0], varpi[None, :], sigma2[None, :], name="gaussian")
        self.sigma2 = sigma2
        self.varpi = varpi


class FunnelTarget(TargetPair):
    """Funnel potential in d dimensions, restricted to a ball of radius 25.

    U1(x) = x1^2/18 + (1/2)ln(18 pi)
          + sum_{i>=2} [x_i^2 / (2 e^{x1}) + (1/2)ln(2 pi e^{x1})]
    """

    def __init__(self, dim: int = 10, radius: float = 25.0):
        super().__init__(dim, "funnel", domain="ball", ball_radius=radius)

    def _u1_raw(self, x: np.ndarray) -> np.ndarray:
        x1 = x[:, 0]
        rest_sq = np.sum(x[:, 1:] ** 2, axis=1)
        d = self.dim
        return (x1 * x1 / 18.0 + 0.5 * math.log(18.0 * math.pi)
                + 0.5 * rest_sq * np.exp(-x1)
                + 0.5 * (d - 1) * (math.log(2.0 * math.pi) + x1))

    def _grad_u1_raw(self, x: np.ndarray) -> np.ndarray:
        x1 = x[:, 0]
        rest_sq = np.sum(x[:, 1:] ** 2, axis=1)
        g = np.empty_like(x)
        g[:, 0] = x1 / 9.0 + 0.5 * (self.dim - 1) - 0.5 * rest_sq * np.exp(-x1)
        g[:, 1:] = x[:, 1:] * np.exp(-x1)[:, None]
        return g


class TorusMixTarget(TargetPair):
    """Three-mode periodic density on the unit torus, normalized to Z1 = 1.

    rho1(x) = (1/3) sum_modes phi(x - a) / I0(2)^2 with
    phi(y) = exp(2 cos 2 pi y1 + 2 cos 2 pi y2).
    """

    MODES = np.array([[0.3, 0.3], [0.7, 0.3], [0.3, 0.7]])

    def __init__(self):
        super().__init__(2, "torus-mix", domain="torus")
        self._log_norm = math.log(len(self.MODES)) + 2.0 * _LOG_I0_2

    def _mode_scores(self, x: np.ndarray) -> np.ndarray:
        ang = 2.0 * math.pi * (x[:, None, :] - self.MODES[None, :, :])
        return np.sum(2.0 * np.cos(ang), axis=2)  # (n, 3)

    def _u1_raw(self, x: np.ndarray) -> np.ndarray:
        return -(logsumexp(self._mode_scores(x), axis=1) - self._log_norm)

    def _grad_u1_raw(self, x: np.ndarray) -> np.ndarray:
        s = self._mode_scores(x)
        r = np.exp(s - logsumexp(s, axis=1)[:, None])
        ang = 2.0 * math.pi * (x[:, None, :] - self.MODES[None, :, :])
        # d(-s_m)/dx_k = 4 pi sin(2 pi (x_k - a_mk))
        return np.sum(r[:, :, None] * 4.0 * math.pi * np.sin(ang), axis=1)


class Custom1DTarget(TargetPair):
    """User-supplied 1D potential with analytic gradient, for diagnostics."""

    def __init__(self, u1_func, grad_func, log_z1: float | None = None):
        super().__init__(1, "custom-1d", exact_log_z1=log_z1)
        self._f = u1_func
        self._g = grad_func

    def _u1_raw(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._f(x[:, 0]), dtype=float)

    def _grad_u1_raw(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._g(x[:, 0]), dtype=float)[:, None]


# -- benchmark factories ------------------------------------------------

def make_gauss_mix_2d() -> GaussianMixtureTarget:
    """Asymmetric two-mode 2D benchmark: weights (1/5, 4/5), modes at
    5 e1 and -5 e2, common variance 0.1."""
    return GaussianMixtureTarget(
        weights=[0.2, 0.8],
        means=[[5.0, 0.0], [0.0, -5.0]],
        variances=[[0.1, 0.1], [0.1, 0.1]],
        name="gauss-mix-2d",
    )


def make_gauss_mix_10d() -> GaussianMixtureTarget:
    """Symmetric four-mode 10D benchmark: modes 5(cos(i pi/2), sin(i pi/2), 0, ...),
    variances (0.1, 0.1, 0.5, ..., 0.5), equal weights."""
    lam, d = 5.0, 10
    means = np.zeros((4, d))
    for i in range(1, 5):
        means[i - 1, 0] = lam * math.cos(i * math.pi / 2.0)
        means[i - 1, 1] = lam * math.sin(i * math.pi / 2.0)
    means = np.round(means, 12)  # kill 1e-16 cosine residue at right angles
    var = np.full(d, 0.5)
    var[:2] = 0.1
    return GaussianMixtureTarget(
        weights=[0.25] * 4, means=means, variances=np.tile(var, (4, 1)),
        name="gauss-mix-10d",
    )


def make_funnel_10d() -> FunnelTarget:
    return FunnelTarget(dim=10, radius=25.0)


def make_torus_mix_2d() -> TorusMixTarget:
    return TorusMixTarget()


def make_gaussian(sigma2, varpi) -> GaussianTarget:
    return GaussianTarget(sigma2, varpi)


def make_custom_1d(u1_func, grad_func, log_z1=None) -> Custom1DTarget:
    return Custom1DTarget(u1_func, grad_func, log_z1)


def vanilla_variance_exact(tp: TargetPair) -> float:
    """Exact variance of the plain importance-sampling weight e^{-(U1-U0)}
    under the base density, for Gaussian-mixture targets.

    Var = int rho1^2 / rho0 - Z1^2, evaluated by closed-form
    Gaussian-product integrals per dimension and mode pair.
    """
    if not isinstance(tp, GaussianMixtureTarget):
        raise TypeError("closed form available for Gaussian-mixture targets only")
    w, mu, var = tp.weights, tp.means, tp.variances
    K = len(w)
    total = 0.0
    for i in range(K):
        for j in range(K):
            log_term = math.log(w[i]) + math.log(w[j])
            for k in range(tp.dim):
                v1, v2 = var[i, k], var[j, k]
                m1, m2 = mu[i, k], mu[j, k]
                a = 1.0 / v1 + 1.0 / v2 - 1.0
                if a <= 0:
                    raise ValueError("second moment diverges: component too wide")
                b = m1 / v1 + m2 / v2
                c = m1 * m1 / (2.0 * v1) + m2 * m2 / (2.0 * v2)
                log_term += (-0.5 * math.log(v1 * v2) - 0.5 * math.log(a)
                             + b * b / (2.0 * a) - c)
            total += math.exp(log_term)
    return total - 1.0
