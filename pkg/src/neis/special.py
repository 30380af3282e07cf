"""Special functions used by the analytic flow constructions.

The lower incomplete gamma function is evaluated with the classic
series / continued-fraction split (series for x < a + 1, modified
Lentz continued fraction otherwise), targeting ~1e-12 relative error.
Only a = d/2 with small integer d is ever requested, so no attempt is
made at extreme-parameter robustness.
"""

from __future__ import annotations

import math

import numpy as np

_MAX_ITER = 300
_EPS = 1e-15
_TINY = 1e-300


def _gamma_p_series(a: float, x: np.ndarray) -> np.ndarray:
    """Regularized P(a, x) by power series; valid for x < a + 1."""
    term = np.full(x.shape, 1.0 / a)
    total = term.copy()
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term = term * x / ap
        total += term
        if np.all(np.abs(term) <= np.abs(total) * _EPS):
            break
    return total * np.exp(-x + a * np.log(np.maximum(x, _TINY)) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: np.ndarray) -> np.ndarray:
    """Regularized Q(a, x) by modified Lentz continued fraction; x >= a + 1."""
    b = x + 1.0 - a
    c = np.full(x.shape, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = b + an / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        delta = d * c
        h = h * delta
        if np.all(np.abs(delta - 1.0) < _EPS):
            break
    return h * np.exp(-x + a * np.log(np.maximum(x, _TINY)) - math.lgamma(a))


def gamma_p(a: float, x: np.ndarray | float) -> np.ndarray:
    """Regularized lower incomplete gamma P(a, x) = gamma(a, x) / Gamma(a)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0):
        raise ValueError("gamma_p requires x >= 0")
    out = np.empty(x.shape)
    small = x < a + 1.0
    if np.any(small):
        out[small] = _gamma_p_series(a, x[small])
    if np.any(~small):
        out[~small] = 1.0 - _gamma_q_contfrac(a, x[~small])
    return out


def lower_gamma(a: float, x: np.ndarray | float) -> np.ndarray:
    """Lower incomplete gamma function gamma(a, x)."""
    return gamma_p(a, x) * math.gamma(a)


def lower_gamma_scaled(a: float, x: np.ndarray | float) -> np.ndarray:
    """gamma(a, x) * x**(-a), continued through the removable point x = 0.

    This is an entire function of x with value 1/a at 0; it is the stable
    building block for radial Poisson flows, where the raw x**(-a) factor
    would blow up at mode centers.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape)
    small = x < 0.5
    if np.any(small):
        # alternating series sum_n (-x)^n / (n! (a+n)); converges fast for x < 0.5
        xs = x[small]
        term = np.ones(xs.shape)
        total = np.full(xs.shape, 1.0 / a)
        for n in range(1, 40):
            term = term * (-xs) / n
            contrib = term / (a + n)
            total += contrib
            if np.all(np.abs(contrib) <= np.abs(total) * _EPS):
                break
        out[small] = total
    if np.any(~small):
        xl = x[~small]
        out[~small] = lower_gamma(a, xl) * xl ** (-a)
    return out


def lower_gamma_scaled_deriv(a: float, x: np.ndarray | float) -> np.ndarray:
    """Derivative of lower_gamma_scaled with respect to x (equals -scaled(a+1, x))."""
    return -lower_gamma_scaled(a + 1.0, x)


def softplus(z: np.ndarray) -> np.ndarray:
    """Overflow-safe softplus log(1 + exp(z))."""
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function, the first derivative of softplus."""
    out = np.empty(np.shape(z))
    z = np.asarray(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logsumexp(a: np.ndarray, axis: int = -1, b: np.ndarray | None = None) -> np.ndarray:
    """log(sum(b * exp(a))) along an axis, tolerating -inf entries."""
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    expo = np.exp(a - amax)
    if b is not None:
        expo = expo * b
    s = np.sum(expo, axis=axis)
    with np.errstate(divide="ignore"):
        return np.log(s) + np.squeeze(amax, axis=axis)
