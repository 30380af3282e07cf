"""Normalized-gradient SGD on the flow parameters with assisted biasing.

Early steps may replace each base sample, with a decaying probability
c_i = max(c - i c / (upsilon L), 0), by its image under the time-1 map
of the descent ODE dZ/dt = -varsigma grad U1(Z); this seeds flowlines
near the target modes before the flow has found them.  While c_i > 0
the loss is the batch-centered square (empirical variance surrogate);
afterwards it is the plain second moment on clean base batches.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .dynamics import BLOWUP_RADIUS, _guard, _rk4_step
from .flows import FlowField
from .gradient import grad_batch
from .targets import TargetPair, _CHUNK


@dataclass
class AssistConfig:
    c: float
    upsilon: float
    varsigma: float = 1.0
    z_steps: int = 10


@dataclass
class TrainConfig:
    steps: int
    batch: int
    t_minus: float
    n_steps: int
    lr: float = 0.5
    assist: AssistConfig | None = None
    seed: int = 0


@dataclass
class StepRecord:
    i: int
    c_i: float
    loss: float
    variance: float
    grad_norm: float
    theta_hash: str
    biased: bool


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    final_theta: np.ndarray | None = None
    best_theta: np.ndarray | None = None
    best_variance: float = float("inf")
    aborted: bool = False


def _theta_hash(theta: np.ndarray) -> str:
    return hashlib.sha256(theta.tobytes()).hexdigest()[:16]


def c_schedule(i: int, c: float, upsilon: float, steps: int) -> float:
    """Replacement probability at step i: max(c - i c / (upsilon L), 0)."""
    return max(c - i * c / (upsilon * steps), 0.0)


def assist_map(tp: TargetPair, x, varsigma: float, z_steps: int) -> np.ndarray:
    """Time-1 map of dZ/dt = -varsigma grad U1(Z), by RK4 in z_steps steps."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    ok = np.ones(x.shape[0], dtype=bool)
    lj = np.zeros(x.shape[0])

    def rhs(y):
        z, _ = y
        z = np.where(np.isfinite(z), np.clip(z, -10 * BLOWUP_RADIUS, 10 * BLOWUP_RADIUS), 0.0)
        return (-varsigma * tp.grad_u1(z), np.zeros(z.shape[0]))

    y = (x.copy(), lj)
    dt = 1.0 / z_steps
    for _ in range(z_steps):
        y = _rk4_step(rhs, y, dt)
        z, lj = y
        z, lj, ok = _guard(z, lj, ok)
        y = (z, lj)
    if not np.all(ok):
        raise FloatingPointError("descent map blew up")
    return y[0]


def sample_biased(tp: TargetPair, n: int, c_i: float, varsigma: float,
                  z_steps: int, seed: int) -> np.ndarray:
    """Base batch with each point independently replaced by its descent-map
    image with probability c_i; deterministic given seed."""
    if not 0.0 <= c_i <= 1.0:
        raise ValueError("c_i must lie in [0, 1]")
    x = tp.sample_base(n, seed)
    if c_i == 0.0:
        return x
    u = np.empty(n)
    for j in range((n + _CHUNK - 1) // _CHUNK):
        lo, hi = j * _CHUNK, min((j + 1) * _CHUNK, n)
        gen = np.random.Generator(np.random.Philox(key=[seed, (1 << 32) + j]))
        u[lo:hi] = gen.random(_CHUNK)[: hi - lo]
    pick = u < c_i
    if np.any(pick):
        x = x.copy()
        x[pick] = assist_map(tp, x[pick], varsigma, z_steps)
    return x


def train(tp: TargetPair, f0: FlowField, cfg: TrainConfig):
    """Run the SGD loop; returns (best flow, final flow, history).

    Each step takes a unit step of length lr along -grad/|grad| (skipped
    when |grad| < 1e-12); the learning rate halves once the assisted
    phase ends.  The best flow is the one with the smallest clean-batch
    variance recorded after the assisted phase.
    """
    if f0.dim != tp.dim:
        raise ValueError("flow and target dimensions differ")
    hist = TrainHistory()
    flow = f0
    L = cfg.steps
    for i in range(L):
        if cfg.assist is not None:
            c_i = c_schedule(i, cfg.assist.c, cfg.assist.upsilon, L)
            varsigma, z_steps = cfg.assist.varsigma, cfg.assist.z_steps
            lr = cfg.lr if i < cfg.assist.upsilon * L else 0.5 * cfg.lr
        else:
            c_i, varsigma, z_steps = 0.0, 1.0, 1
            lr = cfg.lr
        step_seed = (cfg.seed << 20) + i
        samples = sample_biased(tp, cfg.batch, c_i, varsigma, z_steps, step_seed)
        biased = c_i > 0.0
        try:
            loss, grad, values, ok = grad_batch(
                tp, flow, samples, cfg.t_minus, cfg.n_steps, center=biased)
        except FloatingPointError:
            hist.aborted = True
            break
        good = values[ok]
        variance = float(np.var(good, ddof=1)) if good.size > 1 else float("nan")
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            hist.aborted = True
            hist.records.append(StepRecord(i, c_i, float(loss), variance,
                                           float("nan"), _theta_hash(flow.theta),
                                           biased))
            break
        gnorm = float(np.linalg.norm(grad))
        hist.records.append(StepRecord(i, c_i, float(loss), variance, gnorm,
                                       _theta_hash(flow.theta), biased))
        if not biased and variance < hist.best_variance:
            hist.best_variance = variance
            hist.best_theta = flow.theta
        if gnorm >= 1e-12:
            flow = flow.with_theta(flow.theta - lr * grad / gnorm)
    hist.final_theta = flow.theta
    if hist.best_theta is None:
        hist.best_theta = flow.theta
    best = f0.with_theta(hist.best_theta)
    return best, flow, hist


def history_csv_rows(hist: TrainHistory):
    """Yield (header, rows) for CSV dumping of a training history."""
    header = ["step", "c_i", "loss", "variance", "grad_norm", "biased"]
    rows = [[r.i, r.c_i, r.loss, r.variance, r.grad_norm, int(r.biased)]
            for r in hist.records]
    return header, rows
