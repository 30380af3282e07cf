"""Command-line driver: budgeted experiments, training runs, diagnostics.

Exit codes: 0 success, 1 invariant failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import flows, zerovar
from .ais import AisConfig, ais_estimate
from .config import ConfigError, ExperimentConfig, load_config
from .estimator import estimate, per_sample_query_cost
from .targets import TargetPair, make_gaussian
from .training import train, history_csv_rows


class InvariantError(Exception):
    """A post-run consistency check failed."""


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def _emit(path: str | None, lines: list[str]):
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(text)


def _resolve_n(spec, method: str) -> int:
    """Sample count from an explicit n or a U1-query budget."""
    if spec.n is not None:
        return spec.n
    u1_cost, _ = per_sample_query_cost(method, spec.n_steps, spec.ais_k)
    n = spec.query_budget // u1_cost
    if n < 2:
        raise ConfigError(
            f"budget {spec.query_budget} below the cost of two samples "
            f"({u1_cost} U1 queries each)")
    return n


def _exact_tally(method: str, n: int, n_steps: int, ais_k: int):
    """Exact (U1, grad U1) counter deltas one run must produce.

    The budget arithmetic is an upper bound; the integration estimator
    touches each of its 2*n_steps+1 grid nodes once.
    """
    if method == "vanilla":
        return n, 0
    if method == "neis_integration":
        return n * (2 * n_steps + 1), 0
    if method == "neis_ode":
        return n * 4 * n_steps, 0
    if method == "ais":
        return n * 2 * ais_k, n * 2 * ais_k
    raise ConfigError(f"unknown method {method!r}")


def _run_estimates(tp: TargetPair, flow, spec, seed: int):
    """repeat runs of one estimator; verifies query tallies each run."""
    n = _resolve_n(spec, spec.estimator)
    reports = []
    for r in range(spec.repeat):
        before = (tp.counter.u1, tp.counter.grad_u1)
        rep = estimate(tp, flow, spec.estimator, n, seed + r,
                       t_minus=spec.t_minus, n_steps=spec.n_steps,
                       ais_k=spec.ais_k, tau=spec.tau)
        got = (tp.counter.u1 - before[0], tp.counter.grad_u1 - before[1])
        want = _exact_tally(spec.estimator, n, spec.n_steps, spec.ais_k)
        if got != want:
            raise InvariantError(
                f"query tally mismatch for {spec.estimator}: "
                f"counted {got}, expected {want}")
        reports.append(rep)
    return reports


def _needs_flow(method: str) -> bool:
    return method in ("neis_integration", "neis_ode")


def cmd_estimate(cfg: ExperimentConfig, seed: int, out: str | None) -> int:
    if cfg.method is None:
        raise ConfigError("estimate needs a [method] section")
    tp = cfg.make_target()
    flow = cfg.make_flow(tp) if _needs_flow(cfg.method.estimator) else None
    reports = _run_estimates(tp, flow, cfg.method, seed)
    _emit(out, [r.to_json_record() for r in reports])
    means = [r.mean for r in reports]
    print(f"{reports[0].method}: n={reports[0].n} repeat={len(reports)} "
          f"mean={np.mean(means):.6g} std={np.std(means, ddof=1) if len(means) > 1 else 0.0:.3g}")
    return 0


def _out_stem(out: str | None, default: str) -> Path:
    return Path(out if out is not None else default)


def cmd_train(cfg: ExperimentConfig, seed: int, out: str | None) -> int:
    if cfg.train is None:
        raise ConfigError("train needs a [train] section")
    tp = cfg.make_target()
    f0 = cfg.make_flow(tp)
    tcfg = cfg.train
    if seed != 0:
        tcfg.seed = seed
    before = (tp.counter.u1, tp.counter.grad_u1)
    best, final, hist = train(tp, f0, tcfg)
    cost_u1 = tp.counter.u1 - before[0]
    cost_grad = tp.counter.grad_u1 - before[1]
    stem = _out_stem(out, "train-run")
    header, rows = history_csv_rows(hist)
    with open(f"{stem}.history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    flows.save_flow(best, f"{stem}.best.flow")
    flows.save_flow(final, f"{stem}.final.flow")
    summary = {
        "steps_run": len(hist.records),
        "aborted": hist.aborted,
        "best_variance": hist.best_variance,
        "train_queries_u1": cost_u1,
        "train_queries_grad_u1": cost_grad,
        "seed": tcfg.seed,
    }
    with open(f"{stem}.json", "w", encoding="utf-8") as fh:
        fh.write(_json_line(summary) + "\n")
    print(f"trained {len(hist.records)} steps; best clean variance "
          f"{hist.best_variance:.4g}; U1 queries {cost_u1}")
    return 0


def cmd_compare(cfg: ExperimentConfig, seed: int, out: str | None) -> int:
    """Train, deduct the training cost, then budget-matched head-to-head."""
    if cfg.train is None or cfg.method is None:
        raise ConfigError("compare needs [train] and [method] sections")
    if cfg.method.query_budget is None:
        raise ConfigError("compare needs a query_budget in [method]")
    tp = cfg.make_target()
    f0 = cfg.make_flow(tp)
    before = tp.counter.u1
    best, _, hist = train(tp, f0, cfg.train)
    train_cost = tp.counter.u1 - before
    remaining = cfg.method.query_budget - train_cost
    spec = cfg.method
    repeat = spec.repeat
    per_estimate = remaining // repeat
    if per_estimate < 1:
        raise ConfigError("budget exhausted by training")

    import copy
    neis_spec = copy.copy(spec)
    neis_spec.n = None
    neis_spec.query_budget = per_estimate
    ais_spec = copy.copy(spec)
    ais_spec.estimator = "ais"
    ais_spec.n = None
    ais_spec.query_budget = cfg.method.query_budget // repeat

    neis_reports = _run_estimates(tp, best, neis_spec, seed)
    ais_reports = _run_estimates(tp, None, ais_spec, seed + 1000)
    lines = [r.to_json_record() for r in neis_reports + ais_reports]
    neis_means = np.array([r.mean for r in neis_reports])
    ais_means = np.array([r.mean for r in ais_reports])
    summary = {
        "train_queries_u1": train_cost,
        "neis_mean": float(np.mean(neis_means)),
        "neis_std": float(np.std(neis_means, ddof=1)) if repeat > 1 else 0.0,
        "ais_mean": float(np.mean(ais_means)),
        "ais_std": float(np.std(ais_means, ddof=1)) if repeat > 1 else 0.0,
        "best_variance": hist.best_variance,
    }
    lines.append(_json_line(summary))
    _emit(out, lines)
    print(f"NEIS {summary['neis_mean']:.6g} +- {summary['neis_std']:.3g}  vs  "
          f"AIS {summary['ais_mean']:.6g} +- {summary['ais_std']:.3g}")
    return 0


def _torus_rhs(tp: TargetPair, grid: int) -> np.ndarray:
    xg = np.arange(grid) / grid
    gx, gy = np.meshgrid(xg, xg, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    rhs = (np.exp(-tp.u1(pts)) - np.exp(-tp.u0(pts))).reshape(grid, grid)
    return rhs - rhs.mean()


def cmd_poisson(cfg: ExperimentConfig, seed: int, out: str | None) -> int:
    tp = cfg.make_target()
    if tp.domain != "torus":
        raise ConfigError("poisson needs a torus target")
    raw = cfg.raw
    grid = raw.getint("poisson", "grid", fallback=256) if raw.has_section("poisson") else 256
    k_max = raw.getint("poisson", "k_max", fallback=16) if raw.has_section("poisson") else 16
    sol = zerovar.torus_poisson_solve(_torus_rhs(tp, grid), k_max=k_max)
    stem = _out_stem(out, "poisson-run")
    np.savetxt(f"{stem}.v.csv", sol.v, delimiter=",")
    np.savetxt(f"{stem}.gradx.csv", sol.grad_v[0], delimiter=",")
    np.savetxt(f"{stem}.grady.csv", sol.grad_v[1], delimiter=",")
    with open(f"{stem}.json", "w", encoding="utf-8") as fh:
        fh.write(_json_line({"grid": grid, "k_max": k_max,
                             "residual": sol.residual,
                             "v_mean": float(sol.v.mean())}) + "\n")
    if sol.residual > 1e-8:
        raise InvariantError(f"Poisson residual {sol.residual:.3g} above 1e-8")
    print(f"poisson solve grid={grid} residual={sol.residual:.3g}")
    return 0


def cmd_transport(cfg: ExperimentConfig, seed: int, out: str | None) -> int:
    tp = cfg.make_target()
    raw = cfg.raw
    sec = raw["transport"] if raw is not None and raw.has_section("transport") else {}

    def get(key, default, cast=float):
        return cast(sec.get(key, default)) if key in sec else default

    if tp.domain == "torus":
        grid = int(get("grid", 256, int))
        k_max = int(get("k_max", 8, int))
        fl = zerovar.torus_poisson_solve(_torus_rhs(tp, grid), k_max=k_max).flow
        kw = dict(window=get("window", 40.0), n_steps=int(get("n_steps", 5, int)),
                  t_max=get("t_max", 1.0))
        bins = int(get("bins", 32, int))
    else:
        fl = cfg.make_flow(tp)
        kw = dict(window=get("window", 30.0), n_steps=int(get("n_steps", 25, int)),
                  t_max=get("t_max", 2.0))
        bins = int(get("bins", 50, int))
    n = int(get("n", 10000, int))
    x = tp.sample_base(min(n, 256), seed)
    kappa = zerovar.transport_time(tp, fl, x, **kw)
    tv = zerovar.transport_map_check(tp, fl, n, seed, bins=bins,
                                     span=float(get("span", 4.0)), **kw)
    record = {"n": n, "bins": bins, "tv": tv,
              "kappa_min": float(kappa.min()), "kappa_max": float(kappa.max()),
              "kappa_mean": float(kappa.mean()), "seed": seed}
    _emit(out, [_json_line(record)])
    print(f"transport check: TV={tv:.4f} kappa in "
          f"[{record['kappa_min']:.3f}, {record['kappa_max']:.3f}]")
    return 0


# ----------------------------------------------------------------------
# selftest

def _check_rk4_order():
    from . import dynamics
    lam = np.array([[0.3]])
    fl = flows.LinearFixedFlow(lam, np.array([0.0]))
    tp = make_gaussian([1.0], [0.0])
    x = np.array([[1.0]])
    errs = []
    for ns in (8, 16):
        traj = dynamics.integrate_trajectory(fl, tp, x, 0.0, 1.0, ns)
        errs.append(abs(traj.states[0, -1, 0] - np.exp(0.3)))
    ratio = errs[0] / errs[1]
    return 10.0 < ratio < 26.0, f"error ratio {ratio:.1f} (expect ~16)"


def _check_jacobian_identity():
    from . import dynamics
    tp = make_gaussian([1.0, 1.0], [0.0, 0.0])
    fl = flows.make_gradient_mlp(2, 8, seed=3)
    x0 = np.array([0.4, -0.7])
    h = 1e-5
    pts = [x0]
    for i in range(2):
        for s in (+1, -1):
            p = x0.copy()
            p[i] += s * h
            pts.append(p)
    traj = dynamics.integrate_trajectory(fl, tp, np.array(pts), 0.0, 1.0, 100)
    ends = traj.states[:, -1, :]
    jac = np.empty((2, 2))
    jac[:, 0] = (ends[1] - ends[2]) / (2 * h)
    jac[:, 1] = (ends[3] - ends[4]) / (2 * h)
    det_fd = np.linalg.det(jac)
    det = np.exp(traj.log_jac[0, -1])
    rel = abs(det - det_fd) / abs(det_fd)
    return rel < 1e-4, f"det rel err {rel:.2e}"


def _check_gradient_fd():
    from .gradient import grad_batch
    tp = make_gaussian([0.5, 0.5], [0.5, -0.5])
    fl = flows.make_gradient_mlp(2, 6, seed=5)
    x = tp.sample_base(16, 11)
    _, g, _, _ = grad_batch(tp, fl, x, 0.0, 20)
    h = 1e-5
    worst = 0.0
    for idx in (0, 3, fl.n_params - 1):
        e = np.zeros(fl.n_params)
        e[idx] = h
        lp, _, _, _ = grad_batch(tp, fl.with_theta(fl.theta + e), x, 0.0, 20)
        lm, _, _, _ = grad_batch(tp, fl.with_theta(fl.theta - e), x, 0.0, 20)
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(fd - g[idx]) / max(abs(fd), 1e-12))
    return worst < 1e-4, f"max rel err {worst:.2e}"


def _check_zero_variance_1d():
    from .estimator import neis_pointwise
    tp = make_gaussian([0.25], [1.0])
    fl = flows.ConstantFlow([40.0])
    x = tp.sample_base(10, 2)
    a, ok = neis_pointwise(tp, fl, x, -0.5, 400)
    err = float(np.max(np.abs(a - 1.0)))
    return bool(np.all(ok)) and err < 1e-6, f"max |A-1| = {err:.2e}"


def _check_gaussian_linear_var():
    from .estimator import neis_pointwise_truncated_inf
    tp = make_gaussian([0.25], [1.0])
    fl = flows.gaussian_linear_flow([0.25], [1.0])
    x = tp.sample_base(200, 7)
    a, conv, ok = neis_pointwise_truncated_inf(tp, fl, x, 45.0, 100)
    var = float(np.var(a[ok], ddof=1))
    return bool(np.all(conv & ok)) and var < 1e-6, f"variance {var:.2e}"


def _check_ais_trivial():
    tp = make_gaussian([1.0], [0.0])
    rep = ais_estimate(tp, AisConfig(K=5, n=50, seed=3))
    return rep.mean == 1.0 and rep.variance == 0.0, \
        f"mean {rep.mean}, var {rep.variance}"


def _check_transport_identity():
    tp = make_gaussian([1.0], [0.0])
    fl = flows.LinearFixedFlow(np.array([[1.0]]), np.array([0.0]))
    k = zerovar.transport_time(tp, fl, np.array([[0.5], [-1.0]]),
                               window=40.0, n_steps=100)
    err = float(np.max(np.abs(k)))
    return err < 1e-9, f"max |kappa| = {err:.2e}"


SELFTEST_CHECKS = [
    ("rk4-order", _check_rk4_order),
    ("jacobian-identity", _check_jacobian_identity),
    ("gradient-fd", _check_gradient_fd),
    ("zero-variance-1d", _check_zero_variance_1d),
    ("gaussian-linear-variance", _check_gaussian_linear_var),
    ("ais-trivial", _check_ais_trivial),
    ("transport-identity", _check_transport_identity),
]


def cmd_selftest() -> int:
    failures = 0
    for name, fn in SELFTEST_CHECKS:
        try:
            passed, detail = fn()
        except Exception as e:  # a crash is a failure, not an abort
            passed, detail = False, f"raised {type(e).__name__}: {e}"
        status = "PASS" if passed else "FAIL"
        failures += not passed
        print(f"{status:4s}  {name:26s}  {detail}")
    print(f"{len(SELFTEST_CHECKS) - failures}/{len(SELFTEST_CHECKS)} checks passed")
    return 0 if failures == 0 else 1


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neis", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("estimate", "train", "compare", "poisson", "transport"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", default=None)
    st = sub.add_parser("selftest")
    st.add_argument("--workers", type=int, default=1)
    return p


_COMMANDS = {
    "estimate": cmd_estimate,
    "train": cmd_train,
    "compare": cmd_compare,
    "poisson": cmd_poisson,
    "transport": cmd_transport,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return cmd_selftest()
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        out = args.out if args.out is not None else cfg.output
        return _COMMANDS[args.command](cfg, args.seed, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except InvariantError as e:
        print(f"invariant failure: {e}", file=sys.stderr)
        return 1
    except (ValueError, FloatingPointError) as e:
        print(f"invariant failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
