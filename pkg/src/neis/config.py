"""Experiment configuration: flat sectioned key-value files.

Sections: [target], [flow], [method], [train], [output].  Budgets may
be given as raw query counts or with an "MB" suffix (1 MB = 1e6
queries).  Exactly one of {n, query_budget} must be set for an
estimation task.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import flows, targets
from .training import AssistConfig, TrainConfig


class ConfigError(Exception):
    """Invalid or inconsistent experiment configuration."""


_TARGETS = {
    "gauss-mix-2d": targets.make_gauss_mix_2d,
    "gauss-mix-10d": targets.make_gauss_mix_10d,
    "funnel": targets.make_funnel_10d,
    "torus-mix-2d": targets.make_torus_mix_2d,
}

_METHODS = {"vanilla", "neis_integration", "neis_ode", "ais"}


@dataclass
class MethodSpec:
    estimator: str
    n: int | None
    query_budget: int | None
    n_steps: int
    t_minus: float
    ais_k: int
    tau: float
    repeat: int


@dataclass
class ExperimentConfig:
    target_name: str
    target_kwargs: dict
    flow_block: dict
    method: MethodSpec | None
    train: TrainConfig | None
    train_flow_seed: int
    output: str | None
    raw: configparser.ConfigParser = field(repr=False, default=None)

    def make_target(self) -> targets.TargetPair:
        if self.target_name == "gaussian":
            return targets.make_gaussian(**self.target_kwargs)
        try:
            return _TARGETS[self.target_name]()
        except KeyError:
            raise ConfigError(f"unknown target {self.target_name!r}")

    def make_flow(self, tp: targets.TargetPair) -> flows.FlowField:
        blk = dict(self.flow_block)
        path = blk.pop("file", None)
        preset = blk.pop("preset", None)
        if path is not None and preset is not None:
            raise ConfigError("give at most one of flow file / preset")
        if preset is not None:
            ref = resources.files("neis").joinpath(f"presets/{preset}.flow")
            if not ref.is_file():
                raise ConfigError(f"no bundled flow preset {preset!r}")
            with resources.as_file(ref) as p:
                return flows.load_flow(p)
        if path is not None:
            return flows.load_flow(path)
        kind = blk.pop("kind", None)
        if kind is None:
            raise ConfigError("flow block needs kind, file, or preset")
        seed = int(blk.pop("seed", 0))
        m = int(blk.pop("m", 32))
        tail_sigma2 = blk.pop("tail_sigma2", None)
        if tail_sigma2 is not None:
            if kind != "block-mlp":
                raise ConfigError("tail_sigma2 only applies to block-mlp flows")
            try:
                tail_sigma2 = float(tail_sigma2)
            except ValueError:
                raise ConfigError(f"bad tail_sigma2 value {tail_sigma2!r}")
        if blk:
            raise ConfigError(f"unknown flow keys {sorted(blk)}")
        if kind == "constant":
            return flows.ConstantFlow(np.zeros(tp.dim))
        if kind == "generic-linear":
            return flows.make_generic_linear(tp.dim, seed)
        if kind == "generic-mlp":
            return flows.make_generic_mlp(tp.dim, m, seed)
        if kind == "gradient-mlp":
            return flows.make_gradient_mlp(tp.dim, m, seed)
        if kind == "block-mlp":
            return flows.make_block_mlp(tp.dim, m, seed, tail_sigma2)
        if kind == "two-param-funnel":
            return flows.make_two_param_funnel(tp.dim)
        if kind == "radial-mixture":
            return flows.mixture_radial_flow(tp)
        if kind == "gaussian-linear":
            if self.target_name != "gaussian":
                raise ConfigError("gaussian-linear flow needs the gaussian target")
            return flows.gaussian_linear_flow(self.target_kwargs["sigma2"],
                                              self.target_kwargs["varpi"])
        raise ConfigError(f"unknown flow kind {kind!r}")


def _parse_budget(text: str) -> int:
    s = text.strip()
    scale = 1.0
    if s.lower().endswith("mb"):
        s = s[:-2].strip()
        scale = 1e6
    try:
        v = float(s) * scale
    except ValueError:
        raise ConfigError(f"bad budget value {text!r}")
    if v <= 0 or v != int(v):
        raise ConfigError(f"budget must be a positive whole query count, got {text!r}")
    return int(v)


def _method_spec(sec) -> MethodSpec:
    est = sec.get("estimator", "").strip()
    if est not in _METHODS:
        raise ConfigError(f"estimator must be one of {sorted(_METHODS)}, got {est!r}")
    n = sec.getint("n", fallback=None)
    budget = _parse_budget(sec["query_budget"]) if "query_budget" in sec else None
    if (n is None) == (budget is None):
        raise ConfigError("exactly one of n / query_budget is required")
    try:
        spec = MethodSpec(
            estimator=est,
            n=n,
            query_budget=budget,
            n_steps=sec.getint("n_steps", fallback=50),
            t_minus=sec.getfloat("t_minus", fallback=0.0),
            ais_k=sec.getint("ais_k", fallback=100),
            tau=sec.getfloat("tau", fallback=0.1),
            repeat=sec.getint("repeat", fallback=1),
        )
    except ValueError as e:
        raise ConfigError(f"bad method value: {e}")
    if spec.repeat < 1:
        raise ConfigError("repeat must be >= 1")
    return spec


def _train_config(sec) -> tuple[TrainConfig, int]:
    try:
        assist = None
        if "c" in sec:
            assist = AssistConfig(
                c=sec.getfloat("c"),
                upsilon=sec.getfloat("upsilon", fallback=0.6),
                varsigma=sec.getfloat("varsigma", fallback=1.0),
                z_steps=sec.getint("z_steps", fallback=10),
            )
        cfg = TrainConfig(
            steps=sec.getint("steps"),
            batch=sec.getint("batch"),
            t_minus=sec.getfloat("t_minus", fallback=0.0),
            n_steps=sec.getint("n_steps"),
            lr=sec.getfloat("lr", fallback=0.5),
            assist=assist,
            seed=sec.getint("seed", fallback=0),
        )
        flow_seed = sec.getint("flow_seed", fallback=0)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad train value: {e}")
    if cfg.steps is None or cfg.batch is None or cfg.n_steps is None:
        raise ConfigError("train block needs steps, batch, n_steps")
    return cfg, flow_seed


def load_config(path) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    if "target" not in cp:
        raise ConfigError("missing [target] section")
    tsec = cp["target"]
    name = tsec.get("name", "").strip()
    if not name:
        raise ConfigError("[target] needs a name")
    tkw = {}
    if name == "gaussian":
        try:
            tkw["sigma2"] = [float(v) for v in tsec.get("sigma2", "1.0").split(",")]
            tkw["varpi"] = [float(v) for v in tsec.get("varpi", "0.0").split(",")]
        except ValueError as e:
            raise ConfigError(f"bad gaussian target value: {e}")
    elif name not in _TARGETS:
        raise ConfigError(f"unknown target {name!r}")

    flow_block = dict(cp["flow"]) if "flow" in cp else {}
    method = _method_spec(cp["method"]) if "method" in cp else None
    train = None
    flow_seed = 0
    if "train" in cp:
        train, flow_seed = _train_config(cp["train"])
    output = cp["output"].get("path") if "output" in cp else None
    return ExperimentConfig(name, tkw, flow_block, method, train,
                            flow_seed, output, cp)


def preset_config_path(name: str):
    """Path-like handle to a bundled experiment preset."""
    ref = resources.files("neis").joinpath(f"presets/{name}.cfg")
    if not ref.is_file():
        raise ConfigError(f"no bundled preset {name!r}")
    return ref
