"""Run configuration and its INI file format.

Example::

    [run]
    benchmark = matyas-3
    method = ei
    seeds = 0, 1, 2
    iters = 20

    [ei]
    samples = 1000
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, replace

from .acq_ci import CIParams
from .errors import ConfigError
from .optim import OptBudget
from .suspension import REUSE_MODES

SEQUENTIAL_METHODS = ("ei", "ci", "cucb", "random", "fb-ei", "fb-ucb", "cbo")
SUSPENSION_METHODS = ("ei-sus", "ei-sus-r")
METHODS = SEQUENTIAL_METHODS + SUSPENSION_METHODS


@dataclass(frozen=True)
class RunConfig:
    benchmark: str = "matyas-3"
    method: str = "ei"
    seeds: tuple[int, ...] = (0,)
    iters: int = 20
    n_init: int | None = None
    benchmark_seed: int | None = None
    xi: float | None = None
    out: str = "runs"
    ci: CIParams = field(default_factory=CIParams)
    n_samples: int = 1000
    budget: OptBudget = field(default_factory=OptBudget)
    nested_space_filling: int = 200
    nested_top: int = 3
    costs: tuple[float, ...] | None = None
    cost_budget: float | None = None
    reuse: str = "once"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.iters < 1:
            raise ConfigError("iters must be at least 1")
        if self.n_samples < 1:
            raise ConfigError("samples must be at least 1")
        if self.reuse not in REUSE_MODES:
            raise ConfigError(f"reuse must be one of {', '.join(REUSE_MODES)}")
        if self.xi is not None and not self.xi > 0:
            raise ConfigError("xi must be positive")
        if self.method in SUSPENSION_METHODS and (self.costs is None or self.cost_budget is None):
            raise ConfigError(f"method {self.method} needs [suspension] costs and cost_budget")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @property
    def nested_budget(self) -> OptBudget:
        return self.budget.reduced(self.nested_space_filling, self.nested_top)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["costs"] = None if self.costs is None else list(self.costs)
        return d


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


# section -> key -> (field path, parser)
SCHEMA = {
    "run": {
        "benchmark": ("benchmark", str.strip),
        "method": ("method", str.strip),
        "seeds": ("seeds", _ints),
        "iters": ("iters", int),
        "n_init": ("n_init", _opt_int),
        "benchmark_seed": ("benchmark_seed", _opt_int),
        "xi": ("xi", _opt_float),
        "out": ("out", str.strip),
    },
    "ci": {
        "beta_sqrt": ("ci.beta_sqrt", float),
        "lipschitz": ("ci.lipschitz", float),
        "eta_scale": ("ci.eta_scale", float),
    },
    "ei": {
        "samples": ("n_samples", int),
    },
    "optimizer": {
        "n_space_filling": ("budget.n_space_filling", int),
        "n_top": ("budget.n_top", int),
        "coarse_tol": ("budget.coarse_tol", float),
        "fine_tol": ("budget.fine_tol", _opt_float),
        "max_iter": ("budget.max_iter", int),
        "max_evals": ("budget.max_evals", int),
        "nested_space_filling": ("nested_space_filling", int),
        "nested_top": ("nested_top", int),
    },
    "suspension": {
        "costs": ("costs", _floats),
        "cost_budget": ("cost_budget", _opt_float),
        "reuse": ("reuse", str.strip),
    },
}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    top, ci, budget = {}, {}, {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key '{key}' in section [{section}]")
            path, conv = SCHEMA[section][key]
            try:
                value = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for '{key}' in [{section}]: {raw!r}") from exc
            if path.startswith("ci."):
                ci[path[3:]] = value
            elif path.startswith("budget."):
                budget[path[7:]] = value
            else:
                top[path] = value
    try:
        if ci:
            top["ci"] = CIParams(**ci)
        if budget:
            top["budget"] = OptBudget(**budget)
        return RunConfig(**top)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def read_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    try:
        return replace(cfg, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
