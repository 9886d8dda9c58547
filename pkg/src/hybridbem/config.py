"""Experiment configuration files (TOML).

A config names a model (built-in or polynomial), a generator, initial data,
step size, horizon, ensemble size, seed and per-experiment settings. CLI flags
override single fields; the resolved dictionary is what gets hashed into the
provenance line of every output.
"""

import copy
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import rng
from .bem import SolverOptions
from .errors import ConfigError, GeneratorError
from .markov_chain import validate_generator
from .model import ModelConstants, Polynomial, PolynomialModel, builtin

DEFAULTS = {
    "simulation": {"dt": 0.01, "steps": 1000, "paths": 10000, "seed": 0, "workers": 1},
    "solver": {},
    "check": {"box": [-10.0, 10.0], "samples": 10000},
    "invariant": {"snapshot_times": [], "ks_grid": {"h": 0.2, "count": 201}, "alpha": 0.05,
                  "density": "hist", "component": 1, "confirm": 5, "fraction": 0.9},
    "independence": {"time": 40.0, "common_noise": False},
    "wasserstein": {"p": 0.5, "subsample": 2048, "resamples": 8},
    "coupling": {"p": 0.5, "burn_in": 0.2},
    "order": {"horizon": 40.0, "coupled": True, "min_slope": 0.1, "max_slope": 0.5},
    "out": "out",
}


@dataclass(frozen=True)
class Initial:
    x: tuple
    regime: int


@dataclass
class ExperimentConfig:
    model: object
    generator: object
    initial: list
    dt: float
    steps: int
    paths: int
    seed: int
    workers: int
    solver: SolverOptions
    sections: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    allow_unstable: bool = False

    @property
    def out(self):
        return self.raw["out"]

    def section(self, name):
        return self.sections[name]


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _need(d, key, where):
    if key not in d:
        raise ConfigError(f"missing field '{where}.{key}'")
    return d[key]


def _number(v, where, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"field '{where}' must be a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"field '{where}' must be an integer, got {v!r}")
    return int(v) if integer else float(v)


def _poly(spec, dim, where):
    if isinstance(spec, (int, float)):
        return Polynomial.from_terms([(spec, [0] * dim)], dim)
    if not isinstance(spec, dict):
        raise ConfigError(f"field '{where}' must be a table with 'coeffs' or 'terms'")
    try:
        if "coeffs" in spec:
            if dim != 1:
                raise ConfigError(f"field '{where}.coeffs' needs state_dim = 1; use 'terms'")
            return Polynomial.univariate([_number(c, f"{where}.coeffs") for c in spec["coeffs"]])
        if "terms" in spec:
            return Polynomial.from_terms([(_need(t, "c", f"{where}.terms"), _need(t, "e", f"{where}.terms"))
                                          for t in spec["terms"]], dim)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"field '{where}': {exc}") from None
    raise ConfigError(f"field '{where}' needs 'coeffs' or 'terms'")


def _constants(block, where="model.constants"):
    if block is None:
        return None
    try:
        return ModelConstants(
            q=_number(_need(block, "q", where), f"{where}.q"),
            a=tuple(_need(block, "a", where)),
            l1=_number(_need(block, "l1", where), f"{where}.l1"),
            n=tuple(_need(block, "n", where)),
            m=block.get("m"),
            b=None if block.get("b") is None else tuple(block["b"]),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"field '{where}': {exc}") from None


def build_model(block):
    if not isinstance(block, dict):
        raise ConfigError("missing table 'model'")
    if "name" in block:
        try:
            model = builtin(block["name"])
        except KeyError as exc:
            raise ConfigError(f"field 'model.name': {exc.args[0]}") from None
        declared = _constants(block.get("constants"))
        if declared is not None:
            model.constants = declared.derive(model)
        return model
    n = _number(block.get("state_dim", 1), "model.state_dim", integer=True)
    d = _number(block.get("noise_dim", 1), "model.noise_dim", integer=True)
    regimes = _need(block, "regimes", "model")
    if not regimes:
        raise ConfigError("field 'model.regimes' is empty")
    drift, diffusion = [], []
    for i, reg in enumerate(regimes, start=1):
        where = f"model.regimes[{i}]"
        f = _need(reg, "drift", where)
        g = _need(reg, "diffusion", where)
        if len(f) != n:
            raise ConfigError(f"field '{where}.drift' needs {n} components, got {len(f)}")
        if len(g) != n or any(len(row) != d for row in g):
            raise ConfigError(f"field '{where}.diffusion' must be a {n}x{d} array")
        drift.append([_poly(p, n, f"{where}.drift[{k + 1}]") for k, p in enumerate(f)])
        diffusion.append([[_poly(p, n, f"{where}.diffusion[{k + 1}][{j + 1}]") for j, p in enumerate(row)]
                          for k, row in enumerate(g)])
    model = PolynomialModel(drift, diffusion, name=block.get("label", "polynomial"))
    declared = _constants(block.get("constants"))
    if declared is not None:
        if declared.regime_count != model.regime_count:
            raise ConfigError(f"field 'model.constants.n' has {declared.regime_count} entries "
                              f"for {model.regime_count} regimes")
        model.constants = declared.derive(model)
    return model


def _initial(items, where, state_dim, regimes):
    if not isinstance(items, list) or not items:
        raise ConfigError(f"field '{where}' must be a non-empty list of {{x = ..., regime = ...}}")
    out = []
    for k, item in enumerate(items, start=1):
        w = f"{where}[{k}]"
        if not isinstance(item, dict):
            raise ConfigError(f"field '{w}' must be a table")
        x = _need(item, "x", w)
        x = [x] if isinstance(x, (int, float)) else list(x)
        if len(x) != state_dim:
            raise ConfigError(f"field '{w}.x' needs {state_dim} components")
        r = _number(_need(item, "regime", w), f"{w}.regime", integer=True)
        if not 1 <= r <= regimes:
            raise ConfigError(f"field '{w}.regime' must lie in 1..{regimes}, got {r}")
        out.append(Initial(tuple(_number(v, f"{w}.x") for v in x), r))
    return out


def initial_list(cfg, items, where):
    return _initial(items, where, cfg.model.state_dim, cfg.model.regime_count)


def parse_text(text):
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None


def load(path, overrides=None, allow_unstable=False):
    """Read, merge with defaults, apply flag overrides and validate."""
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_dict(parse_text(text), overrides, allow_unstable)


def from_dict(data, overrides=None, allow_unstable=False):
    raw = _merge(DEFAULTS, data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value

    model = build_model(raw.get("model"))
    gen = raw.get("generator")
    if not isinstance(gen, dict) or "rates" not in gen:
        raise ConfigError("missing field 'generator.rates'")
    rates = gen["rates"]
    if not isinstance(rates, list) or any(not isinstance(r, list) for r in rates):
        raise ConfigError("field 'generator.rates' must be a list of rows")
    for i, row in enumerate(rates, start=1):
        if len(row) != len(rates):
            raise ConfigError(f"field 'generator.rates' row {i} has {len(row)} entries, expected {len(rates)}")
    try:
        generator = validate_generator(rates)
    except GeneratorError as exc:
        raise ConfigError(f"field 'generator.rates': {exc}") from None
    if generator.state_count != model.regime_count:
        raise ConfigError(f"field 'generator.rates' is {generator.state_count}x{generator.state_count} "
                          f"but the model has {model.regime_count} regimes")

    sim = raw["simulation"]
    dt = _number(sim["dt"], "simulation.dt")
    if not dt > 0:
        raise ConfigError("field 'simulation.dt' must be positive")
    c = model.constants
    if c is not None and dt >= 1.0 / (c.n_max + 2) and not allow_unstable:
        raise ConfigError(f"field 'simulation.dt' = {dt} violates dt < 1/(n_M+2) = {1.0 / (c.n_max + 2):.6g}; "
                          "pass --allow-unstable-step to run anyway")
    steps = _number(sim["steps"], "simulation.steps", integer=True)
    paths = _number(sim["paths"], "simulation.paths", integer=True)
    if steps < 0:
        raise ConfigError("field 'simulation.steps' must be >= 0")
    if paths < 1:
        raise ConfigError("field 'simulation.paths' must be >= 1")
    seed = _number(sim["seed"], "simulation.seed", integer=True)
    try:
        rng.check_seed(seed)
    except ValueError as exc:
        raise ConfigError(f"field 'simulation.seed': {exc}") from None
    workers = _number(sim["workers"], "simulation.workers", integer=True)
    if workers < 1:
        raise ConfigError("field 'simulation.workers' must be >= 1")
    initial = _initial(sim.get("initial"), "simulation.initial", model.state_dim, model.regime_count)
    try:
        solver = SolverOptions(**raw["solver"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"table 'solver': {exc}") from None

    p = _number(raw["wasserstein"]["p"], "wasserstein.p")
    if not 0 < p < 1:
        raise ConfigError(f"field 'wasserstein.p' must lie in (0, 1), got {p}")
    sections = {k: raw[k] for k in ("check", "invariant", "independence", "wasserstein", "coupling", "order")}
    return ExperimentConfig(model, generator, initial, dt, steps, paths, seed, workers, solver,
                            sections, raw, allow_unstable)
