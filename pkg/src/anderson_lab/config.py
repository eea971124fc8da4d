"""Run configuration: one TOML file per experiment.

Schema (all sections optional except where an experiment needs them)::

    experiment = "clt"            # converge | clt | derivative-check | green-check
                                  # | tail-divergence | truncation-gap | diagnostics
    output_dir = "runs"           # relative paths resolve against the config file

    [domain]
    kind = "box"                  # or "ball"
    bounds = [[0.0, 1.0]]         # box: one [lo, hi] pair per axis
    center = [0.0, 0.0]           # ball
    radius = 1.0                  # ball

    [model]
    family = "uniform"            # uniform | gaussian | pareto | pareto-negative
    a = 1.0
    K = 2.0
    mean = 0.0                    # number or expression in x[0], x[1], ..., r
    variance = "1/3"

    [ensemble]
    eps_list = [0.001953125]
    k_indices = [1, 2]
    n_samples = 2000
    base_seed = 20240
    workers = 1

    [parameters]                  # overrides; window midpoints when absent
    kappa, r, rho, gamma, e_constant, kappa_mode, K_prime, tail_index, estimator

    [solver]
    tol = 1e-10
    fine_eps = 0.0009765625

    [check]                       # derivative-check and green-check
    draws = 10
    h = 1e-4
    precision = "extended"
    segment = 0.5
    n_quad = 64
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import AndersonLabError, ConfigError
from .fluctuations import KAPPA_MODES, EnsembleConfig, divergence_kappa, resolve_parameters
from .lattice import ContinuumDomain
from .potential import FAMILIES, PotentialModel

EXPERIMENTS = ("converge", "clt", "derivative-check", "green-check", "tail-divergence", "truncation-gap",
               "diagnostics")

_NUMBER = (int, float)
_EXPR = (int, float, str)

SCHEMA = {
    "domain": {"kind": str, "bounds": list, "center": list, "radius": _NUMBER},
    "model": {"family": str, "a": _NUMBER, "K": _NUMBER, "mean": _EXPR, "variance": _EXPR},
    "ensemble": {"eps_list": list, "k_indices": list, "n_samples": int, "base_seed": int, "workers": int},
    "parameters": {"kappa": _NUMBER, "r": _NUMBER, "rho": _NUMBER, "gamma": _NUMBER, "e_constant": _NUMBER,
                   "kappa_mode": str, "K_prime": _NUMBER, "tail_index": _NUMBER, "estimator": str},
    "solver": {"tol": _NUMBER, "fine_eps": _NUMBER},
    "check": {"draws": int, "h": _NUMBER, "precision": str, "segment": _NUMBER, "n_quad": int},
}
TOP_LEVEL = {"experiment": str, "output_dir": str}


@dataclass(frozen=True, eq=False)
class RunConfig:
    experiment: str
    ensemble: EnsembleConfig
    output_dir: Path
    raw: dict = field(repr=False)
    source_text: str = field(default="", repr=False)
    K_prime: float | None = None
    estimator: str = "importance"
    draws: int = 10
    h: float = 1e-4
    precision: str = "extended"
    segment: float = 0.5
    n_quad: int = 64


def _type_name(types):
    types = types if isinstance(types, tuple) else (types,)
    return " or ".join(t.__name__ for t in types)


def _check_types(data, errors):
    for key, value in data.items():
        if key in SCHEMA:
            if not isinstance(value, dict):
                errors.append(f"[{key}] must be a table")
                continue
            for sub, subvalue in value.items():
                expected = SCHEMA[key].get(sub)
                if expected is None:
                    errors.append(f"unknown key '{key}.{sub}'")
                elif isinstance(subvalue, bool) or not isinstance(subvalue, expected):
                    errors.append(f"'{key}.{sub}' must be {_type_name(expected)}")
        elif key in TOP_LEVEL:
            if not isinstance(value, TOP_LEVEL[key]):
                errors.append(f"'{key}' must be {_type_name(TOP_LEVEL[key])}")
        else:
            errors.append(f"unknown key '{key}'")


def _attempt(errors, label, build):
    try:
        return build()
    except (AndersonLabError, ValueError, TypeError) as exc:
        errors.append(f"{label}: {exc}")
        return None


def _domain(section):
    kind = section.get("kind", "box")
    if kind == "box":
        if "bounds" not in section:
            raise ValueError("box domain needs 'bounds'")
        return ContinuumDomain.box([tuple(float(v) for v in pair) for pair in section["bounds"]])
    if kind == "ball":
        if "center" not in section or "radius" not in section:
            raise ValueError("ball domain needs 'center' and 'radius'")
        return ContinuumDomain.ball([float(v) for v in section["center"]], float(section["radius"]))
    raise ValueError(f"kind must be 'box' or 'ball', got {kind!r}")


def _model(section):
    family = section.get("family")
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    return PotentialModel(family, a=float(section.get("a", 1.0)), K=float(section.get("K", math.inf)),
                          mean=section.get("mean"), variance=section.get("variance"))


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    """Validate and build a RunConfig, collecting every problem before raising ConfigError."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"not valid TOML: {exc}"]) from exc
    errors: list[str] = []
    _check_types(data, errors)
    experiment = data.get("experiment")
    if experiment not in EXPERIMENTS:
        errors.append(f"'experiment' must be one of {EXPERIMENTS}")
    sections = {name: data.get(name, {}) if isinstance(data.get(name, {}), dict) else {} for name in SCHEMA}
    dom, mod, ens, par, sol, chk = (sections[n] for n in
                                    ("domain", "model", "ensemble", "parameters", "solver", "check"))
    domain = _attempt(errors, "domain", lambda: _domain(dom))
    model = _attempt(errors, "model", lambda: _model(mod))
    if "eps_list" not in ens:
        errors.append("'ensemble.eps_list' is required")
    mode = par.get("kappa_mode", "auto")
    if mode not in KAPPA_MODES:
        errors.append(f"'parameters.kappa_mode' must be one of {KAPPA_MODES}")
    estimator = par.get("estimator", "importance")
    if estimator not in ("importance", "plain"):
        errors.append("'parameters.estimator' must be 'importance' or 'plain'")
    precision = chk.get("precision", "extended")
    if precision not in ("extended", "double"):
        errors.append("'check.precision' must be 'extended' or 'double'")
    ensemble = None
    if domain is not None and model is not None and "eps_list" in ens and mode in KAPPA_MODES:
        def build():
            return EnsembleConfig(
                domain=domain, model=model, eps_list=tuple(ens["eps_list"]),
                k_indices=tuple(ens.get("k_indices", (1,))), n_samples=ens.get("n_samples", 100),
                base_seed=ens.get("base_seed", 0), kappa=par.get("kappa"), r=par.get("r"), rho=par.get("rho"),
                gamma=float(par.get("gamma", 0.5)), e_constant=float(par.get("e_constant", 4.0)),
                kappa_mode=mode, fine_eps=sol.get("fine_eps"), eig_tol=float(sol.get("tol", 1e-10)),
                events=experiment == "diagnostics" or experiment == "clt", workers=ens.get("workers", 1),
                tail_index=par.get("tail_index"))
        ensemble = _attempt(errors, "ensemble", build)
    if ensemble is not None:
        if experiment == "tail-divergence":
            _attempt(errors, "parameters", lambda: divergence_kappa(model.K, domain.d, par.get("K_prime")))
        elif experiment in ("converge", "clt", "diagnostics", "truncation-gap"):
            check = ensemble
            if experiment == "truncation-gap" and mode == "auto":
                check = replace(ensemble, kappa_mode="homogenization")
            _attempt(errors, "parameters", lambda: resolve_parameters(check))
    if errors:
        raise ConfigError(errors)
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    out = Path(data.get("output_dir", "runs"))
    return RunConfig(
        experiment=experiment, ensemble=ensemble, output_dir=out if out.is_absolute() else base_dir / out,
        raw=data, source_text=text, K_prime=par.get("K_prime"), estimator=estimator,
        draws=chk.get("draws", 10), h=float(chk.get("h", 1e-4)), precision=precision,
        segment=float(chk.get("segment", 0.5)), n_quad=chk.get("n_quad", 64))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    return parse_config(text, base_dir=path.parent)
