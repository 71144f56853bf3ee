"""YAML run configuration with line-numbered validation errors.

Example::

    input: sales.csv            # relative to this file
    value_column: sales
    time_column: month          # optional
    log: true                   # optional, fit log(value)
    model:
      trend: auto               # number or auto
      seasonal:
        - name: yearly
          cycle: 12
          phase: 0              # optional
          lambdas: auto         # [tt, st, ss] or auto
        - name: daytype         # explicit topology
          topology:
            successors: [[1], [0, 2], [0]]
          map_column: node      # column holding the node of each row
          lambdas: [1, 1, 1]
      covariates:
        - name: temperature
          kind: flexible        # static, flexible or seasonal
          column: temp
          thetas: auto          # [] static, [t] flexible, [tt, st, ss] seasonal
          season: yearly        # seasonal kind only
    cv:                         # needed when any parameter is auto
      mode: loocv               # or kfold
      K: 5
      g: 1
      max_evals: 200
      start:                    # optional initial values of auto parameters
        yearly.ss: 0.1
      starts:                   # optional: one search per entry, best score wins
        - {}                    # (overrides start; unnamed parameters start at 1)
        - {trend: 7.4, yearly.ss: 7.4}
    fit: ols                    # ols, robust or gls
    gls:                        # gls only: AR(1) errors
      ar1: 0.5
      variance: 1.0
    level: 0.95
    horizon: 12                 # forecast only
    simulate:                   # simulate only
      dgp: [stochastic]
      n: 1096
      gamma: [0.2, 0.4, 0.6]
      alpha: 1
      beta: 1
      replications: 10
      seed: 0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

__all__ = ["ConfigError", "DataError", "RunConfig", "SeasonalConfig", "CovariateConfig", "load_config"]


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class DataError(ValueError):
    pass


class _Map(dict):
    line: int = 0
    key_lines: dict


class _Seq(list):
    line: int = 0
    item_lines: list


def _convert(node, ctor):
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = _Map()
        out.line, out.key_lines = line, {}
        for k, v in node.value:
            key = ctor.construct_object(k, deep=True)
            if key in out:
                raise ConfigError(f"duplicate key {key!r}", k.start_mark.line + 1)
            out[key] = _convert(v, ctor)
            out.key_lines[key] = k.start_mark.line + 1
        return out
    if isinstance(node, yaml.SequenceNode):
        out = _Seq(_convert(v, ctor) for v in node.value)
        out.line, out.item_lines = line, [v.start_mark.line + 1 for v in node.value]
        return out
    return ctor.construct_object(node, deep=True)


def _parse(text: str):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None) from None
    if node is None:
        raise ConfigError("configuration is empty", 1)
    ctor = yaml.SafeLoader("")
    return _convert(node, ctor)


AUTO = "auto"


@dataclass
class SeasonalConfig:
    name: str
    lambdas: list  # numbers or AUTO entries
    cycle: int | None = None
    phase: int = 0
    successors: list | None = None
    labels: list | None = None
    map_column: str | None = None


@dataclass
class CovariateConfig:
    name: str
    kind: str
    column: str
    thetas: list
    season: str | None = None


@dataclass
class RunConfig:
    path: Path
    input: Path | None = None
    value_column: str = "value"
    time_column: str | None = None
    log: bool = False
    trend: object = 1.0
    seasonal: list[SeasonalConfig] = field(default_factory=list)
    covariates: list[CovariateConfig] = field(default_factory=list)
    cv: dict | None = None
    fit: str = "ols"
    gls: dict | None = None
    level: float = 0.95
    horizon: int | None = None
    simulate: dict | None = None

    def has_auto(self) -> bool:
        vals = [self.trend] + [v for s in self.seasonal for v in s.lambdas] + [v for c in self.covariates for v in c.thetas]
        return any(v == AUTO for v in vals)


def _line(m, key):
    return m.key_lines.get(key, m.line) if isinstance(m, _Map) else None


def _need_map(v, what, line):
    if not isinstance(v, _Map):
        raise ConfigError(f"{what} must be a mapping", getattr(v, "line", line))
    return v


def _check_keys(m: _Map, allowed, what):
    for k in m:
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r} in {what}; allowed: {', '.join(sorted(allowed))}", _line(m, k))


def _number(v, what, line, *, positive=False, nonneg=False, integer=False, allow_auto=False):
    if allow_auto and v == AUTO:
        return AUTO
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{what} must be a number{' or auto' if allow_auto else ''}, got {v!r}", line)
    if integer and int(v) != v:
        raise ConfigError(f"{what} must be an integer, got {v!r}", line)
    if positive and not v > 0:
        raise ConfigError(f"{what} must be positive, got {v!r}", line)
    if nonneg and v < 0:
        raise ConfigError(f"{what} must be non-negative, got {v!r}", line)
    return int(v) if integer else float(v)


def _params(v, count, what, line):
    if v == AUTO:
        return [AUTO] * count
    if not isinstance(v, list) or len(v) != count:
        raise ConfigError(f"{what} must be a list of {count} numbers or auto", getattr(v, "line", line))
    lines = getattr(v, "item_lines", [line] * count)
    return [_number(x, what, ln, nonneg=True, allow_auto=True) for x, ln in zip(v, lines)]


def _start_values(v, what, line) -> dict[str, float]:
    st = _need_map(v, what, line)
    return {str(k): _number(x, f"{what} {k}", _line(st, k) or line, positive=True) for k, x in st.items()}


def load_config(path) -> RunConfig:
    """Read and validate a run configuration."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc.strerror}") from None
    root = _need_map(_parse(text), "configuration", 1)
    _check_keys(
        root,
        {"input", "value_column", "time_column", "log", "model", "cv", "fit", "gls", "level", "horizon", "simulate"},
        "configuration",
    )
    cfg = RunConfig(path=path)
    if "input" in root:
        if not isinstance(root["input"], str):
            raise ConfigError("input must be a file path", _line(root, "input"))
        cfg.input = (path.parent / root["input"]).resolve()
    for key in ("value_column", "time_column"):
        if key in root:
            if not isinstance(root[key], str):
                raise ConfigError(f"{key} must be a column name", _line(root, key))
            setattr(cfg, key, root[key])
    if "log" in root:
        if not isinstance(root["log"], bool):
            raise ConfigError("log must be true or false", _line(root, "log"))
        cfg.log = root["log"]
    if "fit" in root:
        if root["fit"] not in ("ols", "robust", "gls"):
            raise ConfigError(f"fit must be ols, robust or gls, got {root['fit']!r}", _line(root, "fit"))
        cfg.fit = root["fit"]
    if "level" in root:
        cfg.level = _number(root["level"], "level", _line(root, "level"))
        if not 0 < cfg.level < 1:
            raise ConfigError("level must lie strictly between 0 and 1", _line(root, "level"))
    if "horizon" in root:
        cfg.horizon = _number(root["horizon"], "horizon", _line(root, "horizon"), positive=True, integer=True)

    model = _need_map(root.get("model", _Map()), "model", _line(root, "model"))
    _check_keys(model, {"trend", "seasonal", "covariates"}, "model")
    if "trend" in model:
        cfg.trend = _number(model["trend"], "trend", _line(model, "trend"), nonneg=True, allow_auto=True)
    seas = model.get("seasonal", _Seq())
    if not isinstance(seas, list):
        raise ConfigError("model.seasonal must be a list", _line(model, "seasonal"))
    for i, s in enumerate(seas):
        s = _need_map(s, "seasonal entry", seas.item_lines[i])
        _check_keys(s, {"name", "cycle", "phase", "topology", "map_column", "lambdas"}, "seasonal entry")
        name = str(s.get("name", f"season{i}"))
        sc = SeasonalConfig(name, _params(s.get("lambdas", [1, 1, 1]), 3, "lambdas", _line(s, "lambdas")))
        if ("cycle" in s) == ("topology" in s):
            raise ConfigError(f"seasonal {name!r} needs exactly one of cycle or topology", s.line)
        if "cycle" in s:
            sc.cycle = _number(s["cycle"], "cycle", _line(s, "cycle"), integer=True)
            if sc.cycle < 2:
                raise ConfigError("cycle length must be at least 2", _line(s, "cycle"))
            sc.phase = _number(s.get("phase", 0), "phase", _line(s, "phase"), integer=True, nonneg=True)
        else:
            topo = _need_map(s["topology"], "topology", _line(s, "topology"))
            _check_keys(topo, {"successors", "labels"}, "topology")
            succ = topo.get("successors")
            if not isinstance(succ, list) or not all(
                isinstance(x, list) and all(isinstance(j, int) and not isinstance(j, bool) for j in x) for x in succ
            ):
                raise ConfigError("topology.successors must be a list of integer lists", _line(topo, "successors"))
            sc.successors = [list(x) for x in succ]
            sc.labels = list(topo["labels"]) if "labels" in topo else None
            if "map_column" not in s:
                raise ConfigError(f"seasonal {name!r} with a topology needs map_column", s.line)
            sc.map_column = str(s["map_column"])
        cfg.seasonal.append(sc)
    names = [s.name for s in cfg.seasonal]
    if len(set(names)) != len(names):
        raise ConfigError(f"seasonal names must be unique: {names}", _line(model, "seasonal"))

    covs = model.get("covariates", _Seq())
    if not isinstance(covs, list):
        raise ConfigError("model.covariates must be a list", _line(model, "covariates"))
    want = {"static": 0, "flexible": 1, "seasonal": 3}
    for i, c in enumerate(covs):
        c = _need_map(c, "covariate entry", covs.item_lines[i])
        _check_keys(c, {"name", "kind", "column", "thetas", "season"}, "covariate entry")
        kind = c.get("kind")
        if kind not in want:
            raise ConfigError(f"covariate kind must be static, flexible or seasonal, got {kind!r}", _line(c, "kind"))
        if "column" not in c:
            raise ConfigError("covariate needs a column", c.line)
        name = str(c.get("name", c["column"]))
        default = [] if kind == "static" else [1.0] * want[kind]
        thetas = _params(c.get("thetas", default), want[kind], "thetas", _line(c, "thetas")) if want[kind] else []
        if kind == "static" and c.get("thetas", []) not in ([],):
            raise ConfigError("static covariates take no thetas", _line(c, "thetas"))
        season = None
        if kind == "seasonal":
            season = c.get("season")
            if season not in names:
                raise ConfigError(f"covariate {name!r} must name a seasonal component in season", _line(c, "season") or c.line)
        elif "season" in c:
            raise ConfigError("season applies to seasonal covariates only", _line(c, "season"))
        cfg.covariates.append(CovariateConfig(name, kind, str(c["column"]), thetas, season))
    all_names = names + [c.name for c in cfg.covariates]
    if len(set(all_names)) != len(all_names) or {"trend", "remainder", "observed", "time"} & set(all_names):
        raise ConfigError(f"component names must be unique and not reserved: {all_names}", model.line)

    if "cv" in root:
        cv = _need_map(root["cv"], "cv", _line(root, "cv"))
        _check_keys(cv, {"mode", "K", "g", "max_evals", "tol", "step", "start", "starts"}, "cv")
        if cv.get("mode", "loocv") not in ("loocv", "kfold"):
            raise ConfigError("cv.mode must be loocv or kfold", _line(cv, "mode"))
        out = {"mode": cv.get("mode", "loocv")}
        for key, lo in (("K", 2), ("g", 1), ("max_evals", 1)):
            if key in cv:
                v = _number(cv[key], f"cv.{key}", _line(cv, key), integer=True)
                if v < lo:
                    raise ConfigError(f"cv.{key} must be at least {lo}", _line(cv, key))
                out[key] = v
        for key in ("tol", "step"):
            if key in cv:
                out[key] = _number(cv[key], f"cv.{key}", _line(cv, key), positive=True)
        if "start" in cv:
            out["start"] = _start_values(cv["start"], "cv.start", _line(cv, "start"))
        if "starts" in cv:
            lst = cv["starts"]
            if not isinstance(lst, list) or not lst:
                raise ConfigError("cv.starts must be a non-empty list of maps", _line(cv, "starts"))
            out["starts"] = [_start_values(v, "cv.starts entry", lst.item_lines[i]) for i, v in enumerate(lst)]
        cfg.cv = out
    if cfg.has_auto() and cfg.cv is None:
        raise ConfigError("smoothing parameters set to auto need a cv section", model.line)

    if "gls" in root:
        g = _need_map(root["gls"], "gls", _line(root, "gls"))
        _check_keys(g, {"ar1", "variance"}, "gls")
        rho = _number(g.get("ar1", 0.0), "gls.ar1", _line(g, "ar1"))
        if not -1 < rho < 1:
            raise ConfigError("gls.ar1 must lie in (-1, 1)", _line(g, "ar1"))
        var = _number(g.get("variance", 1.0), "gls.variance", _line(g, "variance"), positive=True)
        cfg.gls = {"ar1": rho, "variance": var}
    elif cfg.fit == "gls":
        raise ConfigError("fit: gls needs a gls section", _line(root, "fit"))

    if "simulate" in root:
        sim = _need_map(root["simulate"], "simulate", _line(root, "simulate"))
        _check_keys(sim, {"dgp", "n", "gamma", "alpha", "beta", "replications", "seed"}, "simulate")
        dgp = sim.get("dgp", ["stochastic"])
        dgp = [dgp] if isinstance(dgp, str) else dgp
        if not isinstance(dgp, list) or not dgp or any(d not in ("stochastic", "deterministic") for d in dgp):
            raise ConfigError("simulate.dgp must list stochastic and/or deterministic", _line(sim, "dgp"))
        gam = sim.get("gamma", [0.2])
        gam = gam if isinstance(gam, list) else [gam]
        out = {
            "dgp": list(dgp),
            "gamma": [_number(v, "simulate.gamma", _line(sim, "gamma"), nonneg=True) for v in gam],
            "n": _number(sim.get("n", 1096), "simulate.n", _line(sim, "n"), integer=True),
            "alpha": _number(sim.get("alpha", 1.0), "simulate.alpha", _line(sim, "alpha")),
            "beta": _number(sim.get("beta", 1.0), "simulate.beta", _line(sim, "beta")),
            "replications": _number(
                sim.get("replications", 10), "simulate.replications", _line(sim, "replications"), integer=True
            ),
            "seed": _number(sim.get("seed", 0), "simulate.seed", _line(sim, "seed"), integer=True),
        }
        if out["n"] < 14 or out["replications"] < 1:
            raise ConfigError("simulate needs n >= 14 and replications >= 1", sim.line)
        cfg.simulate = out
    return cfg
