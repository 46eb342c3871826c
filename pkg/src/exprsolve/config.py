"""Run configuration: flat, human-diffable text.

Top-level keys name the run (benchmark or custom problem, seeds, output
directory, precision); bracketed sections override the search loop, the
controller, the tuning schedule, the tree, the operator set, and batch
sizes.  A custom problem adds [problem] and [domain] sections.  Unknown
keys and malformed values are rejected with the offending line number.

resolve() turns a parsed config into the objects run_search needs and
materializes every default, so rendering the resolved config and parsing
it again reproduces it exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from . import expr as ex
from . import geometry as geo
from . import problems as pr
from . import search as se
from . import tuner as tu


class ConfigError(ValueError):
    """Configuration text that cannot be parsed or resolved."""


# ---------------------------------------------------------------------------
# value codecs
# ---------------------------------------------------------------------------

def _int(s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ValueError(f"expected an integer, got {s!r}") from None


def _float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"expected a number, got {s!r}") from None


def _bool(s: str) -> bool:
    if s in ("true", "yes", "on"):
        return True
    if s in ("false", "no", "off"):
        return False
    raise ValueError(f"expected true or false, got {s!r}")


def _str(s: str) -> str:
    return s


def _ints(s: str) -> tuple:
    return tuple(_int(v) for v in s.split())


def _floats(s: str) -> tuple:
    return tuple(_float(v) for v in s.split())


def _choice(*names):
    def convert(s: str):
        if s not in names:
            raise ValueError(f"expected one of {', '.join(names)}, got {s!r}")
        return s
    return convert


def _maybe(convert):
    def inner(s: str):
        return None if s == "none" else convert(s)
    return inner


_EIGEN_ID = re.compile(r"^laplace_eigen_\d+d$")


def _benchmark_id(s: str) -> str:
    if s in pr.BENCHMARKS or _EIGEN_ID.match(s):
        return s
    raise ValueError(f"unknown benchmark {s!r}; valid ids: "
                     + ", ".join(pr.BENCHMARKS))


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return " ".join(_format(v) for v in value)
    return str(value)


# ---------------------------------------------------------------------------
# schema: key -> (codec, default)
# ---------------------------------------------------------------------------

_TOP = {
    "benchmark": (_maybe(_benchmark_id), None),
    "out": (_maybe(_str), None),
    "seed": (_int, 0),
    "metrics_seed": (_maybe(_int), None),
    "geometry_seed": (_int, 0),
    "precision": (_choice("single", "double"), "double"),
    "threads": (_int, 1),
}

_SECTIONS = {
    "search": {
        "iterations": (_int, 50),
        "batch_size": (_int, 16),
        "pool_size": (_int, 10),
        "grouping": (_bool, True),
    },
    "controller": {
        "epsilon": (_float, 0.1),
        "nu": (_float, 0.25),
        "lr": (_float, 0.05),
    },
    "tune": {
        "t1": (_int, 100), "lr1": (_float, 1e-2),
        "t2": (_int, 20),
        "t3": (_int, 200), "lr3": (_float, 1e-3),
        "t4": (_int, 2000), "lr4": (_float, 1e-4),
        "eta": (_float, 0.05),
        "polish": (_int, 40),
    },
    "tree": {
        "n_leaves": (_int, 2),
    },
    "operators": {
        "base_freqs": (_ints, ex.DEFAULT_BASE_FREQS),
    },
    "batch": {
        "n_interior": (_maybe(_int), None),
        "n_boundary": (_maybe(_int), None),
    },
    "problem": {
        "name": (_str, "custom"),
        "residual": (_choice("poisson", "poisson_c", "poisson_sinh",
                             "eigen"), "poisson"),
        "c": (_float, 0.0),
        "mu": (_float, 1.0),
        "exact": (_maybe(_str), None),
        "alpha_b": (_float, 100.0),
        "alpha_n": (_float, 100.0),
        "p_norm": (_float, 1.0),
        "c_norm": (_float, 1.0),
    },
    "domain": {
        "kind": (_choice("cube", "ball"), "cube"),
        "d": (_int, 2),
        "center": (_maybe(_floats), None),
        "side": (_float, 1.0),
        "radius": (_float, 1.0),
        "holes": (_maybe(_str), None),
        "grid_holes": (_maybe(_str), None),
    },
}

# sections a benchmark run must not carry
_CUSTOM_ONLY = ("problem", "domain")

# per-benchmark schedule and batch sizes, applied between the schema
# defaults and the user's explicit keys
_BENCHMARK_TABLE = {
    "pb_ex1_100d": {"search.iterations": 50, "tune.t4": 2000,
                    "batch.n_interior": 1000, "batch.n_boundary": 1000},
    "pb_ex2_10d": {"search.iterations": 50, "tune.t1": 50, "tune.t2": 10,
                   "tune.t3": 60, "tune.t4": 500,
                   "batch.n_interior": 1000, "batch.n_boundary": 1000},
    "poisson2d_holes_a": {"search.iterations": 50, "tune.t4": 5000},
    "poisson2d_holes_b": {"search.iterations": 50, "tune.t4": 5000},
    "poisson3d_product": {"search.iterations": 50, "tune.t1": 50,
                          "tune.t2": 10, "tune.t3": 60, "tune.t4": 1500,
                          "batch.n_interior": 2000, "batch.n_boundary": 2000},
    "poisson3d_exp": {"search.iterations": 50, "tune.t1": 50, "tune.t2": 10,
                      "tune.t3": 60, "tune.t4": 1500,
                      "batch.n_interior": 2000, "batch.n_boundary": 2000},
}

_EIGEN_TABLE = {"search.iterations": 60, "tune.t1": 50, "tune.t2": 10,
                "tune.t3": 60, "tune.t4": 3000, "tune.lr4": 1e-3}


def _benchmark_defaults(name: str | None) -> dict:
    if name is None:
        return {}
    if name in _BENCHMARK_TABLE:
        return _BENCHMARK_TABLE[name]
    if _EIGEN_ID.match(name):
        return _EIGEN_TABLE
    return {}


@dataclass
class RunConfig:
    """Fully typed configuration; problem/domain are None for benchmark
    runs."""

    top: dict
    search: dict
    controller: dict
    tune: dict
    tree: dict
    operators: dict
    batch: dict
    problem: dict | None
    domain: dict | None


# ---------------------------------------------------------------------------
# parsing and rendering
# ---------------------------------------------------------------------------

def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    section = ""
    present = set()
    seen = {}
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            name = stripped[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(f"{origin}:{lineno}: unknown section "
                                  f"[{name}]; valid sections: "
                                  + ", ".join(sorted(_SECTIONS)))
            section = name
            present.add(name)
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', "
                              f"got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        schema = _TOP if section == "" else _SECTIONS[section]
        if key not in schema:
            where = "the top level" if section == "" else f"[{section}]"
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r} in "
                              f"{where}")
        if (section, key) in seen:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r} "
                              f"(first set on line {seen[(section, key)]})")
        seen[(section, key)] = lineno
        try:
            raw[(section, key)] = schema[key][0](value)
        except ValueError as err:
            raise ConfigError(f"{origin}:{lineno}: {key}: {err}") from None

    top = {k: raw.get(("", k), default) for k, (_, default) in _TOP.items()}
    if top["benchmark"] is not None:
        for name in _CUSTOM_ONLY:
            if name in present:
                raise ConfigError(f"{origin}: a run configures either a "
                                  f"benchmark or a [{name}] section, not both")
    if ("problem" in present) != ("domain" in present):
        raise ConfigError(f"{origin}: [problem] and [domain] sections "
                          f"must appear together")

    table = _benchmark_defaults(top["benchmark"])

    def build(name):
        return {k: raw.get((name, k), table.get(f"{name}.{k}", default))
                for k, (_, default) in _SECTIONS[name].items()}

    return RunConfig(
        top=top,
        search=build("search"),
        controller=build("controller"),
        tune=build("tune"),
        tree=build("tree"),
        operators=build("operators"),
        batch=build("batch"),
        problem=build("problem") if "problem" in present else None,
        domain=build("domain") if "domain" in present else None,
    )


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: "
                          f"{err.strerror or err}") from None
    return parse_config(text, origin=path)


def render_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {_format(cfg.top[k])}" for k in _TOP]
    for name in _SECTIONS:
        values = getattr(cfg, name)
        if values is None:
            continue
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_format(values[k])}" for k in _SECTIONS[name])
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: RunConfig, seed=None, out=None, threads=None,
                    precision=None) -> RunConfig:
    """Command-line flags win over config values."""
    top = dict(cfg.top)
    if seed is not None:
        top["seed"] = int(seed)
    if out is not None:
        top["out"] = out
    if threads is not None:
        top["threads"] = int(threads)
    if precision is not None:
        if precision not in ("single", "double"):
            raise ConfigError("precision must be 'single' or 'double'")
        top["precision"] = precision
    return replace(cfg, top=top)


# ---------------------------------------------------------------------------
# resolution: config -> problem + run objects
# ---------------------------------------------------------------------------

_RESIDUAL_MAP = {"poisson": "neg_lap", "poisson_c": "lap_plus_cu",
                 "poisson_sinh": "neg_lap_plus_sinh", "eigen": "eigen"}

_HOLE_ARITY = {"circle": (2, 3, geo.Circle), "sphere": (3, 4, geo.Sphere),
               "ellipse": (2, 4, geo.Ellipse)}


def _parse_holes(spec: str, d: int) -> tuple:
    holes = []
    for part in spec.split(";"):
        fields = part.split()
        if not fields:
            continue
        kind, args = fields[0], fields[1:]
        if kind not in _HOLE_ARITY:
            raise ConfigError(f"in [domain] holes: unknown hole kind "
                              f"{kind!r}; valid: circle, sphere, ellipse")
        want_d, n_args, factory = _HOLE_ARITY[kind]
        if want_d != d:
            raise ConfigError(f"in [domain] holes: a {kind} needs d = "
                              f"{want_d}, the domain has d = {d}")
        if len(args) != n_args:
            raise ConfigError(f"in [domain] holes: a {kind} takes {n_args} "
                              f"numbers, got {len(args)}")
        try:
            nums = [float(a) for a in args]
        except ValueError:
            raise ConfigError(f"in [domain] holes: bad number in "
                              f"{part.strip()!r}") from None
        if kind == "ellipse":
            holes.append(factory(tuple(nums[:2]), tuple(nums[2:])))
        else:
            holes.append(factory(tuple(nums[:-1]), nums[-1]))
    return tuple(holes)


def _build_domain(dcfg: dict, geometry_seed: int):
    d = dcfg["d"]
    if d < 1:
        raise ConfigError("in [domain]: d must be >= 1")
    center = dcfg["center"] if dcfg["center"] is not None else (0.0,) * d
    if len(center) != d:
        raise ConfigError(f"in [domain]: center has {len(center)} "
                          f"coordinates, d = {d}")
    if dcfg["kind"] == "ball":
        for key in ("holes", "grid_holes"):
            if dcfg[key] is not None:
                raise ConfigError(f"in [domain]: {key} only applies to cubes")
        return geo.Ball(center, dcfg["radius"])
    box = geo.Hypercube(center, dcfg["side"])
    holes = ()
    if dcfg["holes"] is not None:
        holes += _parse_holes(dcfg["holes"], d)
    if dcfg["grid_holes"] is not None:
        fields = dcfg["grid_holes"].split()
        if len(fields) != 3:
            raise ConfigError("in [domain]: grid_holes takes "
                              "'per_axis r_min r_max'")
        per_axis = _int(fields[0])
        radius_range = (_float(fields[1]), _float(fields[2]))
        holes += tuple(geo.build_grid_holes(
            box, per_axis, radius_range,
            np.random.default_rng(geometry_seed)))
    if holes:
        return geo.PerforatedBox(box, holes)
    return box


def _fd_laplacian(fn, X: np.ndarray, h: float = 1e-4) -> np.ndarray:
    center = np.asarray(fn(X), dtype=float)
    lap = np.zeros(len(X))
    for i in range(X.shape[1]):
        shifted = X.copy()
        shifted[:, i] = X[:, i] + h
        # fn may hand back a view into shifted (a bare-variable expression
        # does), so force a copy before mutating the buffer again
        plus = np.array(fn(shifted), dtype=float)
        shifted[:, i] = X[:, i] - h
        minus = np.asarray(fn(shifted), dtype=float)
        lap += plus - 2.0 * center + minus
    return lap / (h * h)


def _derived_rhs(kind: str, exact, c: float):
    """The source term a configured exact solution implies; its laplacian
    comes from second central differences, so custom problems carry a
    residual floor well above machine precision (worse for oscillatory
    solutions)."""
    if kind == "neg_lap":
        return lambda X: -_fd_laplacian(exact, X)
    if kind == "lap_plus_cu":
        return lambda X: _fd_laplacian(exact, X) + c * np.asarray(exact(X))
    return lambda X: -_fd_laplacian(exact, X) + np.sinh(
        np.asarray(exact(X), dtype=float))


def _build_custom(cfg: RunConfig) -> pr.Problem:
    pcfg, dcfg = cfg.problem, cfg.domain
    domain = _build_domain(dcfg, cfg.top["geometry_seed"])
    d = dcfg["d"]
    kind = _RESIDUAL_MAP[pcfg["residual"]]
    exact = rhs = boundary = None
    if pcfg["exact"] is not None:
        text = pcfg["exact"].replace("mu", repr(float(pcfg["mu"])))
        try:
            parsed = ex.parse(text)
        except ex.ParseError as err:
            raise ConfigError(f"in [problem] exact: {err}") from None
        if parsed.n_vars > d:
            raise ConfigError(f"in [problem]: exact references "
                              f"x{parsed.n_vars} but d = {d}")
        exact = parsed
        boundary = parsed
        if kind != "eigen":
            rhs = _derived_rhs(kind, parsed, pcfg["c"])
    return pr.Problem(
        name=pcfg["name"], domain=domain, d=d, residual_kind=kind,
        rhs=rhs, boundary_fn=boundary, exact=exact,
        c_coeff=pcfg["c"], alpha_b=pcfg["alpha_b"], alpha_n=pcfg["alpha_n"],
        p_norm=pcfg["p_norm"], c_norm=pcfg["c_norm"])


@dataclass
class Resolved:
    """Everything a run needs, plus the materialized config that rendered
    back out re-parses to itself."""

    config: RunConfig
    problem: pr.Problem
    settings: se.SearchSettings
    schedule: tu.TuneSchedule
    shape: ex.TreeShape
    library: ex.OperatorLibrary
    out: str


def resolve(cfg: RunConfig) -> Resolved:
    try:
        if cfg.top["benchmark"] is not None:
            problem = pr.make_benchmark(cfg.top["benchmark"],
                                        cfg.top["geometry_seed"])
        elif cfg.problem is not None:
            problem = _build_custom(cfg)
        else:
            raise ConfigError("the config must set benchmark or define "
                              "[problem] and [domain] sections")
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from None
    try:
        settings = se.SearchSettings(
            iterations=cfg.search["iterations"],
            batch_size=cfg.search["batch_size"],
            pool_size=cfg.search["pool_size"],
            seed=cfg.top["seed"],
            metrics_seed=cfg.top["metrics_seed"],
            epsilon=cfg.controller["epsilon"],
            nu=cfg.controller["nu"],
            policy_lr=cfg.controller["lr"],
            grouping=cfg.search["grouping"],
            n_interior=cfg.batch["n_interior"],
            n_boundary=cfg.batch["n_boundary"],
            threads=cfg.top["threads"],
            precision=cfg.top["precision"])
        schedule = tu.TuneSchedule(**cfg.tune)
        shape = ex.TreeShape(cfg.tree["n_leaves"])
    except ValueError as err:
        raise ConfigError(str(err)) from None
    library = ex.default_library(cfg.operators["base_freqs"])
    out = cfg.top["out"] if cfg.top["out"] is not None \
        else f"runs/{problem.name}"
    config = replace(cfg, top={**cfg.top, "out": out})
    return Resolved(config, problem, settings, schedule, shape, library, out)
