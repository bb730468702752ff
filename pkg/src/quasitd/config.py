"""Run configuration: TOML file -> validated :class:`RunConfig`.

Schema (all tables optional unless a command needs them)::

    [problem]
    bounds = [0.0, 1.0, 0.0, 1.0]
    f = 1.0                      # number, or a table, see below
    u_d = { kind = "expression", expr = "0.5*sin(pi*x)*sin(pi*y)" }
    weights = [0.0, 1.0]         # (a, b)

    [problem.omega]              # subdomain Omega
    kind = "disk"                # or "polygon" with vertices = [[x, y], ...]
    radius = 0.2
    center = [0.5, 0.5]

    [materials]
    a1 = { preset = "linear", gamma = 2.0 }
    a2 = { preset = "reluctivity", alpha = 1.0, beta = 3.0, tau = 1.0, k = 1 }
    swap = false
    unchecked = false            # allow presets outside the structural assumptions

    [inclusion]                  # reference shape omega
    kind = "disk"
    radius = 1.0

    [numerics]
    h = 0.0125
    tol = 1e-10
    max_iter = 25
    deterministic = true
    seed = 0
    threads = 1

    [corrector]
    R = 50.0                     # defaults derive from the inclusion diameter
    h_near = 0.04
    h_far = 2.0
    grading = 0.1                # or "ramp": reach h_far exactly at R
    U0 = [1.0, 0.0]
    P0 = [1.0, 0.0]
    truncation_radii = [10.0, 20.0, 40.0, 80.0]

    [point]
    z = [0.5, 0.5]

    [fd]
    epsilons = [0.08, 0.04, 0.02]

    [projection]
    R = 80.0
    radii = [10.0, 20.0, 40.0]

    [grid]                       # either x/y = [start, stop, count] or points
    x = [0.2, 0.8, 4]
    y = [0.5, 0.5, 1]

    [check]
    box_half_width = 10.0
    samples = 4000

Source/target tables: ``{ kind = "constant", value = v }``,
``{ kind = "expression", expr = "..." }`` (variables ``x``, ``y``, constant
``pi``, functions ``sin cos exp sqrt``, operators ``+ - * / **``),
``{ kind = "benchmark" }`` (the manufactured benchmark of
:func:`quasitd.problem.benchmark_problem`) or
``{ kind = "file", path = "values.field" }`` (vertex values).
"""

from __future__ import annotations

import ast
import hashlib
import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corrector import CorrectorConfig
from .errors import ConfigurationError, ParseError
from .fem import CostWeights
from .materials import TwoPhaseMaterial, preset
from .mesh import InclusionShape, Placement
from .problem import Problem, benchmark_problem

SCHEMA = {
    "problem": {"bounds", "f", "u_d", "weights", "omega"},
    "problem.omega": {"kind", "radius", "vertices", "center"},
    "materials": {"a1", "a2", "swap", "unchecked"},
    "inclusion": {"kind", "radius", "vertices"},
    "numerics": {"h", "tol", "max_iter", "deterministic", "seed", "threads"},
    "corrector": {"R", "h_near", "h_far", "grading", "U0", "P0", "truncation_radii"},
    "point": {"z"},
    "fd": {"epsilons"},
    "projection": {"R", "radii"},
    "grid": {"x", "y", "points"},
    "check": {"box_half_width", "samples"},
}
DATA_KEYS = {"kind", "value", "expr", "path"}
PRESET_KEYS = {
    "linear": {"gamma"},
    "reluctivity": {"alpha", "beta", "tau", "k"},
    "p_laplace": {"p", "delta"},
}


def _locate(text: str, section: str, key: str | None):
    """Best-effort (line, column) of ``key`` inside ``[section]``."""
    current = ""
    header = re.compile(r"^\s*\[([^\]]+)\]\s*(#.*)?$")
    for ln, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return ln, line.index("[") + 1
            continue
        if key is not None and current == section:
            m2 = re.match(rf"^(\s*){re.escape(key)}\s*=", line)
            if m2:
                return ln, len(m2.group(1)) + 1
            idx = line.find(key)
            if idx >= 0 and re.search(rf"\b{re.escape(key)}\s*=", line):
                return ln, idx + 1
    return None, None


class _Ctx:
    def __init__(self, text: str, source):
        self.text = text
        self.source = source

    def error(self, section, key, msg):
        ln, col = _locate(self.text, section, key)
        where = f"[{section}]" + (f" {key}" if key else "")
        return ParseError(f"{where}: {msg}", line=ln, column=col, source=self.source)

    def number(self, section, key, v, positive=False, integer=False):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self.error(section, key, f"expected a number, got {v!r}")
        if integer and not isinstance(v, int):
            raise self.error(section, key, f"expected an integer, got {v!r}")
        if not math.isfinite(v) or (positive and v <= 0):
            raise self.error(section, key, f"expected a positive finite number, got {v!r}" if positive
                             else f"expected a finite number, got {v!r}")
        return v

    def vector(self, section, key, v, n=None):
        if not isinstance(v, list) or (n is not None and len(v) != n):
            raise self.error(section, key, f"expected a list of {n or 'some'} numbers")
        return [float(self.number(section, key, x)) for x in v]

    def boolean(self, section, key, v):
        if not isinstance(v, bool):
            raise self.error(section, key, f"expected true or false, got {v!r}")
        return v


_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply, ast.Div: np.divide, ast.Pow: np.power}


def compile_expression(expr: str):
    """Vectorised ``g(x, y)`` from a whitelisted arithmetic expression."""
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"invalid expression {expr!r}: {exc.msg}") from None

    def check(node):
        if isinstance(node, ast.Expression):
            return check(node.body)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return check(node.left) and check(node.right)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            return check(node.operand)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return True
        if isinstance(node, ast.Name) and node.id in ("x", "y", "pi"):
            return True
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS
                and len(node.args) == 1 and not node.keywords):
            return check(node.args[0])
        raise ConfigurationError(f"unsupported construct in expression {expr!r}")

    check(tree)

    def ev(node, x, y):
        if isinstance(node, ast.Expression):
            return ev(node.body, x, y)
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](ev(node.left, x, y), ev(node.right, x, y))
        if isinstance(node, ast.UnaryOp):
            v = ev(node.operand, x, y)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return {"x": x, "y": y, "pi": math.pi}[node.id]
        return _FUNCS[node.func.id](ev(node.args[0], x, y))

    def fun(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(ev(tree, x, y), np.broadcast(x, y).shape).astype(float)

    fun.expression = expr
    return fun


@dataclass
class RunConfig:
    problem: Problem
    raw: dict
    source: str | None = None
    z: tuple | None = None
    epsilons: list = field(default_factory=list)
    projection_R: float | None = None
    projection_radii: list = field(default_factory=list)
    grid_points: np.ndarray | None = None
    U0: tuple | None = None
    P0: tuple | None = None
    truncation_radii: list = field(default_factory=list)
    check_box: float = 10.0
    check_samples: int = 4000
    seed: int = 0
    deterministic: bool = True
    threads: int = 1
    f_file: Path | None = None
    u_d_file: Path | None = None

    @property
    def config_hash(self) -> str:
        return canonical_hash(self.raw)


def canonical_hash(raw: dict) -> str:
    text = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _check_keys(ctx: _Ctx, section: str, table: dict, allowed: set):
    if not isinstance(table, dict):
        raise ctx.error(section, None, "expected a table")
    for k in table:
        if k not in allowed:
            raise ctx.error(section, k, f"unknown key {k!r} (allowed: {', '.join(sorted(allowed))})")


def _shape(ctx: _Ctx, section: str, t: dict) -> InclusionShape:
    kind = t.get("kind", "disk")
    try:
        if kind == "disk":
            if "vertices" in t:
                raise ctx.error(section, "vertices", "disk shapes take a radius, not vertices")
            return InclusionShape.disk(ctx.number(section, "radius", t.get("radius", 1.0), positive=True))
        if kind == "polygon":
            if "radius" in t:
                raise ctx.error(section, "radius", "polygon shapes take vertices, not a radius")
            v = t.get("vertices")
            if not isinstance(v, list):
                raise ctx.error(section, "vertices", "polygon needs vertices = [[x, y], ...]")
            return InclusionShape.polygon([ctx.vector(section, "vertices", p, 2) for p in v])
    except ConfigurationError as exc:
        raise ctx.error(section, "kind", str(exc)) from None
    raise ctx.error(section, "kind", f"unknown shape kind {kind!r}")


def _material(ctx: _Ctx, key: str, t, unchecked: bool):
    if not isinstance(t, dict) or "preset" not in t:
        raise ctx.error("materials", key, "expected { preset = \"...\", ... }")
    name = t["preset"]
    if name not in PRESET_KEYS:
        raise ctx.error("materials", key, f"unknown preset {name!r}")
    params = {}
    for k, v in t.items():
        if k == "preset":
            continue
        if k not in PRESET_KEYS[name]:
            raise ctx.error("materials", key, f"unknown parameter {k!r} for preset {name!r}")
        params[k] = ctx.number("materials", key, v, integer=(k == "k"))
    if name == "p_laplace":
        params["unchecked"] = unchecked
    try:
        return preset(name, **params)
    except ConfigurationError as exc:
        raise ctx.error("materials", key, str(exc)) from None


def _data(ctx: _Ctx, key: str, v, base: Path):
    """Returns ``(value, file_path)`` for f / u_d entries."""
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(ctx.number("problem", key, v)), None
    if not isinstance(v, dict):
        raise ctx.error("problem", key, "expected a number or a table")
    for k in v:
        if k not in DATA_KEYS:
            raise ctx.error("problem", key, f"unknown key {k!r} in data table")
    kind = v.get("kind")
    if kind == "constant":
        return float(ctx.number("problem", key, v.get("value"))), None
    if kind == "expression":
        if not isinstance(v.get("expr"), str):
            raise ctx.error("problem", key, "expression needs expr = \"...\"")
        try:
            return compile_expression(v["expr"]), None
        except ConfigurationError as exc:
            raise ctx.error("problem", key, str(exc)) from None
    if kind == "benchmark":
        return "benchmark", None
    if kind == "file":
        if not isinstance(v.get("path"), str):
            raise ctx.error("problem", key, "file data needs path = \"...\"")
        return None, (base / v["path"]).resolve()
    raise ctx.error("problem", key, f"unknown data kind {kind!r}")


def parse_config(text: str, source=None, base_dir=None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        col = getattr(exc, "colno", None)
        msg = getattr(exc, "msg", str(exc))
        if line is None:
            m = re.search(r"line (\d+), column (\d+)", str(exc))
            if m:
                line, col = int(m.group(1)), int(m.group(2))
        raise ParseError(msg, line=line, column=col, source=source) from None
    ctx = _Ctx(text, source)
    base = Path(base_dir) if base_dir is not None else (Path(source).parent if source else Path("."))
    for k in raw:
        if k not in SCHEMA or "." in k:
            ln, col = _locate(text, k, None)
            raise ParseError(f"unknown table [{k}]", line=ln, column=col, source=source)
    for section in SCHEMA:
        if "." in section:
            continue
        if section in raw:
            _check_keys(ctx, section, raw[section], SCHEMA[section])

    prob = raw.get("problem", {})
    bounds = tuple(ctx.vector("problem", "bounds", prob.get("bounds", [0.0, 1.0, 0.0, 1.0]), 4))
    if not (bounds[1] > bounds[0] and bounds[3] > bounds[2]):
        raise ctx.error("problem", "bounds", "bounds must be [x0, x1, y0, y1] with x1 > x0, y1 > y0")
    wa, wb = ctx.vector("problem", "weights", prob.get("weights", [0.0, 1.0]), 2)
    try:
        weights = CostWeights(wa, wb)
    except Exception as exc:
        raise ctx.error("problem", "weights", str(exc)) from None
    f, f_file = _data(ctx, "f", prob.get("f", 0.0), base)
    u_d, ud_file = _data(ctx, "u_d", prob.get("u_d", 0.0), base)
    subdomain = None
    if "omega" in prob:
        om = prob["omega"]
        _check_keys(ctx, "problem.omega", om, SCHEMA["problem.omega"])
        shape_o = _shape(ctx, "problem.omega", {k: v for k, v in om.items() if k != "center"})
        center = tuple(ctx.vector("problem.omega", "center", om.get("center", [0.0, 0.0]), 2))
        subdomain = Placement(shape_o, center)

    mat = raw.get("materials", {})
    unchecked = ctx.boolean("materials", "unchecked", mat.get("unchecked", False))
    a1 = _material(ctx, "a1", mat.get("a1", {"preset": "linear", "gamma": 2.0}), unchecked)
    a2 = _material(ctx, "a2", mat.get("a2", {"preset": "linear", "gamma": 1.0}), unchecked)
    material = TwoPhaseMaterial(a1, a2, ctx.boolean("materials", "swap", mat.get("swap", False)))

    shape = _shape(ctx, "inclusion", raw.get("inclusion", {}))

    num = raw.get("numerics", {})
    h = ctx.number("numerics", "h", num.get("h", 1.0 / 40.0), positive=True)
    tol = ctx.number("numerics", "tol", num.get("tol", 1e-10), positive=True)
    max_iter = ctx.number("numerics", "max_iter", num.get("max_iter", 25), positive=True, integer=True)
    seed = ctx.number("numerics", "seed", num.get("seed", 0), integer=True)
    threads = ctx.number("numerics", "threads", num.get("threads", 1), positive=True, integer=True)
    deterministic = ctx.boolean("numerics", "deterministic", num.get("deterministic", True))

    cor = raw.get("corrector", {})

    def opt(key):
        return None if key not in cor else float(ctx.number("corrector", key, cor[key], positive=True))

    grading = cor.get("grading", 0.1)
    if grading == "ramp":
        grading = None
    elif grading is not None:
        grading = float(ctx.number("corrector", "grading", grading))
        if grading < 0:
            raise ctx.error("corrector", "grading", "grading must be non-negative or \"ramp\"")
    proj = raw.get("projection", {})
    proj_R = None if "R" not in proj else float(ctx.number("projection", "R", proj["R"], positive=True))
    proj_radii = ctx.vector("projection", "radii", proj.get("radii", []))
    snap = tuple(proj_radii) if proj_R is not None else ()
    ccfg = CorrectorConfig(R=opt("R"), h_near=opt("h_near"), h_far=opt("h_far"), grading=grading, tol=tol,
                           max_iter=int(max_iter), snap_radii=snap)
    try:
        ccfg.resolved(shape)
        c = ccfg.resolved(shape)
        if c.h_near > c.h_far or c.h_far > c.R:
            raise ConfigurationError("corrector sizing needs h_near <= h_far <= R")
    except ConfigurationError as exc:
        raise ctx.error("corrector", None, str(exc)) from None

    if f == "benchmark" or u_d == "benchmark":
        bench = benchmark_problem()
        f = bench.f if f == "benchmark" else f
        u_d = bench.u_d if u_d == "benchmark" else u_d
    problem = Problem(bounds=bounds, material=material, f=f if f is not None else 0.0,
                      u_d=u_d if u_d is not None else 0.0, weights=weights, h=float(h), shape=shape,
                      subdomain=subdomain, corrector=ccfg, tol=float(tol), max_iter=int(max_iter))

    cfg = RunConfig(problem=problem, raw=raw, source=source, seed=int(seed), deterministic=deterministic,
                    threads=int(threads), f_file=f_file, u_d_file=ud_file)
    if "point" in raw and "z" in raw["point"]:
        cfg.z = tuple(ctx.vector("point", "z", raw["point"]["z"], 2))
    if "fd" in raw:
        cfg.epsilons = ctx.vector("fd", "epsilons", raw["fd"].get("epsilons", []))
    cfg.projection_R = proj_R
    cfg.projection_radii = proj_radii
    if "U0" in cor:
        cfg.U0 = tuple(ctx.vector("corrector", "U0", cor["U0"], 2))
    if "P0" in cor:
        cfg.P0 = tuple(ctx.vector("corrector", "P0", cor["P0"], 2))
    cfg.truncation_radii = ctx.vector("corrector", "truncation_radii", cor.get("truncation_radii", []))
    grid = raw.get("grid")
    if grid is not None:
        if "points" in grid:
            if "x" in grid or "y" in grid:
                raise ctx.error("grid", "points", "give either points or x/y ranges")
            cfg.grid_points = np.array([ctx.vector("grid", "points", p, 2) for p in grid["points"]])
        else:
            axes = []
            for key in ("x", "y"):
                lo, hi, n = ctx.vector("grid", key, grid.get(key, []), 3)
                if n != int(n) or n < 1:
                    raise ctx.error("grid", key, "count must be a positive integer")
                axes.append(np.linspace(lo, hi, int(n)))
            X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
            cfg.grid_points = np.column_stack([X.ravel(), Y.ravel()])
    chk = raw.get("check", {})
    cfg.check_box = float(ctx.number("check", "box_half_width", chk.get("box_half_width", 10.0), positive=True))
    cfg.check_samples = int(ctx.number("check", "samples", chk.get("samples", 4000), positive=True, integer=True))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    except UnicodeDecodeError as exc:
        raise ParseError(f"config is not valid UTF-8 ({exc.reason})", source=str(path)) from None
    return parse_config(text, source=str(path), base_dir=path.parent)
