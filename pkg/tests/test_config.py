import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quasitd.config import compile_expression, load_config, parse_config
from quasitd.errors import ConfigurationError, ParseError
from quasitd.io import write_field

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_empty_config_defaults():
    cfg = parse_config("")
    p = cfg.problem
    assert p.bounds == (0.0, 1.0, 0.0, 1.0)
    assert p.h == pytest.approx(1 / 40) and p.tol == 1e-10 and p.max_iter == 25
    assert cfg.z is None and cfg.epsilons == [] and cfg.grid_points is None
    assert cfg.deterministic and cfg.seed == 0


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.toml")))
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.source.endswith(name)
    assert len(cfg.config_hash) == 64


def test_benchmark_config_contents():
    cfg = load_config(CONFIGS / "linear_benchmark.toml")
    assert cfg.z == (0.5, 0.5) and cfg.epsilons == [0.08, 0.04, 0.02]
    assert cfg.U0 == (1.0, 0.0) and cfg.P0 == (1.0, 0.0)
    assert cfg.projection_R == 80.0 and cfg.projection_radii == [10.0, 20.0, 40.0]
    assert cfg.problem.corrector.snap_radii == (10.0, 20.0, 40.0)
    assert cfg.problem.h == 0.0125


def test_unknown_key_reports_line_and_column():
    text = "[numerics]\nh = 0.1\n  tolerance = 1e-8\n"
    with pytest.raises(ParseError) as exc:
        parse_config(text, source="run.toml")
    e = exc.value
    assert (e.line, e.column) == (3, 3)
    assert "tolerance" in str(e) and "run.toml, line 3, column 3" in str(e)


def test_unknown_table_reports_line():
    with pytest.raises(ParseError) as exc:
        parse_config("[point]\nz = [0.5, 0.5]\n\n[solver]\nx = 1\n")
    assert exc.value.line == 4


def test_toml_syntax_error_has_line():
    with pytest.raises(ParseError) as exc:
        parse_config("[numerics]\nh = = 0.1\n")
    assert exc.value.line == 2


@pytest.mark.parametrize("text,key", [
    ("[numerics]\nh = -1.0\n", "h"),
    ("[numerics]\nmax_iter = 2.5\n", "max_iter"),
    ("[numerics]\ndeterministic = 1\n", "deterministic"),
    ("[point]\nz = [0.5]\n", "z"),
    ("[problem]\nbounds = [1.0, 0.0, 0.0, 1.0]\n", "bounds"),
    ("[materials]\na1 = { preset = \"steel\" }\n", "a1"),
    ("[materials]\na1 = { preset = \"linear\", alpha = 1.0 }\n", "a1"),
    ("[materials]\na2 = { preset = \"linear\", gamma = -1.0 }\n", "a2"),
    ("[problem]\nf = { kind = \"expression\", expr = \"__import__('os')\" }\n", "f"),
    ("[problem]\nu_d = { kind = \"table\" }\n", "u_d"),
    ("[inclusion]\nkind = \"ellipse\"\n", "kind"),
    ("[corrector]\ngrading = \"fast\"\n", "grading"),
    ("[grid]\nx = [0.0, 1.0, 2.5]\ny = [0.0, 1.0, 2]\n", "x"),
])
def test_invalid_values_are_located(text, key):
    with pytest.raises(ParseError) as exc:
        parse_config(text)
    assert exc.value.line is not None
    assert text.splitlines()[exc.value.line - 1].lstrip().startswith(key) or key in str(exc.value)


def test_presets_and_swap():
    cfg = parse_config(
        "[materials]\n"
        "a1 = { preset = \"reluctivity\", alpha = 1.0, beta = 3.0, tau = 1.0, k = 1 }\n"
        "a2 = { preset = \"linear\", gamma = 1.0 }\n"
        "swap = true\n")
    m = cfg.problem.material
    assert m.a1.name == "reluctivity" and m.a2.name == "linear" and m.swap
    assert m.inner is m.a2 and m.outer is m.a1


def test_omega_polygon_and_disk():
    cfg = parse_config("[problem.omega]\nkind = \"polygon\"\nvertices = [[-0.2, -0.2], [0.2, -0.2], [0.0, 0.2]]\ncenter = [0.5, 0.5]\n")
    assert cfg.problem.subdomain.shape.kind == "polygon"
    cfg = parse_config("[problem.omega]\nkind = \"disk\"\nradius = 0.3\ncenter = [0.5, 0.5]\n")
    assert cfg.problem.subdomain.contains(np.array([[0.5, 0.5], [0.1, 0.1]])).tolist() == [True, False]


def test_grid_ranges_and_points():
    cfg = parse_config("[grid]\nx = [0.2, 0.8, 4]\ny = [0.5, 0.5, 1]\n")
    assert cfg.grid_points.shape == (4, 2)
    assert np.allclose(cfg.grid_points[:, 0], [0.2, 0.4, 0.6, 0.8])
    cfg = parse_config("[grid]\npoints = [[0.1, 0.2], [0.3, 0.4]]\n")
    assert cfg.grid_points.tolist() == [[0.1, 0.2], [0.3, 0.4]]
    with pytest.raises(ParseError):
        parse_config("[grid]\npoints = [[0.1, 0.2]]\nx = [0.0, 1.0, 2]\n")


def test_data_kinds(tmp_path):
    cfg = parse_config("[problem]\nf = 2.5\nu_d = { kind = \"constant\", value = -1.0 }\n")
    assert cfg.problem.f == 2.5 and cfg.problem.u_d == -1.0
    cfg = parse_config("[problem]\nf = { kind = \"expression\", expr = \"x*y + sin(pi*x)\" }\n")
    assert cfg.problem.f(0.5, 2.0) == pytest.approx(2.0)
    write_field(np.zeros(3), tmp_path / "ud.field")
    cfg = parse_config("[problem]\nu_d = { kind = \"file\", path = \"ud.field\" }\n", base_dir=tmp_path)
    assert cfg.u_d_file == (tmp_path / "ud.field").resolve()


def test_ramp_grading_and_corrector_overrides():
    cfg = parse_config("[corrector]\nR = 40.0\nh_near = 0.05\nh_far = 2.0\ngrading = \"ramp\"\n")
    c = cfg.problem.corrector
    assert c.R == 40.0 and c.grading is None
    with pytest.raises(ParseError):
        parse_config("[corrector]\nR = 10.0\nh_near = 2.0\nh_far = 1.0\n")


def test_hash_is_deterministic_and_order_free():
    a = parse_config("[numerics]\nh = 0.1\nseed = 3\n\n[point]\nz = [0.5, 0.5]\n")
    b = parse_config("[point]\nz = [0.5, 0.5]\n\n[numerics]\nseed = 3\nh = 0.1\n")
    c = parse_config("[numerics]\nh = 0.2\nseed = 3\n\n[point]\nz = [0.5, 0.5]\n")
    assert a.config_hash == b.config_hash != c.config_hash


def test_missing_config_file(tmp_path):
    with pytest.raises(ParseError):
        load_config(tmp_path / "absent.toml")


def test_expression_evaluates_vectorised():
    g = compile_expression("exp(-x) * cos(y) - sqrt(4) / 2 ** 2 + -x")
    x = np.array([0.0, 1.0])
    y = np.array([0.0, math.pi])
    assert np.allclose(g(x, y), np.exp(-x) * np.cos(y) - 0.5 - x)
    assert compile_expression("3")(x, y).shape == (2,)


@pytest.mark.parametrize("expr", [
    "__import__('os')", "x.real", "open('f')", "[x, y]", "x if y else 0", "lambda: 1", "z + 1",
    "sin(x, y)", "sin(x=1)", "x // 2", "True", "'a'", "x +",
])
def test_expression_whitelist_rejects(expr):
    with pytest.raises(ConfigurationError):
        compile_expression(expr)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-10, 10), b=st.floats(-10, 10), x=st.floats(-3, 3), y=st.floats(-3, 3))
def test_expression_matches_python_arithmetic(a, b, x, y):
    g = compile_expression(f"{a!r} * x + {b!r} * y * y - x / 4")
    assert float(g(x, y)) == pytest.approx(a * x + b * y * y - x / 4, rel=1e-12, abs=1e-12)
