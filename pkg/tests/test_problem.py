import json
import math

import numpy as np
import pytest

from gohverify import example as ex
from gohverify.expressions import ExpressionError, Function, parse_constant
from gohverify.problem import (
    Grid,
    Multiplier,
    ProblemError,
    eval_state_constraint,
    load_problem,
    problem_from_dict,
    state_constraint_history,
)

from conftest import synthetic_config


def test_expression_table_and_derivatives():
    f = Function.parse("sqrt(2)*sin(pi*x)*exp(-t)")
    x = np.linspace(0, 1, 7)
    assert np.allclose(f(x, 0.5), math.sqrt(2) * np.sin(np.pi * x) * math.exp(-0.5))
    assert np.allclose(f.dxx(x), -np.pi**2 * f(x))
    assert f.depends_on_t
    assert Function.parse(0).is_zero


@pytest.mark.parametrize("bad", ["__import__('os')", "x; 1", "lambda x: x", "foo(x)", "y + 1", "x[0]"])
def test_expression_rejects_unsafe_or_unknown(bad):
    with pytest.raises(ExpressionError):
        Function.parse(bad)


def test_time_dependence_refused_where_static():
    with pytest.raises(ExpressionError):
        Function.parse("t*x", allow_t=False)


def test_piecewise_in_time():
    f = Function.parse({"piecewise_t": [["1", "x"], [None, "2*x"]]})
    assert float(f(0.5, 0.5)) == pytest.approx(0.5)
    assert float(f(0.5, 1.5)) == pytest.approx(1.0)


def test_constants():
    assert parse_constant("pi**2 + 1") == pytest.approx(math.pi**2 + 1)
    with pytest.raises(ExpressionError):
        parse_constant("x")


def test_example_bounds_and_shape():
    spec = ex.example_spec()
    assert spec.u_lower.tolist() == [-1.0]
    assert spec.u_upper[0] == pytest.approx(math.pi**2 + 1)
    assert spec.control_dim_m == 1 and spec.constraint_count_q == 1
    assert spec.y0(np.array([0.0, 1.0])) == pytest.approx([0.0, 0.0], abs=1e-12)


def test_config_round_trip_through_json():
    spec = load_problem(ex.example_config_text())
    assert spec.name == "bang-constrained-singular"
    assert spec.time_alignment == pytest.approx((math.log(2), 2.0))


def test_missing_key_and_parse_failure():
    cfg = ex.example_config()
    del cfg["bounds"]
    with pytest.raises(ProblemError, match="missing"):
        problem_from_dict(cfg)
    with pytest.raises(ProblemError, match="parse failure"):
        load_problem("{not json")


def test_degenerate_bounds():
    cfg = ex.example_config()
    cfg["bounds"] = {"lower": [1], "upper": [1]}
    with pytest.raises(ProblemError, match="degenerate control bounds"):
        problem_from_dict(cfg)


def test_boundary_compatibility():
    cfg = ex.example_config()
    cfg["targets"]["y0"] = "1 + x"
    with pytest.raises(ProblemError, match="boundary compatibility"):
        problem_from_dict(cfg)


def test_grid_alignment_snaps_junctions():
    g = ex.grid(51, 375)
    assert math.log(2) in g.t_nodes.tolist()
    assert 2.0 in g.t_nodes.tolist()
    assert g.t_nodes[-1] == 3.0
    assert np.all(np.diff(g.t_nodes) > 0)


def test_grid_quadrature_is_exact_for_linear():
    g = Grid.build(ex.example_spec(), 20, 30)
    assert g.space_integral(g.x_nodes) == pytest.approx(0.5)
    assert g.time_integral(g.t_nodes) == pytest.approx(4.5)


def test_state_constraint_at_known_time(oracle):
    g = ex.grid(201, 600)
    y = ex.state_field(g)
    k = int(np.argmin(np.abs(g.t_nodes - 2.5)))
    assert g.t_nodes[k] == pytest.approx(2.5)
    gv = eval_state_constraint(ex.example_spec(), g, y, k)
    assert gv[0] == pytest.approx(oracle["g_at_2p5"], abs=1e-4)
    hist = state_constraint_history(ex.example_spec(), g, y)
    assert hist[0, k] == pytest.approx(gv[0])


def test_mu_reconstruction_nondecreasing_and_zero_at_T():
    g = ex.grid(51, 375)
    mult = Multiplier(p=np.zeros((53, 376)), mu_dot=ex.mu_dot_cells(g))
    mu = mult.mu(g)
    assert mu[0, -1] == 0.0
    assert np.all(np.diff(mu[0]) >= -1e-15)


def test_synthetic_config_valid():
    spec = problem_from_dict(synthetic_config(m=2, q=1))
    assert spec.control_dim_m == 2
