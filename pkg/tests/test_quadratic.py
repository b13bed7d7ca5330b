import math

import numpy as np
import pytest

from gohverify.goh import goh_w
from gohverify.quadratic import (
    QuadReport,
    band_limited_direction,
    eval_Q,
    eval_Qhat,
    eval_Qhat_terms,
    fit_slope,
    quad_report,
    remainder_probe,
)
from gohverify.solvers import solve_linearized, solve_zeta

from conftest import example_nominal, synthetic


def _arc3_unit(nom):
    g = nom.grid
    return np.where(g.t_mid > 2.0, 1.0, 0.0)[None, :]


def test_Q_zero_direction(coarse):
    g = coarse.grid
    z = np.zeros_like(coarse.y)
    v = np.zeros((1, g.nt))
    assert eval_Q(coarse.ctx, z, v) == 0.0
    assert eval_Qhat(coarse.ctx, z, np.zeros((1, g.nt + 1)), np.zeros(1)) == 0.0


def test_Q_on_third_arc_unit_direction(fine, oracle):
    v = _arc3_unit(fine)
    z = solve_linearized(fine.spec, fine.grid, fine.y, fine.u, v, evolution=fine.ctx.evolution)
    assert eval_Q(fine.ctx, z, v) == pytest.approx(oracle["Q_v1_arc3"], rel=2e-3)


def test_Qhat_on_third_arc_unit_direction(fine, oracle):
    v = _arc3_unit(fine)
    w, h = goh_w(v, fine.grid)
    zeta = solve_zeta(fine.spec, fine.grid, fine.y, fine.u, w, evolution=fine.ctx.evolution, B1=fine.ctx.aux.B1)
    assert np.max(np.abs(zeta)) < 1e-8
    terms = eval_Qhat_terms(fine.ctx, zeta, w, h)
    assert sum(terms.values()) == pytest.approx(oracle["Q_v1_arc3"], rel=2e-3)
    # the terminal pieces reduce to h^2 since y(T) = c1 and p(T) = 0
    assert terms["terminal_square"] == pytest.approx(1.0, rel=3e-3)
    assert abs(terms["terminal_S"]) < 1e-3


def test_term_breakdown_sums(medium):
    v = band_limited_direction(np.random.default_rng(1), medium.grid, 1)
    rep = quad_report(medium.ctx, v)
    qh = sum(val for key, val in rep.terms.items() if key.startswith("Qhat."))
    q = sum(val for key, val in rep.terms.items() if key.startswith("Q."))
    assert qh == pytest.approx(rep.Qhat_value, rel=1e-12)
    assert q == pytest.approx(rep.Q_value, rel=1e-12)
    assert rep.rel_gap == pytest.approx(abs(rep.Q_value - rep.Qhat_value) / max(1, abs(rep.Q_value)))


def test_report_json_round_trip(coarse):
    import json

    rep = quad_report(coarse.ctx, band_limited_direction(np.random.default_rng(0), coarse.grid, 1))
    data = json.loads(rep.to_json())
    assert set(data) == {"Q_value", "Qhat_value", "rel_gap", "terms", "grid"}
    assert isinstance(rep, QuadReport)


def test_equivalence_on_synthetic_problem_with_nonzero_B1():
    gaps = []
    for nx, nt in [(31, 100), (63, 200), (127, 400)]:
        from gohverify.quadratic import QuadContext

        spec, grid, u, y, mult = synthetic(m=2, q=1, gamma=0.7, nx=nx, nt=nt)
        ctx = QuadContext.build(spec, grid, u, y, mult)
        assert np.max(np.abs(ctx.aux.B1)) > 0.1
        v = np.stack([np.cos(np.pi * grid.t_mid), np.sin(2 * np.pi * grid.t_mid)])
        gaps.append(quad_report(ctx, v).rel_gap)
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-3


def test_band_limited_directions_are_normalised(medium):
    rng = np.random.default_rng(5)
    v = band_limited_direction(rng, medium.grid, 2, amplitude=0.3)
    assert math.sqrt(np.sum(medium.grid.cell_integral(v**2))) == pytest.approx(0.3)
    v = band_limited_direction(rng, medium.grid, 1, support=(2, 3))
    assert np.all(v[:, medium.grid.t_mid < 2] == 0)


def test_fit_slope_exact_power():
    x = np.array([0.2, 0.1, 0.05])
    assert fit_slope(x, 3 * x**2) == pytest.approx(2.0)


def test_remainder_probe_trivial_without_coupling():
    # a control channel b = 0 cannot move the state, so delta y = z = 0
    spec, grid, u, y, _ = synthetic(m=1, q=0, b=["0"])
    v = np.ones((1, grid.nt))
    tab = remainder_probe(spec, grid, u, y, [0.2, 0.1, 0.05], v)
    assert max(tab.eta_ratio) == 0.0
    assert max(tab.dy_ratio) == 0.0


def test_remainder_probe_rejects_zero_direction(coarse):
    with pytest.raises(ValueError):
        remainder_probe(coarse.spec, coarse.grid, coarse.u, coarse.y, [0.2, 0.1, 0.05],
                        np.zeros((1, coarse.grid.nt)))


def test_remainder_probe_rejects_bad_amplitudes(coarse):
    v = np.ones((1, coarse.grid.nt))
    with pytest.raises(ValueError):
        remainder_probe(coarse.spec, coarse.grid, coarse.u, coarse.y, [0.1, 0.2, 0.05], v)


def test_remainder_orders_on_example(fine):
    g = fine.grid
    v = band_limited_direction(np.random.default_rng(11), g, 1, support=(2.0, 3.0))
    tab = remainder_probe(fine.spec, g, fine.u, fine.y, [0.2, 0.1, 0.05, 0.025], v)
    assert tab.eta_slope >= 0.9
    assert abs(tab.dy_slope) <= 0.15
