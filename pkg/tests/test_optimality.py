import math

import numpy as np
import pytest

from gohverify import example as ex
from gohverify.optimality import (
    DEFAULT_TOLERANCES,
    ArcError,
    ConeBasis,
    ConeError,
    build_pc2star_basis,
    check_first_order,
    cone_residuals,
    detect_arcs,
    estimate_coercivity,
    gram_matrix,
    growth_probe,
    growth_ratio,
    switching,
)
from gohverify.problem import Arc, ArcStructure, Grid, problem_from_dict, state_constraint_history
from gohverify.quadratic import QuadContext, eval_Qhat
from gohverify.solvers import LinearEvolution, cost, goh_forcing, solve_costate, solve_state, solve_zeta

from conftest import example_nominal, synthetic, synthetic_config

TOL = DEFAULT_TOLERANCES


def _arcs(nom):
    return detect_arcs(nom.spec, nom.grid, nom.u, nom.y, TOL.tol_bounds(nom.spec),
                       TOL.tol_state(nom.spec, nom.grid, nom.y), min_arc_cells=TOL.min_arc_cells)


# ------------------------------------------------------------------ switching


def test_switching_zero_costate(coarse):
    psi = switching(coarse.spec, coarse.grid, coarse.y, np.zeros_like(coarse.y))
    assert np.all(psi.psi == 0)


def test_switching_closed_form_on_example(fine, oracle):
    psi = switching(fine.spec, fine.grid, fine.y, fine.mult.p).psi[0]
    t = fine.grid.t_nodes
    assert np.max(np.abs(psi - ex.switching_closed_form(t))) <= 5e-3
    assert psi[0] == pytest.approx(oracle["psi_at_0"], abs=5e-3)
    k = int(np.flatnonzero(t == math.log(2))[0])
    assert psi[k] == pytest.approx(oracle["psi_at_log2"], abs=5e-3)


def test_switching_rejects_non_finite(coarse):
    p = coarse.mult.p.copy()
    p[3, 3] = np.nan
    with pytest.raises(ValueError):
        switching(coarse.spec, coarse.grid, coarse.y, p)


# ------------------------------------------------------------------ arcs


def test_example_arc_structure(fine):
    arcs = _arcs(fine)
    kinds = [a.kind() for a in arcs.arcs]
    assert kinds == ["B", "C", "S"]
    assert arcs.arcs[0].upper == frozenset({0})
    assert arcs.arcs[1].state == frozenset({0})
    j = arcs.junctions
    assert j[0] == 0.0 and j[-1] == 3.0
    assert j[1] == pytest.approx(math.log(2), abs=1e-12)
    # the state tolerance band shifts the constrained-to-free junction by at most a few cells
    assert j[2] == pytest.approx(2.0, abs=3 * fine.grid.dt.max())


def test_single_free_arc():
    spec, grid, u, y, _ = synthetic(m=1, q=1)
    arcs = detect_arcs(spec, grid, u, y, 1e-9, 1e-6)
    assert len(arcs.arcs) == 1
    a = arcs.arcs[0]
    assert not a.lower and not a.upper and not a.state and a.kind() == "S"


def test_single_upper_arc():
    spec, grid, _, _, _ = synthetic(m=1, q=1)
    u = np.full((1, grid.nt), 2.0)
    y = solve_state(spec, grid, u)
    arcs = detect_arcs(spec, grid, u, y, 1e-9, 1e-6)
    assert len(arcs.arcs) == 1 and arcs.arcs[0].upper == frozenset({0})


def test_too_many_arcs():
    spec, grid, _, _, _ = synthetic(m=1, q=0, nt=200)
    u = np.where(np.arange(grid.nt) % 2 == 0, 2.0, 0.0)[None, :]
    y = solve_state(spec, grid, u)
    with pytest.raises(ArcError, match="finite arc property"):
        detect_arcs(spec, grid, u, y, 1e-9, 1e-6, max_arcs=64)


def test_thin_near_touch_runs_are_absorbed():
    spec, grid, _, _, _ = synthetic(m=1, q=0, nt=100)
    u = np.zeros((1, grid.nt))
    u[0, 50] = 2.0
    y = solve_state(spec, grid, u)
    assert len(detect_arcs(spec, grid, u, y, 1e-9, 1e-6).arcs) == 3
    assert len(detect_arcs(spec, grid, u, y, 1e-9, 1e-6, min_arc_cells=3).arcs) == 1
    u[0, 50:54] = 2.0
    y = solve_state(spec, grid, u)
    kept = detect_arcs(spec, grid, u, y, 1e-9, 1e-6, min_arc_cells=3)
    assert [a.kind() for a in kept.arcs] == ["S", "B", "S"]


def test_non_positive_tolerance_rejected(coarse):
    with pytest.raises(ValueError):
        detect_arcs(coarse.spec, coarse.grid, coarse.u, coarse.y, 0.0, 1e-3)


# ------------------------------------------------------------------ first order


def test_first_order_passes_on_example(fine):
    arcs = _arcs(fine)
    psi = switching(fine.spec, fine.grid, fine.y, fine.mult.p)
    g = state_constraint_history(fine.spec, fine.grid, fine.y)
    rep = check_first_order(psi, arcs, fine.mult.mu_dot, g, 5e-3, fine.grid)
    assert rep.passed, rep.failures
    assert rep.strict_margin > 0.5


def test_first_order_trivial_zero_costate():
    spec, grid, u, y, _ = synthetic(m=1, q=1)
    spec = problem_from_dict({**synthetic_config(), "controls": {"b0": "0.2", "b": ["1 + 0.5*x"], "alpha": [0]}})
    arcs = detect_arcs(spec, grid, u, y, 1e-9, 1e-6)
    psi = switching(spec, grid, y, np.zeros_like(y))
    g = np.minimum(state_constraint_history(spec, grid, y), 0.0)
    rep = check_first_order(psi, arcs, np.zeros((1, grid.nt)), g, 1e-9, grid)
    assert rep.passed


def test_first_order_sign_flip_fails_on_bang_arc(fine):
    arcs = _arcs(fine)
    psi = switching(fine.spec, fine.grid, fine.y, -fine.mult.p)
    g = state_constraint_history(fine.spec, fine.grid, fine.y)
    rep = check_first_order(psi, arcs, fine.mult.mu_dot, g, 5e-3, fine.grid)
    assert not rep.passed
    assert rep.worst_sign_where["arc"] == 0
    assert rep.worst_sign == pytest.approx(0.75, abs=1e-2)


@pytest.mark.parametrize("lam", [0.1, 3.0])
def test_first_order_sign_margins_scale_with_multiplier(medium, lam):
    arcs = _arcs(medium)
    g = state_constraint_history(medium.spec, medium.grid, medium.y)
    psi = switching(medium.spec, medium.grid, medium.y, medium.mult.p)
    base = check_first_order(psi, arcs, medium.mult.mu_dot, g, 2e-2, medium.grid)
    psi_l = switching(medium.spec, medium.grid, medium.y, lam * medium.mult.p)
    scaled = check_first_order(psi_l, arcs, lam * medium.mult.mu_dot, g, 2e-2, medium.grid)
    assert scaled.worst_sign == pytest.approx(lam * base.worst_sign, rel=1e-9)
    assert scaled.strict_margin == pytest.approx(lam * base.strict_margin, rel=1e-9)
    # feasibility of the state does not depend on the multiplier
    assert scaled.worst_feasibility == base.worst_feasibility


def test_complementarity_violation_detected(medium):
    arcs = _arcs(medium)
    psi = switching(medium.spec, medium.grid, medium.y, medium.mult.p)
    g = state_constraint_history(medium.spec, medium.grid, medium.y)
    mu = np.ones((1, medium.grid.nt))  # density where the constraint is slack
    rep = check_first_order(psi, arcs, mu, g, 5e-3, medium.grid)
    assert not rep.passed and rep.complementarity < -5e-3


# ------------------------------------------------------------------ cone


def test_example_basis_dimension(medium):
    arcs = _arcs(medium)
    basis = build_pc2star_basis(medium.spec, medium.grid, arcs, medium.y, medium.u,
                                evolution=medium.ctx.evolution, max_free_params=10_000)
    start = arcs.arcs[-1].start
    assert basis.size == (medium.grid.nt - start) + 1
    # first two arcs carry w = 0
    assert np.max(np.abs(basis.w[0, : start + 1])) == 0.0


def test_pc2_scalar_adds_nothing_on_example(medium):
    arcs = _arcs(medium)
    a = build_pc2star_basis(medium.spec, medium.grid, arcs, medium.y, medium.u, max_free_params=80)
    b = build_pc2star_basis(medium.spec, medium.grid, arcs, medium.y, medium.u, mode="pc2_scalar",
                            max_free_params=80)
    assert a.size == b.size


def _manual_arcs(grid, k1, k2, state=frozenset({0})):
    return ArcStructure(
        junctions=(0.0, float(grid.t_nodes[k1]), float(grid.t_nodes[k2]), float(grid.t_nodes[-1])),
        arcs=(Arc(0, k1), Arc(k1, k2, state=state), Arc(k2, grid.nt)),
    )


def test_unconstrained_cone_dimension():
    spec, grid, u, y, _ = synthetic(m=2, q=1, nt=40)
    arcs = ArcStructure(junctions=(0.0, 1.0), arcs=(Arc(0, grid.nt),))
    basis = build_pc2star_basis(spec, grid, arcs, y, u, max_free_params=1000)
    assert basis.size == 2 * (grid.nt + 1) + 2


@pytest.mark.parametrize("m", [1, 2])
def test_cone_residuals_with_nonzero_goh_forcing(m):
    spec, grid, u, y, _ = synthetic(m=m, q=1, nt=80)
    arcs = _manual_arcs(grid, 20, 55)
    evo = LinearEvolution(spec, grid, y, u)
    B1 = goh_forcing(spec, grid, y)
    assert np.max(np.abs(B1)) > 0.1
    basis = build_pc2star_basis(spec, grid, arcs, y, u, evolution=evo, B1=B1)
    res = cone_residuals(spec, grid, arcs, y, basis, evo, B1)
    assert res["state_arc"] <= 1e-8
    assert max(res.values()) <= 1e-8


def test_cone_with_bang_arcs_residuals():
    spec, grid, u, y, _ = synthetic(m=2, q=1, nt=90)
    arcs = ArcStructure(
        junctions=(0.0, 0.2, 0.5, 0.8, 1.0),
        arcs=(Arc(0, 18, upper=frozenset({0})), Arc(18, 45, lower=frozenset({1}), state=frozenset({0})),
              Arc(45, 72, upper=frozenset({1})), Arc(72, 90, lower=frozenset({0}))),
    )
    evo = LinearEvolution(spec, grid, y, u)
    B1 = goh_forcing(spec, grid, y)
    basis = build_pc2star_basis(spec, grid, arcs, y, u, evolution=evo, B1=B1)
    res = cone_residuals(spec, grid, arcs, y, basis, evo, B1)
    assert max(res.values()) <= 1e-8


def test_controllability_count_violated():
    spec, grid, u, y, _ = synthetic(m=1, q=2, nt=60)
    arcs = _manual_arcs(grid, 20, 40, state=frozenset({0, 1}))
    with pytest.raises(ConeError, match="controllability count"):
        build_pc2star_basis(spec, grid, arcs, y, u)


def test_singular_controllability_block():
    cfg = synthetic_config(m=1, q=1, b=["1"])
    cfg["constraints"] = [{"c": "sin(2*pi*x)", "d": -0.3}]
    cfg["targets"] = {"f": 0, "y0": "sin(pi*x)", "y_d": 0, "y_dT": 0}
    cfg["controls"]["b0"] = 0
    spec = problem_from_dict(cfg)
    grid = Grid.build(spec, 31, 60)
    u = np.zeros((1, grid.nt))
    y = solve_state(spec, grid, u)
    with pytest.raises(ConeError, match="singular"):
        build_pc2star_basis(spec, grid, _manual_arcs(grid, 20, 40), y, u)


def test_pc2_scalar_requires_single_control():
    spec, grid, u, y, _ = synthetic(m=2, q=1, nt=40)
    arcs = ArcStructure(junctions=(0.0, 1.0), arcs=(Arc(0, grid.nt),))
    with pytest.raises(ConeError):
        build_pc2star_basis(spec, grid, arcs, y, u, mode="pc2_scalar")


def test_pc2_scalar_enforces_junction_continuity():
    spec, grid, u, y, _ = synthetic(m=1, q=1, nt=90)
    arcs = ArcStructure(
        junctions=(0.0, 0.3, 0.6, 1.0),
        arcs=(Arc(0, 27), Arc(27, 54, upper=frozenset({0})), Arc(54, 90, state=frozenset({0}))),
    )
    star = build_pc2star_basis(spec, grid, arcs, y, u, max_free_params=1000)
    scal = build_pc2star_basis(spec, grid, arcs, y, u, mode="pc2_scalar", max_free_params=1000)
    assert scal.size < star.size
    # BC junction at node 54: the constant on the bang arc equals w at the junction node
    bang_value = scal.w[0, 40]
    assert np.allclose(bang_value, scal.w[0, 54], atol=1e-10)
    # last arc constrained: w(T) = h
    assert np.allclose(scal.w[0, -1], scal.h[0], atol=1e-10)


def test_gram_matrix_of_known_vectors():
    g = Grid.build(ex.example_spec(), 8, 30, align=())
    w = np.stack([np.ones(31), g.t_nodes], axis=-1)[None]
    h = np.array([[1.0, 0.0]])
    G = gram_matrix(g, w, h)
    assert G[0, 0] == pytest.approx(3.0 + 1.0)
    assert G[0, 1] == pytest.approx(4.5)


# ------------------------------------------------------------------ coercivity


def test_coercivity_single_vector_is_rayleigh_quotient(medium):
    g = medium.grid
    w = np.where(g.t_nodes > 2.2, (g.t_nodes - 2.2), 0.0)[None, :, None]
    h = np.array([[0.8]])
    basis = ConeBasis(w=w, h=h, gram=gram_matrix(g, w, h), labels=["x"], mode="pc2star")
    res = estimate_coercivity(medium.spec, g, medium.ctx, basis)
    zeta = solve_zeta(medium.spec, g, medium.y, medium.u, w[..., 0], evolution=medium.ctx.evolution)
    q = eval_Qhat(medium.ctx, zeta, w[..., 0], h[:, 0])
    assert res.rho == pytest.approx(q / basis.gram[0, 0], rel=1e-10)


def _example_rho(nom, kappa_sign=1.0, cap=120):
    arcs = _arcs(nom)
    basis = build_pc2star_basis(nom.spec, nom.grid, arcs, nom.y, nom.u, evolution=nom.ctx.evolution,
                                B1=nom.ctx.aux.B1, max_free_params=cap)
    ctx = nom.ctx if kappa_sign > 0 else nom.ctx.with_kappa(-nom.ctx.kappa)
    return estimate_coercivity(nom.spec, nom.grid, ctx, basis), basis


def test_example_coercivity_near_continuum_value(coarse, oracle):
    res, _ = _example_rho(coarse)
    assert res.rho >= 0.5
    assert res.rho == pytest.approx(oracle["rho_continuum"], rel=0.1)


def test_negated_kappa_loses_coercivity(coarse):
    res, _ = _example_rho(coarse, kappa_sign=-1.0)
    assert res.rho < 0


def test_coercivity_monotone_under_restriction(coarse):
    res, basis = _example_rho(coarse, cap=60)
    keep = np.arange(0, basis.size, 2)
    sub = ConeBasis(w=basis.w[..., keep], h=basis.h[:, keep], gram=basis.gram[np.ix_(keep, keep)],
                    labels=[basis.labels[k] for k in keep], mode=basis.mode)
    assert estimate_coercivity(coarse.spec, coarse.grid, coarse.ctx, sub).rho >= res.rho - 1e-12


def test_coercivity_rejects_empty_basis(coarse):
    empty = ConeBasis(w=np.zeros((1, coarse.grid.nt + 1, 0)), h=np.zeros((1, 0)), gram=np.zeros((0, 0)),
                      labels=[], mode="pc2star")
    with pytest.raises(ConeError):
        estimate_coercivity(coarse.spec, coarse.grid, coarse.ctx, empty)


# ------------------------------------------------------------------ growth


def test_growth_degenerate_draw_is_excluded(coarse):
    F0 = cost(coarse.spec, coarse.grid, coarse.u, coarse.y)
    status, ratio = growth_ratio(coarse.spec, coarse.grid, coarse.u, F0, coarse.u.copy())
    assert status == "degenerate" and math.isnan(ratio)


def test_growth_positive_on_example_small_sample(medium):
    rep = growth_probe(medium.spec, medium.grid, medium.u, medium.y, 15, 0.1, seed=1)
    assert rep.ratios.size == 15
    assert rep.passed


def test_growth_large_radius_discards_but_stays_positive(medium):
    rep = growth_probe(medium.spec, medium.grid, medium.u, medium.y, 10, 10.0, seed=2)
    assert rep.discard_rate > 0.3
    assert np.min(rep.ratios) > 0


def test_growth_all_infeasible(coarse):
    with pytest.raises(RuntimeError, match="infeasible"):
        growth_probe(coarse.spec, coarse.grid, coarse.u, coarse.y, 3, 0.1, seed=0, tol_state=-10.0,
                     max_draws=5)


def test_growth_rejects_bad_radius(coarse):
    with pytest.raises(ValueError):
        growth_probe(coarse.spec, coarse.grid, coarse.u, coarse.y, 3, 0.0, seed=0)


def test_growth_reproducible(coarse):
    a = growth_probe(coarse.spec, coarse.grid, coarse.u, coarse.y, 5, 0.1, seed=9)
    b = growth_probe(coarse.spec, coarse.grid, coarse.u, coarse.y, 5, 0.1, seed=9)
    assert np.array_equal(a.ratios, b.ratios)
