"""Command-line entry point: ``gohverify {verify,example,sweep}``.

Exit codes: 0 all enabled checks pass, 1 a check failed, 2 usage or
configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import example as ex
from .expressions import ExpressionError
from .io import (
    FormatError,
    read_candidate_csv,
    write_candidate_csv,
    write_report,
    write_table_csv,
)
from .optimality import (
    DEFAULT_TOLERANCES,
    ArcError,
    ConeError,
    Tolerances,
    arcs_table,
    build_pc2star_basis,
    check_first_order,
    detect_arcs,
    estimate_coercivity,
    growth_probe,
    switching,
)
from .problem import Grid, Multiplier, ProblemError, ProblemSpec, load_problem, state_constraint_history
from .quadratic import QuadContext, band_limited_direction, fit_slope, quad_report, remainder_probe
from .solvers import SCHEMES, EvolutionOptions, NewtonError, solve_costate, solve_state

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
CHECKS = ("first_order", "quadratic_equivalence", "coercivity", "growth")
DEFAULT_GRID = (201, 3000)
SECTIONS = ("first_order", "arcs", "quadratic_equivalence", "coercivity", "growth")


class UsageError(Exception):
    pass


class CheckFailure(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    problem_path: str | None
    candidate_path: str | None
    grid: tuple[int, int]
    checks: frozenset
    output_dir: Path
    seed: int
    scheme: str = "crank_nicolson"
    cone: str = "pc2star"
    negate_costate: bool = False
    growth_samples: int = 100
    growth_radius: float = 0.1
    quad_samples: int = 10
    max_free_params: int = 200
    grids: tuple = ()
    amplitudes: tuple = ()

    def __post_init__(self):
        nx, nt = self.grid
        if nx < 8 or nt < 16:
            raise UsageError(f"grid {nx},{nt} too small (need nx >= 8, nt >= 16)")


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        nx, nt = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be NX,NT, got {text!r}") from None
    return nx, nt


def _parse_grids(text: str) -> tuple:
    return tuple(_parse_grid(part) for part in text.split(";") if part.strip())


def _parse_floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _parse_checks(text: str) -> frozenset:
    text = text.strip().lower()
    if text in ("all", ""):
        return frozenset(CHECKS)
    if text == "none":
        return frozenset()
    items = {c.strip() for c in text.split(",") if c.strip()}
    unknown = items - set(CHECKS)
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown checks {sorted(unknown)}; choose from {CHECKS}")
    return frozenset(items)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gohverify", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, grid_default):
        p.add_argument("--grid", type=_parse_grid, default=grid_default, metavar="NX,NT")
        p.add_argument("--scheme", choices=sorted(SCHEMES), default="crank_nicolson")
        p.add_argument("--checks", type=_parse_checks, default=frozenset(CHECKS), metavar="LIST")
        p.add_argument("--out", type=Path, default=Path("gohverify-out"))
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--cone", choices=("pc2star", "pc2"), default="pc2star")
        p.add_argument("--growth-samples", type=int, default=100)
        p.add_argument("--growth-radius", type=float, default=0.1)
        p.add_argument("--max-free-params", type=int, default=200)

    pv = sub.add_parser("verify", help="certify a candidate (u, mu_dot) for a problem file")
    common(pv, DEFAULT_GRID)
    pv.add_argument("--problem", required=True)
    pv.add_argument("--candidate", required=True)
    pv.add_argument("--negate-costate", action="store_true",
                    help="self-test fixture: flip the sign of the computed costate")

    pe = sub.add_parser("example", help="run the closed-form example end to end")
    common(pe, DEFAULT_GRID)

    ps = sub.add_parser("sweep", help="grid refinement and remainder-order studies")
    ps.add_argument("--problem")
    ps.add_argument("--candidate")
    ps.add_argument("--grid", type=_parse_grid, default=(201, 3000), metavar="NX,NT",
                    help="grid for the amplitude sweep")
    ps.add_argument("--grids", type=_parse_grids, default=((51, 375), (101, 750), (201, 1500)),
                    metavar="NX,NT;NX,NT;...")
    ps.add_argument("--amplitudes", type=_parse_floats, default=(0.2, 0.1, 0.05, 0.025))
    ps.add_argument("--scheme", choices=sorted(SCHEMES), default="crank_nicolson")
    ps.add_argument("--out", type=Path, default=Path("gohverify-out"))
    ps.add_argument("--seed", type=int, default=0)
    return parser


def config_from_args(args) -> RunConfig:
    return RunConfig(
        subcommand=args.subcommand,
        problem_path=getattr(args, "problem", None),
        candidate_path=getattr(args, "candidate", None),
        grid=args.grid,
        checks=getattr(args, "checks", frozenset(CHECKS)),
        output_dir=args.out,
        seed=args.seed,
        scheme=args.scheme,
        cone="pc2_scalar" if getattr(args, "cone", "pc2star") == "pc2" else "pc2star",
        negate_costate=getattr(args, "negate_costate", False),
        growth_samples=getattr(args, "growth_samples", 100),
        growth_radius=getattr(args, "growth_radius", 0.1),
        max_free_params=getattr(args, "max_free_params", 200),
        grids=getattr(args, "grids", ()),
        amplitudes=getattr(args, "amplitudes", ()),
    )


# ---------------------------------------------------------------- pipeline


@dataclass
class Nominal:
    spec: ProblemSpec
    grid: Grid
    u: np.ndarray
    y: np.ndarray
    mult: Multiplier
    opts: EvolutionOptions


def _load_inputs(cfg: RunConfig) -> tuple[ProblemSpec, str, str]:
    try:
        text = Path(cfg.problem_path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read problem file: {exc}") from exc
    if not Path(cfg.candidate_path).is_file():
        raise UsageError(f"candidate file not found: {cfg.candidate_path}")
    return load_problem(text), cfg.candidate_path, text


def nominal(spec: ProblemSpec, grid: Grid, u, mu_dot, cfg: RunConfig) -> Nominal:
    opts = EvolutionOptions(scheme=cfg.scheme)
    y = solve_state(spec, grid, u, opts)
    mult = solve_costate(spec, grid, y, u, mu_dot, opts)
    if cfg.negate_costate:
        mult = Multiplier(p=-mult.p, mu_dot=mult.mu_dot,
                          p_cell=None if mult.p_cell is None else -mult.p_cell)
    return Nominal(spec, grid, np.asarray(u, float), y, mult, opts)


def is_coarse(grid: Grid) -> bool:
    return grid.nx < DEFAULT_GRID[0] or grid.nt < DEFAULT_GRID[1]


def run_checks(nom: Nominal, cfg: RunConfig, tols: Tolerances, out: Path) -> dict:
    """Run the enabled checks, write the plot CSVs and return the report sections."""
    spec, grid = nom.spec, nom.grid
    meta = {"nx": grid.nx, "nt": grid.nt, "scheme": cfg.scheme}
    report = {name: {} for name in SECTIONS}
    if not cfg.checks:
        return report
    g_hist = state_constraint_history(spec, grid, nom.y)
    psi = switching(spec, grid, nom.y, nom.mult.p)
    t = grid.t_nodes
    write_table_csv(out / "psi.csv", ["t"] + [f"psi_{i + 1}" for i in range(spec.control_dim_m)],
                    np.column_stack([t, psi.psi.T]))
    write_table_csv(out / "g.csv", ["t"] + [f"g_{j + 1}" for j in range(spec.constraint_count_q)],
                    np.column_stack([t, g_hist.T]))
    write_table_csv(out / "mu_dot.csv",
                    ["t_mid"] + [f"mu_dot_{j + 1}" for j in range(spec.constraint_count_q)],
                    np.column_stack([grid.t_mid, nom.mult.mu_dot.T]))

    tol_state = tols.tol_state(spec, grid, nom.y)
    try:
        arcs = detect_arcs(spec, grid, nom.u, nom.y, tols.tol_bounds(spec, solver_produced=True),
                           max(tol_state, 1e-300), tols.max_arcs, tols.min_arc_cells)
    except ArcError as exc:
        report["arcs"] = {"passed": False, "error": str(exc), "grid": meta}
        return report
    table = arcs_table(arcs, grid)
    write_table_csv(out / "arcs.csv", ["arc", "t_start", "t_stop", "kind", "lower", "upper", "state"],
                    [[r[k] for k in ("arc", "t_start", "t_stop", "kind", "lower", "upper", "state")]
                     for r in table])
    report["arcs"] = {"passed": True, "junctions": list(arcs.junctions), "arcs": table,
                      "tol_state": tol_state, "worst_residual": 0.0, "grid": meta}

    if "first_order" in cfg.checks:
        fo = check_first_order(psi, arcs, nom.mult.mu_dot, g_hist, tols.first_order, grid)
        sec = fo.as_dict()
        sec.update({"tol": tols.first_order, "worst_residual": fo.worst_sign, "grid": meta})
        report["first_order"] = sec

    need_ctx = {"quadratic_equivalence", "coercivity"} & cfg.checks
    ctx = QuadContext.build(spec, grid, nom.u, nom.y, nom.mult, nom.opts) if need_ctx else None
    if ctx is not None:
        R = ctx.aux.R
        cols, header = [grid.t_mid], ["t_mid"]
        m = spec.control_dim_m
        for i in range(m):
            for j in range(i, m):
                header.append(f"R_{i + 1}{j + 1}")
                cols.append(R[i, j])
        for name, arr in sorted(ctx.aux.R_routes.items()):
            if name == "integration_by_parts":
                continue
            for i in range(m):
                for j in range(i, m):
                    header.append(f"{name}_{i + 1}{j + 1}")
                    cols.append(arr[i, j])
        write_table_csv(out / "R.csv", header, np.column_stack(cols))

    if "quadratic_equivalence" in cfg.checks:
        rng = np.random.default_rng(cfg.seed)
        rows, gaps = [], []
        for s in range(cfg.quad_samples):
            v = band_limited_direction(rng, grid, spec.control_dim_m)
            qr = quad_report(ctx, v)
            gaps.append(qr.rel_gap)
            rows.append([s, qr.Q_value, qr.Qhat_value, qr.rel_gap])
        write_table_csv(out / "quadratic_equivalence.csv", ["sample", "Q", "Qhat", "rel_gap"], rows)
        worst = float(max(gaps))
        report["quadratic_equivalence"] = {
            "passed": worst <= tols.quad_gap, "worst_residual": worst, "tol": tols.quad_gap,
            "samples": len(gaps), "last_terms": qr.terms, "grid": meta,
        }

    if "coercivity" in cfg.checks:
        sec = {"grid": meta, "cone": cfg.cone}
        try:
            basis = build_pc2star_basis(spec, grid, arcs, nom.y, nom.u, mode=cfg.cone,
                                        evolution=ctx.evolution, B1=ctx.aux.B1,
                                        max_free_params=cfg.max_free_params,
                                        alpha=tols.controllability)
            res = estimate_coercivity(spec, grid, ctx, basis)
            sec.update(res.as_dict(grid))
            sec.update({"passed": res.rho > tols.coercivity_min, "worst_residual": res.rho,
                        "notes": basis.notes})
            write_table_csv(out / "coercivity.csv",
                            ["t"] + [f"w_{i + 1}" for i in range(spec.control_dim_m)],
                            np.column_stack([t, res.argmin_w.T]))
        except ConeError as exc:
            sec.update({"passed": False, "error": str(exc), "worst_residual": None})
        report["coercivity"] = sec

    if "growth" in cfg.checks:
        gr = growth_probe(spec, grid, nom.u, nom.y, cfg.growth_samples, cfg.growth_radius,
                          cfg.seed, tol_state=tol_state, opts=nom.opts)
        write_table_csv(out / "growth.csv", ["draw", "ratio"], list(enumerate(gr.ratios)))
        sec = gr.as_dict()
        sec.pop("seconds")
        sec.update({"radius": cfg.growth_radius, "worst_residual": sec["min_ratio"], "grid": meta,
                    "gating": tols.growth_gating})
        report["growth"] = sec
    return report


def _overall(report: dict) -> bool:
    return all(sec.get("passed", True) for name, sec in report.items()
               if name in SECTIONS and isinstance(sec, dict) and sec.get("gating", True))


def run_verify(cfg: RunConfig) -> int:
    spec, cand, _ = _load_inputs(cfg)
    grid = Grid.build(spec, *cfg.grid)
    u, mu_dot = read_candidate_csv(cand, grid, spec.control_dim_m, spec.constraint_count_q)
    if np.any(u < spec.u_lower[:, None] - 1e-12) or np.any(u > spec.u_upper[:, None] + 1e-12):
        raise UsageError("candidate control leaves the control bounds")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    tols = DEFAULT_TOLERANCES.coarse(grid) if is_coarse(grid) else DEFAULT_TOLERANCES
    nom = nominal(spec, grid, u, mu_dot, cfg)
    report = run_checks(nom, cfg, tols, cfg.output_dir)
    report["meta"] = {"subcommand": "verify", "problem": spec.name, "coarse_mode": is_coarse(grid),
                      "checks": sorted(cfg.checks), "seed": cfg.seed}
    report["passed"] = _overall(report)
    write_report(cfg.output_dir / "report.json", report)
    return EXIT_PASS if report["passed"] else EXIT_FAIL


def export_example(out: Path) -> tuple[Path, Path]:
    out.mkdir(parents=True, exist_ok=True)
    prob = out / "example.json"
    prob.write_text(ex.example_config_text() + "\n")
    cand = out / "example_truth.csv"
    t, u, mu = ex.candidate_samples()
    write_candidate_csv(cand, t, u, mu)
    return prob, cand


def example_truth_errors(nom: Nominal, relaxed: bool) -> dict:
    """Errors of the computed fields against the closed forms."""
    grid, t = nom.grid, nom.grid.t_nodes
    base = {"state": 1e-3, "costate": 5e-3, "switching": 5e-3}
    if relaxed:
        extra = 10.0 * (float(np.max(grid.dt)) + grid.dx**2)
        base = {k: max(v, extra) for k, v in base.items()}
    y1 = ex.ode_oracle(ex.u_bar, t)
    oracle = ex.c1(grid.x_nodes)[:, None] * y1[None, :]
    state_err = float(np.max(np.abs(nom.y - oracle)) / np.max(np.abs(oracle)))
    c1 = ex.c1(grid.x_nodes)
    p1 = grid.space_integral(c1[:, None] * nom.mult.p)
    arc1 = t <= ex.LOG2
    p_err = max(float(np.max(np.abs(p1 - ex.truth_series(t, "p1"))[arc1])),
                float(np.max(np.abs(p1[~arc1]))))
    psi = switching(nom.spec, grid, nom.y, nom.mult.p).psi[0]
    psi_err = float(np.max(np.abs(psi - ex.switching_closed_form(t))))
    errs = {"state": state_err, "costate": p_err, "switching": psi_err}
    return {
        "passed": all(errs[k] <= base[k] for k in errs),
        "errors": errs,
        "tolerances": base,
        "worst_residual": max(errs[k] / base[k] for k in errs),
    }


def run_example(cfg: RunConfig) -> int:
    out = cfg.output_dir
    prob, cand = export_example(out)
    spec = load_problem(prob.read_text())
    grid = Grid.build(spec, *cfg.grid)
    u, mu_dot = read_candidate_csv(cand, grid, 1, 1)
    coarse = is_coarse(grid)
    relaxed = coarse or cfg.scheme != "crank_nicolson"
    tols = DEFAULT_TOLERANCES.coarse(grid) if relaxed else DEFAULT_TOLERANCES
    nom = nominal(spec, grid, u, mu_dot, cfg)
    report = run_checks(nom, cfg, tols, out)
    truth = example_truth_errors(nom, relaxed)
    write_table_csv(out / "truth_errors.csv", ["quantity", "error", "tolerance"],
                    [[k, truth["errors"][k], truth["tolerances"][k]] for k in sorted(truth["errors"])])
    report["truth"] = truth
    report["meta"] = {"subcommand": "example", "problem": spec.name, "coarse_mode": coarse,
                      "relaxed_tolerances": relaxed, "checks": sorted(cfg.checks), "seed": cfg.seed}
    report["passed"] = _overall(report) and truth["passed"]
    write_report(out / "report.json", report)
    return EXIT_PASS if report["passed"] else EXIT_FAIL


def run_sweep(cfg: RunConfig) -> int:
    if len(cfg.grids) < 3 or len(cfg.amplitudes) < 3:
        raise UsageError("need >= 3 points in every sweep (grids and amplitudes)")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    opts = EvolutionOptions(scheme=cfg.scheme)
    if cfg.problem_path:
        spec, cand, _ = _load_inputs(cfg)
    else:
        spec, cand = ex.example_spec(), None

    def candidate(grid):
        if cand is None:
            return ex.control_cells(grid), ex.mu_dot_cells(grid)
        return read_candidate_csv(cand, grid, spec.control_dim_m, spec.constraint_count_q)

    rows, dxs, errs = [], [], []
    fields = []
    for nx, nt in cfg.grids:
        grid = Grid.build(spec, nx, nt)
        u, _ = candidate(grid)
        y = solve_state(spec, grid, u, opts)
        fields.append((grid, y))
    if cand is None:
        for grid, y in fields:
            y1 = ex.ode_oracle(ex.u_bar, grid.t_nodes)
            oracle = ex.c1(grid.x_nodes)[:, None] * y1[None, :]
            errs.append(float(np.max(np.abs(y - oracle)) / np.max(np.abs(oracle))))
            dxs.append(grid.dx)
        reference = "closed-form oracle"
    else:
        gF, yF = fields[-1]
        for grid, y in fields[:-1]:
            ref = _restrict(gF, yF, grid)
            errs.append(float(np.max(np.abs(y - ref)) / max(np.max(np.abs(ref)), 1e-300)))
            dxs.append(grid.dx)
        reference = "finest grid"
    slope = fit_slope(dxs, errs)
    for (nx, nt), dx, e in zip(cfg.grids, dxs, errs):
        rows.append([nx, nt, dx, e])
    write_table_csv(out / "orders.csv", ["nx", "nt", "dx", "state_rel_error"], rows)

    grid = Grid.build(spec, *cfg.grid)
    u, _ = candidate(grid)
    y = solve_state(spec, grid, u, opts)
    rng = np.random.default_rng(cfg.seed)
    support = (2.0, 3.0) if cand is None else None
    v = band_limited_direction(rng, grid, spec.control_dim_m, support=support)
    table = remainder_probe(spec, grid, u, y, cfg.amplitudes, v, opts)
    write_table_csv(out / "remainder.csv", ["amplitude", "eta_ratio", "dy_ratio"], table.rows())
    report = {
        "grid_sweep": {"reference": reference, "errors": errs, "dx": dxs, "slope": slope},
        "amplitude_sweep": {"amplitudes": table.amplitudes, "eta_ratio": table.eta_ratio,
                            "dy_ratio": table.dy_ratio, "eta_slope": table.eta_slope,
                            "dy_slope": table.dy_slope},
        "meta": {"subcommand": "sweep", "problem": spec.name, "seed": cfg.seed, "scheme": cfg.scheme},
    }
    write_report(out / "report.json", report)
    return EXIT_PASS


def _restrict(fine: Grid, y: np.ndarray, coarse: Grid) -> np.ndarray:
    """Sample a fine-grid field at the coarse nodes by bilinear interpolation."""
    tmp = np.array([np.interp(coarse.t_nodes, fine.t_nodes, row) for row in y])
    return np.array([np.interp(coarse.x_nodes, fine.x_nodes, col) for col in tmp.T]).T


RUNNERS = {"verify": run_verify, "example": run_example, "sweep": run_sweep}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    try:
        cfg = config_from_args(args)
        return RUNNERS[cfg.subcommand](cfg)
    except (UsageError, ProblemError, ExpressionError, FormatError) as exc:
        print(f"gohverify: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NewtonError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"gohverify: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArcError, ConeError, CheckFailure, RuntimeError) as exc:
        print(f"gohverify: check failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
