"""First-order checks, arc detection, the discretized critical cone and second-order tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .goh import goh_w
from .problem import Arc, ArcStructure, Grid, ProblemSpec, state_constraint_history
from .quadratic import QuadContext, band_limited_direction, qhat_node_terms, qhat_terminal_terms
from .solvers import DEFAULT_OPTIONS, EvolutionOptions, LinearEvolution, control_channels, cost, solve_state


class ArcError(RuntimeError):
    pass


class ConeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Tolerances:
    """Every numerical threshold used by the verifier, in one place.

    bounds_fixture / bounds_solver are relative to (u_upper - u_lower);
    state_factor multiplies dx^2 * ||c_j||_inf * ||y||_inf.
    """

    bounds_fixture: float = 1e-9
    bounds_solver: float = 1e-6
    state_factor: float = 10.0
    first_order: float = 5e-3
    quad_gap: float = 1e-4
    coercivity_min: float = 0.0
    controllability: float = 1e-8
    cone_residual: float = 1e-8
    min_arc_cells: int = 3
    max_arcs: int = 64
    growth_gating: bool = True

    def tol_bounds(self, spec: ProblemSpec, solver_produced: bool = False) -> np.ndarray:
        rel = self.bounds_solver if solver_produced else self.bounds_fixture
        return rel * (spec.u_upper - spec.u_lower)

    def tol_state(self, spec: ProblemSpec, grid: Grid, y: np.ndarray) -> float:
        if not spec.c:
            return 0.0
        cmax = max(float(np.max(np.abs(grid.sample_space(cj)))) for cj in spec.c)
        return self.state_factor * grid.dx**2 * cmax * max(float(np.max(np.abs(y))), 1.0)

    def coarse(self, grid: Grid) -> "Tolerances":
        """Check tolerances loosened by 10 (dt + dx^2) for coarse grids.

        The growth probe becomes advisory there: the discrete first-order
        residual is then larger than the second-order signal it looks for.
        """
        extra = 10.0 * (float(np.max(grid.dt)) + grid.dx**2)
        return Tolerances(
            self.bounds_fixture, self.bounds_solver, self.state_factor,
            max(self.first_order, extra), max(self.quad_gap, extra), self.coercivity_min,
            self.controllability, self.cone_residual, self.min_arc_cells, self.max_arcs,
            growth_gating=False,
        )


DEFAULT_TOLERANCES = Tolerances()


# ---------------------------------------------------------------- switching / arcs


@dataclass(frozen=True)
class SwitchingFunction:
    psi: np.ndarray  # (m, nt+1)

    def __post_init__(self):
        if not np.all(np.isfinite(self.psi)):
            raise ValueError("switching function has non-finite samples")


def switching(spec: ProblemSpec, grid: Grid, ybar: np.ndarray, p: np.ndarray) -> SwitchingFunction:
    bs = control_channels(spec, grid)[1:]
    integral = np.einsum("ix,x,xk->ik", bs, grid.space_weights, ybar * p)
    return SwitchingFunction(spec.alpha[:, None] + integral)


def _cell_labels(spec, grid, u, g, tol_bounds, tol_state):
    u = np.asarray(u, float).reshape(spec.control_dim_m, grid.nt)
    lo = u <= (spec.u_lower + tol_bounds)[:, None]
    hi = u >= (spec.u_upper - tol_bounds)[:, None]
    near = np.abs(g) <= tol_state
    st = near[:, 1:] & near[:, :-1]
    labels = []
    for k in range(grid.nt):
        labels.append((
            frozenset(np.flatnonzero(lo[:, k]).tolist()),
            frozenset(np.flatnonzero(hi[:, k]).tolist()),
            frozenset(np.flatnonzero(st[:, k]).tolist()),
        ))
    return labels


def _runs(labels):
    runs = []
    for k, lab in enumerate(labels):
        if runs and runs[-1][2] == lab:
            runs[-1][1] = k + 1
        else:
            runs.append([k, k + 1, lab])
    return runs


def _contains(big, small):
    return all(s <= b for b, s in zip(big, small)) and big != small


def _absorb_thin_runs(runs, min_cells):
    """Drop near-touch activity: a run shorter than ``min_cells`` whose label
    strictly contains a neighbour's label is relabelled as that neighbour."""
    changed = True
    while changed and len(runs) > 1:
        changed = False
        for idx, (a, b, lab) in enumerate(runs):
            if b - a >= min_cells:
                continue
            for nb in (idx - 1, idx + 1):
                if 0 <= nb < len(runs) and _contains(lab, runs[nb][2]):
                    runs[idx][2] = runs[nb][2]
                    changed = True
                    break
        merged = []
        for r in runs:
            if merged and merged[-1][2] == r[2]:
                merged[-1][1] = r[1]
            else:
                merged.append(list(r))
        runs = merged
    return runs


def detect_arcs(
    spec: ProblemSpec,
    grid: Grid,
    u: np.ndarray,
    y: np.ndarray,
    tol_bounds: float | np.ndarray,
    tol_state: float,
    max_arcs: int = 64,
    min_arc_cells: int = 1,
) -> ArcStructure:
    """Maximal arcs of constant activity.

    A cell is bound-active for component i when its control value is within
    ``tol_bounds`` of a bound, and state-active for constraint j when
    |g_j| <= ``tol_state`` at both of its nodes.  Arcs are node ranges; adjacent
    arcs share their junction node.
    """
    tb = np.broadcast_to(np.asarray(tol_bounds, float), (spec.control_dim_m,))
    if np.any(tb <= 0) or (spec.c and tol_state <= 0):
        raise ValueError("tolerances must be positive")
    g = state_constraint_history(spec, grid, y)
    labels = _cell_labels(spec, grid, u, g, tb, tol_state)
    runs = _runs(labels)
    if min_arc_cells > 1:
        runs = _absorb_thin_runs(runs, min_arc_cells)
    if len(runs) > max_arcs:
        raise ArcError(f"finite arc property violated numerically: {len(runs)} arcs > {max_arcs}")
    arcs = tuple(Arc(a, b, lab[0], lab[1], lab[2]) for a, b, lab in runs)
    cell_labels = tuple(lab for a, b, lab in runs for _ in range(a, b))
    junctions = tuple(float(grid.t_nodes[a.start]) for a in arcs) + (float(grid.t_nodes[-1]),)
    return ArcStructure(junctions=junctions, arcs=arcs, cell_labels=cell_labels)


def arcs_table(structure: ArcStructure, grid: Grid) -> list[dict]:
    rows = []
    for idx, a in enumerate(structure.arcs):
        rows.append({
            "arc": idx,
            "t_start": float(grid.t_nodes[a.start]),
            "t_stop": float(grid.t_nodes[a.stop]),
            "kind": a.kind(),
            "lower": sorted(i + 1 for i in a.lower),
            "upper": sorted(i + 1 for i in a.upper),
            "state": sorted(j + 1 for j in a.state),
        })
    return rows


# ---------------------------------------------------------------- first order


@dataclass
class FirstOrderReport:
    passed: bool
    worst_sign: float
    worst_sign_where: dict
    complementarity: float
    worst_mu_dot: float
    worst_feasibility: float
    strict_margin: float
    failures: list = field(default_factory=list)

    def as_dict(self):
        return {
            "passed": self.passed,
            "worst_sign_violation": self.worst_sign,
            "worst_sign_where": self.worst_sign_where,
            "complementarity": self.complementarity,
            "worst_negative_mu_dot": self.worst_mu_dot,
            "worst_infeasibility": self.worst_feasibility,
            "strict_complementarity_margin": self.strict_margin,
            "failures": list(self.failures),
        }


def check_first_order(
    psi: SwitchingFunction | np.ndarray,
    arcs: ArcStructure,
    mu_dot: np.ndarray,
    g_values: np.ndarray,
    tol: float,
    grid: Grid,
) -> FirstOrderReport:
    """Sign conditions of Psi on each arc plus complementarity of mu_dot and g.

    Violations are measured as excess beyond the admissible set, so 0 means the
    condition holds exactly and a value above ``tol`` is a failure.
    """
    psi = psi.psi if isinstance(psi, SwitchingFunction) else np.asarray(psi, float)
    m = psi.shape[0]
    worst, where = 0.0, {}
    margin = np.inf
    for idx, a in enumerate(arcs.arcs):
        seg = psi[:, a.start : a.stop + 1]
        for i in range(m):
            if i in a.lower:
                viol = float(np.max(np.maximum(-seg[i], 0.0)))
                kind = "lower"
            elif i in a.upper:
                viol = float(np.max(np.maximum(seg[i], 0.0)))
                kind = "upper"
            else:
                viol = float(np.max(np.abs(seg[i])))
                kind = "interior"
            if kind != "interior" and seg.shape[1] > 2:
                margin = min(margin, float(np.max(np.abs(seg[i, 1:-1]))))
            if viol > worst:
                worst = viol
                where = {"arc": idx, "control": i + 1, "condition": kind,
                         "t": float(grid.t_nodes[a.start + int(np.argmax(np.abs(seg[i])))])}
    mu_dot = np.asarray(mu_dot, float).reshape(-1, grid.nt)
    g_values = np.asarray(g_values, float).reshape(-1, grid.nt + 1)
    comp = float(np.sum(grid.dt * mu_dot * grid.node_average(g_values))) if mu_dot.size else 0.0
    worst_mu = float(max(0.0, -np.min(mu_dot))) if mu_dot.size else 0.0
    infeas = float(max(0.0, np.max(g_values))) if g_values.size else 0.0
    failures = []
    if worst > tol:
        failures.append(f"switching sign violated by {worst:.3e} on arc {where.get('arc')}")
    if comp < -tol:
        failures.append(f"complementarity {comp:.3e} below -tol")
    if worst_mu > tol:
        failures.append(f"mu_dot negative by {worst_mu:.3e}")
    if infeas > tol:
        failures.append(f"state constraint violated by {infeas:.3e}")
    return FirstOrderReport(
        passed=not failures,
        worst_sign=worst,
        worst_sign_where=where,
        complementarity=comp,
        worst_mu_dot=worst_mu,
        worst_feasibility=infeas,
        strict_margin=float(margin) if np.isfinite(margin) else float("nan"),
        failures=failures,
    )


# ---------------------------------------------------------------- critical cone


@dataclass
class ConeBasis:
    """Columns of ``w`` (m, nt+1, P) and ``h`` (m, P) span the discrete cone."""

    w: np.ndarray
    h: np.ndarray
    gram: np.ndarray
    labels: list
    mode: str
    notes: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.w.shape[-1]

    def vectors(self):
        return [(self.w[..., j], self.h[:, j]) for j in range(self.size)]

    def combine(self, coef: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.w @ coef, self.h @ coef


def gram_matrix(grid: Grid, w: np.ndarray, h: np.ndarray) -> np.ndarray:
    """<(w,h),(w',h')> = int w.w' (trapezoid) + h.h' for column batches."""
    wt = grid.time_weights
    G = np.einsum("ikp,k,ikq->pq", w, wt, w) + h.T @ h
    return 0.5 * (G + G.T)


def _hat_centers(nodes: np.ndarray, max_params: int) -> np.ndarray:
    if nodes.size <= max_params:
        return nodes
    idx = np.unique(np.round(np.linspace(0, nodes.size - 1, max_params)).astype(int))
    return nodes[idx]


def _hat_values(nodes: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation matrix (len(nodes), len(centers)) in index space."""
    eye = np.eye(centers.size)
    return np.stack([np.interp(nodes, centers, eye[c]) for c in range(centers.size)], axis=1)


def build_pc2star_basis(
    spec: ProblemSpec,
    grid: Grid,
    arcs: ArcStructure,
    ybar: np.ndarray,
    ubar: np.ndarray,
    mode: str = "pc2star",
    opts: EvolutionOptions = DEFAULT_OPTIONS,
    evolution: LinearEvolution | None = None,
    B1: np.ndarray | None = None,
    max_free_params: int = 400,
    alpha: float = 1e-8,
) -> ConeBasis:
    """Basis of the discretized critical cone in (w, h).

    Per component and node the rule is chosen with priority
    constrained > zero (first arc, bound active) > constant (bound active,
    tied to h on the last arc) > free.  Free values are nodal hats, thinned to
    at most ``max_free_params`` centers per run.  On state-active nodes the
    free components solve M(t) w(t) = -int c zeta[w](t) together with the
    implicit part of the zeta step, so the relation holds exactly for the
    discrete zeta.  Extra nullspace directions of that system become hat
    parameters as well.
    """
    from .goh import matrix_M
    from .solvers import goh_forcing

    if mode not in ("pc2star", "pc2_scalar"):
        raise ValueError(f"unknown cone mode {mode!r}")
    m, nt, q = spec.control_dim_m, grid.nt, spec.constraint_count_q
    if m < 1:
        raise ConeError("cone needs at least one control")
    if mode == "pc2_scalar" and m != 1:
        raise ConeError("pc2_scalar requires a single control")
    evo = evolution or LinearEvolution(spec, grid, ybar, ubar, opts)
    if B1 is None:
        B1 = goh_forcing(spec, grid, ybar)
    M = matrix_M(spec, grid, ybar)  # (q, m, nt+1)
    alist = arcs.arcs
    n_arcs = len(alist)

    # rule per (component, node)
    rule = np.full((m, nt + 1), "free", dtype=object)
    owner = np.full((m, nt + 1), -1)
    active_c = [set() for _ in range(nt + 1)]
    prio = {"free": 0, "const": 1, "zero": 2, "constrained": 3}
    for a_idx, a in enumerate(alist):
        for k in range(a.start, a.stop + 1):
            if a.state:
                active_c[k] |= set(a.state)
            for i in range(m):
                if a.state and i not in a.bound_active:
                    r = "constrained"
                elif i in a.bound_active:
                    r = "zero" if a_idx == 0 else "const"
                else:
                    r = "free"
                if prio[r] > prio[rule[i, k]]:
                    rule[i, k] = r
                    owner[i, k] = a_idx

    # parameters
    labels: list = []
    pidx: dict = {}

    def param(key):
        if key not in pidx:
            pidx[key] = len(labels)
            labels.append(key)
        return pidx[key]

    last_bound = alist[-1].bound_active if n_arcs else frozenset()
    single_zero = n_arcs == 1  # first arc is also the last one
    for i in range(m):
        if not (single_zero and i in last_bound):
            param(("h", i))
    for i in range(m):
        for a_idx, a in enumerate(alist[1:], start=1):
            if i in a.bound_active and a_idx < n_arcs - 1:
                if np.any((rule[i] == "const") & (owner[i] == a_idx)):
                    param(("const", a_idx, i))
    free_runs = []
    for i in range(m):
        nodes = np.flatnonzero(rule[i] == "free")
        if nodes.size:
            splits = np.flatnonzero(np.diff(nodes) > 1) + 1
            for run in np.split(nodes, splits):
                centers = _hat_centers(run, max_free_params)
                free_runs.append((i, run, centers))
                for c in centers:
                    param(("hat", i, int(c)))

    # nullspace coordinates on constrained nodes (computed on the fly)
    c_nodes = [k for k in range(nt + 1) if np.any(rule[:, k] == "constrained")]
    null_dim = {}
    for k in c_nodes:
        U = np.flatnonzero(rule[:, k] == "constrained")
        J = sorted(active_c[k])
        if len(J) > U.size:
            raise ConeError(
                f"controllability count violated at t={grid.t_nodes[k]:.6g}: "
                f"{len(J)} active constraints > {U.size} free controls"
            )
        Mbar = M[np.ix_(J, U, [k])][..., 0] if J else np.zeros((0, U.size))
        if J:
            smin = np.linalg.svd(Mbar, compute_uv=False).min()
            scale = max(1.0, float(np.max(np.abs(M[..., k]))))
            if smin < alpha * scale:
                raise ConeError(
                    f"controllability block singular at t={grid.t_nodes[k]:.6g}: "
                    f"sigma_min={smin:.3e} < {alpha * scale:.3e}"
                )
        null_dim[k] = U.size - len(J)
    null_runs = []
    ks = [k for k in c_nodes if null_dim[k] > 0]
    if ks:
        ks = np.asarray(ks)
        splits = np.flatnonzero(np.diff(ks) > 1) + 1
        for run in np.split(ks, splits):
            centers = _hat_centers(run, max_free_params)
            dmax = max(null_dim[int(k)] for k in run)
            for d in range(dmax):
                for c in centers:
                    param(("null", d, int(c)))
            null_runs.append((run, centers, dmax))

    P = len(labels)
    if P == 0:
        raise ConeError("critical cone is trivial on this grid")
    W = np.zeros((m, nt + 1, P))
    H = np.zeros((m, P))
    for i in range(m):
        if ("h", i) in pidx:
            H[i, pidx[("h", i)]] = 1.0
    for i in range(m):
        for k in range(nt + 1):
            r, a_idx = rule[i, k], owner[i, k]
            if r == "const":
                key = ("h", i) if a_idx == n_arcs - 1 else ("const", a_idx, i)
                W[i, k, pidx[key]] = 1.0
    for i, run, centers in free_runs:
        vals = _hat_values(run.astype(float), centers.astype(float))
        cols = [pidx[("hat", i, int(c))] for c in centers]
        W[i, run[:, None], np.asarray(cols)[None, :]] = vals
    theta_nodes = np.zeros((max([d for _, _, d in null_runs], default=0), nt + 1, P))
    for run, centers, dmax in null_runs:
        vals = _hat_values(run.astype(float), centers.astype(float))
        for d in range(dmax):
            cols = [pidx[("null", d, int(c))] for c in centers]
            theta_nodes[d][run[:, None], np.asarray(cols)[None, :]] = vals

    # forward sweep resolving constrained components
    C = np.stack([grid.sample_space(cj) for cj in spec.c]) if q else np.zeros((0, grid.nx + 2))
    Cw = (C * grid.space_weights)[:, 1:-1]
    th = evo.theta
    zeta = np.zeros((grid.nx, P))
    max_rel = 0.0

    def solve_node(k, zeta0, gamma):
        nonlocal max_rel
        U = np.flatnonzero(rule[:, k] == "constrained")
        if U.size == 0:
            return
        J = sorted(active_c[k])
        known = np.setdiff1d(np.arange(m), U)
        A = M[np.ix_(J, U, [k])][..., 0] + (Cw[J] @ gamma[:, U] if gamma is not None else 0.0)
        rhs = -(Cw[J] @ zeta0) - M[np.ix_(J, known, [k])][..., 0] @ W[known, k, :]
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0] if J else np.zeros((U.size, P))
        nd = null_dim[k]
        if nd:
            _, _, vt = np.linalg.svd(A) if J else (None, None, np.eye(U.size))
            N = vt[len(J):].T  # (|U|, nd)
            sol = sol + N @ theta_nodes[:nd, k, :]
        W[U, k, :] = sol

    solve_node(0, zeta, None)
    for k in range(nt):
        h = grid.dt[k]
        gamma = None
        if np.any(rule[:, k + 1] == "constrained"):
            gamma = np.stack(
                [evo.implicit_response(k, h * th * B1[i, 1:-1, k + 1]) for i in range(m)], axis=1
            )
        U_next = rule[:, k + 1] == "constrained"
        w_known = W[:, k + 1, :] * (~U_next)[:, None]
        src = th * np.einsum("ix,ip->xp", B1[:, 1:-1, k + 1], w_known) + (1 - th) * np.einsum(
            "ix,ip->xp", B1[:, 1:-1, k], W[:, k, :]
        )
        zeta0 = evo.step(k, zeta, src)
        solve_node(k + 1, zeta0, gamma)
        if gamma is not None and U_next.any():
            zeta = zeta0 + gamma[:, U_next] @ W[U_next, k + 1, :]
        else:
            zeta = zeta0

    notes = {"jump_condition": "not applicable (no atom of mu at T in this setting)",
             "free_param_cap": max_free_params}
    if mode == "pc2_scalar":
        rows = []
        for left, right in zip(alist[:-1], alist[1:]):
            if left.kind() in "BC" and right.kind() in "BC":
                k = left.stop
                lv = _side_value(left, alist, k, W, pidx, n_arcs)
                rv = _side_value(right, alist, k, W, pidx, n_arcs)
                rows.append(lv - rv)
        if alist and alist[-1].kind() == "C":
            rows.append(W[0, -1, :] - H[0, :])
        if rows:
            Rm = np.array(rows)
            if np.max(np.abs(Rm)) > 0:
                N = scipy.linalg.null_space(Rm, rcond=1e-12)
                W = W @ N
                H = H @ N
                labels = [("combo", j) for j in range(N.shape[1])]
                notes["junction_constraints"] = len(rows)
        if W.shape[-1] == 0:
            raise ConeError("pc2_scalar cone is trivial")
    G = gram_matrix(grid, W, H)
    ev = np.linalg.eigvalsh(G)
    if ev[0] <= 1e-14 * max(ev[-1], 1e-300):
        raise ConeError("degenerate cone basis: Gram matrix is singular")
    return ConeBasis(w=W, h=H, gram=G, labels=labels, mode=mode, notes=notes)


def _side_value(arc, alist, k, W, pidx, n_arcs):
    """Value at node k of w_1 prescribed by ``arc``'s own rule (scalar control)."""
    a_idx = alist.index(arc)
    if arc.state and 0 not in arc.bound_active:
        return W[0, k, :]
    if 0 in arc.bound_active:
        if a_idx == 0:
            return np.zeros(W.shape[-1])
        key = ("h", 0) if a_idx == n_arcs - 1 else ("const", a_idx, 0)
        if key in pidx:
            e = np.zeros(W.shape[-1])
            e[pidx[key]] = 1.0
            return e
    return W[0, k, :]


def zeta_of_basis(evo: LinearEvolution, B1: np.ndarray, w: np.ndarray) -> np.ndarray:
    from .solvers import zeta_source

    return evo.forward(zeta_source(B1, w, evo.theta))


def cone_residuals(
    spec: ProblemSpec,
    grid: Grid,
    arcs: ArcStructure,
    ybar: np.ndarray,
    basis: ConeBasis,
    evo: LinearEvolution,
    B1: np.ndarray,
) -> dict:
    """Relative residuals of every linear cone condition for every basis column."""
    from .goh import matrix_M

    M = matrix_M(spec, grid, ybar)
    W = basis.w
    out = {"state_arc": 0.0, "zero_first": 0.0, "tied_last": 0.0, "constant": 0.0}
    if not arcs.arcs:
        return out
    scale_w = max(float(np.max(np.abs(W))), 1e-300)
    zeta = zeta_of_basis(evo, B1, W) if spec.c else None
    C = np.stack([grid.sample_space(cj) for cj in spec.c]) if spec.c else None
    n_arcs = len(arcs.arcs)
    for a_idx, a in enumerate(arcs.arcs):
        inner = slice(a.start + 1, a.stop) if a.stop - a.start > 1 else slice(a.start, a.stop + 1)
        for j in a.state:
            Mw = np.einsum("ik,ikp->kp", M[j][:, a.start : a.stop + 1], W[:, a.start : a.stop + 1])
            cz = np.einsum("x,xkp->kp", C[j] * grid.space_weights, zeta[:, a.start : a.stop + 1])
            scale = max(float(np.max(np.abs(Mw))), float(np.max(np.abs(cz))), 1e-300)
            free = [i for i in range(spec.control_dim_m) if i not in a.bound_active]
            if free:
                out["state_arc"] = max(out["state_arc"], float(np.max(np.abs(Mw + cz))) / scale)
        for i in a.bound_active:
            seg = W[i, inner]
            if a_idx == 0:
                out["zero_first"] = max(out["zero_first"], float(np.max(np.abs(seg))) / scale_w)
            elif a_idx == n_arcs - 1:
                out["tied_last"] = max(out["tied_last"],
                                       float(np.max(np.abs(seg - basis.h[i]))) / scale_w)
            else:
                out["constant"] = max(out["constant"],
                                      float(np.max(np.abs(seg - seg[:1]))) / scale_w)
    return out


# ---------------------------------------------------------------- coercivity


@dataclass
class CoercivityResult:
    rho: float
    argmin_w: np.ndarray
    argmin_h: np.ndarray
    eigenvalues: np.ndarray
    basis_size: int
    hessian: np.ndarray = field(repr=False)

    def as_dict(self, grid: Grid) -> dict:
        amp = np.max(np.abs(self.argmin_w), axis=0)
        peak = float(grid.t_nodes[int(np.argmax(amp))]) if amp.max() > 0 else None
        return {
            "rho": self.rho,
            "basis_size": self.basis_size,
            "lowest_eigenvalues": [float(v) for v in self.eigenvalues[:5]],
            "argmin_h": [float(v) for v in self.argmin_h],
            "argmin_peak_t": peak,  # None when the minimizer is a pure h direction
            "argmin_w_max": float(amp.max()),
        }


def qhat_gram(ctx: QuadContext, w: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Symmetric matrix of Q_hat over the columns of (w, h), streamed in time."""
    evo, B1, grid = ctx.evolution, ctx.aux.B1, ctx.grid
    th = evo.theta
    P = w.shape[-1]
    zeta = np.zeros((grid.nx + 2, P))
    H = np.zeros((P, P))
    for k in range(grid.nt + 1):
        if k > 0:
            src = th * np.einsum("ix,ip->xp", B1[:, 1:-1, k], w[:, k]) + (1 - th) * np.einsum(
                "ix,ip->xp", B1[:, 1:-1, k - 1], w[:, k - 1]
            )
            zeta[1:-1] = evo.step(k - 1, zeta[1:-1], src)
        for val in qhat_node_terms(ctx, k, zeta, w[:, k], zeta, w[:, k]).values():
            H += val
    for val in qhat_terminal_terms(ctx, zeta, h, zeta, h).values():
        H += val
    return 0.5 * (H + H.T)


def estimate_coercivity(
    spec: ProblemSpec,
    grid: Grid,
    ctx: QuadContext,
    basis: ConeBasis,
) -> CoercivityResult:
    """Smallest generalized eigenvalue of (Q_hat, ||w||_2^2 + |h|^2) on the basis."""
    if basis.size == 0:
        raise ConeError("empty basis")
    Hm = qhat_gram(ctx, basis.w, basis.h)
    try:
        vals, vecs = scipy.linalg.eigh(Hm, basis.gram)
    except np.linalg.LinAlgError as exc:
        raise ConeError(f"Gram matrix singular: {exc}") from exc
    v = vecs[:, 0]
    w, h = basis.combine(v)
    scale = np.sqrt(float(v @ basis.gram @ v))
    return CoercivityResult(float(vals[0]), w / scale, h / scale, vals, basis.size, Hm)


# ---------------------------------------------------------------- growth


@dataclass
class GrowthReport:
    ratios: np.ndarray
    n_draws: int
    n_discarded: int
    n_degenerate: int
    seconds: float

    @property
    def discard_rate(self) -> float:
        return self.n_discarded / self.n_draws if self.n_draws else 0.0

    @property
    def passed(self) -> bool:
        return self.ratios.size > 0 and bool(np.min(self.ratios) > 0)

    def as_dict(self) -> dict:
        r = self.ratios
        return {
            "passed": self.passed,
            "accepted": int(r.size),
            "draws": self.n_draws,
            "discarded": self.n_discarded,
            "discard_rate": self.discard_rate,
            "degenerate": self.n_degenerate,
            "min_ratio": float(np.min(r)) if r.size else float("nan"),
            "median_ratio": float(np.median(r)) if r.size else float("nan"),
            "negative_ratios": int(np.sum(r <= 0)),
            "seconds": self.seconds,
        }


def growth_ratio(
    spec: ProblemSpec,
    grid: Grid,
    ubar: np.ndarray,
    F0: float,
    u: np.ndarray,
    g_cap: np.ndarray | None = None,
    opts: EvolutionOptions = DEFAULT_OPTIONS,
) -> tuple[str, float]:
    """("ok", ratio), ("degenerate", nan) when w vanishes, or ("infeasible", nan)."""
    w, h = goh_w(u - ubar, grid)
    denom = float(np.sum(grid.time_integral(w**2)) + h @ h)
    if denom <= 1e-300:
        return "degenerate", float("nan")
    y = solve_state(spec, grid, u, opts)
    if spec.c and g_cap is not None and np.any(state_constraint_history(spec, grid, y) > g_cap):
        return "infeasible", float("nan")
    return "ok", (cost(spec, grid, u, y) - F0) / denom


def growth_probe(
    spec: ProblemSpec,
    grid: Grid,
    ubar: np.ndarray,
    ybar: np.ndarray,
    n_samples: int,
    radius: float,
    seed: int,
    tol_state: float | None = None,
    opts: EvolutionOptions = DEFAULT_OPTIONS,
    max_draws: int | None = None,
) -> GrowthReport:
    """Cost increase over admissible random controls near ubar.

    Each draw is a band-limited direction scaled to L2 norm ``radius``, added to
    ubar and projected onto the control box (which can only shrink the
    distance).  Draws whose state exceeds the constraint level of the nominal
    state by more than ``tol_state`` are discarded.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    t0 = time.perf_counter()
    ubar = np.asarray(ubar, float).reshape(spec.control_dim_m, grid.nt)
    rng = np.random.default_rng(seed)
    if tol_state is None:
        tol_state = DEFAULT_TOLERANCES.tol_state(spec, grid, ybar)
    g_ref = np.maximum(state_constraint_history(spec, grid, ybar), 0.0)
    F0 = cost(spec, grid, ubar, ybar)
    max_draws = max_draws or 20 * n_samples
    ratios, draws, discarded, degenerate = [], 0, 0, 0
    while len(ratios) < n_samples and draws < max_draws:
        draws += 1
        v = band_limited_direction(rng, grid, spec.control_dim_m, amplitude=radius)
        u = np.clip(ubar + v, spec.u_lower[:, None], spec.u_upper[:, None])
        status, ratio = growth_ratio(spec, grid, ubar, F0, u, g_ref + tol_state, opts)
        if status == "degenerate":
            degenerate += 1
        elif status == "infeasible":
            discarded += 1
        else:
            ratios.append(ratio)
    if not ratios:
        raise RuntimeError("all growth draws were infeasible")
    return GrowthReport(np.array(ratios), draws, discarded, degenerate, time.perf_counter() - t0)
