"""Forward, linearized, Goh-transformed and adjoint evolution solvers.

All evolutions use the theta-scheme on the time grid (theta = 1/2 is
Crank-Nicolson, theta = 1 implicit Euler) with the three-point Laplacian in
space.  Controls are constant on each time cell, so the operator

    A_k z = -Lap z + 3 gamma ybar^2 z - sum_{i=0}^m ubar_{i,k} b_i z

is evaluated with the cell's control and the state at either end of the cell.
The linearized solver is the exact derivative of the discrete state solver,
and the costate is the exact transpose of the linearized solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .problem import Grid, Multiplier, ProblemSpec

log = logging.getLogger(__name__)

SCHEMES = {"crank_nicolson": 0.5, "implicit_euler": 1.0}


class NewtonError(RuntimeError):
    def __init__(self, step: int, residual: float):
        super().__init__(f"Newton did not converge at time step {step} (residual {residual:.3e})")
        self.step = step
        self.residual = residual


@dataclass(frozen=True)
class EvolutionOptions:
    newton_tol: float = 1e-11
    newton_max_iter: int = 30
    scheme: str = "crank_nicolson"

    def __post_init__(self):
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {sorted(SCHEMES)}")

    @property
    def theta(self) -> float:
        return SCHEMES[self.scheme]


DEFAULT_OPTIONS = EvolutionOptions()


def control_channels(spec: ProblemSpec, grid: Grid) -> np.ndarray:
    """b_i sampled on all x nodes, shape ``(m + 1, nx + 2)``."""
    return np.stack([grid.sample_space(bi) for bi in spec.b])


def bilinear_potential(spec: ProblemSpec, grid: Grid, u: np.ndarray) -> np.ndarray:
    """sum_{i=0}^m u_i b_i per cell with u_0 = 1, shape ``(nx + 2, nt)``."""
    bs = control_channels(spec, grid)
    u = np.asarray(u, float).reshape(spec.control_dim_m, grid.nt)
    return bs[0][:, None] + bs[1:].T @ u


def laplacian(field: np.ndarray, dx: float) -> np.ndarray:
    """Three-point Laplacian along axis 0; boundary rows are returned as 0."""
    out = np.zeros_like(field, dtype=float)
    out[1:-1] = (field[2:] - 2.0 * field[1:-1] + field[:-2]) / dx**2
    return out


def apply_A(
    spec: ProblemSpec,
    grid: Grid,
    ybar_at_t: np.ndarray,
    ubar_at_t: np.ndarray,
    z_at_t: np.ndarray,
) -> np.ndarray:
    """(A z) at one time: -Lap z + 3 gamma ybar^2 z - sum_i ubar_i b_i z."""
    bs = control_channels(spec, grid)
    pot = bs[0] + np.asarray(ubar_at_t, float) @ bs[1:]
    out = -laplacian(z_at_t, grid.dx) + (3.0 * spec.gamma * ybar_at_t**2 - pot) * z_at_t
    out[[0, -1]] = 0.0
    return out


def _banded(dx: float, scale: float, diag: np.ndarray) -> np.ndarray:
    """Banded storage of I + scale * (-Lap + diag(diag)) on interior nodes."""
    n = diag.shape[0]
    ab = np.empty((3, n))
    off = -scale / dx**2
    ab[0] = off
    ab[2] = off
    ab[1] = 1.0 + scale * (2.0 / dx**2 + diag)
    ab[0, 0] = 0.0
    ab[2, -1] = 0.0
    return ab


def _apply_explicit(dx: float, scale: float, diag: np.ndarray, z: np.ndarray) -> np.ndarray:
    """z - scale * (-Lap z + diag * z) on interior vectors (axis 0)."""
    lap = np.empty_like(z)
    lap[1:-1] = z[2:] - 2.0 * z[1:-1] + z[:-2]
    lap[0] = z[1] - 2.0 * z[0]
    lap[-1] = z[-2] - 2.0 * z[-1]
    lap /= dx**2
    d = diag if z.ndim == 1 else diag[:, None]
    return z - scale * (-lap + d * z)


def solve_state(
    spec: ProblemSpec,
    grid: Grid,
    u: np.ndarray,
    opts: EvolutionOptions = DEFAULT_OPTIONS,
) -> np.ndarray:
    """State field (nx+2, nt+1) for cell controls ``u`` of shape (m, nt)."""
    theta = opts.theta
    dx = grid.dx
    dt = grid.dt
    pot = bilinear_potential(spec, grid, u)[1:-1]
    f = grid.sample(spec.f)[1:-1] if not spec.f.is_zero else np.zeros((grid.nx, grid.nt + 1))
    gamma = spec.gamma
    y = np.zeros((grid.nx + 2, grid.nt + 1))
    y[:, 0] = grid.sample_space(spec.y0)
    y[[0, -1], 0] = 0.0
    yk = y[1:-1, 0].copy()
    for k in range(grid.nt):
        h = dt[k]
        # explicit part: y_k - (1-theta) h N(y_k) with N(y) = -Lap y + gamma y^3 - f - pot y
        rhs = _apply_explicit(dx, (1.0 - theta) * h, -pot[:, k], yk)
        rhs -= (1.0 - theta) * h * (gamma * yk**3 - f[:, k])
        rhs += theta * h * f[:, k + 1]
        if gamma == 0.0:
            ynew = solve_banded((1, 1), _banded(dx, theta * h, -pot[:, k]), rhs)
        else:
            ynew = yk.copy()
            for it in range(opts.newton_max_iter):
                lin = _apply_explicit(dx, -theta * h, -pot[:, k], ynew)  # y + th h(-Lap y - pot y)
                res = lin + theta * h * gamma * ynew**3 - rhs
                rnorm = np.max(np.abs(res))
                if rnorm <= opts.newton_tol * max(1.0, np.max(np.abs(ynew))):
                    break
                jac = _banded(dx, theta * h, 3.0 * gamma * ynew**2 - pot[:, k])
                ynew = ynew - solve_banded((1, 1), jac, res)
            else:
                lin = _apply_explicit(dx, -theta * h, -pot[:, k], ynew)
                rnorm = np.max(np.abs(lin + theta * h * gamma * ynew**3 - rhs))
                if not rnorm <= opts.newton_tol * max(1.0, np.max(np.abs(ynew))):
                    raise NewtonError(k, float(rnorm))
            if not np.all(np.isfinite(ynew)):
                raise NewtonError(k, float("inf"))
        y[1:-1, k + 1] = ynew
        yk = ynew
    return y


def cost(spec: ProblemSpec, grid: Grid, u: np.ndarray, y: np.ndarray) -> float:
    """J = 1/2 ||y - y_d||^2_Q + 1/2 ||y(T) - y_dT||^2 + sum_i alpha_i int u_i."""
    yd = grid.sample(spec.y_d)
    running = grid.time_integral(grid.space_integral((y - yd) ** 2))
    terminal = grid.space_integral((y[:, -1] - grid.sample_space(spec.y_dT)) ** 2)
    linear = float(spec.alpha @ grid.cell_integral(np.asarray(u, float).reshape(-1, grid.nt)))
    return float(0.5 * running + 0.5 * terminal + linear)


class LinearEvolution:
    """theta-scheme for dz/dt + A z = s around a fixed (ybar, ubar).

    Sources are cell quantities: ``source[k]`` already contains the theta
    weighting of the right-hand side over cell ``k``.  Arrays carry the
    interior nodes on axis 0 and an optional batch axis last.
    """

    def __init__(self, spec: ProblemSpec, grid: Grid, ybar: np.ndarray, ubar: np.ndarray,
                 opts: EvolutionOptions = DEFAULT_OPTIONS):
        self.spec = spec
        self.grid = grid
        self.theta = opts.theta
        pot = bilinear_potential(spec, grid, ubar)[1:-1]
        cubic = 3.0 * spec.gamma * ybar[1:-1] ** 2
        self.diag_plus = cubic[:, 1:] - pot  # (nx, nt) potential at the new node
        self.diag_minus = cubic[:, :-1] - pot
        self._bands = [
            _banded(grid.dx, self.theta * h, self.diag_plus[:, k]) for k, h in enumerate(grid.dt)
        ]

    def step(self, k: int, zk: np.ndarray, source_k: np.ndarray) -> np.ndarray:
        h = self.grid.dt[k]
        rhs = _apply_explicit(self.grid.dx, (1.0 - self.theta) * h, self.diag_minus[:, k], zk)
        rhs = rhs + h * source_k
        return solve_banded((1, 1), self._bands[k], rhs)

    def implicit_response(self, k: int, vec: np.ndarray) -> np.ndarray:
        """E_k^{-1} vec: the effect on z_{k+1} of a unit load in the implicit part."""
        return solve_banded((1, 1), self._bands[k], vec)

    def forward(self, source: np.ndarray) -> np.ndarray:
        """source: (nt, nx[, batch]) -> z: (nx+2, nt+1[, batch])."""
        nt = self.grid.nt
        batch = source.shape[2:]
        z = np.zeros((self.grid.nx + 2, nt + 1) + batch)
        zk = np.zeros((self.grid.nx,) + batch)
        for k in range(nt):
            zk = self.step(k, zk, source[k])
            z[1:-1, k + 1] = zk
        return z

    def adjoint(self, loads: np.ndarray) -> np.ndarray:
        """Cell multipliers P (nx, nt) with sum_k dt_k <P_k, s_k> = sum_k <loads_k, z_k>.

        ``loads`` has shape (nx, nt+1) and holds the integrand weights already
        multiplied by the time quadrature (the space weight dx is implied).
        """
        nt = self.grid.nt
        dx = self.grid.dx
        P = np.zeros((self.grid.nx, nt))
        lam = solve_banded((1, 1), self._bands[nt - 1], loads[:, nt])
        P[:, nt - 1] = lam
        for k in range(nt - 1, 0, -1):
            h = self.grid.dt[k]
            back = _apply_explicit(dx, (1.0 - self.theta) * h, self.diag_minus[:, k], lam)
            lam = solve_banded((1, 1), self._bands[k - 1], loads[:, k] + back)
            P[:, k - 1] = lam
        return P


def linearized_source(spec: ProblemSpec, grid: Grid, ybar: np.ndarray, v: np.ndarray,
                      theta: float) -> np.ndarray:
    """Cell sources theta*ybar_{k+1}*sum v b + (1-theta)*ybar_k*sum v b, shape (nt, nx)."""
    bs = control_channels(spec, grid)[1:, 1:-1]
    vb = bs.T @ np.asarray(v, float).reshape(spec.control_dim_m, grid.nt)  # (nx, nt)
    yb = theta * ybar[1:-1, 1:] + (1.0 - theta) * ybar[1:-1, :-1]
    return (vb * yb).T


def solve_linearized(
    spec: ProblemSpec,
    grid: Grid,
    ybar: np.ndarray,
    ubar: np.ndarray,
    v: np.ndarray,
    opts: EvolutionOptions = DEFAULT_OPTIONS,
    evolution: LinearEvolution | None = None,
) -> np.ndarray:
    """z[v] solving dz/dt + A z = sum_i v_i b_i ybar, z(0) = 0."""
    evo = evolution or LinearEvolution(spec, grid, ybar, ubar, opts)
    return evo.forward(linearized_source(spec, grid, ybar, v, evo.theta))


def goh_forcing(spec: ProblemSpec, grid: Grid, ybar: np.ndarray) -> np.ndarray:
    """B1_i = -f b_i + 2 ybar_x b_i' + ybar b_i'' - 2 gamma ybar^3 b_i, shape (m, nx+2, nt+1)."""
    x = grid.x_nodes
    f = grid.sample(spec.f)
    ybar_x = np.gradient(ybar, grid.dx, axis=0, edge_order=2)
    out = []
    for bi in spec.b[1:]:
        b = bi(x)[:, None]
        out.append(
            -f * b
            + 2.0 * ybar_x * bi.dx(x)[:, None]
            + ybar * bi.dxx(x)[:, None]
            - 2.0 * spec.gamma * ybar**3 * b
        )
    B1 = np.stack(out)
    B1[:, [0, -1], :] = 0.0
    return B1


def zeta_source(B1: np.ndarray, w: np.ndarray, theta: float) -> np.ndarray:
    """Cell sources for the Goh state from node values of B1 . w, shape (nt, nx[, batch])."""
    if w.ndim == 2:
        node = np.einsum("ixk,ik->xk", B1[:, 1:-1], w)
        return (theta * node[:, 1:] + (1.0 - theta) * node[:, :-1]).T
    node = np.einsum("ixk,ikn->xkn", B1[:, 1:-1], w)  # batch last
    return np.moveaxis(theta * node[:, 1:] + (1.0 - theta) * node[:, :-1], 1, 0)


def solve_zeta(
    spec: ProblemSpec,
    grid: Grid,
    ybar: np.ndarray,
    ubar: np.ndarray,
    w: np.ndarray,
    opts: EvolutionOptions = DEFAULT_OPTIONS,
    evolution: LinearEvolution | None = None,
    B1: np.ndarray | None = None,
) -> np.ndarray:
    """zeta[w] solving dzeta/dt + A zeta = B1 . w, zeta(0) = 0.

    ``w`` is (m, nt+1) or batched as (m, nt+1, n).
    """
    evo = evolution or LinearEvolution(spec, grid, ybar, ubar, opts)
    if B1 is None:
        B1 = goh_forcing(spec, grid, ybar)
    return evo.forward(zeta_source(B1, np.asarray(w, float), evo.theta))


def costate_loads(spec: ProblemSpec, grid: Grid, ybar: np.ndarray, mu_dot: np.ndarray) -> np.ndarray:
    """Node loads for the adjoint: time-weighted (ybar - y_d), terminal term, c_j mu_dot_j."""
    yd = grid.sample(spec.y_d)
    loads = (ybar - yd) * grid.time_weights
    loads[:, -1] += ybar[:, -1] - grid.sample_space(spec.y_dT)
    if spec.constraint_count_q:
        C = np.stack([grid.sample_space(cj) for cj in spec.c])  # (q, nx+2)
        cell = C.T @ (np.asarray(mu_dot, float) * grid.dt)  # (nx+2, nt)
        loads[:, :-1] += 0.5 * cell
        loads[:, 1:] += 0.5 * cell
    return loads[1:-1]


def cells_to_nodes(grid: Grid, cells: np.ndarray, terminal: np.ndarray) -> np.ndarray:
    """Node values from midpoint cell values; the terminal node value is given."""
    t_mid = grid.t_mid
    t = grid.t_nodes
    nodes = np.empty(cells.shape[:-1] + (grid.nt + 1,))
    if grid.nt == 1:
        nodes[..., 0] = cells[..., 0]
    else:
        a = (t[1:-1] - t_mid[:-1]) / (t_mid[1:] - t_mid[:-1])
        nodes[..., 1:-1] = (1.0 - a) * cells[..., :-1] + a * cells[..., 1:]
        s = (t[0] - t_mid[0]) / (t_mid[1] - t_mid[0])
        nodes[..., 0] = (1.0 - s) * cells[..., 0] + s * cells[..., 1]
    nodes[..., -1] = terminal
    return nodes


def solve_costate(
    spec: ProblemSpec,
    grid: Grid,
    ybar: np.ndarray,
    ubar: np.ndarray,
    mu_dot: np.ndarray,
    opts: EvolutionOptions = DEFAULT_OPTIONS,
    evolution: LinearEvolution | None = None,
) -> Multiplier:
    """Costate of -dp/dt + A p = (ybar - y_d) + sum_j c_j mu_dot_j, p(T) = ybar(T) - y_dT.

    Computed as the transpose of the discrete linearized scheme; the cell values
    satisfy the discrete adjoint identity exactly and approximate p at cell
    midpoints.  Node values are interpolated from them.
    """
    mu_dot = np.asarray(mu_dot, float).reshape(spec.constraint_count_q, grid.nt)
    if np.any(mu_dot < 0):
        raise ValueError("mu_dot must be nonnegative")
    evo = evolution or LinearEvolution(spec, grid, ybar, ubar, opts)
    P = evo.adjoint(costate_loads(spec, grid, ybar, mu_dot))
    p_cell = np.zeros((grid.nx + 2, grid.nt))
    p_cell[1:-1] = P
    terminal = ybar[:, -1] - grid.sample_space(spec.y_dT)
    terminal[[0, -1]] = 0.0
    p = cells_to_nodes(grid, p_cell, terminal)
    return Multiplier(p=p, mu_dot=mu_dot, p_cell=p_cell)


def adjoint_identity(
    spec: ProblemSpec,
    grid: Grid,
    ybar: np.ndarray,
    mult: Multiplier,
    v: np.ndarray,
    z: np.ndarray,
    theta: float = 0.5,
) -> tuple[float, float, float]:
    """Both sides of int p (lin. RHS) = int (ybar-y_d) z + int (ybar(T)-y_dT) z(T) + sum int c z mu_dot.

    Returns (lhs with cell costate, lhs with node costate, rhs).
    """
    src = linearized_source(spec, grid, ybar, v, theta).T  # (nx, nt)
    lhs_cell = float(np.sum(grid.dt * (mult.p_cell[1:-1] * src).sum(axis=0)) * grid.dx)
    bs = control_channels(spec, grid)[1:]
    vb = bs.T @ np.asarray(v, float).reshape(spec.control_dim_m, grid.nt)
    pl = grid.space_integral(mult.p[:, :-1] * ybar[:, :-1] * vb)
    pr = grid.space_integral(mult.p[:, 1:] * ybar[:, 1:] * vb)
    lhs_node = float(grid.dt @ (0.5 * (pl + pr)))
    yd = grid.sample(spec.y_d)
    rhs = grid.time_integral(grid.space_integral((ybar - yd) * z))
    rhs += grid.space_integral((ybar[:, -1] - grid.sample_space(spec.y_dT)) * z[:, -1])
    for j, cj in enumerate(spec.c):
        gz = grid.space_integral(grid.sample_space(cj)[:, None] * z)
        rhs += grid.dt @ (mult.mu_dot[j] * grid.node_average(gz))
    return lhs_cell, lhs_node, float(rhs)


def linearized_bound(spec: ProblemSpec, grid: Grid, ybar: np.ndarray, ubar: np.ndarray,
                     v: np.ndarray) -> float:
    """Right-hand side M1 * sum_i ||b_i||_inf ||v_i||_1 of the a-priori bound on z."""
    bs = control_channels(spec, grid)
    bnorm = np.max(np.abs(bs), axis=1)
    u1 = np.concatenate([[spec.horizon_T], np.abs(ubar).reshape(-1, grid.nt) @ grid.dt])
    ynorm = np.max(np.sqrt(grid.space_integral(ybar**2)))
    M1 = np.exp(0.5 * spec.horizon_T + float(u1 @ bnorm)) * ynorm
    v1 = np.abs(np.asarray(v, float).reshape(-1, grid.nt)) @ grid.dt
    return float(M1 * (bnorm[1:] @ v1))


def linf_l2(grid: Grid, field: np.ndarray) -> float:
    """||field||_{L^inf(0,T; L^2)}."""
    return float(np.max(np.sqrt(np.maximum(grid.space_integral(field**2), 0.0))))
