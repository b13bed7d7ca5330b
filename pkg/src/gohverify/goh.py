"""Goh-transform auxiliaries: w, B, B1, M, S, S_dot (through chi) and R."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .problem import Grid, Multiplier, ProblemSpec
from .solvers import control_channels, goh_forcing


def goh_w(v: np.ndarray, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Primitive w(t) = int_0^t v and h = w(T).

    ``v`` holds cell values (m, nt), integrated exactly, or node samples
    (m, nt+1), integrated with the cumulative trapezoid rule.
    """
    v = np.atleast_2d(np.asarray(v, float))
    if v.shape[-1] == grid.nt:
        inc = v * grid.dt
    elif v.shape[-1] == grid.nt + 1:
        inc = grid.node_average(v) * grid.dt
    else:
        raise ValueError(f"v has {v.shape[-1]} samples; expected {grid.nt} cells or {grid.nt + 1} nodes")
    w = np.concatenate([np.zeros(v.shape[:-1] + (1,)), np.cumsum(inc, axis=-1)], axis=-1)
    return w, w[..., -1].copy()


def goh_B(spec: ProblemSpec, grid: Grid, ybar: np.ndarray) -> np.ndarray:
    """B_i = ybar * b_i, shape (m, nx+2, nt+1)."""
    bs = control_channels(spec, grid)[1:]
    return bs[:, :, None] * ybar[None]


def matrix_M(spec: ProblemSpec, grid: Grid, ybar: np.ndarray) -> np.ndarray:
    """M[j, i, k] = int b_i c_j ybar(., t_k); shape (q, m, nt+1)."""
    bs = control_channels(spec, grid)[1:]
    if not spec.c:
        return np.zeros((0, spec.control_dim_m, grid.nt + 1))
    C = np.stack([grid.sample_space(cj) for cj in spec.c])
    wx = grid.space_weights
    return np.einsum("jx,ix,xk->jik", C * wx, bs, ybar)


def _pair_products(bs: np.ndarray) -> np.ndarray:
    """b_i b_j on x nodes, shape (m, m, nx+2)."""
    return bs[:, None, :] * bs[None, :, :]


def compute_S(spec: ProblemSpec, grid: Grid, ybar: np.ndarray, p: np.ndarray) -> np.ndarray:
    """S_ij(t_k) = int b_i b_j p ybar, shape (m, m, nt+1)."""
    bb = _pair_products(control_channels(spec, grid)[1:])
    return np.einsum("ijx,x,xk->ijk", bb, grid.space_weights, p * ybar)


def compute_S_dot(
    spec: ProblemSpec,
    grid: Grid,
    ybar: np.ndarray,
    p: np.ndarray,
    mu_dot: np.ndarray,
) -> np.ndarray:
    """Cell values of dS/dt = int b_i b_j chi, shape (m, m, nt).

    chi = p f + p Lap(ybar) - ybar Lap(p) + 2 gamma p ybar^3 - ybar (ybar - y_d)
          - ybar sum_j c_j mu_dot_j,
    with the Laplacian pair integrated by parts against b_i b_j:
    int b_i b_j (p Lap ybar - ybar Lap p) = -int (b_i b_j)' (p ybar' - ybar p').
    """
    x = grid.x_nodes
    bs = control_channels(spec, grid)[1:]
    dbs = np.stack([bi.dx(x) for bi in spec.b[1:]])
    bb = _pair_products(bs)
    dbb = dbs[:, None, :] * bs[None, :, :] + bs[:, None, :] * dbs[None, :, :]
    wx = grid.space_weights
    f = grid.sample(spec.f)
    yd = grid.sample(spec.y_d)
    point = p * f + 2.0 * spec.gamma * p * ybar**3 - ybar * (ybar - yd)
    yx = np.gradient(ybar, grid.dx, axis=0, edge_order=2)
    px = np.gradient(p, grid.dx, axis=0, edge_order=2)
    flux = p * yx - ybar * px
    node = np.einsum("ijx,x,xk->ijk", bb, wx, point) - np.einsum("ijx,x,xk->ijk", dbb, wx, flux)
    cells = grid.node_average(node)
    if spec.constraint_count_q:
        C = np.stack([grid.sample_space(cj) for cj in spec.c])  # (q, nx+2)
        yc = np.einsum("ijx,x,qx,xk->ijqk", bb, wx, C, ybar)
        cells = cells - np.einsum("ijqk,qk->ijk", grid.node_average(yc), mu_dot)
    return cells


def compute_S_and_Sdot(spec, grid, ybar, p, mu_dot):
    return compute_S(spec, grid, ybar, p), compute_S_dot(spec, grid, ybar, p, mu_dot)


def kappa_field(spec: ProblemSpec, ybar: np.ndarray, p: np.ndarray) -> np.ndarray:
    return 1.0 - 6.0 * spec.gamma * ybar * p


def _pB1(spec, grid, p, B1) -> np.ndarray:
    """K_ij(t_k) = int b_i p B1_j, shape (m, m, nt+1)."""
    bs = control_channels(spec, grid)[1:]
    return np.einsum("ix,x,xk,jxk->ijk", bs, grid.space_weights, p, B1)


def compute_R(
    spec: ProblemSpec,
    grid: Grid,
    ybar: np.ndarray,
    p: np.ndarray,
    S_dot: np.ndarray,
    B1: np.ndarray,
    kappa: np.ndarray | None = None,
    cross_sign: float = -1.0,
    sdot_weight: float = 1.0,
) -> np.ndarray:
    """Cell values of the w-quadratic coefficient, shape (m, m, nt).

    R_ij = int kappa b_i b_j ybar^2 - sdot_weight * S_dot_ij
           + cross_sign * int p (b_i B1_j + b_j B1_i).

    The defaults (cross_sign=-1, sdot_weight=1) are the coefficient produced by
    integrating the bilinear term 2 int p v.b z by parts; cross_sign=+1 is the
    sign convention printed alongside the transformed form, and
    (sdot_weight=1/2, cross_sign=-1/2) corresponds to integrating a bilinear
    term with unit weight.
    """
    if kappa is None:
        kappa = kappa_field(spec, ybar, p)
    bb = _pair_products(control_channels(spec, grid)[1:])
    quad = np.einsum("ijx,x,xk->ijk", bb, grid.space_weights, kappa * ybar**2)
    K = _pB1(spec, grid, p, B1)
    cross = K + np.swapaxes(K, 0, 1)
    node = quad + cross_sign * cross
    return grid.node_average(node) - sdot_weight * S_dot


@dataclass(frozen=True)
class GohAuxiliaries:
    B: np.ndarray  # (m, nx+2, nt+1)
    B1: np.ndarray  # (m, nx+2, nt+1)
    M: np.ndarray  # (q, m, nt+1)
    S: np.ndarray  # (m, m, nt+1) nodes
    S_dot: np.ndarray  # (m, m, nt) cells
    R: np.ndarray  # (m, m, nt) cells
    R_routes: dict = field(default_factory=dict)


def goh_auxiliaries(
    spec: ProblemSpec,
    grid: Grid,
    ybar: np.ndarray,
    mult: Multiplier,
    kappa: np.ndarray | None = None,
) -> GohAuxiliaries:
    p = mult.p
    B1 = goh_forcing(spec, grid, ybar)
    S, S_dot = compute_S_and_Sdot(spec, grid, ybar, p, mult.mu_dot)
    R = compute_R(spec, grid, ybar, p, S_dot, B1, kappa)
    routes = {
        "integration_by_parts": R,
        "printed_sign": compute_R(spec, grid, ybar, p, S_dot, B1, kappa, cross_sign=+1.0),
        "unit_bilinear_weight": compute_R(
            spec, grid, ybar, p, S_dot, B1, kappa, cross_sign=-0.5, sdot_weight=0.5
        ),
    }
    return GohAuxiliaries(
        B=goh_B(spec, grid, ybar),
        B1=B1,
        M=matrix_M(spec, grid, ybar),
        S=S,
        S_dot=S_dot,
        R=R,
        R_routes=routes,
    )


def identity_residual(z: np.ndarray, zeta: np.ndarray, B: np.ndarray, w: np.ndarray) -> np.ndarray:
    """z - (zeta + B . w)."""
    return z - zeta - np.einsum("ixk,ik->xk", B, w)


def goh_identity_residual(z: np.ndarray, zeta: np.ndarray, B: np.ndarray, w: np.ndarray) -> float:
    """max |z - zeta - B.w| over the space-time grid."""
    return float(np.max(np.abs(identity_residual(z, zeta, B, w))))
