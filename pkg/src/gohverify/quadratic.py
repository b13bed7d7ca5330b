"""Second variation Q, its Goh transform Q_hat, and remainder diagnostics.

Both quadratic forms are evaluated as sums of per-time-node contributions
(trapezoid in time and space).  Cell quantities (v, mu_dot, S_dot) are folded
into node weights, so the transformed form can be accumulated while a batch
of Goh states is being time-stepped; this is what the coercivity estimate
uses to assemble its Hessian without storing every state.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .goh import GohAuxiliaries, goh_auxiliaries, goh_w, kappa_field
from .problem import Grid, Multiplier, ProblemSpec
from .solvers import (
    DEFAULT_OPTIONS,
    EvolutionOptions,
    LinearEvolution,
    control_channels,
    linf_l2,
    solve_linearized,
    solve_state,
    solve_zeta,
    zeta_source,
)


@dataclass
class QuadContext:
    """Everything the quadratic forms need around a nominal (ubar, ybar, p, mu_dot)."""

    spec: ProblemSpec
    grid: Grid
    ubar: np.ndarray
    ybar: np.ndarray
    mult: Multiplier
    aux: GohAuxiliaries
    kappa: np.ndarray
    evolution: LinearEvolution
    opts: EvolutionOptions = DEFAULT_OPTIONS
    # derived, per node
    bs: np.ndarray = field(init=False, repr=False)
    cross_G: np.ndarray = field(init=False, repr=False)  # (m, nx+2, nt+1) incl. time weights
    sdot_node: np.ndarray = field(init=False, repr=False)  # (m, m, nt+1)
    K_node: np.ndarray = field(init=False, repr=False)  # (m, m, nt+1) incl. time weights

    @classmethod
    def build(
        cls,
        spec: ProblemSpec,
        grid: Grid,
        ubar: np.ndarray,
        ybar: np.ndarray,
        mult: Multiplier,
        opts: EvolutionOptions = DEFAULT_OPTIONS,
        kappa: np.ndarray | None = None,
    ) -> "QuadContext":
        if kappa is None:
            kappa = kappa_field(spec, ybar, mult.p)
        aux = goh_auxiliaries(spec, grid, ybar, mult, kappa)
        evo = LinearEvolution(spec, grid, ybar, ubar, opts)
        return cls(spec, grid, np.asarray(ubar, float), ybar, mult, aux, kappa, evo, opts)

    def with_kappa(self, kappa: np.ndarray) -> "QuadContext":
        aux = goh_auxiliaries(self.spec, self.grid, self.ybar, self.mult, kappa)
        return QuadContext(self.spec, self.grid, self.ubar, self.ybar, self.mult, aux, kappa,
                           self.evolution, self.opts)

    def __post_init__(self):
        spec, grid, p, ybar = self.spec, self.grid, self.mult.p, self.ybar
        x = grid.x_nodes
        self.bs = control_channels(spec, grid)[1:]
        wt = grid.time_weights
        yd = grid.sample(spec.y_d)
        px = np.gradient(p, grid.dx, axis=0, edge_order=2)
        G = []
        for i, bi in enumerate(spec.b[1:]):
            b, db, ddb = bi(x)[:, None], bi.dx(x)[:, None], bi.dxx(x)[:, None]
            Gi = (-ddb * p - 2.0 * db * px + b * (ybar - yd)) * wt
            if spec.constraint_count_q:
                C = np.stack([grid.sample_space(cj) for cj in spec.c])
                cell = C.T @ (self.mult.mu_dot * grid.dt)  # (nx+2, nt)
                mu_node = np.zeros_like(Gi)
                mu_node[:, :-1] += 0.5 * cell
                mu_node[:, 1:] += 0.5 * cell
                Gi = Gi + b * mu_node
            G.append(Gi)
        self.cross_G = np.stack(G)
        cellS = self.aux.S_dot * grid.dt
        sd = np.zeros(cellS.shape[:2] + (grid.nt + 1,))
        sd[..., :-1] += 0.5 * cellS
        sd[..., 1:] += 0.5 * cellS
        self.sdot_node = sd
        K = np.einsum("ix,x,xk,jxk->ijk", self.bs, grid.space_weights, p, self.aux.B1)
        self.K_node = K * wt


TERMS = ("integral", "sdot", "cross", "b1_cross", "terminal_square", "terminal_cross", "terminal_S")


def qhat_node_terms(
    ctx: QuadContext,
    k: int,
    zeta_a: np.ndarray,
    w_a: np.ndarray,
    zeta_b: np.ndarray,
    w_b: np.ndarray,
) -> dict[str, np.ndarray]:
    """Bilinear contributions of time node k between batches a and b.

    zeta_*: (nx+2, n_*) Goh states at t_k; w_*: (m, n_*).  Returns (n_a, n_b)
    matrices per term; the diagonal of a = b reproduces Q_hat.
    """
    grid = ctx.grid
    wx = grid.space_weights
    yb = ctx.ybar[:, k]
    Za = zeta_a + yb[:, None] * (ctx.bs.T @ w_a)
    Zb = zeta_b + yb[:, None] * (ctx.bs.T @ w_b)
    out = {}
    out["integral"] = grid.time_weights[k] * (Za.T @ ((wx * ctx.kappa[:, k])[:, None] * Zb))
    out["sdot"] = -(w_a.T @ ctx.sdot_node[:, :, k] @ w_b)
    Gk = ctx.cross_G[:, :, k] * wx  # (m, nx+2)
    ab = w_a.T @ (Gk @ zeta_b)
    ba = (w_b.T @ (Gk @ zeta_a)).T
    out["cross"] = ab + ba
    Kk = ctx.K_node[:, :, k]
    out["b1_cross"] = -(w_a.T @ (Kk + Kk.T) @ w_b)
    return out


def qhat_terminal_terms(ctx, zeta_a, h_a, zeta_b, h_b) -> dict[str, np.ndarray]:
    wx = ctx.grid.space_weights
    yT = ctx.ybar[:, -1]
    pT = ctx.mult.p[:, -1]
    Za = zeta_a + yT[:, None] * (ctx.bs.T @ h_a)
    Zb = zeta_b + yT[:, None] * (ctx.bs.T @ h_b)
    out = {"terminal_square": Za.T @ (wx[:, None] * Zb)}
    bp = ctx.bs * pT * wx  # (m, nx+2)
    out["terminal_cross"] = h_a.T @ (bp @ zeta_b) + (h_b.T @ (bp @ zeta_a)).T
    out["terminal_S"] = h_a.T @ ctx.aux.S[:, :, -1] @ h_b
    return out


def qhat_accumulate(
    ctx: QuadContext,
    stream: Iterable[tuple[int, np.ndarray, np.ndarray]],
    h: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gram matrices of every Q_hat term for a batch streamed node by node.

    ``stream`` yields (k, zeta_k (nx+2, n), w_k (m, n)) for k = 0..nt in order;
    ``h`` has shape (m, n).
    """
    totals: dict[str, np.ndarray] = {}
    last = None
    for k, zk, wk in stream:
        for name, val in qhat_node_terms(ctx, k, zk, wk, zk, wk).items():
            totals[name] = totals.get(name, 0.0) + val
        last = (k, zk)
    if last is None or last[0] != ctx.grid.nt:
        raise ValueError("stream must end at the final time node")
    totals.update(qhat_terminal_terms(ctx, last[1], h, last[1], h))
    return totals


def _field_stream(zeta: np.ndarray, w: np.ndarray) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    for k in range(zeta.shape[1]):
        yield k, zeta[:, k].reshape(zeta.shape[0], -1), w[:, k].reshape(w.shape[0], -1)


@dataclass
class QuadReport:
    Q_value: float
    Qhat_value: float
    rel_gap: float
    terms: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def eval_Q_terms(ctx: QuadContext, z: np.ndarray, v: np.ndarray) -> dict[str, float]:
    """Q = int kappa z^2 + 2 int p v.b z + int z(T)^2, split by term."""
    grid = ctx.grid
    v = np.asarray(v, float).reshape(ctx.spec.control_dim_m, grid.nt)
    integral = grid.time_integral(grid.space_integral(ctx.kappa * z**2))
    pbz = np.einsum("x,ix,xk->ik", grid.space_weights, ctx.bs, ctx.mult.p * z)
    bilinear = 2.0 * float(np.sum(grid.dt * v * grid.node_average(pbz)))
    terminal = grid.space_integral(z[:, -1] ** 2)
    return {"integral": float(integral), "bilinear": bilinear, "terminal": float(terminal)}


def eval_Q(ctx: QuadContext, z: np.ndarray, v: np.ndarray) -> float:
    return float(sum(eval_Q_terms(ctx, z, v).values()))


def eval_Qhat_terms(ctx: QuadContext, zeta: np.ndarray, w: np.ndarray, h: np.ndarray) -> dict[str, float]:
    w = np.asarray(w, float).reshape(ctx.spec.control_dim_m, ctx.grid.nt + 1)
    h = np.asarray(h, float).reshape(ctx.spec.control_dim_m, 1)
    mats = qhat_accumulate(ctx, _field_stream(zeta, w), h)
    return {name: float(np.asarray(val).reshape(-1)[0]) for name, val in mats.items()}


def eval_Qhat(ctx: QuadContext, zeta: np.ndarray, w: np.ndarray, h: np.ndarray) -> float:
    return float(sum(eval_Qhat_terms(ctx, zeta, w, h).values()))


def quad_report(ctx: QuadContext, v: np.ndarray) -> QuadReport:
    """Evaluate Q on (z[v], v) and Q_hat on its Goh transform."""
    spec, grid = ctx.spec, ctx.grid
    z = solve_linearized(spec, grid, ctx.ybar, ctx.ubar, v, ctx.opts, ctx.evolution)
    w, h = goh_w(v, grid)
    zeta = solve_zeta(spec, grid, ctx.ybar, ctx.ubar, w, ctx.opts, ctx.evolution, ctx.aux.B1)
    q_terms = eval_Q_terms(ctx, z, v)
    qh_terms = eval_Qhat_terms(ctx, zeta, w, h)
    Q = sum(q_terms.values())
    Qh = sum(qh_terms.values())
    terms = {f"Q.{k}": v_ for k, v_ in q_terms.items()}
    terms.update({f"Qhat.{k}": v_ for k, v_ in qh_terms.items()})
    return QuadReport(
        Q_value=float(Q),
        Qhat_value=float(Qh),
        rel_gap=float(abs(Q - Qh) / max(1.0, abs(Q))),
        terms=terms,
        grid={"nx": grid.nx, "nt": grid.nt, "scheme": ctx.opts.scheme},
    )


def band_limited_direction(
    rng: np.random.Generator,
    grid: Grid,
    m: int,
    n_modes: int = 5,
    support: tuple[float, float] | None = None,
    amplitude: float = 1.0,
) -> np.ndarray:
    """Random cell-valued v made of at most ``n_modes`` Fourier modes in t."""
    T = grid.t_nodes[-1]
    t = grid.t_mid
    v = np.zeros((m, grid.nt))
    for i in range(m):
        n = int(rng.integers(1, n_modes + 1))
        for _ in range(n):
            freq = int(rng.integers(0, n_modes))
            phase = rng.uniform(0, 2 * np.pi)
            v[i] += rng.normal() * np.cos(np.pi * freq * t / T + phase)
    if support is not None:
        v[:, (t < support[0]) | (t > support[1])] = 0.0
    norm = np.sqrt(np.sum(grid.cell_integral(v**2)))
    return amplitude * v / norm if norm > 0 else v


@dataclass
class RemainderTable:
    amplitudes: list
    eta_ratio: list
    dy_ratio: list
    eta_slope: float
    dy_slope: float

    def rows(self):
        return list(zip(self.amplitudes, self.eta_ratio, self.dy_ratio))


def fit_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    x = np.log(np.asarray(x, float))
    y = np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


def remainder_probe(
    spec: ProblemSpec,
    grid: Grid,
    ubar: np.ndarray,
    ybar: np.ndarray,
    amplitudes: Sequence[float],
    v_shape: np.ndarray,
    opts: EvolutionOptions = DEFAULT_OPTIONS,
) -> RemainderTable:
    """Size of eta = delta y - z relative to ||w||_2 + |w(T)| as the amplitude shrinks."""
    amps = [float(a) for a in amplitudes]
    if any(a <= 0 for a in amps) or any(b >= a for a, b in zip(amps, amps[1:])):
        raise ValueError("amplitudes must be positive and decreasing")
    evo = LinearEvolution(spec, grid, ybar, ubar, opts)
    z_unit = solve_linearized(spec, grid, ybar, ubar, v_shape, opts, evo)
    w_unit, h_unit = goh_w(v_shape, grid)
    wnorm = np.sqrt(np.sum(grid.time_integral(w_unit**2))) + np.linalg.norm(h_unit)
    if wnorm == 0:
        raise ValueError("v_shape has zero primitive; ratios are undefined")
    eta_r, dy_r = [], []
    for a in amps:
        y = solve_state(spec, grid, ubar + a * v_shape, opts)
        dy = y - ybar
        eta = dy - a * z_unit
        denom = a * wnorm
        eta_r.append(linf_l2(grid, eta) / denom)
        dy_r.append(linf_l2(grid, dy) / denom)
    eta_slope = fit_slope(amps, eta_r) if min(eta_r) > 0 else float("inf")
    dy_slope = fit_slope(amps, dy_r) if min(dy_r) > 0 else 0.0
    return RemainderTable(amps, eta_r, dy_r, eta_slope, dy_slope)
