"""Problem data, grids, and the basic containers shared by every module.

Discretization conventions used throughout the package:

* space: ``nx`` interior nodes on a uniform grid; node arrays include the two
  Dirichlet boundary nodes, so fields have ``nx + 2`` rows;
* time: ``nt`` cells and ``nt + 1`` nodes, uniform except where requested
  junction times are snapped onto the nearest node;
* controls ``u``, perturbations ``v`` and multiplier densities ``mu_dot`` are
  piecewise constant on time cells (arrays with ``nt`` columns), while states,
  costates, ``w`` and the switching function live on time nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .expressions import ExpressionError, Function, parse_constant


class ProblemError(ValueError):
    """Invalid problem configuration."""


@dataclass(frozen=True)
class ProblemSpec:
    spatial_interval: tuple[float, float]
    horizon_T: float
    gamma: float
    f: Function
    b: tuple[Function, ...]  # b[0] is the fixed drift channel
    y0: Function
    y_d: Function
    y_dT: Function
    alpha: np.ndarray
    c: tuple[Function, ...]
    d: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    time_alignment: tuple[float, ...] = ()
    name: str = "problem"

    @property
    def control_dim_m(self) -> int:
        return len(self.b) - 1

    @property
    def constraint_count_q(self) -> int:
        return len(self.c)

    def __post_init__(self):
        for name in ("alpha", "d", "u_lower", "u_upper"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        validate(self)


def validate(spec: ProblemSpec) -> None:
    m = spec.control_dim_m
    x0, x1 = spec.spatial_interval
    if not x1 > x0:
        raise ProblemError("empty spatial interval")
    if not spec.horizon_T > 0:
        raise ProblemError("horizon_T must be positive")
    if not spec.gamma >= 0:
        raise ProblemError("gamma must be nonnegative")
    if m < 1:
        raise ProblemError("at least one control channel is required")
    for name, arr, n in (
        ("alpha", spec.alpha, m),
        ("u_lower", spec.u_lower, m),
        ("u_upper", spec.u_upper, m),
        ("d", spec.d, spec.constraint_count_q),
    ):
        if np.shape(arr) != (n,):
            raise ProblemError(f"{name} must have length {n}, got shape {np.shape(arr)}")
    if np.any(spec.u_lower >= spec.u_upper):
        bad = np.flatnonzero(spec.u_lower >= spec.u_upper).tolist()
        raise ProblemError(f"degenerate control bounds for channel(s) {bad}")
    boundary = np.array([x0, x1])
    for name, fn in [("y0", spec.y0), ("y_dT", spec.y_dT)] + [
        (f"c[{j}]", cj) for j, cj in enumerate(spec.c)
    ]:
        if fn.depends_on_t:
            raise ProblemError(f"{name} must not depend on t")
        vals = fn(boundary)
        if np.max(np.abs(vals)) > 1e-10:
            raise ProblemError(
                f"boundary compatibility: {name} does not vanish at the boundary "
                f"(values {vals.tolist()})"
            )
    for i, bi in enumerate(spec.b):
        if bi.depends_on_t:
            raise ProblemError(f"b[{i}] must not depend on t")
    for tau in spec.time_alignment:
        if not 0 < tau < spec.horizon_T:
            raise ProblemError(f"alignment time {tau} outside (0, T)")


def _as_list(entry: Any, key: str) -> list:
    if isinstance(entry, list):
        return entry
    raise ProblemError(f"'{key}' must be a list")


def problem_from_dict(cfg: dict) -> ProblemSpec:
    required = ("domain", "horizon", "gamma", "controls", "constraints", "targets", "bounds")
    missing = [k for k in required if k not in cfg]
    if missing:
        raise ProblemError(f"missing top-level key(s): {', '.join(missing)}")
    try:
        dom = cfg["domain"]
        if isinstance(dom, dict):
            interval = (parse_constant(dom["x_min"]), parse_constant(dom["x_max"]))
        else:
            interval = tuple(parse_constant(v) for v in dom)
        hor = cfg["horizon"]
        if isinstance(hor, dict):
            T_end = parse_constant(hor["T"])
            align = tuple(sorted(parse_constant(v) for v in hor.get("align", [])))
        else:
            T_end, align = parse_constant(hor), ()
        controls = cfg["controls"]
        b = [Function.parse(controls.get("b0", 0), allow_t=False)]
        b += [Function.parse(e, allow_t=False) for e in _as_list(controls["b"], "controls.b")]
        m = len(b) - 1
        alpha = np.array([parse_constant(a) for a in controls.get("alpha", [0] * m)], float)
        cons = _as_list(cfg["constraints"], "constraints")
        c = tuple(Function.parse(cj["c"], allow_t=False) for cj in cons)
        d = np.array([parse_constant(cj["d"]) for cj in cons], float)
        tg = cfg["targets"]
        bounds = cfg["bounds"]
        return ProblemSpec(
            spatial_interval=(float(interval[0]), float(interval[1])),
            horizon_T=T_end,
            gamma=parse_constant(cfg["gamma"]),
            f=Function.parse(tg.get("f", 0)),
            b=tuple(b),
            y0=Function.parse(tg["y0"], allow_t=False),
            y_d=Function.parse(tg.get("y_d", 0)),
            y_dT=Function.parse(tg.get("y_dT", 0), allow_t=False),
            alpha=alpha,
            c=c,
            d=d,
            u_lower=np.array([parse_constant(v) for v in bounds["lower"]], float),
            u_upper=np.array([parse_constant(v) for v in bounds["upper"]], float),
            time_alignment=align,
            name=str(cfg.get("name", "problem")),
        )
    except ExpressionError as exc:
        raise ProblemError(str(exc)) from exc
    except (KeyError, TypeError) as exc:
        raise ProblemError(f"malformed configuration: {exc!r}") from exc


def load_problem(config_text: str) -> ProblemSpec:
    """Parse a JSON problem configuration and validate it."""
    try:
        cfg = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ProblemError(f"parse failure: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ProblemError("parse failure: top level must be an object")
    return problem_from_dict(cfg)


@dataclass(frozen=True)
class Grid:
    nx: int
    nt: int
    x_nodes: np.ndarray  # (nx + 2,)
    t_nodes: np.ndarray  # (nt + 1,)

    @classmethod
    def build(
        cls,
        spec: ProblemSpec,
        nx: int,
        nt: int,
        align: Sequence[float] | None = None,
    ) -> "Grid":
        """Uniform grid; times in ``align`` replace their nearest time node."""
        if nx < 1 or nt < 1:
            raise ProblemError("grid needs nx >= 1 and nt >= 1")
        x0, x1 = spec.spatial_interval
        x = np.linspace(x0, x1, nx + 2)
        t = np.linspace(0.0, spec.horizon_T, nt + 1)
        align = spec.time_alignment if align is None else tuple(align)
        used = set()
        for tau in align:
            k = int(round(tau / spec.horizon_T * nt))
            if k <= 0 or k >= nt or k in used:
                raise ProblemError(f"cannot align time {tau} on a grid with nt={nt}")
            used.add(k)
            t[k] = tau
        if np.any(np.diff(t) <= 0):
            raise ProblemError("time nodes not strictly increasing after alignment")
        return cls(nx=nx, nt=nt, x_nodes=x, t_nodes=t)

    @property
    def dx(self) -> float:
        return float(self.x_nodes[1] - self.x_nodes[0])

    @property
    def dt(self) -> np.ndarray:
        """Cell widths, shape ``(nt,)``."""
        return np.diff(self.t_nodes)

    @property
    def t_mid(self) -> np.ndarray:
        return 0.5 * (self.t_nodes[1:] + self.t_nodes[:-1])

    @property
    def x_interior(self) -> np.ndarray:
        return self.x_nodes[1:-1]

    @property
    def space_weights(self) -> np.ndarray:
        wts = np.full(self.nx + 2, self.dx)
        wts[[0, -1]] *= 0.5
        return wts

    @property
    def time_weights(self) -> np.ndarray:
        dt = self.dt
        wts = np.zeros(self.nt + 1)
        wts[:-1] += 0.5 * dt
        wts[1:] += 0.5 * dt
        return wts

    def space_integral(self, field: np.ndarray) -> np.ndarray:
        """Trapezoid over x (axis 0 of ``field``)."""
        return np.tensordot(self.space_weights, field, axes=(0, 0))

    def time_integral(self, samples: np.ndarray) -> np.ndarray:
        """Trapezoid over node samples (last axis)."""
        return samples @ self.time_weights

    def cell_integral(self, cells: np.ndarray) -> np.ndarray:
        """Exact integral of a piecewise-constant function (last axis = cells)."""
        return cells @ self.dt

    def node_average(self, samples: np.ndarray) -> np.ndarray:
        """Cell means of node samples under linear interpolation."""
        return 0.5 * (samples[..., 1:] + samples[..., :-1])

    def sample_space(self, fn: Function) -> np.ndarray:
        return fn(self.x_nodes)

    def sample(self, fn: Function) -> np.ndarray:
        return fn.on_grid(self.x_nodes, self.t_nodes)

    def refine(self, spec: ProblemSpec, factor: int = 2) -> "Grid":
        """Refined grid: ``nx -> factor*(nx+1) - 1`` keeps old x nodes, ``nt -> factor*nt``."""
        return Grid.build(spec, factor * (self.nx + 1) - 1, factor * self.nt)


def eval_state_constraint(spec: ProblemSpec, grid: Grid, y: np.ndarray, t_index: int) -> np.ndarray:
    """g_j(y(., t)) = trapezoid integral of c_j * y plus d_j, for each j."""
    col = y[:, t_index]
    return np.array(
        [grid.space_integral(grid.sample_space(cj) * col) for cj in spec.c], float
    ) + spec.d


def state_constraint_history(spec: ProblemSpec, grid: Grid, y: np.ndarray) -> np.ndarray:
    """All g_j at all time nodes, shape ``(q, nt + 1)``."""
    if spec.constraint_count_q == 0:
        return np.zeros((0, y.shape[1]))
    C = np.stack([grid.sample_space(cj) for cj in spec.c])  # (q, nx+2)
    return (C * grid.space_weights) @ y + spec.d[:, None]


@dataclass(frozen=True)
class Trajectory:
    u: np.ndarray  # (m, nt) cell values
    y: np.ndarray  # (nx + 2, nt + 1)


@dataclass(frozen=True)
class Multiplier:
    p: np.ndarray  # (nx + 2, nt + 1) node costate
    mu_dot: np.ndarray  # (q, nt) cell densities
    p_cell: np.ndarray | None = None  # (nx + 2, nt) discrete-adjoint cell values

    def mu(self, grid: Grid) -> np.ndarray:
        """mu_j(t) = -int_t^T mu_dot_j, so mu(T) = 0 and mu is nondecreasing."""
        inc = self.mu_dot * grid.dt
        tail = np.cumsum(inc[:, ::-1], axis=1)[:, ::-1]
        return -np.concatenate([tail, np.zeros((self.mu_dot.shape[0], 1))], axis=1)


@dataclass(frozen=True)
class Arc:
    start: int  # first time-node index
    stop: int  # last time-node index (shared with the next arc)
    lower: frozenset[int] = frozenset()
    upper: frozenset[int] = frozenset()
    state: frozenset[int] = frozenset()

    @property
    def bound_active(self) -> frozenset[int]:
        return self.lower | self.upper

    def kind(self) -> str:
        if self.state:
            return "C"
        if self.bound_active:
            return "B"
        return "S"


@dataclass(frozen=True)
class ArcStructure:
    junctions: tuple[float, ...]
    arcs: tuple[Arc, ...]
    cell_labels: tuple = field(default=(), repr=False)

    def arc_of_cell(self, k: int) -> int:
        for idx, arc in enumerate(self.arcs):
            if arc.start <= k < arc.stop:
                return idx
        raise IndexError(k)


@dataclass(frozen=True)
class GohDirection:
    zeta: np.ndarray  # (nx + 2, nt + 1)
    w: np.ndarray  # (m, nt + 1)
    h: np.ndarray  # (m,)
