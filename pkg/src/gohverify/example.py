"""Closed-form bang / constrained / singular example on (0,1) x (0,3).

Every field is colinear with the first Dirichlet eigenfunction
c1(x) = sqrt(2) sin(pi x), so the PDE reduces to the scalar ODE

    y1' + pi^2 y1 = u y1,  y1(0) = 1,

and the optimal trajectory, costate and multiplier are known piecewise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .problem import Grid, ProblemSpec, problem_from_dict

PI2 = math.pi**2
LOG2 = math.log(2.0)
T_END = 3.0
U_LOWER = -1.0
U_UPPER = PI2 + 1.0
JUNCTIONS = (0.0, LOG2, 2.0, T_END)
C1 = "sqrt(2)*sin(pi*x)"


def example_config() -> dict:
    """The example as a configuration dictionary (JSON-serializable)."""
    return {
        "name": "bang-constrained-singular",
        "domain": [0, 1],
        "horizon": {"T": 3, "align": ["log(2)", 2]},
        "gamma": 0,
        "controls": {"b0": 0, "b": [1], "alpha": [0]},
        "constraints": [{"c": C1, "d": -2}],
        "targets": {
            "f": 0,
            "y0": C1,
            "y_dT": C1,
            "y_d": {
                "piecewise_t": [
                    ["log(2)", f"1.5*exp(t)*{C1}"],
                    [1, f"3*{C1}"],
                    [None, f"(4 - t)*{C1}"],
                ]
            },
        },
        "bounds": {"lower": [-1], "upper": ["pi**2 + 1"]},
    }


def example_config_text() -> str:
    return json.dumps(example_config(), indent=2)


def example_spec() -> ProblemSpec:
    return problem_from_dict(json.loads(example_config_text()))


def c1(x) -> np.ndarray:
    return math.sqrt(2.0) * np.sin(math.pi * np.asarray(x, float))


@dataclass(frozen=True)
class ExampleTruth:
    t: float
    u_bar: float
    y1_bar: float
    p1: float
    mu1_dot: float
    yhat_d: float


def _arc(t: float, right: bool) -> int:
    """Arc index 0, 1, 2 with left limits at junctions unless ``right``."""
    if right:
        return 0 if t < LOG2 else (1 if t < 2.0 else 2)
    return 0 if t <= LOG2 else (1 if t <= 2.0 else 2)


def yhat_d(t: float) -> float:
    if t < LOG2:
        return 1.5 * math.exp(t)
    return 3.0 if t < 1.0 else 4.0 - t


def example_truth(t: float, right: bool = False) -> ExampleTruth:
    """Closed forms at time t (left limits at junctions, right limits if asked)."""
    if not 0.0 <= t <= T_END:
        raise ValueError(f"t={t} outside [0, 3]")
    if right and t == T_END:
        right = False
    k = _arc(t, right) if t > 0.0 else 0
    yd = yhat_d(t)
    if k == 0:
        yd = 1.5 * math.exp(t)
        return ExampleTruth(t, U_UPPER, math.exp(t), math.exp(t) / 4 - math.exp(-t), 0.0, yd)
    if k == 1:
        return ExampleTruth(t, PI2, 2.0, 0.0, yd - 2.0, yd)
    return ExampleTruth(t, PI2 - 1.0 / (4.0 - t), 4.0 - t, 0.0, 0.0, yd)


def u_bar(t: float) -> float:
    """Right-continuous optimal control."""
    return example_truth(t, right=True).u_bar


def truth_series(t: np.ndarray, name: str, right: bool = False) -> np.ndarray:
    return np.array([getattr(example_truth(float(s), right), name) for s in np.asarray(t)])


def control_cells(grid: Grid) -> np.ndarray:
    """u_bar at cell midpoints, shape (1, nt)."""
    return truth_series(grid.t_mid, "u_bar")[None, :]


def mu_dot_cells(grid: Grid) -> np.ndarray:
    """mu1_dot at cell midpoints, shape (1, nt)."""
    return truth_series(grid.t_mid, "mu1_dot")[None, :]


def state_field(grid: Grid) -> np.ndarray:
    return c1(grid.x_nodes)[:, None] * truth_series(grid.t_nodes, "y1_bar")[None, :]


def costate_field(grid: Grid) -> np.ndarray:
    return c1(grid.x_nodes)[:, None] * truth_series(grid.t_nodes, "p1")[None, :]


def switching_closed_form(t: np.ndarray) -> np.ndarray:
    """Psi_1(t) = e^{2t}/4 - 1 on [0, log 2], 0 afterwards."""
    t = np.asarray(t, float)
    return np.where(t <= LOG2, np.exp(2 * t) / 4 - 1.0, 0.0)


def grid(nx: int, nt: int) -> Grid:
    """Grid with log 2 and 2 snapped onto time nodes."""
    return Grid.build(example_spec(), nx, nt)


def ode_oracle(
    u: Callable[[float], float] | np.ndarray,
    t_nodes: np.ndarray,
    rk_substeps: int = 10,
    y1_0: float = 1.0,
) -> np.ndarray:
    """Classical RK4 for y1' = (u(t) - pi^2) y1 on each cell of ``t_nodes``.

    ``u`` is either a callable of t or an array of cell values (held constant
    on each cell).  Stage times stay inside the cell, so a callable that jumps
    at a node is resolved exactly.
    """
    if rk_substeps < 1:
        raise ValueError("rk_substeps must be >= 1")
    t_nodes = np.asarray(t_nodes, float)
    if callable(u):
        ufun = u
        cellwise = None
    else:
        cellwise = np.asarray(u, float).reshape(-1)
        if cellwise.size != t_nodes.size - 1:
            raise ValueError("need one control value per cell")
    y = np.empty(t_nodes.size)
    y[0] = y1_0
    eps = 1e-14
    for k in range(t_nodes.size - 1):
        a, b = t_nodes[k], t_nodes[k + 1]
        h = (b - a) / rk_substeps
        yk = y[k]
        if cellwise is not None:
            uk = cellwise[k]

            def rate(s, yy, uk=uk):
                return (uk - PI2) * yy
        else:

            def rate(s, yy):
                s = min(max(s, a + eps * (1 + abs(a))), b - eps * (1 + abs(b)))
                return (ufun(s) - PI2) * yy
        s = a
        for _ in range(rk_substeps):
            k1 = rate(s, yk)
            k2 = rate(s + h / 2, yk + h / 2 * k1)
            k3 = rate(s + h / 2, yk + h / 2 * k2)
            k4 = rate(s + h, yk + h * k3)
            yk = yk + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            s += h
        y[k + 1] = yk
    return y


def candidate_samples(n: int = 3000) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(t, u_bar, mu1_dot) on a uniform sample with both one-sided values at junctions.

    Feeds the candidate CSV consumed by the verifier.
    """
    base = np.linspace(0.0, T_END, n + 1)
    base = base[np.min(np.abs(base[:, None] - np.array(JUNCTIONS[1:-1])[None, :]), axis=1) > 1e-9]
    t, u, mu = [], [], []
    for s in np.sort(np.concatenate([base, JUNCTIONS[1:-1]])):
        sides = (False, True) if any(abs(s - j) < 1e-15 for j in JUNCTIONS[1:-1]) else (True,)
        for right in sides:
            tr = example_truth(float(s), right=right)
            t.append(float(s))
            u.append(tr.u_bar)
            mu.append(tr.mu1_dot)
    return np.array(t), np.array(u)[None, :], np.array(mu)[None, :]
