import json
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from gohverify import example as ex
from gohverify.problem import Grid, problem_from_dict
from gohverify.quadratic import QuadContext
from gohverify.solvers import EvolutionOptions, solve_costate, solve_state

ORACLES = json.loads((Path(__file__).parent / "oracle_values.json").read_text())
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def oracle():
    return ORACLES


class Nominal:
    """Example nominal fields on one grid, with lazily built quadratic context."""

    def __init__(self, nx, nt, scheme="crank_nicolson"):
        self.spec = ex.example_spec()
        self.grid = ex.grid(nx, nt)
        self.opts = EvolutionOptions(scheme=scheme)
        self.u = ex.control_cells(self.grid)
        self.y = solve_state(self.spec, self.grid, self.u, self.opts)
        self.mult = solve_costate(self.spec, self.grid, self.y, self.u, ex.mu_dot_cells(self.grid), self.opts)
        self._ctx = None

    @property
    def ctx(self) -> QuadContext:
        if self._ctx is None:
            self._ctx = QuadContext.build(self.spec, self.grid, self.u, self.y, self.mult, self.opts)
        return self._ctx


@lru_cache(maxsize=None)
def example_nominal(nx, nt, scheme="crank_nicolson") -> Nominal:
    return Nominal(nx, nt, scheme)


@pytest.fixture(scope="session")
def fine():
    return example_nominal(201, 3000)


@pytest.fixture(scope="session")
def medium():
    return example_nominal(101, 750)


@pytest.fixture(scope="session")
def coarse():
    return example_nominal(51, 375)


def synthetic_config(m=1, q=1, gamma=0.0, b=None):
    """Small problem with non-constant control channels (B1 does not vanish)."""
    b = b or ["1 + 0.5*x", "x", "cos(pi*x)"][:m]
    return {
        "name": "synthetic",
        "domain": [0, 1],
        "horizon": 1,
        "gamma": gamma,
        "controls": {"b0": "0.2", "b": b, "alpha": [0.01] * m},
        "constraints": [{"c": f"sin({j + 1}*pi*x)", "d": -0.3} for j in range(q)],
        "targets": {"f": "sin(pi*x)*(1 + t)", "y0": "sin(pi*x)", "y_d": "0.5*sin(pi*x)", "y_dT": "0"},
        "bounds": {"lower": [-2] * m, "upper": [2] * m},
    }


def synthetic(m=1, q=1, gamma=0.0, nx=31, nt=60, b=None, u_level=0.5):
    spec = problem_from_dict(synthetic_config(m, q, gamma, b))
    grid = Grid.build(spec, nx, nt)
    u = np.full((m, nt), u_level) + 0.3 * np.sin(3 * grid.t_mid)[None, :]
    y = solve_state(spec, grid, u)
    mu_dot = np.zeros((q, nt))
    mu_dot[:, nt // 3 : 2 * nt // 3] = 0.4
    mult = solve_costate(spec, grid, y, u, mu_dot)
    return spec, grid, u, y, mult


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
