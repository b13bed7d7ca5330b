"""Derive reference values for the test suite with sympy, independently of the package.

Run ``python3 tools/derive_oracles.py`` to regenerate tests/oracle_values.json.
"""

import json
from pathlib import Path

import sympy as sp

t, s, x = sp.symbols("t s x", real=True)
pi2 = sp.pi**2
c1 = sp.sqrt(2) * sp.sin(sp.pi * x)
out = {}

# modal normalisation
out["int_c1_squared"] = float(sp.integrate(c1**2, (x, 0, 1)))

# arc-1 closed forms: y1 = e^t, p1 = e^t/4 - e^-t
y1, p1 = sp.exp(t), sp.exp(t) / 4 - sp.exp(-t)
assert sp.simplify(sp.diff(y1, t) + pi2 * y1 - (pi2 + 1) * y1) == 0
# costate on arc 1: -p' + (pi^2 - u) p = y - y_d with y_d = 1.5 e^t
assert sp.simplify(-sp.diff(p1, t) + (pi2 - (pi2 + 1)) * p1 - (y1 - sp.Rational(3, 2) * sp.exp(t))) == 0
S = sp.expand(p1 * y1)
out["S_arc1"] = str(S)
out["psi_at_0"] = float(S.subs(t, 0))
out["psi_at_log2"] = float(sp.simplify(S.subs(t, sp.log(2))))
Sdot = sp.diff(S, t)
# B1 projected on c1 on arc 1 vanishes: (pi^2 - u) y1 + y1'
B1 = (pi2 - (pi2 + 1)) * y1 + sp.diff(y1, t)
assert sp.simplify(B1) == 0
routes = {
    # 2 int p v b z integrated by parts: y1^2 - Sdot - 2 p1 B1
    "integration_by_parts": sp.simplify(y1**2 - Sdot - 2 * p1 * B1),
    # unit bilinear weight: y1^2 - Sdot/2 - p1 B1
    "unit_bilinear_weight": sp.simplify(y1**2 - Sdot / 2 - p1 * B1),
    "printed": 2 + sp.exp(2 * t) / 4,
}
out["R_arc1"] = {k: str(v) for k, v in routes.items()}
out["R_arc1_at"] = {
    k: [float(v.subs(t, tv)) for tv in (0.1, 0.3, 0.6)] for k, v in routes.items()
}

# Q for v = 1 on (2,3): z1' + z1/(4-t) = (4-t), z1(2) = 0
z = sp.Function("z")
sol = sp.dsolve(sp.Eq(z(t).diff(t) + z(t) / (4 - t), 4 - t), z(t), ics={z(2): 0}).rhs
sol = sp.simplify(sol)
out["z1_v1_arc3"] = str(sol)
Q = sp.integrate(sol**2, (t, 2, 3)) + sol.subs(t, 3) ** 2
out["Q_v1_arc3"] = float(Q)
out["Q_v1_arc3_exact"] = str(sp.nsimplify(Q))
# the same via the transformed form: w = t - 2, h = 1
Qh = sp.integrate((4 - t) ** 2 * (t - 2) ** 2, (t, 2, 3)) + 1
assert sp.simplify(Q - Qh) == 0

# state constraint at t = 2.5: int c1 y - 2 = (4 - 2.5) - 2
out["g_at_2p5"] = float((4 - sp.Rational(5, 2)) - 2)

# truth samples
out["truth_t05"] = {
    "u_bar": float(pi2 + 1), "y1_bar": float(sp.exp(sp.Rational(1, 2))),
    "p1": float(p1.subs(t, sp.Rational(1, 2))), "mu1_dot": 0.0,
}
out["mu1_dot_t08"] = 1.0
out["mu1_dot_t15"] = float((4 - sp.Rational(3, 2)) - 2)

# scalar ODE references
out["decay_u0_t1"] = float(sp.exp(-pi2))

# goh_w of cos on [0, 3]
out["sin3"] = float(sp.sin(3))

# continuum coercivity on the single-mode reduction: inf of the Rayleigh quotient
# [int_2^3 (4-t)^2 w^2 + h^2] / [int_2^3 w^2 + h^2] over (w, h)
out["rho_continuum"] = float(sp.Min(sp.minimum((4 - t) ** 2, t, sp.Interval(2, 3)), 1))

Path(__file__).resolve().parents[1].joinpath("tests", "oracle_values.json").write_text(
    json.dumps(out, indent=2, sort_keys=True) + "\n"
)
print(json.dumps(out, indent=2, sort_keys=True))
