"""Builtin function table for problem data.

Problem functions are written as short expression strings in ``x`` (space)
and ``t`` (time) over a fixed vocabulary, so that configurations stay
portable and analytic derivatives in ``x`` are available to the solvers.

Accepted forms::

    "sqrt(2)*sin(pi*x)"                          # plain expression
    1.5                                          # number
    {"piecewise_t": [["log(2)", "1.5*exp(t)"],   # value until t < log(2)
                     [1, "3"],
                     [null, "4 - t"]]}           # last piece, no bound
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import sympy as sp
from sympy.parsing.sympy_parser import parse_expr, standard_transformations

X, T = sp.symbols("x t", real=True)

_FUNCTIONS = {
    "sin": sp.sin,
    "cos": sp.cos,
    "exp": sp.exp,
    "log": sp.log,
    "sqrt": sp.sqrt,
    "pi": sp.pi,
}

# Names the tokenizer emits for literals; nothing else is reachable.
_PARSER_GLOBALS = {
    "Integer": sp.Integer,
    "Float": sp.Float,
    "Rational": sp.Rational,
    "Symbol": sp.Symbol,
}


class ExpressionError(ValueError):
    """Raised when a function entry is outside the builtin table."""


def _parse_scalar(text: Any, allow_t: bool) -> sp.Expr:
    if isinstance(text, bool):
        raise ExpressionError(f"boolean is not a function expression: {text!r}")
    if isinstance(text, (int, float)):
        return sp.Float(text) if isinstance(text, float) else sp.Integer(text)
    if not isinstance(text, str):
        raise ExpressionError(f"unsupported expression entry: {text!r}")
    if any(tok in text for tok in ("__", "lambda", ";", "[", "]", "=")):
        raise ExpressionError(f"illegal token in expression {text!r}")
    local = dict(_FUNCTIONS)
    local["x"] = X
    local["t"] = T
    try:
        expr = parse_expr(
            text,
            local_dict=local,
            global_dict=dict(_PARSER_GLOBALS),
            transformations=standard_transformations,
            evaluate=True,
        )
    except Exception as exc:  # sympy raises a zoo of types here
        raise ExpressionError(f"cannot parse expression {text!r}: {exc}") from exc
    if not isinstance(expr, sp.Expr):
        raise ExpressionError(f"expression {text!r} is not scalar")
    allowed = {X, T} if allow_t else {X}
    extra = expr.free_symbols - allowed
    if extra:
        names = ", ".join(sorted(str(s) for s in extra))
        raise ExpressionError(f"unknown symbol(s) {names} in {text!r}")
    allowed_funcs = (sp.sin, sp.cos, sp.exp, sp.log)
    for node in sp.preorder_traversal(expr):
        if isinstance(node, sp.Function) and not isinstance(node, allowed_funcs):
            raise ExpressionError(f"function {node.func} not in builtin table")
    return expr


def parse_function(entry: Any, allow_t: bool = True) -> sp.Expr:
    """Turn a config entry into a sympy expression in ``x`` (and ``t``)."""
    if isinstance(entry, dict):
        if set(entry) != {"piecewise_t"}:
            raise ExpressionError(f"unknown function object keys {sorted(entry)}")
        if not allow_t:
            raise ExpressionError("piecewise-in-t entry given for a spatial function")
        pieces = entry["piecewise_t"]
        if not pieces:
            raise ExpressionError("empty piecewise_t definition")
        args = []
        last_bound = -np.inf
        for i, piece in enumerate(pieces):
            bound, body = piece
            expr = _parse_scalar(body, allow_t=True)
            if bound is None:
                if i != len(pieces) - 1:
                    raise ExpressionError("only the last piece may omit its bound")
                args.append((expr, True))
            else:
                b = _parse_scalar(bound, allow_t=False)
                if b.free_symbols:
                    raise ExpressionError("piece bounds must be constants")
                if float(b) <= last_bound:
                    raise ExpressionError("piece bounds must increase")
                last_bound = float(b)
                args.append((expr, T < b))
        if args[-1][1] is not True:
            args.append((sp.Integer(0), True))
        return sp.Piecewise(*args)
    return _parse_scalar(entry, allow_t=allow_t)


def parse_constant(entry: Any) -> float:
    expr = _parse_scalar(entry, allow_t=False)
    if expr.free_symbols:
        raise ExpressionError(f"expected a constant, got {entry!r}")
    return float(expr)


def _vectorize(expr: sp.Expr) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    fn = sp.lambdify((X, T), expr, modules="numpy")

    def evaluate(x, t):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        shape = np.broadcast_shapes(x.shape, t.shape)
        out = fn(x, t)
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    return evaluate


@dataclass(frozen=True)
class Function:
    """A problem function with analytic first and second x-derivatives."""

    expr: sp.Expr
    source: Any = None
    _f: Callable = field(init=False, repr=False, compare=False)
    _fx: Callable = field(init=False, repr=False, compare=False)
    _fxx: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_f", _vectorize(self.expr))
        dx = sp.diff(self.expr, X)
        object.__setattr__(self, "_fx", _vectorize(dx))
        object.__setattr__(self, "_fxx", _vectorize(sp.diff(dx, X)))

    @classmethod
    def parse(cls, entry: Any, allow_t: bool = True) -> "Function":
        return cls(parse_function(entry, allow_t=allow_t), source=entry)

    @classmethod
    def constant(cls, value: float) -> "Function":
        return cls(sp.Float(value), source=value)

    @property
    def depends_on_t(self) -> bool:
        return T in self.expr.free_symbols

    @property
    def is_zero(self) -> bool:
        return self.expr == 0

    def __call__(self, x, t=0.0) -> np.ndarray:
        return self._f(x, t)

    def dx(self, x, t=0.0) -> np.ndarray:
        return self._fx(x, t)

    def dxx(self, x, t=0.0) -> np.ndarray:
        return self._fxx(x, t)

    def on_grid(self, x_nodes: np.ndarray, t_nodes: np.ndarray) -> np.ndarray:
        """Sample on the (x, t) tensor grid; shape ``(len(x), len(t))``."""
        return self(x_nodes[:, None], t_nodes[None, :])
