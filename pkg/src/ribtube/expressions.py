"""Function specs for scenario configs.

A function spec is either a number, an expression string over a fixed catalog
(``sin``, ``cos``, ``tan``, ``sinh``, ``cosh``, ``tanh``, ``exp``, ``log``,
``sqrt``, ``atan``, the constants ``pi`` and ``E``, polynomials in the named
variables), or a sample reference ``"file:path"`` to a whitespace-separated
two-column text file ``(s, value)`` in one variable.

Expressions are parsed by walking the Python AST of the string, so nothing
is ever evaluated; only the whitelisted node types are accepted.  Derivatives
of expressions are exact (sympy), those of samples come from a cubic spline.
"""
from __future__ import annotations

import ast
from pathlib import Path
from typing import Sequence

import numpy as np
import sympy as sp
from scipy.interpolate import CubicSpline


class ExpressionError(ValueError):
    pass


FUNCTIONS = {
    "sin": sp.sin, "cos": sp.cos, "tan": sp.tan,
    "sinh": sp.sinh, "cosh": sp.cosh, "tanh": sp.tanh,
    "exp": sp.exp, "log": sp.log, "sqrt": sp.sqrt, "atan": sp.atan,
}
CONSTANTS = {"pi": sp.pi, "E": sp.E}

_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a ** b,
}


def _convert(node, symbols: dict):
    if isinstance(node, ast.Expression):
        return _convert(node.body, symbols)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return sp.Integer(node.value) if isinstance(node.value, int) else sp.Float(node.value, 17)
    if isinstance(node, ast.Name):
        if node.id in symbols:
            return symbols[node.id]
        if node.id in CONSTANTS:
            return CONSTANTS[node.id]
        raise ExpressionError(f"unknown name {node.id!r} (variables: {', '.join(symbols) or 'none'})")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_convert(node.left, symbols), _convert(node.right, symbols))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _convert(node.operand, symbols)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
            name = getattr(node.func, "id", ast.dump(node.func))
            raise ExpressionError(f"function {name!r} is not in the catalog ({', '.join(sorted(FUNCTIONS))})")
        if node.keywords or len(node.args) != 1:
            raise ExpressionError(f"{node.func.id} takes exactly one positional argument")
        return FUNCTIONS[node.func.id](_convert(node.args[0], symbols))
    raise ExpressionError(f"unsupported syntax: {ast.dump(node)[:60]}")


def parse(text, variables: Sequence[str]) -> sp.Expr:
    """Sympy expression from a catalog expression string or a number."""
    symbols = {v: sp.Symbol(v, real=True) for v in variables}
    if isinstance(text, bool):
        raise ExpressionError("booleans are not function specs")
    if isinstance(text, (int, float)):
        return sp.Float(text, 17) if isinstance(text, float) else sp.Integer(text)
    if not isinstance(text, str):
        raise ExpressionError(f"expected an expression string or number, got {type(text).__name__}")
    try:
        # "^" is a power; rewrite it before parsing so it binds like "**"
        tree = ast.parse(text.strip().replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    return _convert(tree, symbols)


def _vectorize(fn, n_args: int):
    def call(*args):
        args = [np.asarray(a, dtype=float) for a in args[:n_args]]
        shape = np.broadcast_shapes(*[a.shape for a in args]) if args else ()
        return np.broadcast_to(np.asarray(fn(*args), dtype=float), shape).copy()
    return call


class Function:
    """A scalar function of named variables with exact partial derivatives.

    ``f(*arrays)`` evaluates, ``f.d(i)`` / ``f.d2(i, j)`` return derivative
    callables.  ``source`` is the original spec, kept for reports.
    """

    def __init__(self, expr: sp.Expr, variables: Sequence[str], source=None):
        self.variables = tuple(variables)
        self.symbols = tuple(sp.Symbol(v, real=True) for v in self.variables)
        self.expr = expr
        self.source = source
        self._fn = _vectorize(sp.lambdify(self.symbols, expr, "numpy"), len(self.symbols))

    def __call__(self, *args):
        return self._fn(*args)

    def derivative(self, *wrt) -> "Function":
        e = self.expr
        for w in wrt:
            e = sp.diff(e, self.symbols[self.variables.index(w) if isinstance(w, str) else w])
        return Function(e, self.variables, source=None)

    def d(self, i=0):
        return self.derivative(i)

    def d2(self, i=0, j=0):
        return self.derivative(i, j)

    @property
    def is_constant(self) -> bool:
        return not (self.expr.free_symbols & set(self.symbols))

    def __repr__(self):
        return f"Function({self.expr}, {self.variables})"


class SampledFunction:
    """One-variable function from (s, value) samples with spline derivatives."""

    def __init__(self, s, values, source=None):
        s = np.asarray(s, dtype=float)
        v = np.asarray(values, dtype=float)
        if s.ndim != 1 or s.shape != v.shape or len(s) < 4:
            raise ExpressionError("sample files need two columns and at least 4 rows")
        if np.any(np.diff(s) <= 0):
            raise ExpressionError("sample abscissae must be strictly increasing")
        self.s = s
        self.values = v
        self.source = source
        self._spl = CubicSpline(s, v)
        self.variables = ("s",)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.s[0], self.s[-1]
        span = hi - lo
        if np.any(x < lo - 1e-12 * span) or np.any(x > hi + 1e-12 * span):
            raise ExpressionError(f"sample file {self.source} does not cover [{x.min()}, {x.max()}]")
        return self._spl(x)

    def d(self, i=0):
        return _SplineDerivative(self._spl, 1)

    def d2(self, i=0, j=0):
        return _SplineDerivative(self._spl, 2)

    @property
    def is_constant(self) -> bool:
        return False


class _SplineDerivative:
    def __init__(self, spl, order):
        self._spl = spl
        self._order = order

    def __call__(self, x):
        return self._spl(np.asarray(x, dtype=float), self._order)


def function(spec, variables: Sequence[str], base_dir=None):
    """Compile a function spec (number, expression or ``file:`` reference)."""
    if isinstance(spec, str) and spec.strip().startswith("file:"):
        if len(variables) != 1:
            raise ExpressionError("sample files describe functions of one variable")
        path = Path(spec.strip()[5:].strip())
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        try:
            data = np.loadtxt(path, ndmin=2)
        except OSError as exc:
            raise ExpressionError(f"cannot read sample file {path}: {exc.strerror or exc}") from None
        except ValueError as exc:
            raise ExpressionError(f"malformed sample file {path}: {exc}") from None
        if data.shape[1] != 2:
            raise ExpressionError(f"sample file {path} must have two columns (s, value)")
        return SampledFunction(data[:, 0], data[:, 1], source=str(path))
    return Function(parse(spec, variables), variables, source=spec)


def vector(specs, variables: Sequence[str]) -> list:
    """List of expression Functions (sample files are not accepted for vectors)."""
    if not isinstance(specs, (list, tuple)) or not specs:
        raise ExpressionError("expected a non-empty list of component expressions")
    return [Function(parse(s, variables), variables, source=s) for s in specs]


def vector_expr(specs, variables: Sequence[str]) -> sp.Matrix:
    if not isinstance(specs, (list, tuple)) or not specs:
        raise ExpressionError("expected a non-empty list of component expressions")
    return sp.Matrix([parse(s, variables) for s in specs])


def lambdify_vector(exprs: sp.Matrix, variables: Sequence[str]):
    """Callable returning an array of shape broadcast(args) + (len(exprs),)."""
    fns = [Function(e, variables) for e in exprs]

    def call(*args):
        return np.stack([f(*args) for f in fns], axis=-1)
    return call
