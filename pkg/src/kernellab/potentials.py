"""Potentials q(u, z) and the expression mini-language.

Variants: constant, time-only (expression or table), expression over
(u, z1..zd), gridded samples with multilinear interpolation, and the
power law |z|^(eps - alpha).  Every potential carries its sign
decomposition q = q_plus - q_minus and an optional known sup bound.

The expression grammar: identifiers u, z1..zd; binary + - * / ^ with ^
binding tightest and right-associative; unary minus; functions sin, cos,
exp, abs, sqrt, min, max; decimal literals; parentheses.  Parse errors
report line and column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigError

# ---------------------------------------------------------------------------
# expression mini-language
# ---------------------------------------------------------------------------

_FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "abs": np.abs,
    "sqrt": np.sqrt,
    "min": np.minimum,
    "max": np.maximum,
}

_FUN_ARITY = {"sin": 1, "cos": 1, "exp": 1, "abs": 1, "sqrt": 1, "min": 2, "max": 2}


class _Token:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind = kind
        self.text = text
        self.line = line
        self.col = col


def _tokenize(source: str):
    tokens = []
    line, col = 1, 1
    i = 0
    n = len(source)
    while i < n:
        ch = source[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch.isspace():
            i += 1
            col += 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and source[i + 1].isdigit()):
            j = i
            seen_e = False
            while j < n and (source[j].isdigit() or source[j] == "."
                             or source[j] in "eE"
                             or (source[j] in "+-" and source[j - 1] in "eE")):
                if source[j] in "eE":
                    if seen_e:
                        break
                    seen_e = True
                j += 1
            text = source[i:j]
            try:
                float(text)
            except ValueError:
                raise ConfigError(f"malformed number {text!r}", line, col)
            tokens.append(_Token("number", text, line, col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(_Token("name", source[i:j], line, col))
            col += j - i
            i = j
            continue
        if ch in "+-*/^(),":
            tokens.append(_Token(ch, ch, line, col))
            i += 1
            col += 1
            continue
        raise ConfigError(f"unexpected character {ch!r}", line, col)
    tokens.append(_Token("end", "", line, col))
    return tokens


class _Parser:
    """Recursive descent over the token stream; produces a nested tuple AST."""

    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0
        self.max_dim = 0

    def peek(self):
        return self.tokens[self.pos]

    def take(self, kind=None):
        tok = self.tokens[self.pos]
        if kind is not None and tok.kind != kind:
            raise ConfigError(f"expected {kind!r}, found {tok.text or 'end of input'!r}",
                              tok.line, tok.col)
        self.pos += 1
        return tok

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ConfigError(f"unexpected {tok.text!r}", tok.line, tok.col)
        return node

    def expr(self):
        node = self.term()
        while self.peek().kind in "+-":
            op = self.take().kind
            rhs = self.term()
            node = (op, node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek().kind in "*/":
            op = self.take().kind
            rhs = self.unary()
            node = (op, node, rhs)
        return node

    def unary(self):
        if self.peek().kind == "-":
            self.take()
            return ("neg", self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek().kind == "^":
            self.take()
            return ("^", base, self.unary())  # right-associative
        return base

    def atom(self):
        tok = self.peek()
        if tok.kind == "number":
            self.take()
            return ("lit", float(tok.text))
        if tok.kind == "name":
            self.take()
            name = tok.text
            if self.peek().kind == "(":
                if name not in _FUNCTIONS:
                    raise ConfigError(f"unknown function {name!r}", tok.line, tok.col)
                self.take("(")
                args = [self.expr()]
                while self.peek().kind == ",":
                    self.take()
                    args.append(self.expr())
                self.take(")")
                if len(args) != _FUN_ARITY[name]:
                    raise ConfigError(
                        f"{name} takes {_FUN_ARITY[name]} argument(s), got {len(args)}",
                        tok.line, tok.col)
                return ("call", name, args)
            if name == "u":
                return ("u",)
            if name.startswith("z") and name[1:].isdigit():
                idx = int(name[1:])
                if idx < 1:
                    raise ConfigError("coordinate indices start at z1", tok.line, tok.col)
                self.max_dim = max(self.max_dim, idx)
                return ("z", idx - 1)
            raise ConfigError(f"unknown identifier {name!r}", tok.line, tok.col)
        if tok.kind == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        raise ConfigError(f"unexpected {tok.text or 'end of input'!r}", tok.line, tok.col)


def _eval_ast(node, u, z):
    kind = node[0]
    if kind == "lit":
        return node[1]
    if kind == "u":
        return u
    if kind == "z":
        return z[..., node[1]]
    if kind == "neg":
        return -_eval_ast(node[1], u, z)
    if kind == "call":
        args = [_eval_ast(a, u, z) for a in node[2]]
        return _FUNCTIONS[node[1]](*args)
    a = _eval_ast(node[1], u, z)
    b = _eval_ast(node[2], u, z)
    if kind == "+":
        return a + b
    if kind == "-":
        return a - b
    if kind == "*":
        return a * b
    if kind == "/":
        with np.errstate(divide="ignore", invalid="ignore"):
            return a / b
    if kind == "^":
        with np.errstate(invalid="ignore"):
            return a ** b
    raise AssertionError(f"unhandled node {kind}")


def parse_expression(source: str):
    """Parse a mini-language expression; returns (ast, needed dimension)."""
    parser = _Parser(_tokenize(source))
    ast = parser.parse()
    return ast, parser.max_dim


# ---------------------------------------------------------------------------
# potential variants
# ---------------------------------------------------------------------------

class Potential:
    """Base class: a real function of (u, z) with sign decomposition.

    Evaluation is vectorized: u is a scalar or an array broadcastable
    against z[..., 0]; z has shape (..., d).  Subclasses set known_sup
    when a hard sup bound on |q| is available and may expose integrable
    singularity hints as (location, exponent) pairs.
    """

    known_sup: float | None = None
    singularities: tuple = ()

    def __call__(self, u, z):
        raise NotImplementedError

    def absolute(self) -> "Potential":
        return _Mapped(self, np.abs, self.known_sup)

    def positive_part(self) -> "Potential":
        return _Mapped(self, lambda v: np.maximum(v, 0.0), self.known_sup)

    def negative_part(self) -> "Potential":
        return _Mapped(self, lambda v: np.maximum(-v, 0.0), self.known_sup)

    def time_reversed(self) -> "Potential":
        return _TimeReversed(self)

    def scaled(self, factor: float) -> "Potential":
        sup = abs(factor) * self.known_sup if self.known_sup is not None else None
        return _Mapped(self, lambda v: factor * v, sup)


class _Mapped(Potential):
    def __init__(self, base, fn, known_sup=None):
        self.base = base
        self.fn = fn
        self.known_sup = known_sup
        self.singularities = base.singularities

    def __call__(self, u, z):
        return self.fn(self.base(u, z))


class _TimeReversed(Potential):
    def __init__(self, base):
        self.base = base
        self.known_sup = base.known_sup
        self.singularities = base.singularities

    def __call__(self, u, z):
        return self.base(-np.asarray(u, dtype=float), z)


class SumPotential(Potential):
    def __init__(self, a: Potential, b: Potential):
        self.a = a
        self.b = b
        if a.known_sup is not None and b.known_sup is not None:
            self.known_sup = a.known_sup + b.known_sup
        self.singularities = tuple(a.singularities) + tuple(b.singularities)

    def __call__(self, u, z):
        return self.a(u, z) + self.b(u, z)


class ConstantPotential(Potential):
    def __init__(self, c: float):
        self.c = float(c)
        self.known_sup = abs(self.c)

    def __call__(self, u, z):
        base = np.zeros(np.broadcast_shapes(np.shape(u), np.shape(z)[:-1]))
        return base + self.c

    def __repr__(self):
        return f"ConstantPotential({self.c})"


class TimeOnlyPotential(Potential):
    """q(u, z) = q(u): either an expression in u or a linear-interpolation
    table.  Tables evaluate to 0 outside their sampled range."""

    def __init__(self, expression: str | None = None,
                 times=None, values=None, known_sup: float | None = None):
        if (expression is None) == (times is None):
            raise ValueError("give exactly one of expression or (times, values)")
        self.known_sup = known_sup
        if expression is not None:
            ast, dim = parse_expression(expression)
            if dim > 0:
                raise ValueError("time-only potential must not reference z coordinates")
            self._ast = ast
            self._table = None
            self.expression = expression
        else:
            times = np.asarray(times, dtype=float)
            values = np.asarray(values, dtype=float)
            if times.ndim != 1 or times.shape != values.shape or not np.all(np.diff(times) > 0):
                raise ValueError("table needs strictly increasing times and matching values")
            self._ast = None
            self._table = (times, values)
            if known_sup is None:
                self.known_sup = float(np.max(np.abs(values)))

    def __call__(self, u, z):
        u = np.asarray(u, dtype=float)
        if self._ast is not None:
            vals = _eval_ast(self._ast, u, None)
        else:
            ts, vs = self._table
            vals = np.interp(u, ts, vs, left=0.0, right=0.0)
        shape = np.broadcast_shapes(np.shape(u), np.shape(z)[:-1])
        return np.broadcast_to(np.asarray(vals, dtype=float), shape).copy()


class ExpressionPotential(Potential):
    def __init__(self, source: str, known_sup: float | None = None):
        self.source = source
        self._ast, self.dimension = parse_expression(source)
        self.known_sup = known_sup

    def __call__(self, u, z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] < self.dimension:
            raise ValueError(
                f"expression references z{self.dimension} but points have "
                f"dimension {z.shape[-1]}")
        vals = _eval_ast(self._ast, np.asarray(u, dtype=float), z)
        shape = np.broadcast_shapes(np.shape(u), z.shape[:-1])
        return np.broadcast_to(np.asarray(vals, dtype=float), shape).copy()

    def __repr__(self):
        return f"ExpressionPotential({self.source!r})"


class GridPotential(Potential):
    """Multilinear interpolation of samples on a (u, z) grid, 0 outside."""

    def __init__(self, times, points, values, known_sup: float | None = None):
        times = np.asarray(times, dtype=float)
        points = np.asarray(points, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.shape != (times.size, points.size):
            raise ValueError("values must have shape (len(times), len(points))")
        self._interp = RegularGridInterpolator(
            (times, points), values, method="linear",
            bounds_error=False, fill_value=0.0)
        self.known_sup = known_sup if known_sup is not None else float(np.max(np.abs(values)))

    def __call__(self, u, z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != 1:
            raise ValueError("grid potential is 1-d in space")
        u = np.broadcast_to(np.asarray(u, dtype=float), z.shape[:-1])
        pts = np.stack([u.ravel(), z[..., 0].ravel()], axis=-1)
        return self._interp(pts).reshape(z.shape[:-1])


class PowerLawPotential(Potential):
    """q(u, z) = |z|^(eps - alpha), the reference unbounded example.

    Requires 0 < eps <= alpha so the potential is integrable against the
    kernel near the origin.  Evaluation at z = 0 returns inf; quadrature
    node placement never lands there exactly.
    """

    def __init__(self, eps: float, alpha: float):
        if not 0.0 < eps <= alpha:
            raise ValueError("need 0 < eps <= alpha")
        self.eps = eps
        self.alpha = alpha
        self.exponent = alpha - eps
        self.singularities = ((0.0, self.exponent),) if self.exponent > 0 else ()

    def __call__(self, u, z):
        z = np.asarray(z, dtype=float)
        r = np.sqrt(np.sum(z * z, axis=-1))
        with np.errstate(divide="ignore"):
            vals = r ** (-self.exponent)
        shape = np.broadcast_shapes(np.shape(u), z.shape[:-1])
        return np.broadcast_to(vals, shape).copy()


ZERO = ConstantPotential(0.0)
