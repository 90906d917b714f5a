"""Symbolic expressions for drifts, potentials and their derivatives.

The grammar is deliberately small: indexed slow variables ``x0, x1, ...`` and
fast variables ``y0, y1, ...``, arithmetic ``+ - * /``, integer powers ``^``,
the functions ``sin``, ``cos``, ``exp``, ``sqrt`` and the named constants
``pi`` and ``sqrt3``.  Expressions evaluate on scalars or numpy arrays
(vectorized over trailing state axes) and differentiate symbolically.  The
only simplification performed anywhere is constant folding; nothing is ever
reordered, so evaluation is deterministic.

Expression objects overload the Python operators, which keeps programmatic
construction readable::

    V = parse("y0^4/4 - y0^2/2")
    f = -apply_generator(V, parse("x0*sin(y0)"))
"""

from __future__ import annotations

import math
import re

import numpy as np

from .errors import DimensionError, DomainError, ExpressionSyntaxError, UsageError

_CONSTANTS = {"pi": math.pi, "sqrt3": math.sqrt(3.0)}
_FUNCTIONS = ("sin", "cos", "exp", "sqrt")

# printer precedence levels
_P_ADD, _P_MUL, _P_NEG, _P_POW, _P_ATOM = 1, 2, 3, 4, 5


def _as_expr(value):
    if isinstance(value, Expression):
        return value
    if isinstance(value, (int, float)):
        return Const(float(value))
    raise UsageError(f"cannot use {type(value).__name__} as an expression")


class Expression:
    """Base node. Subclasses implement evaluate/diff/precedence/text."""

    def evaluate(self, x=None, y=None):
        raise NotImplementedError

    def diff(self, kind: str, index: int) -> "Expression":
        raise NotImplementedError

    def _prec(self) -> int:
        raise NotImplementedError

    def _text(self) -> str:
        raise NotImplementedError

    def __str__(self) -> str:
        return self._text()

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self._text()!r})"

    # arithmetic sugar; all construction goes through the folding helpers
    def __add__(self, other):
        return add(self, _as_expr(other))

    def __radd__(self, other):
        return add(_as_expr(other), self)

    def __sub__(self, other):
        return sub(self, _as_expr(other))

    def __rsub__(self, other):
        return sub(_as_expr(other), self)

    def __mul__(self, other):
        return mul(self, _as_expr(other))

    def __rmul__(self, other):
        return mul(_as_expr(other), self)

    def __truediv__(self, other):
        return div(self, _as_expr(other))

    def __rtruediv__(self, other):
        return div(_as_expr(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return neg(self)

    def variables(self) -> set[tuple[str, int]]:
        """Set of (kind, index) pairs referenced by this expression."""
        out: set[tuple[str, int]] = set()
        _collect_vars(self, out)
        return out


class Const(Expression):
    __slots__ = ("value",)

    def __init__(self, value: float):
        self.value = float(value)

    def evaluate(self, x=None, y=None):
        return self.value

    def diff(self, kind, index):
        return Const(0.0)

    def _prec(self):
        return _P_ATOM if self.value >= 0 else _P_NEG

    def _text(self):
        return repr(self.value)


class Var(Expression):
    __slots__ = ("kind", "index")

    def __init__(self, kind: str, index: int):
        if kind not in ("x", "y"):
            raise UsageError(f"unknown variable kind {kind!r}")
        if index < 0:
            raise UsageError("variable index must be nonnegative")
        self.kind = kind
        self.index = index

    def evaluate(self, x=None, y=None):
        source = x if self.kind == "x" else y
        if source is None:
            raise DimensionError(
                f"expression references {self.kind}{self.index} but no "
                f"{self.kind}-state was supplied"
            )
        arr = np.asarray(source, dtype=float)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if self.index >= arr.shape[-1]:
            raise DimensionError(
                f"variable {self.kind}{self.index} out of range for state of "
                f"dimension {arr.shape[-1]}"
            )
        return arr[..., self.index]

    def diff(self, kind, index):
        if kind == self.kind and index == self.index:
            return Const(1.0)
        return Const(0.0)

    def _prec(self):
        return _P_ATOM

    def _text(self):
        return f"{self.kind}{self.index}"


class _Binary(Expression):
    __slots__ = ("left", "right")
    op = "?"

    def __init__(self, left: Expression, right: Expression):
        self.left = left
        self.right = right

    def _text(self):
        lp, rp = self._prec(), self._prec()
        left = self.left._text()
        if self.left._prec() < lp:
            left = f"({left})"
        right = self.right._text()
        # parens on equal-precedence right operands keep the grouping, so a
        # reparse evaluates with identical floating-point association
        if self.right._prec() <= rp:
            right = f"({right})"
        return f"{left} {self.op} {right}"


class Add(_Binary):
    op = "+"

    def evaluate(self, x=None, y=None):
        return self.left.evaluate(x, y) + self.right.evaluate(x, y)

    def diff(self, kind, index):
        return add(self.left.diff(kind, index), self.right.diff(kind, index))

    def _prec(self):
        return _P_ADD


class Sub(_Binary):
    op = "-"

    def evaluate(self, x=None, y=None):
        return self.left.evaluate(x, y) - self.right.evaluate(x, y)

    def diff(self, kind, index):
        return sub(self.left.diff(kind, index), self.right.diff(kind, index))

    def _prec(self):
        return _P_ADD


class Mul(_Binary):
    op = "*"

    def evaluate(self, x=None, y=None):
        return self.left.evaluate(x, y) * self.right.evaluate(x, y)

    def diff(self, kind, index):
        return add(
            mul(self.left.diff(kind, index), self.right),
            mul(self.left, self.right.diff(kind, index)),
        )

    def _prec(self):
        return _P_MUL


class Div(_Binary):
    op = "/"

    def evaluate(self, x=None, y=None):
        num = self.left.evaluate(x, y)
        den = self.right.evaluate(x, y)
        if np.any(np.asarray(den) == 0.0):
            raise DomainError(f"division by zero in {self._text()!r}")
        return num / den

    def diff(self, kind, index):
        # (u/v)' = u'/v - u v' / v^2
        u, v = self.left, self.right
        return sub(
            div(u.diff(kind, index), v),
            div(mul(u, v.diff(kind, index)), mul(v, v)),
        )

    def _prec(self):
        return _P_MUL


class Pow(Expression):
    __slots__ = ("base", "exponent")

    def __init__(self, base: Expression, exponent: int):
        if not isinstance(exponent, int) or exponent < 0:
            raise UsageError("^ requires a nonnegative integer exponent")
        self.base = base
        self.exponent = exponent

    def evaluate(self, x=None, y=None):
        return self.base.evaluate(x, y) ** self.exponent

    def diff(self, kind, index):
        if self.exponent == 0:
            return Const(0.0)
        return mul(
            mul(Const(float(self.exponent)), power(self.base, self.exponent - 1)),
            self.base.diff(kind, index),
        )

    def _prec(self):
        return _P_POW

    def _text(self):
        base = self.base._text()
        if self.base._prec() < _P_POW:
            base = f"({base})"
        return f"{base}^{self.exponent}"


class Neg(Expression):
    __slots__ = ("arg",)

    def __init__(self, arg: Expression):
        self.arg = arg

    def evaluate(self, x=None, y=None):
        return -self.arg.evaluate(x, y)

    def diff(self, kind, index):
        return neg(self.arg.diff(kind, index))

    def _prec(self):
        return _P_NEG

    def _text(self):
        inner = self.arg._text()
        if self.arg._prec() < _P_NEG:
            inner = f"({inner})"
        return f"-{inner}"


class Fun(Expression):
    __slots__ = ("name", "arg")

    def __init__(self, name: str, arg: Expression):
        if name not in _FUNCTIONS:
            raise UsageError(f"unknown function {name!r}")
        self.name = name
        self.arg = arg

    def evaluate(self, x=None, y=None):
        v = self.arg.evaluate(x, y)
        if self.name == "sin":
            return np.sin(v)
        if self.name == "cos":
            return np.cos(v)
        if self.name == "exp":
            return np.exp(v)
        if np.any(np.asarray(v) < 0.0):
            raise DomainError(f"sqrt of negative value in {self._text()!r}")
        return np.sqrt(v)

    def diff(self, kind, index):
        inner = self.arg.diff(kind, index)
        if self.name == "sin":
            return mul(Fun("cos", self.arg), inner)
        if self.name == "cos":
            return neg(mul(Fun("sin", self.arg), inner))
        if self.name == "exp":
            return mul(self, inner)
        return div(inner, mul(Const(2.0), self))

    def _prec(self):
        return _P_ATOM

    def _text(self):
        return f"{self.name}({self.arg._text()})"


def _collect_vars(node: Expression, out: set) -> None:
    if isinstance(node, Var):
        out.add((node.kind, node.index))
    elif isinstance(node, _Binary):
        _collect_vars(node.left, out)
        _collect_vars(node.right, out)
    elif isinstance(node, Pow):
        _collect_vars(node.base, out)
    elif isinstance(node, (Neg, Fun)):
        _collect_vars(node.arg, out)


# ---------------------------------------------------------------------------
# folding constructors

def _const_of(e):
    return e.value if isinstance(e, Const) else None


def add(a: Expression, b: Expression) -> Expression:
    ca, cb = _const_of(a), _const_of(b)
    if ca is not None and cb is not None:
        return Const(ca + cb)
    if ca == 0.0:
        return b
    if cb == 0.0:
        return a
    return Add(a, b)


def sub(a: Expression, b: Expression) -> Expression:
    ca, cb = _const_of(a), _const_of(b)
    if ca is not None and cb is not None:
        return Const(ca - cb)
    if cb == 0.0:
        return a
    if ca == 0.0:
        return neg(b)
    return Sub(a, b)


def mul(a: Expression, b: Expression) -> Expression:
    ca, cb = _const_of(a), _const_of(b)
    if ca is not None and cb is not None:
        return Const(ca * cb)
    if ca == 0.0 or cb == 0.0:
        return Const(0.0)
    if ca == 1.0:
        return b
    if cb == 1.0:
        return a
    return Mul(a, b)


def div(a: Expression, b: Expression) -> Expression:
    ca, cb = _const_of(a), _const_of(b)
    if cb is not None and cb != 0.0:
        if ca is not None:
            return Const(ca / cb)
        if cb == 1.0:
            return a
    if ca == 0.0 and (cb is None or cb != 0.0):
        return Const(0.0)
    return Div(a, b)


def power(base: Expression, exponent: int) -> Expression:
    if not isinstance(exponent, int) or exponent < 0:
        raise UsageError("^ requires a nonnegative integer exponent")
    if exponent == 0:
        return Const(1.0)
    if exponent == 1:
        return base
    c = _const_of(base)
    if c is not None:
        return Const(c**exponent)
    return Pow(base, exponent)


def neg(a: Expression) -> Expression:
    c = _const_of(a)
    if c is not None:
        return Const(-c)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


# ---------------------------------------------------------------------------
# parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
    r"|\d+(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[+\-*/^()]))"
)


def _tokenize(text: str):
    pos = 0
    tokens = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            # skip leading whitespace already handled by \s*; a dead match is bad input
            raise ExpressionSyntaxError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup is not None:
            tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


_VAR_RE = re.compile(r"^([xy])(\d+)$")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.at = 0

    def peek(self):
        return self.tokens[self.at]

    def advance(self):
        tok = self.tokens[self.at]
        self.at += 1
        return tok

    def expect_op(self, op: str):
        kind, value, pos = self.peek()
        if kind != "op" or value != op:
            raise ExpressionSyntaxError(f"expected {op!r}", pos)
        return self.advance()

    def parse(self) -> Expression:
        e = self.expr()
        kind, value, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"trailing input {value!r}", pos)
        return e

    def expr(self) -> Expression:
        node = self.term()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "+-":
                self.advance()
                rhs = self.term()
                node = add(node, rhs) if value == "+" else sub(node, rhs)
            else:
                return node

    def term(self) -> Expression:
        node = self.unary()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "*/":
                self.advance()
                rhs = self.unary()
                node = mul(node, rhs) if value == "*" else div(node, rhs)
            else:
                return node

    def unary(self) -> Expression:
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.advance()
            return neg(self.unary())
        return self.powered()

    def powered(self) -> Expression:
        node = self.atom()
        while True:
            kind, value, pos = self.peek()
            if kind == "op" and value == "^":
                self.advance()
                nkind, nvalue, npos = self.peek()
                if nkind != "number" or not re.fullmatch(r"\d+", nvalue):
                    raise ExpressionSyntaxError(
                        "exponent must be a nonnegative integer literal", npos
                    )
                self.advance()
                node = power(node, int(nvalue))
            else:
                return node

    def atom(self) -> Expression:
        kind, value, pos = self.advance()
        if kind == "number":
            return Const(float(value))
        if kind == "ident":
            m = _VAR_RE.match(value)
            if m:
                return Var(m.group(1), int(m.group(2)))
            if value in _CONSTANTS:
                return Const(_CONSTANTS[value])
            if value in _FUNCTIONS:
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                return Fun(value, arg)
            raise ExpressionSyntaxError(f"unknown identifier {value!r}", pos)
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ExpressionSyntaxError(f"unexpected token {value!r}", pos)


def parse(text: str) -> Expression:
    """Parse expression text into an AST.

    Raises ExpressionSyntaxError (with position) on malformed input.
    """
    if not isinstance(text, str) or not text.strip():
        raise ExpressionSyntaxError("empty expression", 0)
    return _Parser(text.rstrip()).parse()


def differentiate(e: Expression, kind: str, index: int) -> Expression:
    """Exact partial derivative with respect to x<index> or y<index>."""
    if kind not in ("x", "y"):
        raise UsageError(f"unknown variable kind {kind!r}")
    if index < 0:
        raise UsageError("variable index must be nonnegative")
    return e.diff(kind, index)


def fast_dimension(*exprs: Expression) -> int:
    """1 + largest y-index referenced by any of the expressions (0 if none)."""
    top = -1
    for e in exprs:
        for kind, idx in e.variables():
            if kind == "y" and idx > top:
                top = idx
    return top + 1


def apply_generator(V: Expression, g: Expression) -> Expression:
    """Generator of the gradient fast dynamics applied to g.

    Returns laplacian_y(g) - grad_y(V) . grad_y(g), built from the same
    differentiate calls a caller would make.  Drifts of the form
    f = -apply_generator(V, g) are mean-zero under exp(-V) by construction.
    """
    n = fast_dimension(V, g)
    out: Expression = Const(0.0)
    for i in range(n):
        gi = differentiate(g, "y", i)
        out = add(out, differentiate(gi, "y", i))
        out = sub(out, mul(differentiate(V, "y", i), gi))
    return out
