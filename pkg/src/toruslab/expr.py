"""Scalar expressions over named coordinates with forward-mode derivatives.

Grammar (standard precedence, ``^`` right-associative)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | '+' unary | power
    power   := atom ('^' unary)?
    atom    := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Exponents must fold to an integer constant.  Supported functions are
``sqrt``, ``sin`` and ``cos``; ``pi`` is a literal.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Dual",
    "DomainError",
    "Expression",
    "ExpressionSyntaxError",
    "Node",
    "gradient",
    "hessian",
    "jacobian",
    "parse",
]

FUNCTIONS = ("sqrt", "sin", "cos")


class ExpressionSyntaxError(ValueError):
    """Raised for malformed expression text; ``offset`` is a byte offset."""

    def __init__(self, message: str, offset: int, text: str = ""):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset
        self.text = text


class DomainError(ArithmeticError):
    """Division by zero or square root of a negative number."""


# ---------------------------------------------------------------------------
# Dual numbers
# ---------------------------------------------------------------------------


def _lift(x):
    """Append a length-1 axis so a value broadcasts against a tangent."""
    if isinstance(x, Dual):
        return x[..., None]
    return np.asarray(x)[..., None]


class Dual:
    """Forward-mode dual number carrying several tangent directions at once.

    ``val`` has shape ``S`` and ``der`` has shape ``S + (k,)``.  Both may
    themselves be :class:`Dual` instances, which gives forward-over-forward
    second derivatives without any extra machinery.
    """

    __slots__ = ("val", "der")
    __array_priority__ = 100

    def __init__(self, val, der):
        self.val = val
        self.der = der

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.val[idx], self.der[idx + (slice(None),)])

    def __repr__(self):
        return f"Dual({self.val!r}, {self.der!r})"

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.der + other.der)
        return Dual(self.val + other, self.der)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.der - other.der)
        return Dual(self.val - other, self.der)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.der)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                _lift(self.val) * other.der + _lift(other.val) * self.der,
            )
        return Dual(self.val * other, self.der * _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            _check_nonzero(other.val)
            q = self.val / other.val
            return Dual(q, (self.der - _lift(q) * other.der) / _lift(other.val))
        _check_nonzero(other)
        return Dual(self.val / other, self.der / _lift(other))

    def __rtruediv__(self, other):
        _check_nonzero(self.val)
        q = other / self.val
        return Dual(q, -_lift(q / self.val) * self.der)

    def __pow__(self, n):
        if not isinstance(n, (int, np.integer)):
            raise TypeError("Dual supports integer powers only")
        n = int(n)
        if n == 0:
            return Dual(self.val * 0 + 1, self.der * 0)
        if n < 0:
            _check_nonzero(self.val)
        return Dual(self.val**n, _lift(n * self.val ** (n - 1)) * self.der)

    def sqrt(self):
        s = _sqrt(self.val)
        _check_nonzero(s)
        return Dual(s, self.der / _lift(2 * s))

    def sin(self):
        return Dual(_sin(self.val), _lift(_cos(self.val)) * self.der)

    def cos(self):
        return Dual(_cos(self.val), -_lift(_sin(self.val)) * self.der)


def _base_value(x):
    while isinstance(x, Dual):
        x = x.val
    return x


def _check_nonzero(x):
    if np.any(np.asarray(_base_value(x)) == 0):
        raise DomainError("division by zero")


def _sqrt(x):
    if isinstance(x, Dual):
        return x.sqrt()
    if np.any(np.asarray(x) < 0):
        raise DomainError("square root of a negative number")
    return np.sqrt(x)


def _sin(x):
    return x.sin() if isinstance(x, Dual) else np.sin(x)


def _cos(x):
    return x.cos() if isinstance(x, Dual) else np.cos(x)


def _power(x, n):
    if not isinstance(x, Dual) and n < 0:
        _check_nonzero(x)
        return 1.0 / np.asarray(x, dtype=float) ** (-n)
    return x**n


_FUNC_IMPL = {"sqrt": _sqrt, "sin": _sin, "cos": _cos}


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    """Expression tree node.

    ``kind`` is one of ``const``, ``var``, ``pi``, ``neg``, ``add``, ``sub``,
    ``mul``, ``div``, ``pow``, ``call``.  ``value`` holds the constant, the
    variable index, the integer exponent or the function name.
    """

    kind: str
    args: tuple = ()
    value: object = None


def _compile(node: Node) -> Callable:
    k = node.kind
    if k == "const":
        c = float(node.value)
        return lambda xs: c
    if k == "pi":
        return lambda xs: math.pi
    if k == "var":
        i = node.value
        return lambda xs: xs[i]
    if k == "neg":
        f = _compile(node.args[0])
        return lambda xs: -f(xs)
    if k == "pow":
        f, n = _compile(node.args[0]), node.value
        return lambda xs: _power(f(xs), n)
    if k == "call":
        f, g = _compile(node.args[0]), _FUNC_IMPL[node.value]
        return lambda xs: g(f(xs))
    a, b = (_compile(arg) for arg in node.args)
    if k == "add":
        return lambda xs: a(xs) + b(xs)
    if k == "sub":
        return lambda xs: a(xs) - b(xs)
    if k == "mul":
        return lambda xs: a(xs) * b(xs)
    if k == "div":
        def div(xs):
            den = b(xs)
            if not isinstance(den, Dual):
                _check_nonzero(den)
            return a(xs) / den
        return div
    raise ValueError(f"unknown node kind {k!r}")


def _to_text(node: Node, names: Sequence[str]) -> str:
    k = node.kind
    if k == "const":
        v = float(node.value)
        return repr(v) if v >= 0 else f"(-{repr(-v)})"
    if k == "pi":
        return "pi"
    if k == "var":
        return names[node.value]
    if k == "neg":
        return f"(-{_to_text(node.args[0], names)})"
    if k == "pow":
        n = node.value
        exp = str(n) if n >= 0 else f"(-{-n})"
        return f"({_to_text(node.args[0], names)})^{exp}"
    if k == "call":
        return f"{node.value}({_to_text(node.args[0], names)})"
    op = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[k]
    a, b = (_to_text(arg, names) for arg in node.args)
    return f"({a} {op} {b})"


def _max_var(node: Node) -> int:
    if node.kind == "var":
        return node.value
    return max((_max_var(a) for a in node.args), default=-1)


class Expression:
    """Immutable parsed expression of fixed arity.

    Evaluation accepts either a single point of length ``arity`` or a batch
    of points with shape ``(n, arity)``.
    """

    __slots__ = ("ast", "arity", "coords", "source", "_fn")

    def __init__(self, ast: Node, coords: Sequence[str], source: str | None = None):
        coords = tuple(coords)
        if _max_var(ast) >= len(coords):
            raise ValueError("variable index out of range for arity")
        self.ast = ast
        self.coords = coords
        self.arity = len(coords)
        self.source = source
        self._fn = _compile(ast)

    def __repr__(self):
        return f"Expression({self.to_text()!r})"

    def to_text(self) -> str:
        return _to_text(self.ast, self.coords)

    @property
    def is_constant(self) -> bool:
        return _max_var(self.ast) < 0

    def _columns(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.arity:
            raise ValueError(f"expected {self.arity} coordinates, got {p.shape[-1]}")
        return [p[..., i] for i in range(self.arity)]

    def __call__(self, p):
        return self.eval(p)

    def eval(self, p):
        cols = self._columns(p)
        out = self._fn(cols)
        shape = np.shape(cols[0]) if cols else ()
        out = np.broadcast_to(np.asarray(out, dtype=float), shape)
        return float(out) if out.ndim == 0 else np.array(out)

    def eval_generic(self, xs: Sequence):
        """Evaluate with arbitrary per-coordinate objects (e.g. :class:`Dual`)."""
        return self._fn(list(xs))


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExpressionSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


def _fold_constant(node: Node):
    """Return the float value of a variable-free subtree, else ``None``."""
    if _max_var(node) >= 0:
        return None
    try:
        return float(Expression(node, ()).eval(np.zeros(0)))
    except (DomainError, OverflowError, ZeroDivisionError):
        return None


class _Parser:
    def __init__(self, text: str, coords: Sequence[str]):
        self.text = text
        self.index = {name: i for i, name in enumerate(coords)}
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, msg, offset):
        raise ExpressionSyntaxError(msg, offset, self.text)

    def parse(self) -> Node:
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            self.error(f"unexpected token {val!r}", off)
        return node

    def _operand(self, parse_fn, op_tok):
        kind, val, _ = self.peek()
        starts_operand = kind in ("num", "name") or val in ("(", "-", "+")
        if not starts_operand:
            self.error(f"expected operand after {op_tok[1]!r}", op_tok[2])
        return parse_fn()

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            tok = self.take()
            rhs = self._operand(self.term, tok)
            node = Node("add" if tok[1] == "+" else "sub", (node, rhs))
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            tok = self.take()
            rhs = self._operand(self.unary, tok)
            node = Node("mul" if tok[1] == "*" else "div", (node, rhs))
        return node

    def unary(self) -> Node:
        kind, val, _ = self.peek()
        if kind == "op" and val in ("-", "+"):
            tok = self.take()
            operand = self._operand(self.unary, tok)
            return Node("neg", (operand,)) if val == "-" else operand
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[1] == "^" and self.peek()[0] == "op":
            tok = self.take()
            exp_start = self.peek()[2]
            exp = self._operand(self.unary, tok)
            value = _fold_constant(exp)
            if value is None or not float(value).is_integer():
                self.error("non-integer exponent", exp_start)
            return Node("pow", (base,), int(value))
        return base

    def atom(self) -> Node:
        kind, val, off = self.take()
        if kind == "num":
            return Node("const", (), float(val))
        if kind == "name":
            if val in FUNCTIONS:
                if self.peek()[1] != "(":
                    self.error(f"expected '(' after {val}", self.peek()[2])
                self.take()
                arg = self.expr()
                self._expect_close(off)
                return Node("call", (arg,), val)
            if val == "pi":
                return Node("pi")
            if val not in self.index:
                self.error(f"unknown identifier {val!r}", off)
            return Node("var", (), self.index[val])
        if val == "(":
            node = self.expr()
            self._expect_close(off)
            return node
        if kind == "end":
            self.error("unexpected end of input", off)
        self.error(f"unexpected token {val!r}", off)

    def _expect_close(self, open_off):
        kind, val, off = self.take()
        if val != ")":
            self.error(f"expected ')' to match '(' at {open_off}", off)


def parse(text: str, coords: Sequence[str]) -> Expression:
    """Parse ``text`` into an :class:`Expression` over ``coords``."""
    if not isinstance(text, str):
        text = repr(text)
    coords = tuple(coords)
    if len(set(coords)) != len(coords):
        raise ValueError("coordinate names must be distinct")
    bad = [c for c in coords if c in FUNCTIONS or c == "pi"]
    if bad:
        raise ValueError(f"reserved coordinate names: {bad}")
    return Expression(_Parser(text, coords).parse(), coords, source=text)


# ---------------------------------------------------------------------------
# Derivatives
# ---------------------------------------------------------------------------


def _seed(p, directions):
    """Dual coordinates at ``p`` (shape ``(..., d)``) seeded with ``directions``.

    ``directions`` has shape ``(d, k)``: column j is the j-th tangent direction.
    """
    p = np.asarray(p, dtype=float)
    batch = p.shape[:-1]
    return [
        Dual(p[..., i], np.broadcast_to(directions[i], batch + (directions.shape[1],)))
        for i in range(p.shape[-1])
    ]


def _as_dual_output(out, p, k):
    if isinstance(out, Dual):
        return out
    shape = np.asarray(p).shape[:-1]
    return Dual(np.broadcast_to(np.asarray(out, float), shape), np.zeros(shape + (k,)))


def gradient(e: Expression, p) -> np.ndarray:
    """Exact gradient of ``e`` at ``p`` (or a batch, shape ``(n, arity)``)."""
    p = np.asarray(p, dtype=float)
    d = e.arity
    out = _as_dual_output(e.eval_generic(_seed(p, np.eye(d))), p, d)
    return np.array(np.broadcast_to(out.der, p.shape[:-1] + (d,)), dtype=float)


def jacobian(es: Sequence[Expression], p) -> np.ndarray:
    """Stack of gradients; shape ``(len(es), arity)`` (batched: ``(n, m, arity)``)."""
    p = np.asarray(p, dtype=float)
    if not es:
        return np.zeros(p.shape[:-1] + (0, p.shape[-1]))
    d = es[0].arity
    xs = _seed(p, np.eye(d))
    rows = []
    for e in es:
        out = _as_dual_output(e.eval_generic(xs), p, d)
        rows.append(np.broadcast_to(out.der, p.shape[:-1] + (d,)))
    return np.stack(rows, axis=-2).astype(float)


def value_and_jacobian(es: Sequence[Expression], p):
    """Values (shape ``(..., m)``) and Jacobian (``(..., m, arity)``) in one pass."""
    p = np.asarray(p, dtype=float)
    d = p.shape[-1]
    xs = _seed(p, np.eye(d))
    vals, rows = [], []
    for e in es:
        out = _as_dual_output(e.eval_generic(xs), p, d)
        vals.append(np.broadcast_to(out.val, p.shape[:-1]))
        rows.append(np.broadcast_to(out.der, p.shape[:-1] + (d,)))
    return np.stack(vals, axis=-1).astype(float), np.stack(rows, axis=-2).astype(float)


def hessian(e: Expression, p) -> np.ndarray:
    """Second derivatives by nesting dual numbers (forward over forward)."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError("hessian expects a single point")
    d = e.arity
    eye = np.eye(d)
    xs = []
    for i in range(d):
        # value seeded in direction e_i; its tangent is the constant e_i
        inner_val = Dual(np.float64(p[i]), eye[i])
        inner_der = Dual(eye[i], np.zeros((d, d)))
        xs.append(Dual(inner_val, inner_der))
    out = e.eval_generic(xs)
    if not isinstance(out, Dual) or not isinstance(out.der, Dual):
        return np.zeros((d, d))
    h = np.asarray(out.der.der, dtype=float)
    return np.broadcast_to(h, (d, d)).copy()
