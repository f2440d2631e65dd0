"""Scalar expression language for vector-field components and level functions.

Grammar (whitespace-insensitive)::

    expr   := term (("+"|"-") term)*
    term   := factor (("*"|"/") factor)*
    factor := ("-")? power
    power  := atom ("^" factor)?
    atom   := number | var | func "(" expr ")" | "(" expr ")"
    var    := "x" digit+            (1-based, up to the declared dimension)
    func   := "sin"|"cos"|"exp"|"sqrt"|"tanh"

An :class:`Expression` is immutable after :func:`parse`; evaluation and
differentiation are pure, so one instance may be shared across workers.
Derivatives are exact, produced by forward-mode dual-number propagation
over the AST (no finite differences).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import EvalError, ParseError, UnknownVariableError

__all__ = [
    "Expression",
    "Node",
    "Num",
    "Var",
    "Neg",
    "Fun",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "Pow",
    "parse",
    "evaluate",
    "gradient",
    "to_string",
    "FUNCTIONS",
]

FUNCTIONS = ("sin", "cos", "exp", "sqrt", "tanh")


class Node:
    """Base class for AST nodes (all concrete nodes are frozen dataclasses)."""

    __slots__ = ()


@dataclass(frozen=True)
class Num(Node):
    value: float


@dataclass(frozen=True)
class Var(Node):
    index: int  # 1-based, printed as x1..xn


@dataclass(frozen=True)
class Neg(Node):
    arg: Node


@dataclass(frozen=True)
class Fun(Node):
    name: str
    arg: Node


@dataclass(frozen=True)
class Add(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Sub(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Mul(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Div(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: Node


# ---------------------------------------------------------------------------
# Tokenizer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<num>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()])"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        tokens.append((kind, m.group(), pos))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, n: int):
        self.text = text
        self.n = n
        self.tokens = _tokenize(text)
        self.i = 0

    def _peek(self):
        if self.i < len(self.tokens):
            return self.tokens[self.i]
        return (None, "", len(self.text))

    def _advance(self):
        tok = self._peek()
        self.i += 1
        return tok

    def _expect_op(self, op: str):
        kind, value, pos = self._peek()
        if kind != "op" or value != op:
            raise ParseError(f"found {value!r}" if kind else "unexpected end of input",
                             pos, expected=repr(op))
        self.i += 1

    def parse(self) -> Node:
        if not self.tokens:
            raise ParseError("empty expression", 0, expected="an expression")
        node = self._expr()
        kind, value, pos = self._peek()
        if kind is not None:
            raise ParseError(f"trailing input {value!r}", pos, expected="end of input")
        return node

    def _expr(self) -> Node:
        node = self._term()
        while True:
            kind, value, _ = self._peek()
            if kind == "op" and value in "+-":
                self.i += 1
                rhs = self._term()
                node = Add(node, rhs) if value == "+" else Sub(node, rhs)
            else:
                return node

    def _term(self) -> Node:
        node = self._factor()
        while True:
            kind, value, _ = self._peek()
            if kind == "op" and value in "*/":
                self.i += 1
                rhs = self._factor()
                node = Mul(node, rhs) if value == "*" else Div(node, rhs)
            else:
                return node

    def _factor(self) -> Node:
        kind, value, _ = self._peek()
        if kind == "op" and value == "-":
            self.i += 1
            return Neg(self._power())
        return self._power()

    def _power(self) -> Node:
        base = self._atom()
        kind, value, _ = self._peek()
        if kind == "op" and value == "^":
            self.i += 1
            return Pow(base, self._factor())  # right-associative
        return base

    def _atom(self) -> Node:
        kind, value, pos = self._advance()
        if kind == "num":
            return Num(float(value))
        if kind == "name":
            if value in FUNCTIONS:
                self._expect_op("(")
                arg = self._expr()
                self._expect_op(")")
                return Fun(value, arg)
            m = re.fullmatch(r"x(\d+)", value)
            if m:
                index = int(m.group(1))
                if not 1 <= index <= self.n:
                    raise UnknownVariableError(
                        f"variable {value!r} outside x1..x{self.n}", pos)
                return Var(index)
            raise ParseError(f"unknown identifier {value!r}", pos,
                             expected="a variable x<k> or a function name")
        if kind == "op" and value == "(":
            node = self._expr()
            self._expect_op(")")
            return node
        if kind is None:
            raise ParseError("unexpected end of input", pos, expected="an operand")
        raise ParseError(f"unexpected token {value!r}", pos, expected="an operand")


# ---------------------------------------------------------------------------
# Printing (canonical form; parse(to_string(e)) is structurally identical)
# ---------------------------------------------------------------------------

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _fmt(node: Node, ctx: int) -> str:
    if isinstance(node, Num):
        if node.value < 0 or math.copysign(1.0, node.value) < 0:
            # API-built negative literals print (and round-trip) as a unary minus
            return _wrap(f"-{repr(-node.value)}", _PREC_NEG, ctx)
        return repr(node.value)
    if isinstance(node, Var):
        return f"x{node.index}"
    if isinstance(node, Fun):
        return f"{node.name}({_fmt(node.arg, 0)})"
    if isinstance(node, Neg):
        return _wrap(f"-{_fmt(node.arg, _PREC_POW)}", _PREC_NEG, ctx)
    if isinstance(node, (Add, Sub)):
        op = " + " if isinstance(node, Add) else " - "
        s = f"{_fmt(node.left, _PREC_ADD)}{op}{_fmt(node.right, _PREC_ADD + 1)}"
        return _wrap(s, _PREC_ADD, ctx)
    if isinstance(node, (Mul, Div)):
        op = "*" if isinstance(node, Mul) else "/"
        s = f"{_fmt(node.left, _PREC_MUL)}{op}{_fmt(node.right, _PREC_MUL + 1)}"
        return _wrap(s, _PREC_MUL, ctx)
    if isinstance(node, Pow):
        s = f"{_fmt(node.base, _PREC_ATOM)}^{_fmt(node.exponent, _PREC_NEG)}"
        return _wrap(s, _PREC_POW, ctx)
    raise TypeError(f"not an AST node: {node!r}")


def _wrap(s: str, prec: int, ctx: int) -> str:
    return f"({s})" if prec < ctx else s


# ---------------------------------------------------------------------------
# Compiled evaluation (scalar and batched)
# ---------------------------------------------------------------------------

def _emit(node: Node, fn_prefix: str) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return f"x{node.index}"
    if isinstance(node, Neg):
        return f"(-{_emit(node.arg, fn_prefix)})"
    if isinstance(node, Fun):
        return f"{fn_prefix}{node.name}({_emit(node.arg, fn_prefix)})"
    if isinstance(node, Add):
        return f"({_emit(node.left, fn_prefix)} + {_emit(node.right, fn_prefix)})"
    if isinstance(node, Sub):
        return f"({_emit(node.left, fn_prefix)} - {_emit(node.right, fn_prefix)})"
    if isinstance(node, Mul):
        return f"({_emit(node.left, fn_prefix)} * {_emit(node.right, fn_prefix)})"
    if isinstance(node, Div):
        return f"({_emit(node.left, fn_prefix)} / {_emit(node.right, fn_prefix)})"
    if isinstance(node, Pow):
        return f"{fn_prefix}pow({_emit(node.base, fn_prefix)}, {_emit(node.exponent, fn_prefix)})"
    raise TypeError(f"not an AST node: {node!r}")


_SCALAR_NS = {
    "_sin": math.sin, "_cos": math.cos, "_exp": math.exp,
    "_sqrt": math.sqrt, "_tanh": math.tanh, "_pow": math.pow,
}
_ARRAY_NS = {
    "_asin": np.sin, "_acos": np.cos, "_aexp": np.exp,
    "_asqrt": np.sqrt, "_atanh": np.tanh, "_apow": np.power,
}


def _compile(node: Node, n: int, prefix: str, ns: dict) -> Callable:
    args = ", ".join(f"x{i}" for i in range(1, n + 1))
    src = f"def _fn({args}):\n    return {_emit(node, prefix)}\n"
    scope = dict(ns)
    exec(compile(src, "<flowrelay-expr>", "exec"), scope)
    return scope["_fn"]


# ---------------------------------------------------------------------------
# Forward-mode dual numbers (value + gradient), batched over points
# ---------------------------------------------------------------------------

def _const_value(node: Node) -> float | None:
    """Value of a variable-free subtree, or None if it contains a variable."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return None
    if isinstance(node, Neg):
        v = _const_value(node.arg)
        return None if v is None else -v
    if isinstance(node, Fun):
        v = _const_value(node.arg)
        if v is None:
            return None
        return float(getattr(math, node.name)(v))
    if isinstance(node, (Add, Sub, Mul, Div, Pow)):
        a = _const_value(node.left if not isinstance(node, Pow) else node.base)
        b = _const_value(node.right if not isinstance(node, Pow) else node.exponent)
        if a is None or b is None:
            return None
        if isinstance(node, Add):
            return a + b
        if isinstance(node, Sub):
            return a - b
        if isinstance(node, Mul):
            return a * b
        if isinstance(node, Div):
            if b == 0:
                raise EvalError("division by zero in constant subexpression")
            return a / b
        try:
            return math.pow(a, b)
        except (ValueError, OverflowError) as exc:
            raise EvalError(f"constant power undefined: {a}^{b}") from exc
    raise TypeError(f"not an AST node: {node!r}")


def _dual_eval(node: Node, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (value (N,), gradient (N, n)) of the subtree over a batch of points."""
    npts, n = pts.shape
    if isinstance(node, Num):
        return np.full(npts, node.value), np.zeros((npts, n))
    if isinstance(node, Var):
        g = np.zeros((npts, n))
        g[:, node.index - 1] = 1.0
        return pts[:, node.index - 1].copy(), g
    if isinstance(node, Neg):
        v, g = _dual_eval(node.arg, pts)
        return -v, -g
    if isinstance(node, Fun):
        v, g = _dual_eval(node.arg, pts)
        if node.name == "sin":
            return np.sin(v), np.cos(v)[:, None] * g
        if node.name == "cos":
            return np.cos(v), -np.sin(v)[:, None] * g
        if node.name == "exp":
            ev = np.exp(v)
            return ev, ev[:, None] * g
        if node.name == "sqrt":
            sv = np.sqrt(v)
            return sv, g / (2.0 * sv)[:, None]
        if node.name == "tanh":
            tv = np.tanh(v)
            return tv, (1.0 - tv * tv)[:, None] * g
        raise TypeError(f"unknown function {node.name!r}")
    if isinstance(node, Add):
        va, ga = _dual_eval(node.left, pts)
        vb, gb = _dual_eval(node.right, pts)
        return va + vb, ga + gb
    if isinstance(node, Sub):
        va, ga = _dual_eval(node.left, pts)
        vb, gb = _dual_eval(node.right, pts)
        return va - vb, ga - gb
    if isinstance(node, Mul):
        va, ga = _dual_eval(node.left, pts)
        vb, gb = _dual_eval(node.right, pts)
        return va * vb, va[:, None] * gb + vb[:, None] * ga
    if isinstance(node, Div):
        va, ga = _dual_eval(node.left, pts)
        vb, gb = _dual_eval(node.right, pts)
        v = va / vb
        return v, (ga - v[:, None] * gb) / vb[:, None]
    if isinstance(node, Pow):
        vb_const = _const_value(node.exponent)
        va, ga = _dual_eval(node.base, pts)
        if vb_const is not None:
            c = vb_const
            v = np.power(va, c)
            if c == 0.0:
                return v, np.zeros_like(ga)
            dv = c * np.power(va, c - 1.0)
            return v, dv[:, None] * ga
        vb, gb = _dual_eval(node.exponent, pts)
        # genuinely variable exponent: positive base required
        v = np.power(va, vb)
        dv = v[:, None] * (gb * np.log(va)[:, None] + vb[:, None] * ga / va[:, None])
        return v, dv
    raise TypeError(f"not an AST node: {node!r}")


# ---------------------------------------------------------------------------
# Symbolic partials (same forward-mode chain rule, materialized as ASTs;
# used to compile fast field Jacobians for the variational equations)
# ---------------------------------------------------------------------------

class _NonconstantExponent(Exception):
    pass


def _n_add(a: Node, b: Node) -> Node:
    if a == Num(0.0):
        return b
    if b == Num(0.0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    return Add(a, b)


def _n_sub(a: Node, b: Node) -> Node:
    if b == Num(0.0):
        return a
    if a == Num(0.0):
        return Neg(b)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    return Sub(a, b)


def _n_mul(a: Node, b: Node) -> Node:
    if a == Num(0.0) or b == Num(0.0):
        return Num(0.0)
    if a == Num(1.0):
        return b
    if b == Num(1.0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    return Mul(a, b)


def _n_div(a: Node, b: Node) -> Node:
    if a == Num(0.0):
        return Num(0.0)
    if b == Num(1.0):
        return a
    return Div(a, b)


def _n_pow(a: Node, c: float) -> Node:
    if c == 1.0:
        return a
    if c == 0.0:
        return Num(1.0)
    return Pow(a, Num(c))


def derive(node: Node, index: int) -> Node:
    """Exact partial derivative of the subtree with respect to x<index>.

    Only constant exponents are supported here (variable exponents fall
    back to runtime dual propagation in callers).
    """
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0) if node.index == index else Num(0.0)
    if isinstance(node, Neg):
        d = derive(node.arg, index)
        return Num(0.0) if d == Num(0.0) else Neg(d)
    if isinstance(node, Fun):
        d = derive(node.arg, index)
        if d == Num(0.0):
            return Num(0.0)
        a = node.arg
        if node.name == "sin":
            outer: Node = Fun("cos", a)
        elif node.name == "cos":
            outer = Neg(Fun("sin", a))
        elif node.name == "exp":
            outer = Fun("exp", a)
        elif node.name == "sqrt":
            outer = _n_div(Num(0.5), Fun("sqrt", a))
        elif node.name == "tanh":
            outer = _n_sub(Num(1.0), Pow(Fun("tanh", a), Num(2.0)))
        else:
            raise TypeError(f"unknown function {node.name!r}")
        return _n_mul(outer, d)
    if isinstance(node, Add):
        return _n_add(derive(node.left, index), derive(node.right, index))
    if isinstance(node, Sub):
        return _n_sub(derive(node.left, index), derive(node.right, index))
    if isinstance(node, Mul):
        return _n_add(_n_mul(derive(node.left, index), node.right),
                      _n_mul(node.left, derive(node.right, index)))
    if isinstance(node, Div):
        num = _n_sub(_n_mul(derive(node.left, index), node.right),
                     _n_mul(node.left, derive(node.right, index)))
        return _n_div(num, _n_mul(node.right, node.right))
    if isinstance(node, Pow):
        c = _const_value(node.exponent)
        if c is None:
            raise _NonconstantExponent(to_string_node(node))
        d = derive(node.base, index)
        if d == Num(0.0) or c == 0.0:
            return Num(0.0)
        return _n_mul(_n_mul(Num(c), _n_pow(node.base, c - 1.0)), d)
    raise TypeError(f"not an AST node: {node!r}")


def to_string_node(node: Node) -> str:
    return _fmt(node, 0)


# ---------------------------------------------------------------------------
# Public Expression type and module-level operations
# ---------------------------------------------------------------------------

class Expression:
    """An immutable parsed expression over variables x1..xn."""

    __slots__ = ("root", "n", "_scalar_fn", "_array_fn")

    def __init__(self, root: Node, n: int):
        if n < 1:
            raise ValueError("dimension n must be >= 1")
        _check_tree(root, n)
        self.root = root
        self.n = n
        self._scalar_fn = None
        self._array_fn = None

    def __eq__(self, other) -> bool:
        return (isinstance(other, Expression)
                and self.n == other.n and self.root == other.root)

    def __hash__(self) -> int:
        return hash((self.root, self.n))

    def __repr__(self) -> str:
        return f"Expression({to_string_node(self.root)!r}, n={self.n})"

    def __str__(self) -> str:
        return to_string_node(self.root)

    # -- evaluation ---------------------------------------------------------

    def _scalar(self) -> Callable:
        if self._scalar_fn is None:
            self._scalar_fn = _compile(self.root, self.n, "_", _SCALAR_NS)
        return self._scalar_fn

    def _array(self) -> Callable:
        if self._array_fn is None:
            self._array_fn = _compile(self.root, self.n, "_a", _ARRAY_NS)
        return self._array_fn

    def evaluate(self, x) -> float | np.ndarray:
        """Evaluate at a point (n,) -> float, or a batch (..., n) -> (...,) array."""
        arr = np.asarray(x, dtype=float)
        if arr.shape[-1:] != (self.n,):
            raise ValueError(f"point has dimension {arr.shape[-1:]}, expected {self.n}")
        if arr.ndim == 1:
            try:
                out = self._scalar()(*arr.tolist())
            except (ValueError, ZeroDivisionError, OverflowError) as exc:
                raise EvalError(f"evaluation failed: {exc}") from exc
            if not math.isfinite(out):
                raise EvalError(f"non-finite value {out!r}")
            return out
        cols = [arr[..., j] for j in range(self.n)]
        with np.errstate(all="ignore"):
            out = self._array()(*cols)
        out = np.asarray(out, dtype=float)
        if out.shape != arr.shape[:-1]:
            out = np.broadcast_to(out, arr.shape[:-1]).copy()
        if not np.all(np.isfinite(out)):
            raise EvalError("non-finite value in batched evaluation")
        return out

    def gradient(self, x) -> np.ndarray:
        """Exact gradient at a point (n,) -> (n,), or a batch (N, n) -> (N, n)."""
        arr = np.asarray(x, dtype=float)
        if arr.shape[-1:] != (self.n,):
            raise ValueError(f"point has dimension {arr.shape[-1:]}, expected {self.n}")
        single = arr.ndim == 1
        pts = arr[None, :] if single else arr.reshape(-1, self.n)
        with np.errstate(all="ignore"):
            _, g = _dual_eval(self.root, pts)
        if not np.all(np.isfinite(g)):
            raise EvalError("non-finite gradient")
        if single:
            return g[0]
        return g.reshape(arr.shape)

    def partials(self) -> list["Expression"] | None:
        """Symbolic partial-derivative expressions, or None if a variable
        exponent makes the symbolic route unavailable."""
        try:
            return [Expression(derive(self.root, j), self.n)
                    for j in range(1, self.n + 1)]
        except _NonconstantExponent:
            return None


def _check_tree(node: Node, n: int) -> None:
    if isinstance(node, Var):
        if not 1 <= node.index <= n:
            raise UnknownVariableError(f"variable x{node.index} outside x1..x{n}", -1)
        return
    if isinstance(node, Num):
        return
    if isinstance(node, (Neg,)):
        _check_tree(node.arg, n)
        return
    if isinstance(node, Fun):
        if node.name not in FUNCTIONS:
            raise ValueError(f"unknown function {node.name!r}")
        _check_tree(node.arg, n)
        return
    if isinstance(node, (Add, Sub, Mul, Div)):
        _check_tree(node.left, n)
        _check_tree(node.right, n)
        return
    if isinstance(node, Pow):
        _check_tree(node.base, n)
        _check_tree(node.exponent, n)
        return
    raise TypeError(f"not an AST node: {node!r}")


def parse(text: str, n: int) -> Expression:
    """Parse expression text against dimension n."""
    if not text or not text.strip():
        raise ParseError("empty expression", 0, expected="an expression")
    return Expression(_Parser(text, n).parse(), n)


def evaluate(e: Expression, x) -> float | np.ndarray:
    return e.evaluate(x)


def gradient(e: Expression, x) -> np.ndarray:
    return e.gradient(x)


def to_string(e: Expression) -> str:
    return str(e)
