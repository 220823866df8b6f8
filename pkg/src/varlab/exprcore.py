"""Scalar expressions over state variables ``x1..xn``.

Expressions are parsed into an immutable AST, compiled to a postfix tape and
evaluated by the kernels in :mod:`varlab.kernels`, either for plain values,
for second-order directional duals, or for gradients.

Grammar (loosest to tightest binding)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | "+" unary | power
    power  := atom ("^" ["-"|"+"] INTEGER)*
    atom   := NUMBER | "x"k | FUNC "(" expr ")" | "(" expr ")"

with ``FUNC`` one of ``sin cos exp log``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from varlab.errors import (
    DimensionError,
    ExprSyntaxError,
    UnknownIdentifierError,
    VariableIndexError,
)

# Tape opcodes. _ckernels.pyx and _pykernels.py hardcode the same values.
OP_CONST = 0
OP_VAR = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_POW = 6
OP_NEG = 7
OP_SIN = 8
OP_COS = 9
OP_EXP = 10
OP_LOG = 11

FUNCTIONS = {"sin": OP_SIN, "cos": OP_COS, "exp": OP_EXP, "log": OP_LOG}
_BINARY = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV}


# --------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int


@dataclass(frozen=True)
class Func:
    name: str
    arg: "Node"


Node = Union[Const, Var, Neg, Binary, Pow, Func]


def to_text(node: Node) -> str:
    if isinstance(node, Const):
        text = repr(float(node.value))
        return f"({text})" if node.value < 0 or text.startswith("-") else text
    if isinstance(node, Var):
        return f"x{node.index}"
    if isinstance(node, Neg):
        return f"(-{to_text(node.arg)})"
    if isinstance(node, Binary):
        return f"({to_text(node.left)} {node.op} {to_text(node.right)})"
    if isinstance(node, Pow):
        return f"({to_text(node.base)})^{node.exponent}"
    if isinstance(node, Func):
        return f"{node.name}({to_text(node.arg)})"
    raise TypeError(f"not an expression node: {node!r}")


def _max_var(node: Node) -> int:
    if isinstance(node, Var):
        return node.index
    if isinstance(node, Const):
        return 0
    if isinstance(node, Binary):
        return max(_max_var(node.left), _max_var(node.right))
    if isinstance(node, Pow):
        return _max_var(node.base)
    return _max_var(node.arg)


def _is_polynomial(node: Node) -> bool:
    if isinstance(node, (Const, Var)):
        return True
    if isinstance(node, Neg):
        return _is_polynomial(node.arg)
    if isinstance(node, Pow):
        return node.exponent >= 0 and _is_polynomial(node.base)
    if isinstance(node, Binary):
        if node.op == "/":
            return isinstance(node.right, Const) and _is_polynomial(node.left)
        return _is_polynomial(node.left) and _is_polynomial(node.right)
    return False


# ------------------------------------------------------------------ parser

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()])
    """,
    re.VERBOSE,
)
_VARNAME = re.compile(r"x(\d+)")


class _Parser:
    def __init__(self, text: str, n: int):
        self.text = text
        self.n = n
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if m is None:
                raise ExprSyntaxError(f"unexpected character {text[pos]!r}", _byte(text, pos), text)
            kind = m.lastgroup
            if kind != "ws":
                self.tokens.append((kind, m.group(), pos))
            pos = m.end()
        self.tokens.append(("end", "", len(text)))
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message: str, pos: int) -> ExprSyntaxError:
        return ExprSyntaxError(message, _byte(self.text, pos), self.text)

    def expect(self, value: str) -> None:
        kind, text, pos = self.take()
        if text != value or kind != "op":
            found = "end of input" if kind == "end" else repr(text)
            raise self.fail(f"expected {value!r}, found {found}", pos)

    def parse(self) -> Node:
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise self.fail(f"unexpected token {text!r}", pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        node = self.atom()
        while self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            node = Pow(node, self.exponent())
        return node

    def exponent(self) -> int:
        sign = 1
        kind, text, pos = self.peek()
        wrapped = kind == "op" and text == "("
        if wrapped:
            self.take()
            kind, text, pos = self.peek()
        if kind == "op" and text in "+-":
            self.take()
            sign = -1 if text == "-" else 1
            kind, text, pos = self.peek()
        if kind != "num" or not text.isdigit():
            raise self.fail("exponent must be an integer literal", pos)
        self.take()
        if wrapped:
            self.expect(")")
        return sign * int(text)

    def atom(self) -> Node:
        kind, text, pos = self.take()
        if kind == "num":
            return Const(float(text))
        if kind == "name":
            m = _VARNAME.fullmatch(text)
            if m is not None:
                k = int(m.group(1))
                if not 1 <= k <= self.n:
                    raise VariableIndexError(
                        f"variable {text} out of range for n={self.n}", _byte(self.text, pos), self.text
                    )
                return Var(k)
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Func(text, arg)
            raise UnknownIdentifierError(f"unknown identifier {text!r}", _byte(self.text, pos), self.text)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(text)
        raise self.fail(f"unexpected {found}", pos)


def _byte(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


# ----------------------------------------------------------------- compile


def _emit(node: Node, ops: list, iarg: list, farg: list) -> None:
    if isinstance(node, Const):
        ops.append(OP_CONST), iarg.append(0), farg.append(float(node.value))
    elif isinstance(node, Var):
        ops.append(OP_VAR), iarg.append(node.index - 1), farg.append(0.0)
    elif isinstance(node, Neg):
        _emit(node.arg, ops, iarg, farg)
        ops.append(OP_NEG), iarg.append(0), farg.append(0.0)
    elif isinstance(node, Binary):
        _emit(node.left, ops, iarg, farg)
        _emit(node.right, ops, iarg, farg)
        ops.append(_BINARY[node.op]), iarg.append(0), farg.append(0.0)
    elif isinstance(node, Pow):
        _emit(node.base, ops, iarg, farg)
        ops.append(OP_POW), iarg.append(node.exponent), farg.append(0.0)
    elif isinstance(node, Func):
        _emit(node.arg, ops, iarg, farg)
        ops.append(FUNCTIONS[node.name]), iarg.append(0), farg.append(0.0)
    else:
        raise TypeError(f"not an expression node: {node!r}")


@dataclass(frozen=True, eq=False)
class Program:
    """Postfix tapes of several expressions over the same ``n`` variables.

    Expression ``k`` occupies ``ops[starts[k]:starts[k+1]]``.
    """

    ops: np.ndarray
    iarg: np.ndarray
    farg: np.ndarray
    starts: np.ndarray
    n: int

    @classmethod
    def build(cls, exprs: Sequence["Expr"], n: int) -> "Program":
        ops: list[int] = []
        iarg: list[int] = []
        farg: list[float] = []
        starts = [0]
        for e in exprs:
            if e.n != n:
                raise DimensionError(f"expression declared for n={e.n}, program has n={n}")
            _emit(e.ast, ops, iarg, farg)
            starts.append(len(ops))
        return cls(
            np.asarray(ops, dtype=np.int32),
            np.asarray(iarg, dtype=np.int32),
            np.asarray(farg, dtype=np.float64),
            np.asarray(starts, dtype=np.int32),
            n,
        )

    @property
    def size(self) -> int:
        return len(self.starts) - 1

    @cached_property
    def py_tape(self) -> tuple:
        """Plain-Python copy of the tapes for the fallback kernels."""
        ops = self.ops.tolist()
        iarg = self.iarg.tolist()
        farg = self.farg.tolist()
        st = self.starts.tolist()
        return tuple(
            tuple(zip(ops[st[k] : st[k + 1]], iarg[st[k] : st[k + 1]], farg[st[k] : st[k + 1]]))
            for k in range(len(st) - 1)
        )


# ------------------------------------------------------------------- duals


@dataclass(frozen=True)
class Dual2:
    """Value with first and second derivative along one direction."""

    value: float
    d1: float = 0.0
    d2: float = 0.0

    def __add__(self, other):
        o = _lift(other)
        return Dual2(self.value + o.value, self.d1 + o.d1, self.d2 + o.d2)

    __radd__ = __add__

    def __sub__(self, other):
        o = _lift(other)
        return Dual2(self.value - o.value, self.d1 - o.d1, self.d2 - o.d2)

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        o = _lift(other)
        return Dual2(
            self.value * o.value,
            self.d1 * o.value + self.value * o.d1,
            self.d2 * o.value + 2.0 * self.d1 * o.d1 + self.value * o.d2,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _lift(other)
        if o.value == 0.0:
            raise ZeroDivisionError("Dual2 division by zero")
        q = self.value / o.value
        q1 = (self.d1 - q * o.d1) / o.value
        q2 = (self.d2 - 2.0 * q1 * o.d1 - q * o.d2) / o.value
        return Dual2(q, q1, q2)

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __neg__(self):
        return Dual2(-self.value, -self.d1, -self.d2)

    def __pow__(self, k: int):
        if not isinstance(k, int):
            raise TypeError("Dual2 supports integer powers only")
        if k == 0:
            return Dual2(1.0, 0.0, 0.0)
        a = self.value
        p1 = k * a ** (k - 1)
        p2 = 0.0 if k == 1 else k * (k - 1) * a ** (k - 2)
        return Dual2(a**k, p1 * self.d1, p1 * self.d2 + p2 * self.d1 * self.d1)

    def sin(self):
        s, c = math.sin(self.value), math.cos(self.value)
        return Dual2(s, c * self.d1, c * self.d2 - s * self.d1 * self.d1)

    def cos(self):
        s, c = math.sin(self.value), math.cos(self.value)
        return Dual2(c, -s * self.d1, -s * self.d2 - c * self.d1 * self.d1)

    def exp(self):
        e = math.exp(self.value)
        return Dual2(e, e * self.d1, e * (self.d2 + self.d1 * self.d1))

    def log(self):
        a = self.value
        if a <= 0.0:
            raise ValueError("log of non-positive Dual2")
        return Dual2(math.log(a), self.d1 / a, self.d2 / a - (self.d1 / a) ** 2)


def _lift(x) -> Dual2:
    return x if isinstance(x, Dual2) else Dual2(float(x))


# -------------------------------------------------------------- public API


class Expr:
    """Parsed expression in ``n`` state variables. Immutable."""

    __slots__ = ("ast", "n", "_program")

    def __init__(self, ast: Node, n: int):
        if _max_var(ast) > n:
            raise DimensionError(f"expression uses x{_max_var(ast)} but n={n}")
        object.__setattr__(self, "ast", ast)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "_program", None)

    def __setattr__(self, name, value):
        raise AttributeError("Expr is immutable")

    def __repr__(self) -> str:
        return f"Expr({to_text(self.ast)!r}, n={self.n})"

    def __str__(self) -> str:
        return to_text(self.ast)

    def __eq__(self, other) -> bool:
        return isinstance(other, Expr) and self.ast == other.ast and self.n == other.n

    def __hash__(self) -> int:
        return hash((self.ast, self.n))

    @property
    def program(self) -> Program:
        if self._program is None:
            object.__setattr__(self, "_program", Program.build([self], self.n))
        return self._program

    @property
    def is_polynomial(self) -> bool:
        return _is_polynomial(self.ast)

    def __call__(self, x) -> float:
        from varlab import kernels

        return float(kernels.values(self.program, _point(x, self.n))[0])


def parse(text: str, n: int) -> Expr:
    """Parse ``text`` as an expression over ``x1..xn``."""
    if n < 1:
        raise DimensionError("state dimension must be >= 1")
    return Expr(_Parser(text, n).parse(), n)


def constant(value: float, n: int) -> Expr:
    return Expr(Const(float(value)), n)


def eval_dual(e: Expr, x, v) -> Dual2:
    """Return ``(e(x), De(x)·v, vᵀD²e(x)v)``."""
    from varlab import kernels

    val, d1, d2 = kernels.dual2(e.program, _point(x, e.n), _point(v, e.n))
    return Dual2(float(val[0]), float(d1[0]), float(d2[0]))


def _point(x, n: int) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.shape != (n,):
        raise DimensionError(f"expected a point of length {n}, got shape {arr.shape}")
    return arr
