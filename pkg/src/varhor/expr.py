"""Scalar coefficient expressions.

A tiny arithmetic language used to write the coefficient functions of a
problem in a config file::

    f1 = "x1 + u1"
    l  = "0.5*u1^2 + exp(-t)*x1"

Expressions are parsed once into an immutable tree, compiled into a Python
closure, and evaluated on floats, numpy arrays or (nested) dual numbers.
Nesting duals gives exact mixed partial derivatives of any order, so the
same compiled code serves values, gradients and Hessians.

Grammar (lowest to highest precedence)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ("^" unary)?          # right associative
    atom   := number | name | func "(" expr ")" | "(" expr ")"
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .errors import DomainError, ExprSyntaxError, MissingBinding, UnknownVariable

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt", "abs")


# ---------------------------------------------------------------------------
# Dual numbers
# ---------------------------------------------------------------------------

class Dual:
    """Forward-mode dual number ``re + eps*E`` with ``E**2 == 0``.

    Both parts may be floats, numpy arrays or Duals themselves; a Dual of
    Duals carries second derivatives, three levels carry third derivatives.
    """

    __slots__ = ("re", "eps")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, re, eps=0.0):
        self.re = re
        self.eps = eps

    def __repr__(self):
        return f"Dual({self.re!r}, {self.eps!r})"

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.re + other.re, self.eps + other.eps)
        return Dual(self.re + other, self.eps)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.re - other.re, self.eps - other.eps)
        return Dual(self.re - other, self.eps)

    def __rsub__(self, other):
        return Dual(other - self.re, -self.eps)

    def __neg__(self):
        return Dual(-self.re, -self.eps)

    def __pos__(self):
        return self

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.re * other.re, self.re * other.eps + self.eps * other.re)
        return Dual(self.re * other, self.eps * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __pow__(self, other):
        return _pow(self, other)

    def __rpow__(self, other):
        return _pow(other, self)

    def exp(self):
        e = _exp(self.re)
        return Dual(e, e * self.eps)

    def log(self):
        return Dual(_log(self.re), _div(self.eps, self.re))

    def sin(self):
        return Dual(_sin(self.re), _cos(self.re) * self.eps)

    def cos(self):
        return Dual(_cos(self.re), -_sin(self.re) * self.eps)

    def sqrt(self):
        if np.any(value_of(self.re) == 0):
            raise DomainError("sqrt", 0.0)
        s = _sqrt(self.re)
        return Dual(s, _div(self.eps, 2.0 * s))

    def abs(self):
        return Dual(_abs(self.re), np.sign(value_of(self.re)) * self.eps)

    def pow_const(self, c):
        if c == 0:
            return Dual(_pow(self.re, 0.0), 0.0)
        if c == 1:
            return self
        return Dual(_pow(self.re, c), c * _pow(self.re, c - 1) * self.eps)


def value_of(a):
    """Innermost real part of a (possibly nested) dual."""
    while isinstance(a, Dual):
        a = a.re
    return a


def _all_finite(a) -> bool:
    if isinstance(a, Dual):
        return _all_finite(a.re) and _all_finite(a.eps)
    return bool(np.all(np.isfinite(a)))


def _require_finite(op: str, *args):
    for a in args:
        v = value_of(a)
        if not np.all(np.isfinite(v)):
            raise DomainError(op, _first_bad(v, ~np.isfinite(v)))


def _first_bad(v, mask):
    v = np.asarray(v)
    if v.ndim == 0:
        return float(v)
    return float(v[np.asarray(mask)].flat[0])


def _exp(a):
    if isinstance(a, Dual):
        return a.exp()
    _require_finite("exp", a)
    r = np.exp(a)
    if not np.all(np.isfinite(r)):
        raise DomainError("exp", _first_bad(a, ~np.isfinite(r)))
    return r


def _log(a):
    if isinstance(a, Dual):
        return a.log()
    bad = np.asarray(a) <= 0
    if np.any(bad):
        raise DomainError("log", _first_bad(a, bad))
    return np.log(a)


def _sqrt(a):
    if isinstance(a, Dual):
        return a.sqrt()
    bad = np.asarray(a) < 0
    if np.any(bad):
        raise DomainError("sqrt", _first_bad(a, bad))
    return np.sqrt(a)


def _sin(a):
    if isinstance(a, Dual):
        return a.sin()
    _require_finite("sin", a)
    return np.sin(a)


def _cos(a):
    if isinstance(a, Dual):
        return a.cos()
    _require_finite("cos", a)
    return np.cos(a)


def _abs(a):
    if isinstance(a, Dual):
        return a.abs()
    return np.abs(a)


def _div(a, b):
    _require_finite("div", a, b)
    bv = value_of(b)
    zero = np.asarray(bv) == 0
    if np.any(zero):
        raise DomainError("div", 0.0)
    if isinstance(b, Dual):
        if isinstance(a, Dual):
            return Dual(_div(a.re, b.re), _div(a.eps * b.re - a.re * b.eps, b.re * b.re))
        return Dual(_div(a, b.re), _div(-a * b.eps, b.re * b.re))
    if isinstance(a, Dual):
        return Dual(_div(a.re, b), _div(a.eps, b))
    return a / b


def _pow(a, b):
    _require_finite("pow", a, b)
    if isinstance(b, Dual):
        # general power goes through exp(b*log(a)); needs a > 0
        return _exp(b * _log(a))
    if isinstance(a, Dual):
        if np.ndim(b) == 0:
            return a.pow_const(float(b))
        return _exp(b * _log(a))
    av = np.asarray(a, dtype=float)
    bv = np.asarray(b, dtype=float)
    frac = bv != np.round(bv)
    bad = (av < 0) & frac
    if np.any(bad):
        raise DomainError("pow", _first_bad(av * np.ones_like(bv), bad))
    bad = (av == 0) & (bv < 0)
    if np.any(bad):
        raise DomainError("pow", 0.0)
    r = np.power(av, bv)
    if not np.all(np.isfinite(r)):
        raise DomainError("pow", _first_bad(av * np.ones_like(bv), ~np.isfinite(r)))
    return r[()] if r.ndim == 0 else r


# ---------------------------------------------------------------------------
# Syntax tree
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "Expr"


Expr = Union[Num, Var, Neg, BinOp, Call]


@dataclass(frozen=True)
class Dims:
    """Dimensions (n, m, d, k) that fix the admissible variable names."""

    n: int = 1
    m: int = 1
    d: int = 1
    k: int = 1

    def names(self, groups: Sequence[str] = ("t", "x", "y", "z", "u")) -> list[str]:
        out = []
        for g in groups:
            if g == "t":
                out.append("t")
            elif g == "x":
                out += [f"x{i + 1}" for i in range(self.n)]
            elif g == "y":
                out += [f"y{i + 1}" for i in range(self.m)]
            elif g == "u":
                out += [f"u{i + 1}" for i in range(self.k)]
            elif g == "z":
                out += [z_name(i, j, self.d) for i in range(self.m) for j in range(self.d)]
            else:
                raise ValueError(f"unknown variable group {g!r}")
        return out


def z_name(i: int, j: int, d: int = 1) -> str:
    """Name of the (i, j) entry of z, zero based. Two-digit indices use ``z<i>_<j>``."""
    if i < 9 and j < 9:
        return f"z{i + 1}{j + 1}"
    return f"z{i + 1}_{j + 1}"


_Z_ALT = re.compile(r"^z(\d+)_(\d+)$")


def _canonical(name: str) -> str:
    m = _Z_ALT.match(name)
    if m:
        return z_name(int(m.group(1)) - 1, int(m.group(2)) - 1)
    return name


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),−×÷]))"
)
_ALIASES = {"−": "-", "×": "*", "÷": "/", "**": "^"}


class _Parser:
    def __init__(self, text: str, allowed: set[str]):
        self.text = text
        self.allowed = allowed
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                raise ExprSyntaxError(self._bytes(pos + _lead(text, pos)), "a token", text)
            kind = m.lastgroup
            start = m.start(kind)
            val = m.group(kind)
            if kind == "op":
                val = _ALIASES.get(val, val)
            self.tokens.append((kind, val, start))
            pos = m.end()
        self.tokens.append(("end", "", len(text)))
        self.i = 0

    def _bytes(self, char_index: int) -> int:
        return len(self.text[:char_index].encode("utf-8"))

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, val: str):
        kind, v, pos = self.take()
        if v != val or kind == "end":
            raise ExprSyntaxError(self._bytes(pos), repr(val), self.text)

    def parse(self) -> Expr:
        e = self.expr()
        kind, _, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(self._bytes(pos), "end of input", self.text)
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, val, pos = self.take()
        if kind == "num":
            x = float(val)
            if not math.isfinite(x):
                raise ExprSyntaxError(self._bytes(pos), "a finite number", self.text)
            return Num(x)
        if kind == "name":
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            name = _canonical(val)
            if name not in self.allowed:
                raise UnknownVariable(val)
            return Var(name)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise ExprSyntaxError(self._bytes(pos), "a number, name or '('", self.text)


def _lead(text: str, pos: int) -> int:
    return len(text[pos:]) - len(text[pos:].lstrip())


def parse(text: str, dims: Dims = Dims(), groups: Sequence[str] | None = None) -> Expr:
    """Parse ``text`` into an expression tree.

    ``groups`` restricts which variable groups (``t x y z u``) may appear;
    by default every variable of ``dims`` is allowed.
    """
    allowed = set(dims.names(groups) if groups is not None else dims.names())
    return _Parser(text, allowed).parse()


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return _PREC["neg"]
    if isinstance(e, Num) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return _PREC["neg"]
    return 5


def _wrap(e: Expr, cond: bool) -> str:
    s = to_text(e)
    return f"({s})" if cond else s


def to_text(e: Expr) -> str:
    """Render an expression so that ``parse(to_text(e)) == e``."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return "-" + _wrap(e.arg, _prec(e.arg) < 3)
    if isinstance(e, Call):
        return f"{e.fn}({to_text(e.arg)})"
    p = _PREC[e.op]
    if e.op == "^":
        return f"{_wrap(e.left, _prec(e.left) <= 4)}^{_wrap(e.right, _prec(e.right) < 3)}"
    return f"{_wrap(e.left, _prec(e.left) < p)} {e.op} {_wrap(e.right, _prec(e.right) <= p)}"


def variables(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Num):
        return set()
    if isinstance(e, (Neg, Call)):
        return variables(e.arg)
    return variables(e.left) | variables(e.right)


# ---------------------------------------------------------------------------
# Compilation and evaluation
# ---------------------------------------------------------------------------

_RUNTIME = {
    "_exp": _exp, "_log": _log, "_sin": _sin, "_cos": _cos,
    "_sqrt": _sqrt, "_abs": _abs, "_div": _div, "_pow": _pow,
}


def _code(e: Expr) -> str:
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{_code(e.arg)})"
    if isinstance(e, Call):
        return f"_{e.fn}({_code(e.arg)})"
    a, b = _code(e.left), _code(e.right)
    if e.op == "/":
        return f"_div({a}, {b})"
    if e.op == "^":
        return f"_pow({a}, {b})"
    return f"({a} {e.op} {b})"


@dataclass(frozen=True)
class Compiled:
    args: tuple[str, ...]
    fn: Callable


def compile_expr(e: Expr) -> Compiled:
    cached = e.__dict__.get("_compiled")
    if cached is not None:
        return cached
    args = tuple(sorted(variables(e)))
    # generated from a validated tree: names are declared variables, literals are float reprs
    src = f"lambda {', '.join(args)}: {_code(e)}"
    fn = eval(src, dict(_RUNTIME))
    out = Compiled(args, fn)
    object.__setattr__(e, "_compiled", out)
    return out


def _as_number(v):
    if isinstance(v, Dual):
        return v
    if isinstance(v, np.ndarray):
        return v.astype(float, copy=False)
    return np.float64(v)


def _call(e: Expr, bindings: Mapping[str, object]):
    c = compile_expr(e)
    try:
        args = [_as_number(bindings[a]) for a in c.args]
    except KeyError as exc:
        raise MissingBinding(exc.args[0]) from None
    with np.errstate(all="ignore"):
        r = c.fn(*args)
    if not _all_finite(r):
        raise DomainError("overflow", value_of(r))
    return r


def eval_expr(e: Expr, bindings: Mapping[str, object]):
    """Evaluate ``e``. Scalar bindings give a float, array bindings an array."""
    r = _call(e, bindings)
    if isinstance(r, np.ndarray) and r.ndim == 0:
        return float(r)
    return r


def _lift(x, seeds: Sequence[float]):
    if not seeds:
        return x
    return Dual(_lift(x, seeds[1:]), seeds[0])


def _component(r, path: Sequence[str]):
    for part in path:
        if not isinstance(r, Dual):
            return r if part == "re" else 0.0
        r = getattr(r, part)
    return value_of(r)


def mixed_derivative(e: Expr, bindings: Mapping[str, object],
                     seeds: Sequence[Mapping[str, float]]):
    """Mixed directional derivative ``D^K e [s_1, ..., s_K]`` with ``K = len(seeds)``."""
    lifted = {}
    names = variables(e)
    for name, val in bindings.items():
        if name in names:
            lifted[name] = _lift(_as_number(val), [s.get(name, 0.0) for s in seeds])
    r = _call(e, lifted | {k: v for k, v in bindings.items() if k not in lifted})
    return _component(r, ["eps"] * len(seeds))


class Dual2(tuple):
    """``(value, first, second)`` directional jet of an expression."""

    __slots__ = ()

    def __new__(cls, value, first, second=None):
        return super().__new__(cls, (value, first, second))

    value = property(lambda s: s[0])
    first = property(lambda s: s[1])
    second = property(lambda s: s[2])


def directional(e: Expr, bindings: Mapping[str, object],
                direction: Mapping[str, float], order: int = 1) -> Dual2:
    """Value and first (and, for ``order=2``, second) derivative along ``direction``."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    names = variables(e)
    missing = names - set(bindings)
    if missing:
        raise MissingBinding(sorted(missing)[0])
    lifted = {n: _lift(_as_number(bindings[n]), [direction.get(n, 0.0)] * order) for n in names}
    r = _call(e, lifted)
    val = _component(r, ["re"] * order)
    d1 = _component(r, ["eps"] + ["re"] * (order - 1))
    d2 = _component(r, ["eps", "eps"]) if order == 2 else None
    return Dual2(_scalar(val), _scalar(d1), None if d2 is None else _scalar(d2))


def _scalar(v):
    if isinstance(v, np.ndarray) and v.ndim == 0:
        return float(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def is_zero(e: Expr) -> bool:
    """True when ``e`` is a constant expression equal to zero."""
    if variables(e):
        return False
    try:
        return eval_expr(e, {}) == 0.0
    except DomainError:
        return False
