"""Scalar expression DSL: parsing, printing, evaluation and exact differentiation.

Expressions are immutable trees built from five node types.  Constants are
exact rationals; evaluation is in double precision.  The parser keeps the
tree shape dictated by the grammar and only folds subtrees made purely of
constants, so that printed rationals and negative literals read back into the
same node.

    >>> e = parse("x1 + x2*x3^2", ["x1", "x2", "x3"])
    >>> str(e)
    'x1 + x2*x3^2'
    >>> str(differentiate(e, 2))
    '2*x2*x3'
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

__all__ = [
    "Expr", "Const", "Var", "Unary", "Binary", "Pow",
    "ParseError", "DomainError",
    "parse", "evaluate", "compile_exprs", "differentiate", "gradient",
    "simplify", "substitute", "free_indices", "is_constant",
    "check_derivative_numerically",
    "const", "var", "sin", "cos", "exp", "ln", "sqrt", "absolute",
    "FUNCTIONS",
]

FUNCTIONS = ("sin", "cos", "exp", "ln", "sqrt", "abs")
UNARY_OPS = ("neg",) + FUNCTIONS
BINARY_OPS = ("add", "sub", "mul", "div")

# printing precedence; higher binds tighter
_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


class ParseError(ValueError):
    def __init__(self, message: str, source: str = "", pos: int | None = None,
                 expected: Sequence[str] = ()):
        self.source = source
        self.pos = pos
        self.expected = tuple(expected)
        text = message
        if pos is not None:
            text = f"{message} at column {pos + 1}"
            if expected:
                text += f" (expected {', '.join(expected)})"
            if source:
                text += f"\n  {source}\n  {' ' * pos}^"
        super().__init__(text)


class DomainError(ArithmeticError):
    """Raised when an expression is evaluated outside its validity set."""

    def __init__(self, message: str, node: "Expr | None" = None, point=None):
        self.reason = message
        self.node = node
        self.point = None if point is None else tuple(float(v) for v in point)
        text = message
        if node is not None:
            text += f" in '{node}'"
        if self.point is not None:
            text += f" at point ({', '.join(f'{v:.6g}' for v in self.point)})"
        super().__init__(text)


class Expr:
    """Base class of expression nodes.

    Arithmetic operators build simplified trees (constant folding and the
    neutral-element rules), so library code can write ``eta * grad[i]``.
    """

    __slots__ = ()

    def __add__(self, other): return add(self, _lift(other))
    def __radd__(self, other): return add(_lift(other), self)
    def __sub__(self, other): return sub(self, _lift(other))
    def __rsub__(self, other): return sub(_lift(other), self)
    def __mul__(self, other): return mul(self, _lift(other))
    def __rmul__(self, other): return mul(_lift(other), self)
    def __truediv__(self, other): return div(self, _lift(other))
    def __rtruediv__(self, other): return div(_lift(other), self)
    def __neg__(self): return neg(self)

    def __pow__(self, exponent):
        if isinstance(exponent, Const):
            exponent = exponent.value
        return power(self, Fraction(exponent))

    def __str__(self) -> str:
        return to_source(self)


@dataclass(frozen=True, eq=True, repr=False)
class Const(Expr):
    value: Fraction

    def __repr__(self):
        return f"Const({self.value})"


@dataclass(frozen=True, eq=True, repr=False)
class Var(Expr):
    index: int
    name: str

    def __repr__(self):
        return f"Var({self.index}, {self.name!r})"


@dataclass(frozen=True, eq=True, repr=False)
class Unary(Expr):
    op: str
    arg: Expr

    def __repr__(self):
        return f"Unary({self.op!r}, {self.arg!r})"


@dataclass(frozen=True, eq=True, repr=False)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def __repr__(self):
        return f"Binary({self.op!r}, {self.left!r}, {self.right!r})"


@dataclass(frozen=True, eq=True, repr=False)
class Pow(Expr):
    base: Expr
    exponent: Fraction

    def __repr__(self):
        return f"Pow({self.base!r}, {self.exponent})"


ZERO = Const(Fraction(0))
ONE = Const(Fraction(1))


def _lift(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, float):
        value = Fraction(value).limit_denominator(10**12)
    return Const(Fraction(value))


def const(value) -> Const:
    return Const(Fraction(value))


def var(index: int, name: str | None = None) -> Var:
    return Var(index, name if name is not None else f"x{index + 1}")


# ---------------------------------------------------------------------------
# smart constructors (local, conservative simplification)

def _is(e: Expr, value) -> bool:
    return isinstance(e, Const) and e.value == value


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    if isinstance(a, Binary) and a.op in ("mul", "div") and isinstance(a.left, Const):
        return Binary(a.op, Const(-a.left.value), a.right)
    return Unary("neg", a)


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    return Binary("add", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is(b, 0):
        return a
    if _is(a, 0):
        return neg(b)
    return Binary("sub", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is(a, 0) or _is(b, 0):
        return ZERO
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    if _is(a, -1):
        return neg(b)
    if _is(b, -1):
        return neg(a)
    if isinstance(a, Const) and isinstance(b, Binary) and b.op == "mul" and isinstance(b.left, Const):
        return mul(Const(a.value * b.left.value), b.right)
    return Binary("mul", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0:
        return Const(a.value / b.value)
    if _is(b, 1):
        return a
    if _is(a, 0) and not _is(b, 0):
        return ZERO
    # merge constant coefficients: (c*e)/d -> (c/d)*e
    if (isinstance(b, Const) and b.value != 0 and isinstance(a, Binary)
            and a.op == "mul" and isinstance(a.left, Const)):
        return mul(Const(a.left.value / b.value), a.right)
    return Binary("div", a, b)


def power(base: Expr, exponent: Fraction) -> Expr:
    exponent = Fraction(exponent)
    if exponent == 0:
        return ONE
    if exponent == 1:
        return base
    if isinstance(base, Const):
        folded = _fold_pow(base.value, exponent)
        if folded is not None:
            return Const(folded)
    if isinstance(base, Pow) and exponent.denominator == 1 and base.exponent.denominator == 1:
        return Pow(base.base, base.exponent * exponent)
    return Pow(base, exponent)


def _fold_pow(base: Fraction, exponent: Fraction) -> Fraction | None:
    if exponent.denominator != 1:
        return None
    if base == 0 and exponent < 0:
        return None
    if abs(exponent) > 64:
        return None
    return base ** int(exponent)


def unary(op: str, a: Expr) -> Expr:
    if op == "neg":
        return neg(a)
    return Unary(op, a)


def sin(a) -> Expr: return Unary("sin", _lift(a))
def cos(a) -> Expr: return Unary("cos", _lift(a))
def exp(a) -> Expr: return Unary("exp", _lift(a))
def ln(a) -> Expr: return Unary("ln", _lift(a))
def sqrt(a) -> Expr: return Unary("sqrt", _lift(a))
def absolute(a) -> Expr: return Unary("abs", _lift(a))


_BUILD = {"add": add, "sub": sub, "mul": mul, "div": div}


def simplify(e: Expr) -> Expr:
    """Rebuild ``e`` bottom-up through the simplifying constructors."""
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Unary):
        return unary(e.op, simplify(e.arg))
    if isinstance(e, Binary):
        return _BUILD[e.op](simplify(e.left), simplify(e.right))
    return power(simplify(e.base), e.exponent)


def substitute(e: Expr, mapping: Sequence[Expr]) -> Expr:
    """Replace every ``Var(i)`` by ``mapping[i]`` and simplify the result."""
    if isinstance(e, Var):
        if e.index >= len(mapping):
            raise IndexError(f"no substitution for variable {e.name}")
        return mapping[e.index]
    if isinstance(e, Const):
        return e
    if isinstance(e, Unary):
        return unary(e.op, substitute(e.arg, mapping))
    if isinstance(e, Binary):
        return _BUILD[e.op](substitute(e.left, mapping), substitute(e.right, mapping))
    return power(substitute(e.base, mapping), e.exponent)


def free_indices(e: Expr) -> set[int]:
    if isinstance(e, Var):
        return {e.index}
    if isinstance(e, Const):
        return set()
    if isinstance(e, Unary):
        return free_indices(e.arg)
    if isinstance(e, Binary):
        return free_indices(e.left) | free_indices(e.right)
    return free_indices(e.base)


def is_constant(e: Expr) -> bool:
    return not free_indices(e)


# ---------------------------------------------------------------------------
# differentiation

def differentiate(e: Expr, index: int) -> Expr:
    """Exact partial derivative of ``e`` with respect to variable ``index``."""
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.index == index else ZERO
    if isinstance(e, Binary):
        a, b = e.left, e.right
        da, db = differentiate(a, index), differentiate(b, index)
        if e.op == "add":
            return add(da, db)
        if e.op == "sub":
            return sub(da, db)
        if e.op == "mul":
            return add(mul(da, b), mul(a, db))
        # quotient rule, written to keep the common db == 0 case small
        if _is(db, 0):
            return div(da, b)
        return div(sub(mul(da, b), mul(a, db)), power(b, Fraction(2)))
    if isinstance(e, Pow):
        du = differentiate(e.base, index)
        if _is(du, 0):
            return ZERO
        return mul(mul(Const(e.exponent), power(e.base, e.exponent - 1)), du)
    u = e.arg
    du = differentiate(u, index)
    if _is(du, 0):
        return ZERO
    op = e.op
    if op == "neg":
        return neg(du)
    if op == "sin":
        outer = Unary("cos", u)
    elif op == "cos":
        return neg(mul(du, Unary("sin", u)))
    elif op == "exp":
        outer = e
    elif op == "ln":
        return div(du, u)
    elif op == "sqrt":
        return div(du, mul(Const(Fraction(2)), e))
    elif op == "abs":
        outer = div(u, e)
    else:  # pragma: no cover
        raise ValueError(f"unknown unary op {op}")
    return mul(du, outer)


def gradient(e: Expr, n: int) -> list[Expr]:
    return [differentiate(e, i) for i in range(n)]


# ---------------------------------------------------------------------------
# evaluation

def _pow(base: float, exponent: Fraction) -> float:
    if exponent.denominator == 1:
        return base ** int(exponent.numerator)
    if base < 0.0:
        raise ValueError("fractional power of negative value")
    return math.pow(base, float(exponent))


def _log(x: float) -> float:
    if x <= 0.0:
        raise ValueError("ln of nonpositive value")
    return math.log(x)


def _sqrt(x: float) -> float:
    if x < 0.0:
        raise ValueError("sqrt of negative value")
    return math.sqrt(x)


_UNARY_FN: dict[str, Callable[[float], float]] = {
    "neg": lambda v: -v,
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "ln": _log,
    "sqrt": _sqrt,
    "abs": abs,
}


def evaluate(e: Expr, point: Sequence[float]) -> float:
    """Evaluate ``e`` at ``point``; raises DomainError naming the offending node."""
    try:
        value = _eval(e, point)
    except DomainError as err:
        if err.point is None:
            raise DomainError(err.reason, err.node, point) from None
        raise
    return value


def _eval(e: Expr, x) -> float:
    if isinstance(e, Const):
        return float(e.value)
    if isinstance(e, Var):
        if e.index >= len(x):
            raise DomainError(f"point has no coordinate for variable {e.name}", e)
        return float(x[e.index])
    try:
        if isinstance(e, Binary):
            a, b = _eval(e.left, x), _eval(e.right, x)
            if e.op == "add":
                v = a + b
            elif e.op == "sub":
                v = a - b
            elif e.op == "mul":
                v = a * b
            else:
                v = a / b
        elif isinstance(e, Pow):
            v = _pow(_eval(e.base, x), e.exponent)
        else:
            v = _UNARY_FN[e.op](_eval(e.arg, x))
    except ZeroDivisionError:
        raise DomainError("division by zero", e) from None
    except (ValueError, OverflowError) as err:
        raise DomainError(str(err) or "math domain error", e) from None
    if isinstance(v, complex) or not math.isfinite(v):
        raise DomainError("non-finite value", e)
    return v


def _emit(e: Expr, consts: list) -> str:
    if isinstance(e, Const):
        return repr(float(e.value))
    if isinstance(e, Var):
        return f"x[{e.index}]"
    if isinstance(e, Binary):
        sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[e.op]
        return f"({_emit(e.left, consts)} {sym} {_emit(e.right, consts)})"
    if isinstance(e, Pow):
        slot = len(consts)
        consts.append(e.exponent)
        return f"_pow({_emit(e.base, consts)}, _c[{slot}])"
    if e.op == "neg":
        return f"(-{_emit(e.arg, consts)})"
    return f"_f_{e.op}({_emit(e.arg, consts)})"


def compile_exprs(exprs: Sequence[Expr]) -> Callable[[Sequence[float]], tuple]:
    """Compile expressions into one callable returning a tuple of floats.

    The callable uses the same float primitives as ``evaluate`` and produces
    identical values.  Domain violations are re-diagnosed through the tree
    evaluator so the DomainError names the node.
    """
    exprs = list(exprs)
    consts: list = []
    body = ", ".join(_emit(e, consts) for e in exprs)
    src = f"def _compiled(x):\n    return ({body}{',' if len(exprs) == 1 else ''})\n"
    namespace = {"_pow": _pow, "_c": consts}
    namespace.update({f"_f_{k}": v for k, v in _UNARY_FN.items()})
    exec(compile(src, "<poisson_ntt.expr>", "exec"), namespace)
    raw = namespace["_compiled"]

    def run(point):
        x = tuple(map(float, point))
        try:
            values = tuple(map(float, raw(x)))
        except (ZeroDivisionError, ValueError, OverflowError, IndexError):
            values = None
        if values is None or not all(map(math.isfinite, values)):
            for e in exprs:
                evaluate(e, x)  # raises with a located diagnostic
            raise DomainError("non-finite intermediate value", None, x)
        return values

    return run


def check_derivative_numerically(e: Expr, index: int, point: Sequence[float],
                                 h: float = 1e-5) -> float:
    """|symbolic derivative - central difference| at ``point``."""
    p_plus = list(point)
    p_minus = list(point)
    p_plus[index] += h
    p_minus[index] -= h
    fd = (evaluate(e, p_plus) - evaluate(e, p_minus)) / (2.0 * h)
    return abs(evaluate(differentiate(e, index), point) - fd)


# ---------------------------------------------------------------------------
# printing

def _prec(e: Expr) -> int:
    if isinstance(e, Const):
        v = e.value
        if v < 0:
            return _PREC_NEG
        return _PREC_ATOM if v.denominator == 1 else _PREC_MUL
    if isinstance(e, Var):
        return _PREC_ATOM
    if isinstance(e, Binary):
        return _PREC_ADD if e.op in ("add", "sub") else _PREC_MUL
    if isinstance(e, Pow):
        return _PREC_POW
    return _PREC_NEG if e.op == "neg" else _PREC_ATOM


def _fmt_rational(v: Fraction) -> str:
    if v.denominator == 1:
        return str(v.numerator)
    return f"{v.numerator}/{v.denominator}"


def _wrap(e: Expr, ok: bool) -> str:
    s = to_source(e)
    return s if ok else f"({s})"


def _leads_with_minus(e: Expr) -> bool:
    return _prec(e) == _PREC_NEG


def to_source(e: Expr) -> str:
    """Print ``e`` in DSL syntax with the minimal parentheses that round-trip."""
    if isinstance(e, Const):
        return _fmt_rational(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            return "-" + _wrap(e.arg, _prec(e.arg) >= _PREC_POW)
        return f"{e.op}({to_source(e.arg)})"
    if isinstance(e, Pow):
        x = e.exponent
        exp_src = str(x.numerator) if (x.denominator == 1 and x >= 0) else f"({_fmt_rational(x)})"
        return f"{_wrap(e.base, _prec(e.base) == _PREC_ATOM)}^{exp_src}"
    p = _prec(e)
    sym = {"add": " + ", "sub": " - ", "mul": "*", "div": "/"}[e.op]
    left = _wrap(e.left, _prec(e.left) >= p)
    right_ok = _prec(e.right) > p and not _leads_with_minus(e.right)
    right = _wrap(e.right, right_ok)
    return f"{left}{sym}{right}"


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
                    r"|(?P<id>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))")
_BAD_NUMBER = re.compile(r"[0-9.]+(?:[eE][+-]?)?[0-9A-Za-z_.]*")


class _Parser:
    def __init__(self, source: str, names: Sequence[str]):
        self.source = source
        self.names = {name: i for i, name in enumerate(names)}
        self.tokens = self._tokenize()
        self.i = 0

    def _tokenize(self):
        tokens = []
        pos = 0
        src = self.source
        while True:
            while pos < len(src) and src[pos].isspace():
                pos += 1
            if pos >= len(src):
                break
            m = _TOKEN.match(src, pos)
            if not m:
                raise ParseError(f"unexpected character {src[pos]!r}", src, pos)
            start = m.start(m.lastgroup)
            kind = m.lastgroup
            text = m.group(kind)
            if kind == "num":
                tail = _BAD_NUMBER.match(src, start)
                if tail and tail.end() > m.end():
                    raise ParseError(f"malformed number {tail.group()!r}", src, start)
            tokens.append((kind, text, start))
            pos = m.end()
        tokens.append(("end", "", len(src)))
        return tokens

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, t, pos = self.take()
        if t != text:
            raise ParseError(f"unexpected {t or 'end of input'!r}", self.source, pos, [repr(text)])

    def parse(self) -> Expr:
        e = self.expr()
        kind, t, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {t!r}", self.source, pos, ["operator", "end of input"])
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = "add" if self.take()[1] == "+" else "sub"
            e = _fold(Binary(op, e, self.term()))
        return e

    def term(self) -> Expr:
        e = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = "mul" if self.take()[1] == "*" else "div"
            e = _fold(Binary(op, e, self.factor()))
        return e

    def factor(self) -> Expr:
        # unary minus binds looser than ^, so -x^2 is -(x^2)
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return _fold(Unary("neg", self.factor()))
        base = self.atom()
        if self.peek()[:2] == ("op", "^"):
            _, _, pos = self.take()
            exponent = self.factor()
            if not isinstance(exponent, Const):
                raise ParseError("exponent must be a rational constant", self.source, pos + 1)
            return _fold(Pow(base, exponent.value))
        return base

    def atom(self) -> Expr:
        kind, text, pos = self.take()
        if kind == "num":
            return Const(Fraction(text))
        if kind == "id":
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Unary(text, arg)
            if text not in self.names:
                raise ParseError(f"unknown identifier {text!r}", self.source, pos,
                                 sorted(self.names) + list(FUNCTIONS))
            if self.peek()[:2] == ("op", "("):
                raise ParseError(f"{text!r} is a variable, not a function", self.source, pos)
            return Var(self.names[text], text)
        if (kind, text) == ("op", "("):
            e = self.expr()
            self.expect(")")
            return e
        raise ParseError(f"unexpected {text or 'end of input'!r}", self.source, pos,
                         ["number", "identifier", "'('", "'-'"])


def _fold(e: Expr) -> Expr:
    """Fold a node whose children are all constants; leave everything else."""
    if isinstance(e, Unary) and e.op == "neg" and isinstance(e.arg, Const):
        return Const(-e.arg.value)
    if isinstance(e, Binary) and isinstance(e.left, Const) and isinstance(e.right, Const):
        a, b = e.left.value, e.right.value
        if e.op == "add":
            return Const(a + b)
        if e.op == "sub":
            return Const(a - b)
        if e.op == "mul":
            return Const(a * b)
        if b != 0:
            return Const(a / b)
    if isinstance(e, Pow) and isinstance(e.base, Const):
        folded = _fold_pow(e.base.value, e.exponent)
        if folded is not None:
            return Const(folded)
    return e


def parse(source: str, variables: Sequence[str]) -> Expr:
    """Parse DSL text over the declared variable names."""
    variables = list(variables)
    if not variables:
        raise ValueError("variable list must not be empty")
    if len(set(variables)) != len(variables):
        raise ValueError(f"duplicate variable names in {variables}")
    clash = set(variables) & set(FUNCTIONS)
    if clash:
        raise ValueError(f"variable names clash with functions: {sorted(clash)}")
    return _Parser(source, variables).parse()
