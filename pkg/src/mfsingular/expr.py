"""Small arithmetic expression language used for model coefficients.

Grammar (lowest to highest precedence)::

    expr    := compare
    compare := sum [('<' | '<=' | '>' | '>=' | '==' | '!=') sum]
    sum     := product (('+' | '-') product)*
    product := unary (('*' | '/') unary)*
    unary   := ('-' | '+') unary | power
    power   := atom ['^' unary]
    atom    := NUMBER | NAME ['[' INT ']'] | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Comparisons evaluate to 1.0 / 0.0.  Expressions are compiled to numpy code,
can be differentiated symbolically, and printed back to source form.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

FUNCTIONS = {
    "exp": 1, "log": 1, "tanh": 1, "sqrt": 1, "abs": 1, "sign": 1,
    "min": -1, "max": -1,
}
_NP_FUNC = {
    "exp": "np.exp", "log": "np.log", "tanh": "np.tanh", "sqrt": "np.sqrt",
    "abs": "np.abs", "sign": "np.sign",
}
_CMP = ("<=", ">=", "==", "!=", "<", ">")


class ExprSyntaxError(ValueError):
    """Raised on malformed expressions; ``col`` is a 1-based column."""

    def __init__(self, message, col):
        super().__init__(f"{message} (column {col})")
        self.msg = message
        self.col = col


# --------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str
    index: int | None = None


@dataclass(frozen=True)
class Unary:
    op: str
    arg: object


@dataclass(frozen=True)
class Bin:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple


# --------------------------------------------------------------------------
# tokenizer / parser

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op><=|>=|==|!=|[-+*/^()<>\[\],])
""", re.VERBOSE)


def _tokenize(text):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos + 1)
        kind = m.lastgroup
        if kind != "ws":
            out.append((kind, m.group(), pos + 1))
        pos = m.end()
    out.append(("end", "", len(text) + 1))
    return out


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, value=None):
        tok = self.toks[self.i]
        if value is not None and tok[1] != value:
            what = "end of expression" if tok[0] == "end" else repr(tok[1])
            raise ExprSyntaxError(f"expected {value!r}, found {what}", tok[2])
        self.i += 1
        return tok

    def parse(self):
        if self.peek()[0] == "end":
            raise ExprSyntaxError("empty expression", 1)
        node = self.compare()
        tok = self.peek()
        if tok[0] != "end":
            raise ExprSyntaxError(f"unexpected {tok[1]!r}", tok[2])
        return node

    def compare(self):
        left = self.sum()
        tok = self.peek()
        if tok[1] in _CMP:
            self.take()
            left = Bin(tok[1], left, self.sum())
        return left

    def sum(self):
        node = self.product()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = Bin(op, node, self.product())
        return node

    def product(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = Bin(op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok[1] == "-":
            self.take()
            return Unary("-", self.unary())
        if tok[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return Bin("^", base, self.unary())
        return base

    def atom(self):
        kind, value, col = self.peek()
        if kind == "num":
            self.take()
            return Num(float(value))
        if kind == "name":
            self.take()
            if self.peek()[1] == "(":
                if value not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {value!r}", col)
                self.take("(")
                args = [self.compare()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.compare())
                self.take(")")
                arity = FUNCTIONS[value]
                if arity > 0 and len(args) != arity:
                    raise ExprSyntaxError(f"{value} takes {arity} argument(s)", col)
                if arity < 0 and len(args) < 2:
                    raise ExprSyntaxError(f"{value} takes at least 2 arguments", col)
                return Call(value, tuple(args))
            if value in FUNCTIONS:
                raise ExprSyntaxError(f"function {value!r} used without arguments", col)
            if self.peek()[1] == "[":
                self.take()
                kind2, idx, col2 = self.take()
                if kind2 != "num" or not idx.isdigit():
                    raise ExprSyntaxError("index must be a non-negative integer", col2)
                self.take("]")
                return Var(value, int(idx))
            return Var(value)
        if value == "(":
            self.take()
            node = self.compare()
            self.take(")")
            return node
        what = "end of expression" if kind == "end" else repr(value)
        raise ExprSyntaxError(f"unexpected {what}", col)


def parse(text):
    """Parse ``text`` into an AST."""
    return _Parser(text).parse()


# --------------------------------------------------------------------------
# tree utilities

def free_vars(node):
    """Set of ``(name, index)`` pairs referenced by ``node``."""
    if isinstance(node, Var):
        return {(node.name, node.index)}
    if isinstance(node, Num):
        return set()
    if isinstance(node, Unary):
        return free_vars(node.arg)
    if isinstance(node, Bin):
        return free_vars(node.left) | free_vars(node.right)
    out = set()
    for a in node.args:
        out |= free_vars(a)
    return out


def substitute(node, mapping):
    """Replace variables by nodes; ``mapping`` keys are ``(name, index)``."""
    if isinstance(node, Var):
        return mapping.get((node.name, node.index), node)
    if isinstance(node, Num):
        return node
    if isinstance(node, Unary):
        return Unary(node.op, substitute(node.arg, mapping))
    if isinstance(node, Bin):
        return Bin(node.op, substitute(node.left, mapping), substitute(node.right, mapping))
    return Call(node.fn, tuple(substitute(a, mapping) for a in node.args))


_PREC = {"cmp": 1, "+": 2, "-": 2, "*": 3, "/": 3, "neg": 4, "^": 5}


def to_source(node, _parent=0):
    """Print ``node`` back to expression syntax (round-trips through ``parse``)."""
    if isinstance(node, Num):
        v = node.value
        if v == int(v) and abs(v) < 1e15:
            s = str(int(v))
        else:
            s = repr(v)
        if v < 0 and _parent > 0:
            return f"({s})"
        return s
    if isinstance(node, Var):
        return node.name if node.index is None else f"{node.name}[{node.index}]"
    if isinstance(node, Call):
        return f"{node.fn}(" + ", ".join(to_source(a) for a in node.args) + ")"
    if isinstance(node, Unary):
        s = "-" + to_source(node.arg, _PREC["neg"])
        return f"({s})" if _parent >= _PREC["neg"] else s
    prec = _PREC["cmp"] if node.op in _CMP else _PREC[node.op]
    if node.op == "^":
        s = f"{to_source(node.left, prec)} ^ {to_source(node.right, prec - 1)}"
    else:
        # right operand binds tighter so a - (b - c) keeps its parentheses
        s = f"{to_source(node.left, prec - 1 if prec > 1 else prec)} {node.op} {to_source(node.right, prec)}"
    return f"({s})" if _parent >= prec else s


# --------------------------------------------------------------------------
# simplifying constructors used by differentiation

def _num(v):
    return Num(float(v))


def _is(node, v):
    return isinstance(node, Num) and node.value == v


def add(a, b):
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return _num(a.value + b.value)
    return Bin("+", a, b)


def sub(a, b):
    if _is(b, 0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return _num(a.value - b.value)
    if _is(a, 0):
        return neg(b)
    return Bin("-", a, b)


def mul(a, b):
    if _is(a, 0) or _is(b, 0):
        return _num(0)
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return _num(a.value * b.value)
    return Bin("*", a, b)


def div(a, b):
    if _is(a, 0):
        return _num(0)
    if _is(b, 1):
        return a
    return Bin("/", a, b)


def neg(a):
    if isinstance(a, Num):
        return _num(-a.value)
    if isinstance(a, Unary):
        return a.arg
    return Unary("-", a)


def power(a, b):
    if _is(b, 0):
        return _num(1)
    if _is(b, 1):
        return a
    return Bin("^", a, b)


def diff(node, var):
    """Symbolic derivative of ``node`` with respect to ``var`` = ``(name, index)``."""
    if isinstance(node, Num):
        return _num(0)
    if isinstance(node, Var):
        return _num(1.0 if (node.name, node.index) == var else 0.0)
    if isinstance(node, Unary):
        return neg(diff(node.arg, var))
    if isinstance(node, Bin):
        a, b = node.left, node.right
        if node.op in _CMP:
            return _num(0)
        da, db = diff(a, var), diff(b, var)
        if node.op == "+":
            return add(da, db)
        if node.op == "-":
            return sub(da, db)
        if node.op == "*":
            return add(mul(da, b), mul(a, db))
        if node.op == "/":
            return div(sub(mul(da, b), mul(a, db)), power(b, _num(2)))
        # power
        if var not in free_vars(b):
            if isinstance(b, Num):
                return mul(mul(b, power(a, _num(b.value - 1))), da)
            return mul(mul(b, power(a, sub(b, _num(1)))), da)
        return mul(node, add(mul(db, Call("log", (a,))), div(mul(b, da), a)))
    fn, args = node.fn, node.args
    if fn in ("min", "max"):
        if len(args) > 2:
            return diff(Call(fn, (Call(fn, args[:-1]), args[-1])), var)
        a, b = args
        pick = Bin("<=", a, b) if fn == "min" else Bin(">=", a, b)
        other = sub(_num(1), pick)
        return add(mul(pick, diff(a, var)), mul(other, diff(b, var)))
    (a,) = args
    da = diff(a, var)
    if _is(da, 0):
        return _num(0)
    if fn == "exp":
        return mul(node, da)
    if fn == "log":
        return div(da, a)
    if fn == "tanh":
        return mul(sub(_num(1), power(node, _num(2))), da)
    if fn == "sqrt":
        return div(da, mul(_num(2), node))
    if fn == "abs":
        return mul(Call("sign", (a,)), da)
    return _num(0)  # sign


# --------------------------------------------------------------------------
# compilation

def _codegen(node, scalar_vars):
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        if node.index is None or node.name in scalar_vars:
            return f"v[{node.name!r}]"
        return f"v[{node.name!r}][..., {node.index}]"
    if isinstance(node, Unary):
        return f"(-{_codegen(node.arg, scalar_vars)})"
    if isinstance(node, Bin):
        a, b = _codegen(node.left, scalar_vars), _codegen(node.right, scalar_vars)
        if node.op in _CMP:
            return f"np.where({a} {node.op} {b}, 1.0, 0.0)"
        if node.op == "^":
            return f"np.power({a}, {b})"
        return f"({a} {node.op} {b})"
    args = [_codegen(a, scalar_vars) for a in node.args]
    if node.fn in ("min", "max"):
        out = args[0]
        f = "np.minimum" if node.fn == "min" else "np.maximum"
        for a in args[1:]:
            out = f"{f}({out}, {a})"
        return out
    return f"{_NP_FUNC[node.fn]}({args[0]})"


class Expression:
    """A compiled expression.

    ``names`` maps every allowed identifier to ``None`` (scalar) or the
    length of the vector it indexes; unknown identifiers, out-of-range
    indices, and bare vector names of length > 1 raise ``ExprSyntaxError``.
    A bare vector name of length 1 means its only component.
    """

    def __init__(self, source, names=None, *, tree=None):
        self.source = source if tree is None else to_source(tree)
        tree = parse(source) if tree is None else tree
        if names is not None:
            tree = self._resolve(tree, names, source)
        self.tree = tree
        self.names = names
        self.vars = free_vars(tree)
        scalar_vars = {n for n, size in (names or {}).items() if size is None}
        code = _codegen(tree, scalar_vars)
        self._fn = eval(f"lambda v: {code}", {"np": np})  # noqa: S307 - generated from parsed AST

    @staticmethod
    def _resolve(tree, names, source):
        mapping = {}
        for name, index in free_vars(tree):
            col = _find_col(source, name)
            if name not in names:
                raise ExprSyntaxError(f"unknown identifier {name!r}", col)
            size = names[name]
            if size is None:
                if index is not None:
                    raise ExprSyntaxError(f"{name!r} is a scalar and cannot be indexed", col)
                continue
            if index is None:
                if size != 1:
                    raise ExprSyntaxError(f"{name!r} has {size} components; index it as {name}[i]", col)
                mapping[(name, None)] = Var(name, 0)
            elif index >= size:
                raise ExprSyntaxError(f"index {index} out of range for {name!r} (size {size})", col)
        return substitute(tree, mapping) if mapping else tree

    def depends_on(self, name):
        return any(n == name for n, _ in self.vars)

    @property
    def is_constant(self):
        return not self.vars

    def __call__(self, env, shape=None):
        # domain errors surface as nan/inf and are checked by callers
        with np.errstate(all="ignore"):
            out = np.asarray(self._fn(env), dtype=float)
        if shape is not None and out.shape != tuple(shape):
            out = np.broadcast_to(out, shape)
        return out

    def derivative(self, name, index=None):
        return Expression(None, self.names, tree=diff(self.tree, (name, index)))

    def __repr__(self):
        return f"Expression({self.source!r})"

    def __getstate__(self):
        return {"tree": self.tree, "names": self.names, "source": self.source}

    def __setstate__(self, state):
        self.__init__(state["source"], state["names"], tree=state["tree"])


def _find_col(source, name):
    if source is None:
        return 1
    m = re.search(rf"\b{re.escape(name)}\b", source)
    return m.start() + 1 if m else 1


def constant(value):
    return Expression(None, {}, tree=Num(float(value)))


__all__ = [
    "Expression", "ExprSyntaxError", "parse", "to_source", "diff", "free_vars",
    "constant", "Num", "Var", "Unary", "Bin", "Call",
]
