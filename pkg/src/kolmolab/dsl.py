"""Small expression DSL for coefficient fields.

Grammar (EBNF):

    expr   := ['+'|'-'] term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := base ('^' number)?
    base   := number | 't' | 'x'i | 'normsq(x)' | 'exp(' expr ')'
            | '(' expr ')' | ident

Identifiers resolve to named sub-expressions supplied as bindings (used
for scalar functions of t such as damping profiles).  Expressions are
evaluated with numpy broadcasting over (t, x) sample arrays, support
symbolic differentiation in t and x_i, and round-trip through
``print`` / ``parse``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DslError",
    "CoeffExpr",
    "parse_coeff_expr",
    "parse_state_expr",
    "const_expr",
    "check_guards",
]


class DslError(ValueError):
    """Syntax or semantic error in a coefficient expression.

    ``offset`` is the byte offset into the source text, when known.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# AST nodes


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    # 't', 'x1'..'xd', or an extra state variable like 'z11'
    name: str


@dataclass(frozen=True)
class NormSq:
    pass


@dataclass(frozen=True)
class BinOp:
    op: str  # '+', '-', '*', '/'
    left: object
    right: object


@dataclass(frozen=True)
class Pow:
    base: object
    exponent: float


@dataclass(frozen=True)
class Exp:
    arg: object


@dataclass(frozen=True)
class Name:
    ident: str


# ---------------------------------------------------------------------------
# Tokenizer / parser

_OPS = set("+-*/^()")


def _tokenize(text):
    tokens = []  # (kind, value, offset)
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in _OPS:
            tokens.append(("op", c, i))
            i += 1
            continue
        if c.isdigit() or c == ".":
            j = i
            while j < n and (text[j].isdigit() or text[j] in ".eE" or
                             (text[j] in "+-" and j > i and text[j - 1] in "eE")):
                j += 1
            try:
                value = float(text[i:j])
            except ValueError:
                raise DslError(f"bad number {text[i:j]!r}", i)
            tokens.append(("num", value, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("ident", text[i:j], i))
            i = j
            continue
        raise DslError(f"unexpected character {c!r}", i)
    tokens.append(("end", None, n))
    return tokens


class _Parser:
    def __init__(self, text, var_names):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self.var_names = var_names

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, op):
        kind, value, offset = self.peek()
        if kind != "op" or value != op:
            raise DslError(f"expected {op!r}", offset)
        self.advance()

    def parse(self):
        node = self.expr()
        kind, _, offset = self.peek()
        if kind != "end":
            raise DslError("trailing input", offset)
        return node

    def expr(self):
        kind, value, _ = self.peek()
        if kind == "op" and value in "+-":
            self.advance()
            node = self.term()
            if value == "-":
                node = BinOp("-", Num(0.0), node)
        else:
            node = self.term()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "+-":
                self.advance()
                node = BinOp(value, node, self.term())
            else:
                return node

    def term(self):
        node = self.factor()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "*/":
                self.advance()
                node = BinOp(value, node, self.factor())
            else:
                return node

    def factor(self):
        node = self.base()
        kind, value, _ = self.peek()
        if kind == "op" and value == "^":
            self.advance()
            kind, value, offset = self.peek()
            sign = 1.0
            if kind == "op" and value in "+-":
                sign = -1.0 if value == "-" else 1.0
                self.advance()
                kind, value, offset = self.peek()
            if kind != "num":
                raise DslError("exponent must be a number", offset)
            self.advance()
            node = Pow(node, sign * value)
        return node

    def base(self):
        kind, value, offset = self.advance()
        if kind == "num":
            return Num(value)
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        if kind == "ident":
            if value == "normsq":
                self.expect_op("(")
                kind2, value2, offset2 = self.advance()
                if kind2 != "ident" or value2 != "x":
                    raise DslError("normsq takes the bare argument x", offset2)
                self.expect_op(")")
                return NormSq()
            if value == "exp":
                self.expect_op("(")
                node = self.expr()
                self.expect_op(")")
                return Exp(node)
            if value in self.var_names:
                return Var(value)
            # anything else resolves through the binding environment
            return Name(value)
        raise DslError("expected a number, variable or parenthesis", offset)


# ---------------------------------------------------------------------------
# Printing

def _print(node):
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, NormSq):
        return "normsq(x)"
    if isinstance(node, BinOp):
        return f"({_print(node.left)} {node.op} {_print(node.right)})"
    if isinstance(node, Pow):
        return f"({_print(node.base)})^{node.exponent!r}"
    if isinstance(node, Exp):
        return f"exp({_print(node.arg)})"
    if isinstance(node, Name):
        return node.ident
    raise TypeError(node)


# ---------------------------------------------------------------------------
# Evaluation

def _eval(node, t, x, bindings):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        if node.name == "t":
            return t
        if node.name.startswith("x"):
            return x[int(node.name[1:]) - 1]
        raise DslError(f"unbound state variable {node.name!r}")
    if isinstance(node, NormSq):
        return sum(x[i] * x[i] for i in range(len(x)))
    if isinstance(node, BinOp):
        a = _eval(node.left, t, x, bindings)
        b = _eval(node.right, t, x, bindings)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        return a / b
    if isinstance(node, Pow):
        base = _eval(node.base, t, x, bindings)
        e = node.exponent
        if e == int(e):
            return base ** int(e)
        return np.power(base, e)
    if isinstance(node, Exp):
        return np.exp(_eval(node.arg, t, x, bindings))
    if isinstance(node, Name):
        if node.ident not in bindings:
            raise DslError(f"unknown identifier {node.ident!r}")
        bound = bindings[node.ident]
        return _eval(bound.ast, t, x, bindings)
    raise TypeError(node)


def _eval_state(node, t, x, z, bindings):
    # like _eval but with extra z variables (flattened names z11, z12, ...)
    if isinstance(node, Var) and node.name.startswith("z"):
        return z[node.name]
    if isinstance(node, BinOp):
        a = _eval_state(node.left, t, x, z, bindings)
        b = _eval_state(node.right, t, x, z, bindings)
        return {"+": a + b, "-": a - b, "*": a * b, "/": a / b}[node.op]
    if isinstance(node, Pow):
        base = _eval_state(node.base, t, x, z, bindings)
        e = node.exponent
        return base ** int(e) if e == int(e) else np.power(base, e)
    if isinstance(node, Exp):
        return np.exp(_eval_state(node.arg, t, x, z, bindings))
    if isinstance(node, Name):
        return _eval_state(bindings[node.ident].ast, t, x, z, bindings)
    return _eval(node, t, x, bindings)


# ---------------------------------------------------------------------------
# Differentiation (sum/product/quotient/chain rules over the listed ops)

def _diff(node, var, bindings):
    if isinstance(node, (Num,)):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0) if node.name == var else Num(0.0)
    if isinstance(node, NormSq):
        if var.startswith("x"):
            return _mul(Num(2.0), Var(var))
        return Num(0.0)
    if isinstance(node, BinOp):
        da = _diff(node.left, var, bindings)
        db = _diff(node.right, var, bindings)
        if node.op in "+-":
            return _add(da, db) if node.op == "+" else _sub(da, db)
        if node.op == "*":
            return _add(_mul(da, node.right), _mul(node.left, db))
        # quotient rule
        num = _sub(_mul(da, node.right), _mul(node.left, db))
        return BinOp("/", num, Pow(node.right, 2.0))
    if isinstance(node, Pow):
        db = _diff(node.base, var, bindings)
        return _mul(_mul(Num(node.exponent), Pow(node.base, node.exponent - 1.0)), db)
    if isinstance(node, Exp):
        return _mul(node, _diff(node.arg, var, bindings))
    if isinstance(node, Name):
        if node.ident not in bindings:
            raise DslError(f"unknown identifier {node.ident!r}")
        return _diff(bindings[node.ident].ast, var, bindings)
    raise TypeError(node)


def _is_num(node, value=None):
    return isinstance(node, Num) and (value is None or node.value == value)


def _add(a, b):
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    return BinOp("+", a, b)


def _sub(a, b):
    if _is_num(b, 0.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value - b.value)
    return BinOp("-", a, b)


def _mul(a, b):
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return Num(0.0)
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    return BinOp("*", a, b)


def _subst_t(node, repl):
    if isinstance(node, Var):
        return repl if node.name == "t" else node
    if isinstance(node, BinOp):
        return BinOp(node.op, _subst_t(node.left, repl),
                     _subst_t(node.right, repl))
    if isinstance(node, Pow):
        return Pow(_subst_t(node.base, repl), node.exponent)
    if isinstance(node, Exp):
        return Exp(_subst_t(node.arg, repl))
    return node


def _collect_vars(node, acc):
    if isinstance(node, Var):
        acc.add(node.name)
    elif isinstance(node, NormSq):
        acc.add("normsq")
    elif isinstance(node, BinOp):
        _collect_vars(node.left, acc)
        _collect_vars(node.right, acc)
    elif isinstance(node, Pow):
        _collect_vars(node.base, acc)
    elif isinstance(node, Exp):
        _collect_vars(node.arg, acc)


def _collect_names(node, acc):
    if isinstance(node, Name):
        acc.add(node.ident)
    elif isinstance(node, BinOp):
        _collect_names(node.left, acc)
        _collect_names(node.right, acc)
    elif isinstance(node, Pow):
        _collect_names(node.base, acc)
    elif isinstance(node, Exp):
        _collect_names(node.arg, acc)


def _collect_guards(node, acc):
    """Collect sub-expressions that must stay away from zero."""
    if isinstance(node, BinOp):
        _collect_guards(node.left, acc)
        _collect_guards(node.right, acc)
        if node.op == "/":
            acc.append(("denominator", node.right))
    elif isinstance(node, Pow):
        _collect_guards(node.base, acc)
        e = node.exponent
        if e != int(e) or e < 0:
            acc.append(("power base", node.base))
    elif isinstance(node, Exp):
        _collect_guards(node.arg, acc)


# ---------------------------------------------------------------------------
# Public wrapper


@dataclass(frozen=True)
class CoeffExpr:
    """A parsed coefficient expression over t, x_1..x_d (and optional
    extra state variables for nonlinearities)."""

    ast: object
    d: int
    bindings: dict = field(default_factory=dict)

    def __call__(self, t, x):
        """Evaluate at time(s) t and points x of shape (d, ...)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 and self.d > 1 and x.shape[0] == self.d:
            x = x.reshape(self.d, 1)[:, 0:][..., None][..., 0] if False else x
        coords = [x[i] for i in range(self.d)] if x.ndim > 0 else [x]
        out = _eval(self.ast, t, coords, self.bindings)
        return np.asarray(out, dtype=float) + np.zeros(np.broadcast(
            np.asarray(t, dtype=float), *coords).shape)

    def eval_state(self, t, x, z):
        """Evaluate with extra named state variables (dict name -> array)."""
        coords = [np.asarray(x)[i] for i in range(self.d)]
        return np.asarray(_eval_state(self.ast, t, coords, z, self.bindings),
                         dtype=float)

    def diff(self, var):
        """Symbolic derivative with respect to 't' or 'x1'..'xd'."""
        return CoeffExpr(_diff(self.ast, var, self.bindings), self.d,
                         self.bindings)

    def depends_on_t(self):
        acc = set()
        _collect_vars(self.ast, acc)
        names = set()
        _collect_names(self.ast, names)
        for ident in names:
            if ident in self.bindings and self.bindings[ident].depends_on_t():
                return True
        return "t" in acc

    def free_variables(self):
        acc = set()
        _collect_vars(self.ast, acc)
        names = set()
        _collect_names(self.ast, names)
        for ident in names:
            if ident in self.bindings:
                acc |= self.bindings[ident].free_variables()
        return acc

    def time_reversed(self, T):
        """Substitute t -> T - t everywhere, including bindings."""
        repl = BinOp("-", Num(float(T)), Var("t"))
        new_bindings = {k: CoeffExpr(_subst_t(v.ast, repl), v.d, {})
                        for k, v in self.bindings.items()}
        for v in new_bindings.values():
            object.__setattr__(v, "bindings", new_bindings)
        return CoeffExpr(_subst_t(self.ast, repl), self.d, new_bindings)

    def print(self):
        return _print(self.ast)

    def __repr__(self):
        return f"CoeffExpr({self.print()})"


def parse_coeff_expr(text, d, bindings=None):
    """Parse an expression over t, x_1..x_d. See module docstring."""
    var_names = {"t"} | {f"x{i + 1}" for i in range(d)}
    ast = _Parser(text, var_names).parse()
    expr = CoeffExpr(ast, d, dict(bindings or {}))
    names = set()
    _collect_names(ast, names)
    unresolved = names - set(expr.bindings)
    if unresolved:
        raise DslError(f"unknown identifier {sorted(unresolved)[0]!r}")
    return expr


def parse_state_expr(text, d, m, bindings=None):
    """Parse a nonlinearity expression over t, x_i and z_{ik} (named
    z11..z<d><m>, spatial index first)."""
    var_names = {"t"} | {f"x{i + 1}" for i in range(d)}
    var_names |= {f"z{i + 1}{k + 1}" for i in range(d) for k in range(m)}
    ast = _Parser(text, var_names).parse()
    expr = CoeffExpr(ast, d, dict(bindings or {}))
    names = set()
    _collect_names(ast, names)
    unresolved = names - set(expr.bindings)
    if unresolved:
        raise DslError(f"unknown identifier {sorted(unresolved)[0]!r}")
    return expr


def const_expr(value, d):
    return CoeffExpr(Num(float(value)), d)


def check_guards(expr, box, time_interval, n_samples=512, floor=1e-8):
    """Load-time guard: denominators and fractional-power bases must stay
    bounded away from 0 on the sampled box x time window.  Raises DslError.
    """
    guards = []
    _collect_guards(expr.ast, guards)

    def walk_names(node):
        names = set()
        _collect_names(node, names)
        for ident in names:
            if ident in expr.bindings:
                sub = []
                _collect_guards(expr.bindings[ident].ast, sub)
                guards.extend(sub)

    walk_names(expr.ast)
    if not guards:
        return
    rng = np.random.default_rng(0)
    lo, hi = time_interval
    ts = rng.uniform(lo, hi, n_samples)
    xs = rng.uniform(-box, box, (expr.d, n_samples))
    for kind, node in guards:
        sub = CoeffExpr(node, expr.d, expr.bindings)
        vals = sub(ts, xs)
        # a sign change implies a zero crossing somewhere on the box
        if np.min(np.abs(vals)) < floor or (np.min(vals) < 0 < np.max(vals)):
            raise DslError(
                f"{kind} {sub.print()!r} not bounded away from 0 on the box")
        if kind == "power base" and np.min(vals) < floor:
            raise DslError(
                f"{kind} {sub.print()!r} must stay positive on the box")
