"""Small arithmetic expression language for coefficient and initial-data fields.

Grammar (whitespace insensitive)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := base ('^' factor)?
    base   := number | variable | function '(' expr ')' | '(' expr ')' | '-' base

Variables are ``x`` and ``u1 .. un``; functions are sin, cos, exp, tanh; ``pi`` is a
constant.  ``^`` is right associative (``2^3^2`` is 512) and unary minus binds
tighter than ``^`` (``-2^2`` is 4).  Parsing and evaluation are deterministic;
evaluation is vectorized over numpy arrays and total on finite inputs except for
division by zero and ``0 ^ negative``, which raise :class:`EvaluationError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

__all__ = [
    "ExpressionAst",
    "ExpressionError",
    "EvaluationError",
    "parse_expression",
    "evaluate",
]

_FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "tanh": np.tanh}


class ExpressionError(ValueError):
    """Parse failure; ``offset`` is the byte offset into the source text."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


class EvaluationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Num, Var, Neg, BinOp, Call]


@dataclass(frozen=True)
class ExpressionAst:
    """Parsed expression: root node, original source, referenced variable names."""

    root: Node
    source: str
    variables: frozenset[str] = field(default_factory=frozenset)

    def __call__(self, **env) -> np.ndarray | float:
        return evaluate(self, env)


# --- tokenizer -------------------------------------------------------------

_TOK_NUM = "num"
_TOK_IDENT = "ident"
_TOK_OP = "op"
_TOK_END = "end"


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    toks = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in "+-*/^()":
            toks.append((_TOK_OP, c, i))
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            while j < n and text[j].isdigit():
                j += 1
            if j < n and text[j] == ".":
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            toks.append((_TOK_NUM, text[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append((_TOK_IDENT, text[i:j], i))
            i = j
            continue
        raise ExpressionError(f"unexpected character {c!r}", _byte_offset(text, i))
    toks.append((_TOK_END, "", n))
    return toks


# --- parser ----------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.pos = 0
        self.variables: set[str] = set()

    def peek(self):
        return self.toks[self.pos]

    def advance(self):
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def error(self, message: str, tok=None):
        tok = tok or self.peek()
        raise ExpressionError(message, _byte_offset(self.text, tok[2]))

    def parse(self) -> Node:
        node = self.expr()
        kind, val, _ = self.peek()
        if kind != _TOK_END:
            self.error(f"unexpected token {val!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[:2] in ((_TOK_OP, "+"), (_TOK_OP, "-")):
            op = self.advance()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek()[:2] in ((_TOK_OP, "*"), (_TOK_OP, "/")):
            op = self.advance()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        node = self.base()
        if self.peek()[:2] == (_TOK_OP, "^"):
            self.advance()
            node = BinOp("^", node, self.factor())  # right associative
        return node

    def base(self) -> Node:
        kind, val, _ = self.peek()
        if (kind, val) == (_TOK_OP, "-"):
            self.advance()
            return Neg(self.base())
        if (kind, val) == (_TOK_OP, "("):
            self.advance()
            node = self.expr()
            self.expect_close()
            return node
        if kind == _TOK_NUM:
            self.advance()
            return Num(float(val))
        if kind == _TOK_IDENT:
            tok = self.advance()
            name = tok[1]
            if self.peek()[:2] == (_TOK_OP, "("):
                if name not in _FUNCTIONS:
                    self.error(f"unknown function {name!r}", tok)
                self.advance()
                arg = self.expr()
                self.expect_close()
                return Call(name, arg)
            if name == "pi":
                return Num(np.pi)
            if name == "x" or _is_state_name(name):
                self.variables.add(name)
                return Var(name)
            self.error(f"unknown identifier {name!r}", tok)
        self.error("expected a number, variable, or '('")

    def expect_close(self):
        if self.peek()[:2] != (_TOK_OP, ")"):
            self.error("expected ')'")
        self.advance()


def _is_state_name(name: str) -> bool:
    return len(name) > 1 and name[0] == "u" and name[1:].isdigit()


def parse_expression(text: str, n_state: int | None = None) -> ExpressionAst:
    """Parse ``text``; if ``n_state`` is given, reject u-indices outside 1..n_state."""
    parser = _Parser(text)
    root = parser.parse()
    if n_state is not None:
        for name in parser.variables:
            if _is_state_name(name):
                idx = int(name[1:])
                if not 1 <= idx <= n_state:
                    raise ExpressionError(
                        f"state variable {name!r} out of range 1..{n_state}", 0
                    )
    return ExpressionAst(root, text, frozenset(parser.variables))


# --- evaluation ------------------------------------------------------------


def _eval(node: Node, env: dict):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise EvaluationError(f"no value bound for variable {node.name!r}") from None
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, Call):
        return _FUNCTIONS[node.func](np.asarray(_eval(node.arg, env), dtype=float))
    left = _eval(node.left, env)
    right = _eval(node.right, env)
    if node.op == "+":
        return np.add(left, right)
    if node.op == "-":
        return np.subtract(left, right)
    if node.op == "*":
        return np.multiply(left, right)
    if node.op == "/":
        if np.any(np.asarray(right) == 0):
            raise EvaluationError(f"division by zero in {_render(node)!r}")
        return np.divide(left, right)
    # power
    base = np.asarray(left, dtype=float)
    expo = np.asarray(right, dtype=float)
    if np.any((base == 0) & (expo < 0)):
        raise EvaluationError(f"zero raised to a negative power in {_render(node)!r}")
    with np.errstate(invalid="ignore"):
        out = np.power(base, expo)
    if np.any(~np.isfinite(out)):
        raise EvaluationError(f"non-finite result in {_render(node)!r}")
    return out


def _render(node: Node) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"-{_render(node.operand)}"
    if isinstance(node, Call):
        return f"{node.func}({_render(node.arg)})"
    return f"({_render(node.left)} {node.op} {_render(node.right)})"


def evaluate(ast: ExpressionAst, env: dict) -> np.ndarray | float:
    """Evaluate with ``env`` binding variable names to scalars or arrays."""
    return _eval(ast.root, env)


def as_spatial_function(ast: ExpressionAst):
    """Wrap as f(x) -> array shaped like x (state variables must not occur)."""
    state = [v for v in ast.variables if v != "x"]
    if state:
        raise EvaluationError(
            f"expression {ast.source!r} references state variables {sorted(state)}"
        )

    def f(x):
        x = np.asarray(x, dtype=float)
        out = evaluate(ast, {"x": x})
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape).copy()

    return f


def as_state_function(ast: ExpressionAst, n_state: int):
    """Wrap as f(x, u) with u shaped (n_state, ...) broadcast against x."""

    def f(x, u):
        x = np.asarray(x, dtype=float)
        env = {"x": x}
        for i in range(n_state):
            env[f"u{i + 1}"] = np.asarray(u[i], dtype=float)
        out = evaluate(ast, env)
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape).copy()

    return f
