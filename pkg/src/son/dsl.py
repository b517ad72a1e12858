"""Strategy DSL for developer-supplied placement and scaling managers.

Programs are restricted, side-effect-free expressions:

    placement:  score = <expr>
    scaling:    when <expr> <cmp> <expr> then <action>   (one or more rules)

    action:     replicas + <int> | replicas - <int> | replicas = <expr> | noop
    expr:       numbers, attributes (`cpu_free`, `latency_ms[pop-b]`),
                avg(<metric>, <seconds>), min/max(expr, expr), + - * /,
                unary minus, parentheses and
                if <expr> <cmp> <expr> then <expr> else <expr>
    cmp:        < <= > >=

Evaluation is total: every run either produces a finite 64-bit float within a
fixed node-visit budget or raises a typed error.  NaN results are forbidden.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol, Union

from son.errors import PlatformError

MAX_SOURCE_BYTES = 64 * 1024
#: Node visits allowed per evaluation call; guarantees termination.
DEFAULT_STEP_BUDGET = 10_000
#: Parenthesis/if nesting ceiling, keeps parsing and evaluation iterative-deep.
MAX_NESTING_DEPTH = 200


class DslError(PlatformError):
    pass


class ParseError(DslError):
    def __init__(self, line: int, column: int, expected: tuple[str, ...], found: str):
        super().__init__(
            f"parse error at line {line}, column {column}: "
            f"expected {' | '.join(expected)}, found {found}"
        )
        self.line = line
        self.column = column
        self.expected = expected
        self.found = found


class BudgetExceeded(DslError):
    pass


class TypeMismatch(DslError):
    pass


class UnknownMetric(DslError):
    def __init__(self, name: str):
        super().__init__(f"metric {name!r} is not present in the environment")
        self.name = name


class UnknownAttribute(DslError):
    def __init__(self, name: str):
        super().__init__(f"attribute {name!r} is not present in the environment")
        self.name = name


class NoSamples(Exception):
    """Internal signal: a window average over an empty window; the enclosing
    rule simply does not fire."""


class ProgramKind(str, Enum):
    PLACEMENT = "PLACEMENT"
    SCALING = "SCALING"


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Number:
    value: float


@dataclass(frozen=True)
class Attr:
    name: str
    key: Optional[str] = None


@dataclass(frozen=True)
class Avg:
    attr: Attr
    window: int


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * /
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class MinMax:
    op: str  # min | max
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class IfExpr:
    cond_left: "Expr"
    cmp: str
    cond_right: "Expr"
    then: "Expr"
    orelse: "Expr"


Expr = Union[Number, Attr, Avg, Neg, BinOp, MinMax, IfExpr]


@dataclass(frozen=True)
class ReplicaDelta:
    delta: int


@dataclass(frozen=True)
class ReplicaSet:
    expr: Expr


@dataclass(frozen=True)
class Noop:
    pass


Action = Union[ReplicaDelta, ReplicaSet, Noop]


@dataclass(frozen=True)
class Rule:
    left: Expr
    cmp: str
    right: Expr
    action: Action


@dataclass(frozen=True)
class SsmProgram:
    kind: ProgramKind
    source: str
    score: Optional[Expr]
    rules: tuple[Rule, ...]
    declared_inputs: frozenset[str]


# ---------------------------------------------------------------------------
# lexer
# ---------------------------------------------------------------------------

_KEYWORDS = {
    "score", "when", "then", "else", "if", "noop", "avg", "max", "min", "replicas",
}
_SYMBOLS = ("<=", ">=", "<", ">", "=", "+", "-", "*", "/", "(", ")", "[", "]", ",")


@dataclass(frozen=True)
class _Token:
    type: str  # NUMBER | IDENT | keyword | symbol | EOF
    text: str
    line: int
    column: int
    value: float = 0.0


def _tokenize(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, column = 1, 1
    i, n = 0, len(source)
    while i < n:
        ch = source[i]
        if ch == "\n":
            line += 1
            column = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            column += 1
            continue
        start_col = column
        if ch.isdigit():
            j = i
            while j < n and source[j].isdigit():
                j += 1
            if j < n and source[j] == "." and j + 1 < n and source[j + 1].isdigit():
                j += 1
                while j < n and source[j].isdigit():
                    j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            text = source[i:j]
            tokens.append(_Token("NUMBER", text, line, start_col, value=float(text)))
            column += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] in "_-"):
                j += 1
            # identifiers may contain '-' (PoP ids); trailing '-' is an operator
            while j > i and source[j - 1] == "-":
                j -= 1
            text = source[i:j]
            ttype = text if text in _KEYWORDS else "IDENT"
            tokens.append(_Token(ttype, text, line, start_col))
            column += j - i
            i = j
            continue
        matched = None
        for sym in _SYMBOLS:
            if source.startswith(sym, i):
                matched = sym
                break
        if matched is None:
            raise ParseError(line, start_col, ("token",), repr(ch))
        tokens.append(_Token(matched, matched, line, start_col))
        i += len(matched)
        column += len(matched)
    tokens.append(_Token("EOF", "", line, column))
    return tokens


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0
        self.depth = 0

    @property
    def current(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        token = self.current
        if token.type != "EOF":
            self.pos += 1
        return token

    def expect(self, *types: str) -> _Token:
        if self.current.type in types:
            return self.advance()
        raise self.error(*types)

    def error(self, *expected: str) -> ParseError:
        tok = self.current
        found = tok.text if tok.type != "EOF" else "end of input"
        return ParseError(tok.line, tok.column, expected, found)

    def _enter(self) -> None:
        self.depth += 1
        if self.depth > MAX_NESTING_DEPTH:
            tok = self.current
            raise ParseError(tok.line, tok.column, ("shallower nesting",), tok.text)

    def _leave(self) -> None:
        self.depth -= 1

    # grammar ---------------------------------------------------------------

    def parse_placement(self) -> Expr:
        self.expect("score")
        self.expect("=")
        expr = self.expression()
        self.expect("EOF")
        return expr

    def parse_scaling(self) -> tuple[Rule, ...]:
        rules = [self.rule()]
        while self.current.type == "when":
            rules.append(self.rule())
        self.expect("EOF")
        return tuple(rules)

    def rule(self) -> Rule:
        self.expect("when")
        left = self.expression()
        cmp = self.expect("<", "<=", ">", ">=").text
        right = self.expression()
        self.expect("then")
        return Rule(left, cmp, right, self.action())

    def action(self) -> Action:
        if self.current.type == "noop":
            self.advance()
            return Noop()
        self.expect("replicas")
        tok = self.expect("+", "-", "=")
        if tok.type == "=":
            return ReplicaSet(self.expression())
        count = self.expect("NUMBER")
        if count.value != int(count.value) or count.value < 0:
            raise ParseError(count.line, count.column, ("non-negative integer",), count.text)
        delta = int(count.value)
        return ReplicaDelta(delta if tok.type == "+" else -delta)

    def expression(self) -> Expr:
        left = self.term()
        while self.current.type in ("+", "-"):
            op = self.advance().type
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.current.type in ("*", "/"):
            op = self.advance().type
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.current.type == "-":
            self.advance()
            self._enter()
            try:
                return Neg(self.unary())
            finally:
                self._leave()
        return self.primary()

    def primary(self) -> Expr:
        tok = self.current
        if tok.type == "NUMBER":
            self.advance()
            return Number(tok.value)
        if tok.type in ("IDENT", "replicas"):
            return self.attr()
        if tok.type == "avg":
            self.advance()
            self.expect("(")
            attr = self.attr()
            self.expect(",")
            window = self.expect("NUMBER")
            if window.value != int(window.value) or window.value <= 0:
                raise ParseError(window.line, window.column, ("positive integer",), window.text)
            self.expect(")")
            return Avg(attr, int(window.value))
        if tok.type in ("max", "min"):
            self.advance()
            self.expect("(")
            self._enter()
            try:
                left = self.expression()
                self.expect(",")
                right = self.expression()
            finally:
                self._leave()
            self.expect(")")
            return MinMax(tok.type, left, right)
        if tok.type == "(":
            self.advance()
            self._enter()
            try:
                expr = self.expression()
            finally:
                self._leave()
            self.expect(")")
            return expr
        if tok.type == "if":
            self.advance()
            self._enter()
            try:
                cond_left = self.expression()
                cmp = self.expect("<", "<=", ">", ">=").text
                cond_right = self.expression()
                self.expect("then")
                then = self.expression()
                self.expect("else")
                orelse = self.expression()
            finally:
                self._leave()
            return IfExpr(cond_left, cmp, cond_right, then, orelse)
        raise self.error("number", "attribute", "avg", "min", "max", "(", "if", "-")

    def attr(self) -> Attr:
        name = self.expect("IDENT", "replicas").text
        key = None
        if self.current.type == "[":
            self.advance()
            key = self.expect("IDENT").text
            self.expect("]")
        return Attr(name, key)


def parse_ssm(source: str, kind: ProgramKind | str) -> SsmProgram:
    """Parses a strategy program of the given kind.

    Raises :class:`ParseError` with position and expected-token information
    for any malformed input; oversized sources are rejected up front.
    """
    kind = ProgramKind(kind)
    if len(source.encode("utf-8")) > MAX_SOURCE_BYTES:
        raise ParseError(1, 1, (f"source of at most {MAX_SOURCE_BYTES} bytes",), "larger input")
    parser = _Parser(_tokenize(source))
    if kind is ProgramKind.PLACEMENT:
        score = parser.parse_placement()
        rules: tuple[Rule, ...] = ()
    else:
        score = None
        rules = parser.parse_scaling()
    inputs: set[str] = set()
    for node in ([score] if score is not None else []):
        _collect_inputs(node, inputs)
    for rule in rules:
        _collect_inputs(rule.left, inputs)
        _collect_inputs(rule.right, inputs)
        if isinstance(rule.action, ReplicaSet):
            _collect_inputs(rule.action.expr, inputs)
    return SsmProgram(kind, source, score, rules, frozenset(inputs))


def _collect_inputs(node: Expr, out: set[str]) -> None:
    if isinstance(node, Attr):
        out.add(node.name)
    elif isinstance(node, Avg):
        out.add(node.attr.name)
    elif isinstance(node, Neg):
        _collect_inputs(node.operand, out)
    elif isinstance(node, (BinOp, MinMax)):
        _collect_inputs(node.left, out)
        _collect_inputs(node.right, out)
    elif isinstance(node, IfExpr):
        for child in (node.cond_left, node.cond_right, node.then, node.orelse):
            _collect_inputs(child, out)


# ---------------------------------------------------------------------------
# pretty printer (render then parse is the identity on ASTs)
# ---------------------------------------------------------------------------

def render_program(program: SsmProgram) -> str:
    if program.kind is ProgramKind.PLACEMENT:
        assert program.score is not None
        return f"score = {render_expr(program.score)}"
    lines = []
    for rule in program.rules:
        lines.append(
            f"when {render_expr(rule.left)} {rule.cmp} {render_expr(rule.right)} "
            f"then {_render_action(rule.action)}"
        )
    return "\n".join(lines)


def render_expr(node: Expr) -> str:
    if isinstance(node, Number):
        if node.value == int(node.value) and abs(node.value) < 1e16:
            return str(int(node.value))
        return repr(node.value)
    if isinstance(node, Attr):
        return node.name if node.key is None else f"{node.name}[{node.key}]"
    if isinstance(node, Avg):
        return f"avg({render_expr(node.attr)}, {node.window})"
    if isinstance(node, Neg):
        return f"-{render_expr(node.operand)}"
    if isinstance(node, BinOp):
        return f"({render_expr(node.left)} {node.op} {render_expr(node.right)})"
    if isinstance(node, MinMax):
        return f"{node.op}({render_expr(node.left)}, {render_expr(node.right)})"
    if isinstance(node, IfExpr):
        return (
            f"(if {render_expr(node.cond_left)} {node.cmp} {render_expr(node.cond_right)} "
            f"then {render_expr(node.then)} else {render_expr(node.orelse)})"
        )
    raise TypeError(f"not an expression node: {node!r}")


def _render_action(action: Action) -> str:
    if isinstance(action, Noop):
        return "noop"
    if isinstance(action, ReplicaDelta):
        sign = "+" if action.delta >= 0 else "-"
        return f"replicas {sign} {abs(action.delta)}"
    return f"replicas = {render_expr(action.expr)}"


# ---------------------------------------------------------------------------
# evaluator
# ---------------------------------------------------------------------------

class EvalContext(Protocol):
    """What an evaluation environment must provide."""

    def attribute(self, name: str, key: Optional[str]) -> float: ...

    def window_average(self, metric: str, window_s: int, key: Optional[str]) -> float: ...


class Budget:
    """Node-visit (and optional CPU-time) budget for one evaluation."""

    __slots__ = ("remaining", "deadline", "clock")

    def __init__(self, visits: int = DEFAULT_STEP_BUDGET, cpu_seconds: Optional[float] = None):
        import time

        self.remaining = visits
        self.clock = time.process_time
        self.deadline = None if cpu_seconds is None else self.clock() + cpu_seconds

    def spend(self) -> None:
        self.remaining -= 1
        if self.remaining < 0:
            raise BudgetExceeded("evaluation step budget exhausted")
        if self.deadline is not None and self.remaining % 256 == 0:
            if self.clock() > self.deadline:
                raise BudgetExceeded("evaluation CPU budget exhausted")


def evaluate_expr(node: Expr, ctx: EvalContext, budget: Budget) -> float:
    budget.spend()
    if isinstance(node, Number):
        return node.value
    if isinstance(node, Attr):
        return _check_number(ctx.attribute(node.name, node.key))
    if isinstance(node, Avg):
        return _check_number(
            ctx.window_average(node.attr.name, node.window, node.attr.key)
        )
    if isinstance(node, Neg):
        return -evaluate_expr(node.operand, ctx, budget)
    if isinstance(node, BinOp):
        left = evaluate_expr(node.left, ctx, budget)
        right = evaluate_expr(node.right, ctx, budget)
        if node.op == "+":
            result = left + right
        elif node.op == "-":
            result = left - right
        elif node.op == "*":
            result = left * right
        else:
            if right == 0.0:
                raise TypeMismatch("division by zero")
            result = left / right
        if math.isnan(result):
            raise TypeMismatch("expression produced NaN")
        return result
    if isinstance(node, MinMax):
        left = evaluate_expr(node.left, ctx, budget)
        right = evaluate_expr(node.right, ctx, budget)
        return min(left, right) if node.op == "min" else max(left, right)
    if isinstance(node, IfExpr):
        if _compare(node.cmp, evaluate_expr(node.cond_left, ctx, budget),
                    evaluate_expr(node.cond_right, ctx, budget)):
            return evaluate_expr(node.then, ctx, budget)
        return evaluate_expr(node.orelse, ctx, budget)
    raise TypeMismatch(f"not an expression node: {node!r}")


def _compare(cmp: str, left: float, right: float) -> bool:
    if cmp == "<":
        return left < right
    if cmp == "<=":
        return left <= right
    if cmp == ">":
        return left > right
    return left >= right


def _check_number(value: object) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeMismatch(f"expected a number, got {type(value).__name__}")
    value = float(value)
    if math.isnan(value):
        raise TypeMismatch("expression produced NaN")
    return value


@dataclass(frozen=True)
class FiredRule:
    """Outcome of evaluating a scaling program: the first rule that fired."""

    rule_index: int
    action: Action
    set_value: Optional[float] = None  # evaluated expr for ReplicaSet actions


def evaluate_scaling(
    program: SsmProgram, ctx: EvalContext, budget: Optional[Budget] = None
) -> Optional[FiredRule]:
    """Evaluates rules top to bottom; the first rule whose condition holds
    wins.  Rules whose window average has no samples are skipped."""
    if program.kind is not ProgramKind.SCALING:
        raise TypeMismatch("not a scaling program")
    budget = budget or Budget()
    for index, rule in enumerate(program.rules):
        try:
            fired = _compare(
                rule.cmp,
                evaluate_expr(rule.left, ctx, budget),
                evaluate_expr(rule.right, ctx, budget),
            )
        except NoSamples:
            continue
        if not fired:
            continue
        if isinstance(rule.action, ReplicaSet):
            try:
                value = evaluate_expr(rule.action.expr, ctx, budget)
            except NoSamples:
                continue
            return FiredRule(index, rule.action, set_value=value)
        return FiredRule(index, rule.action)
    return None


def evaluate_score(
    program: SsmProgram, ctx: EvalContext, budget: Optional[Budget] = None
) -> float:
    """Evaluates a placement score; the result must be a finite number."""
    if program.kind is not ProgramKind.PLACEMENT or program.score is None:
        raise TypeMismatch("not a placement program")
    return evaluate_expr(program.score, ctx, budget or Budget())
