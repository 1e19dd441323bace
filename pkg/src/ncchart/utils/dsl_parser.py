"""Parser for the chart description language.

A script is a sequence of ';'-terminated statements declaring symbols,
assumptions, named expressions and operators, equations, links, composite
links, intertwiners, identities and runs. Statements are built in order, so
a name must be declared before it is used.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

from lark import Lark, Token, Transformer, Tree
from lark.exceptions import UnexpectedInput, VisitError

from ..core.exceptions import DslSyntaxError, UndeclaredSymbolError
from ..services.ncexpr import (
    NO_ASSUMPTIONS,
    Assumptions,
    Expression,
    Rule,
    SymbolId,
    SymbolKind,
    anticommutator,
    commutator,
    differentiate,
    integrate,
    invert,
    schwarzian,
)
from ..services.opalg import (
    D_OP,
    DINV_OP,
    IDENTITY,
    OperatorChain,
    anticommutator_op,
    apply,
    commutator_op,
    conjugation_op,
    left_op,
    right_op,
    twisted_d,
    twisted_d_inv,
)

logger = logging.getLogger(__name__)

GRAMMAR = r"""
    start: statement*

    ?statement: symbol_stmt
              | invertible_stmt
              | let_stmt
              | operator_stmt
              | equation_stmt
              | link_stmt
              | composite_stmt
              | intertwiner_stmt
              | identity_stmt
              | run_stmt

    symbol_stmt: "symbol" NAME ("," NAME)* ":" kind ";"
    kind: "unknown"   -> unknown_kind
        | "constant"  -> constant_kind
        | "direction" -> direction_kind

    invertible_stmt: "invertible" expr ("," expr)* ";"
    let_stmt: "let" NAME "=" expr ";"
    operator_stmt: "operator" NAME "=" opexpr ";"

    equation_stmt: "equation" NAME "unknown" NAME eq_clause* ";"
    eq_clause: "rhs" expr                             -> eq_rhs
             | "recursion" opexpr                     -> eq_recursion
             | "where" rules                          -> eq_where
             | "define" definition ("," definition)*  -> eq_define
             | "induced" "by" NAME "through" opexpr   -> eq_induced
    definition: NAME ":=" expr

    link_stmt: "link" NAME "relation" expr "solve" rules "source" NAME "target" NAME [OPTIONAL] ";"
    OPTIONAL: "optional"
    composite_stmt: "composite" NAME "=" NAME ("," NAME)+ ";"

    intertwiner_stmt: "intertwiner" ESCAPED_STRING ":" opexpr "=" opexpr [given] ";"
    identity_stmt: "identity" ESCAPED_STRING ":" identity_body [given] ";"
    identity_body: "opeq" opexpr "=" opexpr          -> id_opeq
                 | "expreq" expr "=" expr            -> id_expreq
                 | "applyeq" opexpr "on" expr "=" expr -> id_applyeq
                 | "strongsym" opexpr "wrt" NAME     -> id_strongsym
    given: "given" rules
    run_stmt: "run" ESCAPED_STRING ";"

    rules: rule ("," rule)*
    rule: expr "->" expr

    ?opexpr: opcomp
           | opexpr "+" opcomp -> opadd
           | opexpr "-" opcomp -> opsub
    ?opcomp: opunit
           | opcomp "." opunit -> opcompose
    ?opunit: opatom
           | number "*" opunit -> opscale
           | "-" opunit -> opneg
           | "(" opexpr ")"
    ?opatom: NAME -> opname
           | NAME "[" expr "]" -> opindexed
           | "inv" "(" opexpr ")" -> opinv

    ?expr: sum
    ?sum: product
        | sum "+" product -> add
        | sum "-" product -> sub
    ?product: unary
            | product "*" unary -> mul
    ?unary: postfix
          | "-" unary -> neg
    ?postfix: primary
            | postfix PRIME -> prime
            | postfix XSUB ["^" INT] -> xderiv
    ?primary: NAME -> name
            | number
            | "(" expr ")"
            | "inv" "(" expr ")" -> inverse
            | "sch" "(" expr ")" -> sch
            | "int" "(" expr ["," expr "," expr] ")" -> integral
            | "apply" "(" opexpr "," expr ")" -> apply_op
            | "[" expr "," expr "]" -> bracket
            | "{" expr "," expr "}" -> anti_bracket
    number: INT ["/" INT]

    PRIME: "'"
    XSUB: /_x+/
    NAME: /[A-Za-z][A-Za-z0-9]*/
    COMMENT: /#[^\n]*/

    %import common.INT
    %import common.ESCAPED_STRING
    %import common.WS
    %ignore WS
    %ignore COMMENT
"""


# Statements


@dataclass(frozen=True)
class SymbolDecl:
    symbols: tuple[SymbolId, ...]


@dataclass(frozen=True)
class InvertibleDecl:
    expressions: tuple[Expression, ...]


@dataclass(frozen=True)
class LetDecl:
    name: str
    value: Expression


@dataclass(frozen=True)
class OperatorDecl:
    name: str
    value: OperatorChain


@dataclass(frozen=True)
class EquationDecl:
    name: str
    unknown: SymbolId
    rhs: Expression | None = None
    recursion: OperatorChain | None = None
    aux_rules: tuple[Rule, ...] = ()
    definitions: tuple[tuple[SymbolId, Expression], ...] = ()
    induced_by: str | None = None
    induced_through: OperatorChain | None = None


@dataclass(frozen=True)
class LinkDecl:
    name: str
    relation: Expression
    solve: tuple[Rule, ...]
    source: str
    target: str
    optional: bool = False


@dataclass(frozen=True)
class CompositeDecl:
    name: str
    links: tuple[str, ...]


@dataclass(frozen=True)
class IntertwinerDecl:
    name: str
    lhs: OperatorChain
    rhs: OperatorChain
    given: tuple[Rule, ...] = ()


@dataclass(frozen=True)
class IdentityDecl:
    """A named check; which fields are set depends on kind."""

    name: str
    kind: str  # opeq, expreq, applyeq or strongsym
    lhs_op: OperatorChain | None = None
    rhs_op: OperatorChain | None = None
    lhs: Expression | None = None
    rhs: Expression | None = None
    unknown: SymbolId | None = None
    given: tuple[Rule, ...] = ()
    assumptions: Assumptions = NO_ASSUMPTIONS


@dataclass(frozen=True)
class RunDecl:
    target: str


Statement = (
    SymbolDecl
    | InvertibleDecl
    | LetDecl
    | OperatorDecl
    | EquationDecl
    | LinkDecl
    | CompositeDecl
    | IntertwinerDecl
    | IdentityDecl
    | RunDecl
)


@dataclass
class Script:
    """Parsed statements plus the session they were built in."""

    statements: list[Statement] = field(default_factory=list)
    symbols: dict[str, SymbolId] = field(default_factory=dict)
    lets: dict[str, Expression] = field(default_factory=dict)
    operators: dict[str, OperatorChain] = field(default_factory=dict)
    assumptions: Assumptions = NO_ASSUMPTIONS

    def of_type(self, kind: type) -> list:
        return [s for s in self.statements if isinstance(s, kind)]


# Builder


def _unquote(token: Token) -> str:
    return str(token)[1:-1]


class _Builder(Transformer):
    """Turns one statement tree into objects, updating the session."""

    def __init__(self, script: Script):
        super().__init__()
        self.script = script

    # Helpers

    def _symbol(self, token: Token) -> SymbolId:
        symbol = self.script.symbols.get(str(token))
        if symbol is None:
            raise UndeclaredSymbolError(str(token), token.line, token.column)
        return symbol

    @property
    def _assumptions(self) -> Assumptions:
        return self.script.assumptions

    # Expressions

    def number(self, children):
        numerator, denominator = children
        return Fraction(int(numerator), int(denominator) if denominator is not None else 1)

    def name(self, children):
        (token,) = children
        if str(token) in self.script.lets:
            return self.script.lets[str(token)]
        return Expression.symbol(self._symbol(token))

    def _as_expression(self, value) -> Expression:
        if isinstance(value, Fraction):
            return Expression.scalar(value)
        return value

    def add(self, children):
        a, b = children
        return self._as_expression(a) + self._as_expression(b)

    def sub(self, children):
        a, b = children
        return self._as_expression(a) - self._as_expression(b)

    def mul(self, children):
        a, b = children
        return self._as_expression(a) * self._as_expression(b)

    def neg(self, children):
        return -self._as_expression(children[0])

    def prime(self, children):
        return differentiate(self._as_expression(children[0]))

    def xderiv(self, children):
        e, sub, power = children
        order = (len(sub) - 1) * (int(power) if power is not None else 1)
        return differentiate(self._as_expression(e), order)

    def inverse(self, children):
        return invert(self._as_expression(children[0]), self._assumptions)

    def sch(self, children):
        return schwarzian(self._as_expression(children[0]), self._assumptions)

    def integral(self, children):
        body, left, right = (None if c is None else self._as_expression(c) for c in children)
        return integrate(body, left, right)

    def apply_op(self, children):
        op, arg = children
        return apply(op, self._as_expression(arg), (), self._assumptions)

    def bracket(self, children):
        a, b = (self._as_expression(c) for c in children)
        return commutator(a, b)

    def anti_bracket(self, children):
        a, b = (self._as_expression(c) for c in children)
        return anticommutator(a, b)

    # Operators

    def opname(self, children):
        (token,) = children
        builtin = {"D": D_OP, "Dinv": DINV_OP, "I": IDENTITY}
        if str(token) in builtin:
            return OperatorChain.of(builtin[str(token)])
        if str(token) in self.script.operators:
            return self.script.operators[str(token)]
        raise UndeclaredSymbolError(str(token), token.line, token.column)

    def opindexed(self, children):
        token, arg = children
        e = self._as_expression(arg)
        builders = {
            "L": left_op,
            "R": right_op,
            "C": commutator_op,
            "A": anticommutator_op,
            "K": lambda g: conjugation_op(g, self._assumptions),
            "DD": twisted_d,
            "DDinv": twisted_d_inv,
        }
        if str(token) not in builders:
            raise UndeclaredSymbolError(str(token), token.line, token.column)
        return OperatorChain.of(builders[str(token)](e))

    def opinv(self, children):
        return children[0].inverse(self._assumptions)

    def opadd(self, children):
        a, b = children
        return OperatorChain.of(a.expand() + b.expand())

    def opsub(self, children):
        a, b = children
        return OperatorChain.of(a.expand() - b.expand())

    def opcompose(self, children):
        a, b = children
        return a.then(b)

    def opscale(self, children):
        k, op = children
        return op.scale(k)

    def opneg(self, children):
        return -children[0]

    # Rules

    def rule(self, children):
        pattern, replacement = (self._as_expression(c) for c in children)
        return Rule.from_expressions(pattern, replacement)

    def rules(self, children):
        return tuple(children)

    def given(self, children):
        return children[0]

    # Statements

    def unknown_kind(self, _):
        return SymbolKind.UNKNOWN

    def constant_kind(self, _):
        return SymbolKind.CONSTANT

    def direction_kind(self, _):
        return SymbolKind.DIRECTION

    def symbol_stmt(self, children):
        *names, kind = children
        symbols = tuple(SymbolId(str(n), kind) for n in names)
        for symbol in symbols:
            self.script.symbols[symbol.name] = symbol
        return SymbolDecl(symbols)

    def invertible_stmt(self, children):
        expressions = tuple(self._as_expression(c) for c in children)
        self.script.assumptions = self.script.assumptions.declare(*expressions)
        return InvertibleDecl(expressions)

    def let_stmt(self, children):
        token, value = children
        self.script.lets[str(token)] = self._as_expression(value)
        return LetDecl(str(token), self._as_expression(value))

    def operator_stmt(self, children):
        token, value = children
        self.script.operators[str(token)] = value
        return OperatorDecl(str(token), value)

    def eq_rhs(self, children):
        return ("rhs", self._as_expression(children[0]))

    def eq_recursion(self, children):
        return ("recursion", children[0])

    def eq_where(self, children):
        return ("aux_rules", children[0])

    def definition(self, children):
        token, value = children
        return (self._symbol(token), self._as_expression(value))

    def eq_define(self, children):
        return ("definitions", tuple(children))

    def eq_induced(self, children):
        token, op = children
        return ("induced", (str(token), op))

    def equation_stmt(self, children):
        name, unknown, *clauses = children
        fields: dict = {}
        for key, value in clauses:
            if key == "induced":
                fields["induced_by"], fields["induced_through"] = value
            else:
                fields[key] = value
        return EquationDecl(str(name), self._symbol(unknown), **fields)

    def link_stmt(self, children):
        name, relation, solve, source, target, optional = children
        return LinkDecl(
            str(name),
            self._as_expression(relation),
            solve,
            str(source),
            str(target),
            optional is not None,
        )

    def composite_stmt(self, children):
        name, *links = children
        return CompositeDecl(str(name), tuple(str(t) for t in links))

    def intertwiner_stmt(self, children):
        name, lhs, rhs, given = children
        return IntertwinerDecl(_unquote(name), lhs, rhs, given or ())

    def id_opeq(self, children):
        lhs, rhs = children
        return {"kind": "opeq", "lhs_op": lhs, "rhs_op": rhs}

    def id_expreq(self, children):
        lhs, rhs = (self._as_expression(c) for c in children)
        return {"kind": "expreq", "lhs": lhs, "rhs": rhs}

    def id_applyeq(self, children):
        op, arg, result = children
        return {
            "kind": "applyeq",
            "lhs_op": op,
            "lhs": self._as_expression(arg),
            "rhs": self._as_expression(result),
        }

    def id_strongsym(self, children):
        op, token = children
        return {"kind": "strongsym", "lhs_op": op, "unknown": self._symbol(token)}

    def identity_stmt(self, children):
        name, body, given = children
        return IdentityDecl(
            _unquote(name), given=given or (), assumptions=self._assumptions, **body
        )

    def run_stmt(self, children):
        return RunDecl(_unquote(children[0]))


class DslParser:
    """LALR parser for chart scripts."""

    def __init__(self):
        self.parser = Lark(GRAMMAR, start="start", parser="lalr", maybe_placeholders=True)

    def parse_tree(self, text: str) -> Tree:
        try:
            return self.parser.parse(text)
        except UnexpectedInput as e:
            raise DslSyntaxError(f"Unexpected input: {e.get_context(text).strip()}", e.line, e.column)

    def parse(self, text: str, script: Script | None = None) -> Script:
        """Parse and build a script, extending an existing session if given."""
        script = script or Script()
        builder = _Builder(script)
        for tree in self.parse_tree(text).children:
            try:
                statement = builder.transform(tree)
            except VisitError as e:
                raise e.orig_exc
            script.statements.append(statement)
        logger.debug(f"Parsed {len(script.statements)} statements")
        return script


_parser: DslParser | None = None


def get_parser() -> DslParser:
    global _parser
    if _parser is None:
        _parser = DslParser()
    return _parser


def parse_script(text: str, script: Script | None = None) -> Script:
    return get_parser().parse(text, script)


def parse_expression(text: str, script: Script) -> Expression:
    """Parse a bare expression against the session of an existing script."""
    scratch = parse_script(f"let scratchexpr = {text};", _child_session(script))
    return scratch.lets["scratchexpr"]


def parse_operator(text: str, script: Script) -> OperatorChain:
    scratch = parse_script(f"operator scratchop = {text};", _child_session(script))
    return scratch.operators["scratchop"]


def _child_session(script: Script) -> Script:
    return Script(
        symbols=dict(script.symbols),
        lets=dict(script.lets),
        operators=dict(script.operators),
        assumptions=script.assumptions,
    )
