"""Rendering of expressions and operators as DSL text, JSON and LaTeX.

The DSL form re-parses to the same normalized object.
"""

from __future__ import annotations

from fractions import Fraction
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from ..models.schemas import ReportBundle
    from ..services.ncexpr import Atom, Expression, Rule, Word
    from ..services.opalg import Composition, Factor, OperatorChain, OperatorExpression
    from .dsl_parser import IdentityDecl, Script, Statement


def format_scalar(c: Fraction) -> str:
    if c.denominator == 1:
        return str(c.numerator)
    return f"{c.numerator}/{c.denominator}"


def format_atom(atom: Atom) -> str:
    from ..services.ncexpr import Deriv, Inverse

    if isinstance(atom, Deriv):
        return atom.symbol.name + "'" * atom.order
    if isinstance(atom, Inverse):
        return f"inv({format_expression(atom.inner)})"
    body = format_expression(atom.inner)
    if atom.is_twisted:
        return f"int({body}, {format_expression(atom.left)}, {format_expression(atom.right)})"
    return f"int({body})"


def format_word(word: Word) -> str:
    if not word:
        return "1"
    return "*".join(format_atom(atom) for atom in word)


def _signed_terms(pieces: list[tuple[Fraction, str]]) -> str:
    """Join (coefficient, body) pairs; an empty body stands for the unit."""
    if not pieces:
        return ""
    out: list[str] = []
    for i, (c, body) in enumerate(pieces):
        magnitude = abs(c)
        if not body:
            text = format_scalar(magnitude)
        elif magnitude == 1:
            text = body
        else:
            text = f"{format_scalar(magnitude)}*{body}"
        if i == 0:
            out.append(f"-{text}" if c < 0 else text)
        else:
            out.append(f" - {text}" if c < 0 else f" + {text}")
    return "".join(out)


def format_expression(e: Expression) -> str:
    if e.is_zero:
        return "0"
    return _signed_terms([(c, format_word(w) if w else "") for w, c in e.terms])


def format_factor(f: Factor) -> str:
    from ..services.opalg import Antiderivative, Derivative, Multiply, TwistedInverse

    if isinstance(f, Derivative):
        return "D"
    if isinstance(f, Antiderivative):
        return "Dinv"
    if isinstance(f, Multiply):
        if f.is_identity:
            return "I"
        if not f.right:
            return f"L[{format_word(f.left)}]"
        if not f.left:
            return f"R[{format_word(f.right)}]"
        return f"L[{format_word(f.left)}] . R[{format_word(f.right)}]"
    if isinstance(f, TwistedInverse):
        if f.left == f.right:
            return f"DDinv[{format_expression(f.left)}]"
        return f"inv(D + L[{format_expression(f.left)}] - R[{format_expression(f.right)}])"
    return f"inv({format_operator(f.inner)})"


def format_composition(comp: Composition) -> str:
    if not comp:
        return "I"
    return " . ".join(format_factor(f) for f in comp)


def format_operator(op: OperatorExpression) -> str:
    if op.is_zero:
        return "0*I"
    return _signed_terms(
        [(k, format_composition(comp) if comp else "I") for comp, k in op.terms]
    )


def format_chain(chain: OperatorChain) -> str:
    if chain.is_zero:
        return "0*I"
    parts = []
    for f in chain.factors:
        text = format_operator(f)
        parts.append(f"({text})" if len(f.terms) > 1 or f.terms[0][1] != 1 else text)
    body = " . ".join(parts) if parts else "I"
    c = chain.coefficient
    if c == 1:
        return body
    if c == -1:
        return f"-({body})" if parts else "-I"
    return f"{format_scalar(c)}*({body})"


# Scripts

_KIND_KEYWORDS = {
    "unknown-function": "unknown",
    "constant-operator": "constant",
    "generic-direction": "direction",
}


def _format_rules(rules: tuple[Rule, ...]) -> str:
    from ..services.ncexpr import Expression

    return ", ".join(
        f"{format_expression(Expression.atom(r.pattern))} -> {format_expression(r.replacement)}"
        for r in rules
    )


def _given(rules: tuple[Rule, ...]) -> str:
    return f" given {_format_rules(rules)}" if rules else ""


def format_statement(statement: Statement) -> str:
    """One statement in normalized form: lets and named operators are expanded."""
    from .dsl_parser import (
        CompositeDecl,
        EquationDecl,
        IdentityDecl,
        IntertwinerDecl,
        InvertibleDecl,
        LetDecl,
        LinkDecl,
        OperatorDecl,
        RunDecl,
        SymbolDecl,
    )

    if isinstance(statement, SymbolDecl):
        names = ", ".join(s.name for s in statement.symbols)
        return f"symbol {names}: {_KIND_KEYWORDS[statement.symbols[0].kind.value]};"
    if isinstance(statement, InvertibleDecl):
        return f"invertible {', '.join(format_expression(e) for e in statement.expressions)};"
    if isinstance(statement, LetDecl):
        return f"let {statement.name} = {format_expression(statement.value)};"
    if isinstance(statement, OperatorDecl):
        return f"operator {statement.name} = {format_chain(statement.value)};"
    if isinstance(statement, EquationDecl):
        lines = [f"equation {statement.name} unknown {statement.unknown.name}"]
        if statement.rhs is not None:
            lines.append(f"rhs {format_expression(statement.rhs)}")
        if statement.recursion is not None:
            lines.append(f"recursion {format_chain(statement.recursion)}")
        if statement.induced_by is not None and statement.induced_through is not None:
            lines.append(
                f"induced by {statement.induced_by} through {format_chain(statement.induced_through)}"
            )
        if statement.aux_rules:
            lines.append(f"where {_format_rules(statement.aux_rules)}")
        if statement.definitions:
            defs = ", ".join(f"{s.name} := {format_expression(e)}" for s, e in statement.definitions)
            lines.append(f"define {defs}")
        return "\n    ".join(lines) + ";"
    if isinstance(statement, LinkDecl):
        optional = " optional" if statement.optional else ""
        return (
            f"link {statement.name} relation {format_expression(statement.relation)}"
            f" solve {_format_rules(statement.solve)}"
            f" source {statement.source} target {statement.target}{optional};"
        )
    if isinstance(statement, CompositeDecl):
        return f"composite {statement.name} = {', '.join(statement.links)};"
    if isinstance(statement, IntertwinerDecl):
        return (
            f'intertwiner "{statement.name}": {format_chain(statement.lhs)}'
            f" = {format_chain(statement.rhs)}{_given(statement.given)};"
        )
    if isinstance(statement, IdentityDecl):
        return f'identity "{statement.name}": {_identity_body(statement)}{_given(statement.given)};'
    if isinstance(statement, RunDecl):
        return f'run "{statement.target}";'
    raise TypeError(f"Not a statement: {statement!r}")


def _identity_body(decl: IdentityDecl) -> str:
    if decl.kind == "opeq" and decl.lhs_op is not None and decl.rhs_op is not None:
        return f"opeq {format_chain(decl.lhs_op)} = {format_chain(decl.rhs_op)}"
    if decl.kind == "expreq" and decl.lhs is not None and decl.rhs is not None:
        return f"expreq {format_expression(decl.lhs)} = {format_expression(decl.rhs)}"
    if decl.kind == "applyeq" and decl.lhs_op is not None and decl.lhs is not None and decl.rhs is not None:
        return (
            f"applyeq {format_chain(decl.lhs_op)} on {format_expression(decl.lhs)}"
            f" = {format_expression(decl.rhs)}"
        )
    if decl.kind == "strongsym" and decl.lhs_op is not None and decl.unknown is not None:
        return f"strongsym {format_chain(decl.lhs_op)} wrt {decl.unknown.name}"
    raise TypeError(f"Incomplete identity '{decl.name}'")


def format_script(script: Script) -> str:
    """Normalized DSL text; parsing it and printing again gives the same text."""
    return "\n".join(format_statement(s) for s in script.statements) + "\n"


# JSON


def expression_to_json(e: Expression) -> dict[str, Any]:
    return {
        "terms": [
            {
                "coeff": [c.numerator, c.denominator],
                "word": [format_atom(atom) for atom in w],
            }
            for w, c in e.terms
        ]
    }


def operator_to_json(op: OperatorExpression) -> dict[str, Any]:
    return {
        "terms": [
            {
                "coeff": [k.numerator, k.denominator],
                "factors": [format_factor(f) for f in comp],
            }
            for comp, k in op.terms
        ]
    }


# LaTeX


def _latex_derivative(name: str, order: int) -> str:
    if order == 0:
        return name
    if order <= 3:
        return f"{name}_{{{'x' * order}}}"
    return f"{name}_{{{order}x}}"


def latex_atom(atom: Atom) -> str:
    from ..services.ncexpr import Deriv, Inverse

    if isinstance(atom, Deriv):
        return _latex_derivative(atom.symbol.name, atom.order)
    if isinstance(atom, Inverse):
        inner = atom.inner
        body = latex_expression(inner)
        return f"{body}^{{-1}}" if len(inner.terms) == 1 and len(inner.terms[0][0]) == 1 else (
            f"\\left({body}\\right)^{{-1}}"
        )
    body = latex_expression(atom.inner)
    if atom.is_twisted:
        return (
            f"\\left(\\partial + L_{{{latex_expression(atom.left)}}} - "
            f"R_{{{latex_expression(atom.right)}}}\\right)^{{-1}}\\left({body}\\right)"
        )
    return f"\\partial^{{-1}}\\left({body}\\right)"


def _latex_scalar(c: Fraction) -> str:
    if c.denominator == 1:
        return str(c.numerator)
    return f"\\frac{{{c.numerator}}}{{{c.denominator}}}"


def _latex_terms(pieces: list[tuple[Fraction, str]]) -> str:
    out: list[str] = []
    for i, (c, body) in enumerate(pieces):
        magnitude = abs(c)
        if not body:
            text = _latex_scalar(magnitude)
        elif magnitude == 1:
            text = body
        else:
            text = f"{_latex_scalar(magnitude)}{body}"
        sign = "-" if c < 0 else "+"
        out.append((f"-{text}" if c < 0 else text) if i == 0 else f" {sign} {text}")
    return "".join(out)


def latex_expression(e: Expression) -> str:
    if e.is_zero:
        return "0"
    return _latex_terms([(c, " ".join(latex_atom(a) for a in w)) for w, c in e.terms])


def latex_factor(f: Factor) -> str:
    from ..services.opalg import Antiderivative, Derivative, Multiply, TwistedInverse

    if isinstance(f, Derivative):
        return "\\partial"
    if isinstance(f, Antiderivative):
        return "\\partial^{-1}"
    if isinstance(f, Multiply):
        parts = []
        if f.left:
            parts.append(f"L_{{{' '.join(latex_atom(a) for a in f.left)}}}")
        if f.right:
            parts.append(f"R_{{{' '.join(latex_atom(a) for a in f.right)}}}")
        return " ".join(parts) or "I"
    if isinstance(f, TwistedInverse):
        return (
            f"\\left(\\partial + L_{{{latex_expression(f.left)}}} - "
            f"R_{{{latex_expression(f.right)}}}\\right)^{{-1}}"
        )
    return f"\\left({latex_operator(f.inner)}\\right)^{{-1}}"


def latex_operator(op: OperatorExpression) -> str:
    if op.is_zero:
        return "0"
    return _latex_terms(
        [(k, " ".join(latex_factor(f) for f in comp) if comp else "I") for comp, k in op.terms]
    )


# Report tables

_LATEX_SPECIALS = str.maketrans({c: f"\\{c}" for c in "&%$#_{}"})


def _latex_text(text: str) -> str:
    return text.translate(_LATEX_SPECIALS)


def latex_report_table(bundle: ReportBundle) -> str:
    """Standalone LaTeX document with one row per report."""
    rows = []
    for report in bundle.reports:
        residual = "" if report.residual is None else f"{report.residual:.2e}"
        order = "" if report.order is None else str(report.order)
        rows.append(
            f"\\texttt{{{_latex_text(report.identity)}}} & {report.kind} & "
            f"{report.status} & {order} & {residual} \\\\"
        )
    body = "\n".join(rows)
    return (
        "\\documentclass{article}\n"
        "\\usepackage{longtable}\n"
        "\\begin{document}\n"
        f"Catalog version {_latex_text(bundle.catalog_version)}, "
        f"{len(bundle.reports) - len(bundle.failures)}/{len(bundle.reports)} passed.\n\n"
        "\\begin{longtable}{lllll}\n"
        "Check & Kind & Status & Order & Residual \\\\\n\\hline\n"
        f"{body}\n"
        "\\end{longtable}\n"
        "\\end{document}\n"
    )
