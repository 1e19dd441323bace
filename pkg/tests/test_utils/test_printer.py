"""Tests for DSL, JSON and LaTeX rendering."""

from fractions import Fraction

import pytest

from src.ncchart.models.schemas import CheckKind, CheckStatus, ReportBundle, VerificationReport
from src.ncchart.services.ncexpr import ZERO, Expression
from src.ncchart.services.opalg import op_equal
from src.ncchart.core.config import DEFAULT_CATALOG
from src.ncchart.utils.dsl_parser import parse_expression, parse_operator, parse_script
from src.ncchart.utils.printer import (
    expression_to_json,
    format_expression,
    format_scalar,
    format_script,
    latex_expression,
    latex_report_table,
    operator_to_json,
)


class TestDslRendering:
    """Test the DSL text form."""

    def test_scalars(self):
        """Test integer and fractional coefficients."""
        assert format_scalar(Fraction(3)) == "3"
        assert format_scalar(Fraction(-1, 2)) == "-1/2"

    def test_zero(self):
        """Test the empty sum."""
        assert format_expression(ZERO) == "0"

    def test_single_word(self, session):
        """Test a product with primes."""
        assert str(parse_expression("u'*v''", session)) == "u'*v''"

    def test_negative_leading_term(self, session):
        """Test the sign of a lone negative term."""
        assert str(parse_expression("-2*u", session)) == "-2*u"

    @pytest.mark.parametrize(
        "text",
        [
            "D . D + 2*A[u] + Dinv . C[u]",
            "DDinv[u] . (DD[u] - A[v])",
            "inv(D + L[u] - R[v]) . L[u]",
            "inv(D . D + L[u])",
            "-(D . L[u])",
        ],
    )
    def test_operator_round_trip(self, session, text):
        """Test that printed operators parse back to equal operators."""
        op = parse_operator(text, session)
        again = parse_operator(str(op), session)
        assert again.key == op.key or op_equal(again, op)


class TestJsonRendering:
    """Test JSON views."""

    def test_expression_json(self, session):
        """Test coefficients and words of an expression."""
        data = expression_to_json(parse_expression("1/2*u*v'", session))
        assert data == {"terms": [{"coeff": [1, 2], "word": ["u", "v'"]}]}

    def test_operator_json(self, session):
        """Test the factors of an operator."""
        op = parse_operator("L[u] . D", session).expand()
        data = operator_to_json(op)
        assert data["terms"][0]["factors"] == ["L[u]", "D"]


class TestLatexRendering:
    """Test LaTeX output."""

    def test_derivative_orders(self, u):
        """Test subscript notation for derivatives."""
        assert latex_expression(Expression.symbol(u, 2)) == "u_{xx}"
        assert latex_expression(Expression.symbol(u, 5)) == "u_{5x}"

    def test_fraction(self, u_expr):
        """Test fractional coefficients."""
        assert latex_expression(u_expr.scale(Fraction(1, 2))) == "\\frac{1}{2}u"

    def test_report_table(self):
        """Test that the report table is a standalone document."""
        bundle = ReportBundle(
            catalog_version="1",
            reports=[
                VerificationReport(
                    identity="flow:kdv_x", kind=CheckKind.FLOW, status=CheckStatus.PASS, order=2
                ),
                VerificationReport(
                    identity="numeric:moebius-full[0]",
                    kind=CheckKind.NUMERIC,
                    status=CheckStatus.FAIL,
                    residual=0.5,
                ),
            ],
        )
        table = latex_report_table(bundle)
        assert table.startswith("\\documentclass")
        assert "flow:kdv\\_x" in table
        assert "5.00e-01" in table
        assert "1/2 passed" in table


SCRIPT = """
symbol U, W: unknown;
symbol c: constant;
invertible W';
let T = U*U;
operator Phi = D . D + 2*A[U] + A[U'] . Dinv + C[U] . Dinv . C[U] . Dinv;
equation kdv unknown U rhs U''' + 3*{U, U'} recursion Phi;
equation pkdv unknown W rhs W''' + 3*W'*W';
link B1 relation U - W' solve U -> W' source kdv target pkdv optional;
composite BB = B1, B1;
identity "square": expreq T = U*U given U -> W';
run "backlund:B1[0]";
"""


class TestScriptRendering:
    """Test the normalized form of whole scripts."""

    def test_statement_lines(self):
        """Test declarations that print verbatim."""
        lines = format_script(parse_script(SCRIPT)).splitlines()
        assert lines[0] == "symbol U, W: unknown;"
        assert lines[1] == "symbol c: constant;"
        assert lines[2] == "invertible W';"
        assert "composite BB = B1, B1;" in lines
        assert lines[-1] == 'run "backlund:B1[0]";'

    def test_link_and_identity(self):
        """Test rules, optional links and given clauses."""
        text = format_script(parse_script(SCRIPT))
        assert "solve U -> W' source kdv target pkdv optional;" in text
        assert 'identity "square": expreq U*U = U*U given U -> W\';' in text

    def test_reparse_is_stable(self):
        """Test that printing a parsed script is a fixed point."""
        first = format_script(parse_script(SCRIPT))
        assert format_script(parse_script(first)) == first

    @pytest.mark.integration
    def test_shipped_catalog_is_stable(self):
        """Test the normalized shipped catalog re-parses to itself."""
        first = format_script(parse_script(DEFAULT_CATALOG.read_text()))
        assert format_script(parse_script(first)) == first
