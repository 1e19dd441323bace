"""Tests for the operator algebra."""

from functools import reduce
from operator import matmul

import pytest

from src.ncchart.core.exceptions import InvalidRuleError, UnresolvedInverseError
from src.ncchart.services.ncexpr import (
    Expression,
    SymbolId,
    commutator,
    differentiate,
    frechet_expr,
    twisted_derivative,
)
from src.ncchart.services.opalg import (
    D_OP,
    DINV_OP,
    IDENTITY,
    IDENTITY_CHAIN,
    ZERO_OP,
    IntertwinerRegistry,
    OperatorChain,
    anticommutator_op,
    apply,
    commutator_op,
    factor_trailing_derivative,
    first_order_op,
    fresh_direction,
    left_op,
    linearization,
    op_commutator,
    op_equal,
    op_inverse,
    right_op,
    twisted_d,
    twisted_d_inv,
)


class TestApplication:
    """Test evaluation of operators on expressions."""

    def test_derivative(self, u_expr):
        """Test that D acts as differentiation."""
        assert apply(D_OP, u_expr) == differentiate(u_expr)

    def test_multiplications(self, u_expr, v_expr):
        """Test L, R, C and A on a generic argument."""
        assert apply(left_op(u_expr), v_expr) == u_expr * v_expr
        assert apply(right_op(u_expr), v_expr) == v_expr * u_expr
        assert apply(commutator_op(u_expr), v_expr) == commutator(u_expr, v_expr)
        assert apply(anticommutator_op(u_expr), v_expr) == u_expr * v_expr + v_expr * u_expr

    def test_twisted_derivation(self, u_expr, v_expr):
        """Test that D + C_u is the twisted derivative."""
        assert apply(twisted_d(u_expr), v_expr) == twisted_derivative(v_expr, u_expr, u_expr)

    def test_chain_applies_right_to_left(self, u_expr, v_expr):
        """Test that (L_u o D) v = u v'."""
        chain = OperatorChain.of(left_op(u_expr), D_OP)
        assert apply(chain, v_expr) == u_expr * differentiate(v_expr)

    def test_twisted_inverse_undoes_twisted_derivative(self, u_expr, v_expr):
        """Test (D + C_u)^-1 (D + C_u) v = v."""
        image = apply(twisted_d(u_expr), v_expr)
        assert apply(twisted_d_inv(u_expr), image) == v_expr

    def test_formal_inverse_cannot_be_applied(self, u_expr, v_expr):
        """Test that a general formal inverse blocks evaluation."""
        op = D_OP @ D_OP + left_op(u_expr)
        inverse = op_inverse(op)
        with pytest.raises(UnresolvedInverseError):
            apply(inverse, v_expr)


class TestInverses:
    """Test inversion of operators."""

    def test_first_order_inverse_is_twisted(self, u_expr, v_expr):
        """Test that D + L_u - R_v inverts to one twisted antiderivative."""
        op = first_order_op(u_expr, v_expr)
        assert op_equal(OperatorChain.of(op, op_inverse(op)), IDENTITY_CHAIN)

    def test_derivative_inverse(self):
        """Test that D and D^-1 are mutual inverses."""
        assert op_inverse(D_OP).key == OperatorChain.of(DINV_OP).key
        assert OperatorChain.of(D_OP, DINV_OP).key == IDENTITY_CHAIN.key

    def test_zero_has_no_inverse(self):
        """Test that inverting zero fails."""
        with pytest.raises(UnresolvedInverseError):
            op_inverse(ZERO_OP)


class TestDerivations:
    """Test commutators and Frechet derivatives of operators."""

    def test_commutator_with_d(self, u_expr):
        """Test [D, L_u] = L_u'."""
        assert op_commutator(D_OP, left_op(u_expr)) == left_op(differentiate(u_expr))

    def test_commutator_is_antisymmetric(self, u_expr):
        """Test [L_u, D] = -[D, L_u]."""
        assert op_commutator(left_op(u_expr), D_OP) == -op_commutator(D_OP, left_op(u_expr))

    def test_linearization_matches_frechet(self, u, u_expr, v_expr):
        """Test that the linearization applied to v is the Frechet derivative."""
        e = u_expr * differentiate(u_expr) + differentiate(u_expr, 2) * u_expr * u_expr
        assert apply(linearization(e, u), v_expr) == frechet_expr(e, u, v_expr)

    def test_trailing_derivative_factored(self, u_expr):
        """Test L_u D = (L_u) o D."""
        chain = factor_trailing_derivative(left_op(u_expr) @ D_OP + D_OP @ D_OP)
        assert len(chain.factors) == 2
        assert chain.factors[-1] == D_OP

    def test_fresh_direction_avoids_taken_names(self):
        """Test that fresh symbols never collide."""
        taken = Expression.symbol(SymbolId("sigma")) * Expression.symbol(SymbolId("sigma1"))
        assert fresh_direction(taken).name == "sigma2"


class TestEquality:
    """Test operator equality modulo constraints."""

    def test_leibniz_identity(self, u_expr):
        """Test D L_u = L_u D + L_u'."""
        lhs = D_OP @ left_op(u_expr)
        rhs = left_op(u_expr) @ D_OP + left_op(differentiate(u_expr))
        assert op_equal(lhs, rhs)

    def test_antiderivative_commutation(self, u_expr):
        """Test D^-1 L_u = L_u D^-1 - D^-1 L_u' D^-1 through symbols."""
        lhs = DINV_OP @ left_op(u_expr)
        rhs = left_op(u_expr) @ DINV_OP - DINV_OP @ left_op(differentiate(u_expr)) @ DINV_OP
        assert op_equal(lhs, rhs)

    def test_mismatch_reports_witness(self, u_expr):
        """Test that D and D + L_u differ at order zero."""
        result = op_equal(D_OP, D_OP + left_op(u_expr))
        assert not result.equal
        assert not result.witness.is_zero
        assert result.order == 0

    def test_identity_op(self):
        """Test that the identity compares equal to an empty chain."""
        assert op_equal(IDENTITY, IDENTITY_CHAIN)


class TestIntertwiners:
    """Test the intertwiner registry."""

    def test_register_and_rewrite(self, u_expr):
        """Test that a verified rule rewrites adjacent factors."""
        registry = IntertwinerRegistry()
        lhs = OperatorChain.of(D_OP, left_op(u_expr))
        rhs = OperatorChain.of(left_op(u_expr) @ D_OP + left_op(differentiate(u_expr)))
        registry.register_intertwiner(lhs, rhs, name="leibniz")
        chain = OperatorChain.of(left_op(u_expr), D_OP, left_op(u_expr))
        rewritten = registry.rewrite(chain)
        assert op_equal(rewritten, chain)
        assert len(registry) >= 1

    def test_false_rule_rejected(self, u_expr):
        """Test that an invalid intertwiner is refused."""
        registry = IntertwinerRegistry()
        with pytest.raises(InvalidRuleError):
            registry.register_intertwiner(D_OP @ left_op(u_expr), left_op(u_expr) @ D_OP)
        assert len(registry) == 0

    def test_difference_below_symbol_depth(self):
        """Test that D^2 and D^2 + D^-5 differ although their truncated symbols agree."""
        tail = reduce(matmul, [DINV_OP] * 5)
        result = op_equal(D_OP @ D_OP, D_OP @ D_OP + tail)
        assert not result.equal
        assert not result.witness.is_zero
        assert result.order is None

    def test_twisted_difference_below_symbol_depth(self, u_expr):
        """Test that a deep correction to a twisted inverse is detected."""
        base = twisted_d_inv(u_expr)
        tail = reduce(matmul, [DINV_OP] * 8) @ left_op(u_expr)
        result = op_equal(base, base + tail)
        assert not result.equal
        assert result.witness.contains_integral()

    def test_unresolved_formal_inverse_raises(self, u_expr):
        """Test that a formal inverse with agreeing symbols cannot be decided."""
        formal = op_inverse(D_OP @ D_OP + left_op(u_expr)).expand()
        tail = reduce(matmul, [DINV_OP] * 9)
        with pytest.raises(UnresolvedInverseError):
            op_equal(formal, formal + tail)

    def test_formal_inverse_mismatch_by_symbols(self, u_expr):
        """Test that differing symbols decide inequality without evaluation."""
        formal = op_inverse(D_OP @ D_OP + left_op(u_expr)).expand()
        result = op_equal(formal, formal + DINV_OP)
        assert not result.equal
        assert result.order == -1
