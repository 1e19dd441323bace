"""Operator calculus over the expression algebra.

Operators are formal sums of compositions of primitive factors: D, its
antiderivative, two-sided multiplication X -> l X r, resolved inverses of
first-order operators D + L_a - R_b, and formal inverses. Chains keep a
product of such sums unexpanded so that they can be inverted factorwise.
"""

from __future__ import annotations

import logging
import threading
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Union

from ..core.config import get_settings
from ..core.exceptions import (
    InvalidRuleError,
    NcChartError,
    NonConfluentError,
    NotInvertibleError,
    UnresolvedInverseError,
)
from .ncexpr import (
    NO_ASSUMPTIONS,
    ZERO,
    Assumptions,
    Deriv,
    Expression,
    Integral,
    Inverse,
    Rule,
    Scalar,
    SymbolId,
    SymbolKind,
    Word,
    differentiate,
    frechet_expr,
    integrate,
    invert,
    normalize_word,
    substitute,
    sum_expressions,
    word_key,
)

logger = logging.getLogger(__name__)


# Primitive factors


@dataclass(frozen=True)
class Derivative:
    key = (0,)


@dataclass(frozen=True)
class Antiderivative:
    key = (1,)


@dataclass(frozen=True)
class TwistedInverse:
    """(D + L_left - R_right)^-1."""

    left: Expression
    right: Expression

    @cached_property
    def key(self) -> tuple:
        return (2, self.left.key, self.right.key)


@dataclass(frozen=True)
class Multiply:
    """X -> left * X * right."""

    left: Word
    right: Word

    @cached_property
    def key(self) -> tuple:
        return (3, word_key(self.left), word_key(self.right))

    @property
    def is_identity(self) -> bool:
        return not self.left and not self.right


@dataclass(frozen=True)
class FormalInverse:
    """Inverse of an operator with no closed form."""

    inner: OperatorExpression

    @cached_property
    def key(self) -> tuple:
        return (4, self.inner.key)


Factor = Union[Derivative, Antiderivative, TwistedInverse, Multiply, FormalInverse]
Composition = tuple[Factor, ...]

D_FACTOR = Derivative()
DINV_FACTOR = Antiderivative()


def composition_key(composition: Composition) -> tuple:
    return (len(composition), tuple(f.key for f in composition))


def _merge(top: Factor, nxt: Factor) -> list[Factor] | None:
    """Replacement for the adjacent pair top*nxt, or None when it is irreducible."""
    if isinstance(top, Multiply) and isinstance(nxt, Multiply):
        merged = Multiply(
            normalize_word(top.left + nxt.left), normalize_word(nxt.right + top.right)
        )
        return [] if merged.is_identity else [merged]
    if (isinstance(top, Derivative) and isinstance(nxt, Antiderivative)) or (
        isinstance(top, Antiderivative) and isinstance(nxt, Derivative)
    ):
        return []
    return None


def normalize_composition(factors: Iterable[Factor]) -> Composition:
    stack: list[Factor] = []
    for factor in factors:
        if isinstance(factor, Multiply) and factor.is_identity:
            continue
        pending = [factor]
        while pending:
            current = pending.pop()
            if stack:
                merged = _merge(stack[-1], current)
                if merged is not None:
                    stack.pop()
                    pending.extend(reversed(merged))
                    continue
            stack.append(current)
    return tuple(stack)


@dataclass(frozen=True)
class OperatorExpression:
    """Normalized formal sum of compositions."""

    terms: tuple[tuple[Composition, Fraction], ...] = ()

    @classmethod
    def from_terms(
        cls, pairs: Iterable[tuple[Sequence[Factor], Scalar]]
    ) -> OperatorExpression:
        collected: dict[Composition, Fraction] = {}
        for factors, coefficient in pairs:
            if coefficient == 0:
                continue
            comp = normalize_composition(factors)
            collected[comp] = collected.get(comp, Fraction(0)) + Fraction(coefficient)
        items = [(c, k) for c, k in collected.items() if k != 0]
        items.sort(key=lambda item: composition_key(item[0]))
        return cls(tuple(items))

    @classmethod
    def factor(cls, factor: Factor, coefficient: Scalar = 1) -> OperatorExpression:
        return cls.from_terms([((factor,), coefficient)])

    @cached_property
    def key(self) -> tuple:
        return tuple((composition_key(c), k) for c, k in self.terms)

    @cached_property
    def _hash(self) -> int:
        return hash(self.terms)

    def __hash__(self) -> int:
        return self._hash

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def is_identity(self) -> bool:
        return self.terms == (((), Fraction(1)),)

    @property
    def single_factor(self) -> Factor | None:
        if len(self.terms) == 1:
            comp, k = self.terms[0]
            if k == 1 and len(comp) == 1:
                return comp[0]
        return None

    def scale(self, factor: Scalar) -> OperatorExpression:
        if factor == 0:
            return ZERO_OP
        return OperatorExpression(tuple((c, k * Fraction(factor)) for c, k in self.terms))

    def __add__(self, other: OperatorExpression) -> OperatorExpression:
        return OperatorExpression.from_terms([*self.terms, *other.terms])

    def __sub__(self, other: OperatorExpression) -> OperatorExpression:
        return self + other.scale(-1)

    def __neg__(self) -> OperatorExpression:
        return self.scale(-1)

    def compose(self, other: OperatorExpression) -> OperatorExpression:
        """self o other."""
        return OperatorExpression.from_terms(
            (c1 + c2, k1 * k2) for c1, k1 in self.terms for c2, k2 in other.terms
        )

    def __matmul__(self, other: OperatorExpression) -> OperatorExpression:
        return self.compose(other)

    def expressions(self) -> Iterable[Expression]:
        for comp, _ in self.terms:
            for f in comp:
                yield from _factor_expressions(f)

    def __str__(self) -> str:
        from ..utils.printer import format_operator

        return format_operator(self)


def _factor_expressions(f: Factor) -> Iterable[Expression]:
    if isinstance(f, Multiply):
        yield Expression.from_word(f.left)
        yield Expression.from_word(f.right)
    elif isinstance(f, TwistedInverse):
        yield f.left
        yield f.right
    elif isinstance(f, FormalInverse):
        yield from f.inner.expressions()


ZERO_OP = OperatorExpression()
IDENTITY = OperatorExpression.from_terms([((), 1)])
D_OP = OperatorExpression.factor(D_FACTOR)
DINV_OP = OperatorExpression.factor(DINV_FACTOR)


def multiply_op(left: Expression, right: Expression) -> OperatorExpression:
    """X -> left * X * right for arbitrary sums left and right."""
    return OperatorExpression.from_terms(
        ((Multiply(lw, rw),), lc * rc) for lw, lc in left.terms for rw, rc in right.terms
    )


def left_op(e: Expression) -> OperatorExpression:
    return multiply_op(e, Expression.scalar(1))


def right_op(e: Expression) -> OperatorExpression:
    return multiply_op(Expression.scalar(1), e)


def commutator_op(t: Expression) -> OperatorExpression:
    """C_T X = [T, X]."""
    return left_op(t) - right_op(t)


def anticommutator_op(t: Expression) -> OperatorExpression:
    """A_T X = {T, X}."""
    return left_op(t) + right_op(t)


def conjugation_op(g: Expression, assumptions: Assumptions = NO_ASSUMPTIONS) -> OperatorExpression:
    """K_G X = G^-1 X G."""
    return multiply_op(invert(g, assumptions), g)


def first_order_op(left: Expression, right: Expression) -> OperatorExpression:
    """D + L_left - R_right."""
    return D_OP + left_op(left) - right_op(right)


def twisted_d(t: Expression) -> OperatorExpression:
    """The derivation D + C_T."""
    return first_order_op(t, t)


def twisted_d_inv(t: Expression) -> OperatorExpression:
    return OperatorExpression.factor(TwistedInverse(t, t))


# Inversion and chains


def first_order_shape(op: OperatorExpression) -> tuple[Fraction, Expression, Expression] | None:
    """Match op = c*(D + L_a - R_b) and return (c, a, b)."""
    scale: Fraction | None = None
    lefts: list[tuple[Word, Fraction]] = []
    rights: list[tuple[Word, Fraction]] = []
    for comp, k in op.terms:
        if comp == (D_FACTOR,):
            scale = k
        elif comp == ():
            lefts.append(((), k))
        elif len(comp) == 1 and isinstance(comp[0], Multiply):
            m = comp[0]
            if not m.right:
                lefts.append((m.left, k))
            elif not m.left:
                rights.append((m.right, -k))
            else:
                return None
        else:
            return None
    if scale is None:
        return None
    a = Expression.from_terms(lefts).scale(1 / scale)
    b = Expression.from_terms(rights).scale(1 / scale)
    return scale, a, b


def _invert_factor(f: Factor, assumptions: Assumptions) -> list[OperatorExpression]:
    if isinstance(f, Derivative):
        return [DINV_OP]
    if isinstance(f, Antiderivative):
        return [D_OP]
    if isinstance(f, Multiply):
        return [
            multiply_op(
                invert(Expression.from_word(f.left), assumptions),
                invert(Expression.from_word(f.right), assumptions),
            )
        ]
    if isinstance(f, TwistedInverse):
        return [first_order_op(f.left, f.right)]
    return [f.inner]


def op_inverse(op: OperatorExpression, assumptions: Assumptions = NO_ASSUMPTIONS) -> OperatorChain:
    """Inverse as a chain: factorwise for one composition, closed form or formal otherwise."""
    if op.is_zero:
        raise UnresolvedInverseError("The zero operator is not invertible")
    if len(op.terms) == 1:
        comp, k = op.terms[0]
        factors: list[OperatorExpression] = []
        for f in reversed(comp):
            factors.extend(_invert_factor(f, assumptions))
        return OperatorChain(tuple(factors), 1 / k).normalized()
    shape = first_order_shape(op)
    if shape is not None:
        scale, a, b = shape
        return OperatorChain((OperatorExpression.factor(TwistedInverse(a, b)),), 1 / scale)
    return OperatorChain((OperatorExpression.factor(FormalInverse(op)),))


def _cancel_pair(x: OperatorExpression, y: OperatorExpression) -> bool:
    fx, fy = x.single_factor, y.single_factor
    if isinstance(fx, TwistedInverse) and first_order_op(fx.left, fx.right) == y:
        return True
    if isinstance(fy, TwistedInverse) and first_order_op(fy.left, fy.right) == x:
        return True
    if isinstance(fx, FormalInverse) and fx.inner == y:
        return True
    if isinstance(fy, FormalInverse) and fy.inner == x:
        return True
    return x.compose(y).is_identity


def _pure_multiply(x: OperatorExpression) -> bool:
    return isinstance(x.single_factor, Multiply)


@dataclass(frozen=True)
class OperatorChain:
    """coefficient * f1 o f2 o ... o fn with each fi an operator sum."""

    factors: tuple[OperatorExpression, ...] = ()
    coefficient: Fraction = Fraction(1)

    @classmethod
    def of(cls, *parts: OperatorExpression | OperatorChain) -> OperatorChain:
        factors: list[OperatorExpression] = []
        coefficient = Fraction(1)
        for part in parts:
            if isinstance(part, OperatorChain):
                factors.extend(part.factors)
                coefficient *= part.coefficient
            else:
                factors.append(part)
        return cls(tuple(factors), coefficient).normalized()

    def normalized(self) -> OperatorChain:
        coefficient = Fraction(self.coefficient)
        factors: list[OperatorExpression] = []
        for f in self.factors:
            if f.is_zero:
                return ZERO_CHAIN
            if len(f.terms) == 1 and f.terms[0][1] != 1:
                coefficient *= f.terms[0][1]
                f = OperatorExpression(((f.terms[0][0], Fraction(1)),))
            if f.is_identity:
                continue
            factors.append(f)
        if coefficient == 0:
            return ZERO_CHAIN
        changed = True
        while changed:
            changed = False
            for i in range(len(factors) - 1):
                x, y = factors[i], factors[i + 1]
                if _cancel_pair(x, y):
                    del factors[i : i + 2]
                    changed = True
                    break
                if _pure_multiply(x) and _pure_multiply(y):
                    merged = x.compose(y)
                    factors[i : i + 2] = [] if merged.is_identity else [merged]
                    changed = True
                    break
        return OperatorChain(tuple(factors), coefficient)

    @property
    def is_zero(self) -> bool:
        return self.coefficient == 0

    @cached_property
    def key(self) -> tuple:
        return (self.coefficient, tuple(f.key for f in self.factors))

    def expand(self) -> OperatorExpression:
        result = IDENTITY.scale(self.coefficient)
        for f in self.factors:
            result = result.compose(f)
        return result

    def then(self, other: OperatorChain) -> OperatorChain:
        """self o other."""
        return OperatorChain.of(self, other)

    def scale(self, factor: Scalar) -> OperatorChain:
        return OperatorChain(self.factors, self.coefficient * Fraction(factor)).normalized()

    def __neg__(self) -> OperatorChain:
        return self.scale(-1)

    def inverse(self, assumptions: Assumptions = NO_ASSUMPTIONS) -> OperatorChain:
        parts: list[OperatorChain] = [
            op_inverse(f, assumptions) for f in reversed(self.factors)
        ]
        return OperatorChain.of(*parts).scale(1 / self.coefficient)

    def expressions(self) -> Iterable[Expression]:
        for f in self.factors:
            yield from f.expressions()

    def __str__(self) -> str:
        from ..utils.printer import format_chain

        return format_chain(self)


ZERO_CHAIN = OperatorChain((), Fraction(0))
IDENTITY_CHAIN = OperatorChain()


def as_chain(op: OperatorExpression | OperatorChain) -> OperatorChain:
    if isinstance(op, OperatorChain):
        return op
    return OperatorChain.of(op)


# Application


def _apply_factor(
    f: Factor, e: Expression, rules: Sequence[Rule], assumptions: Assumptions
) -> Expression:
    if isinstance(f, Derivative):
        return differentiate(e)
    if isinstance(f, Antiderivative):
        return integrate(e, rules=rules, assumptions=assumptions)
    if isinstance(f, Multiply):
        return Expression.from_word(f.left) * e * Expression.from_word(f.right)
    if isinstance(f, TwistedInverse):
        return integrate(e, f.left, f.right, rules, assumptions)
    raise UnresolvedInverseError(f"Formal inverse of {f.inner} cannot be applied")


def apply(
    op: OperatorExpression | OperatorChain,
    e: Expression,
    rules: Sequence[Rule] = (),
    assumptions: Assumptions = NO_ASSUMPTIONS,
) -> Expression:
    """Evaluate op on e right to left, reducing modulo rules after each factor."""
    if isinstance(op, OperatorChain):
        current = _reduce(e, rules, assumptions)
        for f in reversed(op.factors):
            current = apply(f, current, rules, assumptions)
        return _reduce(current.scale(op.coefficient), rules, assumptions)

    memo: dict[Composition, Expression] = {(): _reduce(e, rules, assumptions)}

    def run(comp: Composition) -> Expression:
        if comp in memo:
            return memo[comp]
        inner = run(comp[1:])
        value = _reduce(_apply_factor(comp[0], inner, rules, assumptions), rules, assumptions)
        memo[comp] = value
        return value

    return sum_expressions(run(comp).scale(k) for comp, k in op.terms)


def _reduce(e: Expression, rules: Sequence[Rule], assumptions: Assumptions) -> Expression:
    return substitute(e, rules, assumptions) if rules else e


# Derivations on operators


def _derive_factor(f: Factor, delta) -> OperatorExpression:
    """Image of a factor under a derivation delta acting on coefficients."""
    if isinstance(f, (Derivative, Antiderivative)):
        return ZERO_OP
    if isinstance(f, Multiply):
        left, right = Expression.from_word(f.left), Expression.from_word(f.right)
        return multiply_op(delta(left), right) + multiply_op(left, delta(right))
    if isinstance(f, TwistedInverse):
        inv = OperatorExpression.factor(f)
        inner = left_op(delta(f.left)) - right_op(delta(f.right))
        return -(inv @ inner @ inv)
    inv = OperatorExpression.factor(f)
    return -(inv @ _derive(f.inner, delta) @ inv)


def _derive(op: OperatorExpression, delta) -> OperatorExpression:
    pairs: list[tuple[Composition, Fraction]] = []
    for comp, k in op.terms:
        for i, f in enumerate(comp):
            for dcomp, dk in _derive_factor(f, delta).terms:
                pairs.append((comp[:i] + dcomp + comp[i + 1 :], k * dk))
    return OperatorExpression.from_terms(pairs)


def op_commutator(
    a: OperatorExpression | OperatorChain, b: OperatorExpression | OperatorChain
) -> OperatorExpression:
    """[a, b]; brackets with D use the Leibniz rule factor by factor."""
    a_op = a.expand() if isinstance(a, OperatorChain) else a
    b_op = b.expand() if isinstance(b, OperatorChain) else b
    if a_op == D_OP:
        return _derive(b_op, differentiate)
    if b_op == D_OP:
        return -_derive(a_op, differentiate)
    return a_op @ b_op - b_op @ a_op


def frechet_op(
    op: OperatorExpression | OperatorChain, u: SymbolId, direction: SymbolId | Expression
) -> OperatorExpression:
    """Directional derivative of u -> op(u)."""
    op_expr = op.expand() if isinstance(op, OperatorChain) else op
    return _derive(op_expr, lambda e: frechet_expr(e, u, direction))


def fresh_direction(*expressions: Expression, base: str = "sigma") -> SymbolId:
    """A generic-direction symbol not occurring in the given expressions."""
    taken = {s.name for e in expressions for s in e.symbols()}
    name, n = base, 0
    while name in taken:
        n += 1
        name = f"{base}{n}"
    return SymbolId(name, SymbolKind.DIRECTION)


def linearization(e: Expression, u: SymbolId) -> OperatorExpression:
    """The Frechet derivative of e in u as an operator."""
    sigma = fresh_direction(e)
    pairs: list[tuple[Composition, Fraction]] = []
    for word, k in frechet_expr(e, u, sigma).terms:
        positions = [
            i for i, atom in enumerate(word) if isinstance(atom, Deriv) and atom.symbol == sigma
        ]
        if len(positions) != 1 or sigma in {
            s for atom in word if not isinstance(atom, Deriv) for s in Expression.atom(atom).symbols()
        }:
            raise NcChartError(f"Cannot linearize {e} in {u.name}")
        i = positions[0]
        atom = word[i]
        assert isinstance(atom, Deriv)
        comp = (Multiply(word[:i], word[i + 1 :]),) + (D_FACTOR,) * atom.order
        pairs.append((comp, k))
    return OperatorExpression.from_terms(pairs)


def factor_trailing_derivative(op: OperatorExpression) -> OperatorChain:
    """Write op = B o D when every composition ends in D."""
    if op.terms and all(comp and comp[-1] == D_FACTOR for comp, _ in op.terms):
        stripped = OperatorExpression.from_terms((comp[:-1], k) for comp, k in op.terms)
        return OperatorChain.of(stripped, D_OP)
    return OperatorChain.of(op)


# Pseudo-differential symbols
#
# Every operator is expanded as sum_k c_k D^k with c_k a sum of two-sided
# multiplications, using D c = c D + c' and its inverse series
# D^-1 c = sum_m (-1)^m c^(m) D^(-1-m). Two operators agree iff their
# symbols agree, and the comparison is exact down to the requested depth.

Coefficient = dict[tuple[Word, Word], Fraction]
UNIT: Coefficient = {((), ()): Fraction(1)}
NEG_INF = float("-inf")


def _binomial(i: int, m: int) -> Fraction:
    value = Fraction(1)
    for j in range(m):
        value = value * (i - j) / (j + 1)
    return value


def _coef_add(target: Coefficient, source: Coefficient, scale: Fraction = Fraction(1)) -> None:
    for pair, c in source.items():
        updated = target.get(pair, Fraction(0)) + c * scale
        if updated == 0:
            target.pop(pair, None)
        else:
            target[pair] = updated


def _coef_compose(a: Coefficient, b: Coefficient) -> Coefficient:
    out: Coefficient = {}
    for (l1, r1), c1 in a.items():
        for (l2, r2), c2 in b.items():
            pair = (normalize_word(l1 + l2), normalize_word(r2 + r1))
            _coef_add(out, {pair: c1 * c2})
    return out


def _coef_from_expressions(left: Expression, right: Expression, scale: Fraction) -> Coefficient:
    out: Coefficient = {}
    for lw, lc in left.terms:
        for rw, rc in right.terms:
            _coef_add(out, {(lw, rw): lc * rc * scale})
    return out


def _coef_derivative(a: Coefficient) -> Coefficient:
    out: Coefficient = {}
    for (l, r), c in a.items():
        left, right = Expression.from_word(l), Expression.from_word(r)
        _coef_add(out, _coef_from_expressions(differentiate(left), right, c))
        _coef_add(out, _coef_from_expressions(left, differentiate(right), c))
    return out


@dataclass
class _SymbolContext:
    rules: tuple[Rule, ...] = ()
    assumptions: Assumptions = NO_ASSUMPTIONS

    def reduce(self, a: Coefficient) -> Coefficient:
        if not self.rules:
            return a
        out: Coefficient = {}
        for (l, r), c in a.items():
            left = substitute(Expression.from_word(l), self.rules, self.assumptions)
            right = substitute(Expression.from_word(r), self.rules, self.assumptions)
            _coef_add(out, _coef_from_expressions(left, right, c))
        return out


@dataclass
class PseudoSymbol:
    """Truncated symbol; orders >= precision are exact."""

    coefficients: dict[int, Coefficient] = field(default_factory=dict)
    precision: float = NEG_INF

    @property
    def top(self) -> int | None:
        return max(self.coefficients) if self.coefficients else None

    def coefficient(self, order: int) -> Coefficient:
        return self.coefficients.get(order, {})

    def scaled(self, factor: Fraction) -> PseudoSymbol:
        return PseudoSymbol(
            {k: {p: c * factor for p, c in v.items()} for k, v in self.coefficients.items()},
            self.precision,
        )

    def plus(self, other: PseudoSymbol) -> PseudoSymbol:
        out = {k: dict(v) for k, v in self.coefficients.items()}
        for k, v in other.coefficients.items():
            slot = out.setdefault(k, {})
            _coef_add(slot, v)
            if not slot:
                del out[k]
        precision = max(self.precision, other.precision)
        return PseudoSymbol(
            {k: v for k, v in out.items() if k >= precision}, precision
        )


def _compose_symbols(
    a: PseudoSymbol, b: PseudoSymbol, target: float, ctx: _SymbolContext
) -> PseudoSymbol:
    if a.top is None or b.top is None:
        return PseudoSymbol({}, NEG_INF)
    precision = max(target, min(a.precision + b.top, b.precision + a.top))
    derivatives: dict[tuple[int, int], Coefficient] = {}

    def derived(j: int, m: int) -> Coefficient:
        if (j, m) not in derivatives:
            derivatives[(j, m)] = (
                b.coefficients[j] if m == 0 else ctx.reduce(_coef_derivative(derived(j, m - 1)))
            )
        return derivatives[(j, m)]

    out: dict[int, Coefficient] = {}
    for i, ca in a.coefficients.items():
        for j in b.coefficients:
            m = 0
            while i + j - m >= precision and not (i >= 0 and m > i):
                term = _coef_compose(ca, derived(j, m))
                _coef_add(out.setdefault(i + j - m, {}), term, _binomial(i, m))
                m += 1
    reduced = {k: ctx.reduce(v) for k, v in out.items()}
    return PseudoSymbol({k: v for k, v in reduced.items() if v}, precision)


def _invert_leading(a: Coefficient, ctx: _SymbolContext) -> Coefficient:
    if len(a) != 1:
        raise UnresolvedInverseError("Leading coefficient is not a single multiplication")
    ((l, r), c), = a.items()
    try:
        left = invert(Expression.from_word(l), ctx.assumptions)
        right = invert(Expression.from_word(r), ctx.assumptions)
    except NotInvertibleError as e:
        raise UnresolvedInverseError(f"Leading coefficient is not invertible: {str(e)}")
    if len(left.terms) != 1 or len(right.terms) != 1:
        raise UnresolvedInverseError("Leading coefficient has no monomial inverse")
    return _coef_from_expressions(left, right, 1 / c)


def _invert_symbol(x: PseudoSymbol, target: float, ctx: _SymbolContext) -> PseudoSymbol:
    t = x.top
    if t is None:
        raise UnresolvedInverseError("The zero operator is not invertible")
    lead_inv = _invert_leading(x.coefficients[t], ctx)
    precision = max(target, x.precision - 2 * t)
    y: dict[int, Coefficient] = {}
    derivatives: dict[tuple[int, int], Coefficient] = {}

    def derived(k: int, p: int) -> Coefficient:
        if (k, p) not in derivatives:
            derivatives[(k, p)] = (
                y[k] if p == 0 else ctx.reduce(_coef_derivative(derived(k, p - 1)))
            )
        return derivatives[(k, p)]

    k = -t
    while k >= precision:
        m = k + t
        rest: Coefficient = {}
        for i, xi in x.coefficients.items():
            for known in list(y):
                p = i + known - m
                if p < 0 or (i >= 0 and p > i):
                    continue
                _coef_add(rest, _coef_compose(xi, derived(known, p)), _binomial(i, p))
        target_coef: Coefficient = dict(UNIT) if m == 0 else {}
        _coef_add(target_coef, rest, Fraction(-1))
        value = ctx.reduce(_coef_compose(lead_inv, target_coef))
        if value:
            y[k] = value
        k -= 1
    return PseudoSymbol(y, precision)


def _factor_top(f: Factor) -> int:
    if isinstance(f, Derivative):
        return 1
    if isinstance(f, (Antiderivative, TwistedInverse)):
        return -1
    if isinstance(f, Multiply):
        return 0
    return -_op_top(f.inner)


def _op_top(op: OperatorExpression) -> int:
    if op.is_zero:
        return 0
    return max(sum(_factor_top(f) for f in comp) for comp, _ in op.terms)


def _exact(order: int, coef: Coefficient) -> PseudoSymbol:
    return PseudoSymbol({order: coef}, NEG_INF)


def _factor_symbol(f: Factor, target: float, ctx: _SymbolContext) -> PseudoSymbol:
    if isinstance(f, Derivative):
        return _exact(1, dict(UNIT))
    if isinstance(f, Antiderivative):
        return _exact(-1, dict(UNIT))
    if isinstance(f, Multiply):
        return _exact(0, ctx.reduce({(f.left, f.right): Fraction(1)}))
    inner = first_order_op(f.left, f.right) if isinstance(f, TwistedInverse) else f.inner
    t = _op_top(inner)
    return _invert_symbol(_op_symbol(inner, target + 2 * t, ctx), target, ctx)


def _product_symbol(
    parts: Sequence, tops: Sequence[int], target: float, ctx: _SymbolContext, build
) -> PseudoSymbol:
    total = sum(tops)
    acc: PseudoSymbol | None = None
    for idx, (part, top) in enumerate(zip(parts, tops)):
        sym = build(part, target - (total - top))
        if acc is None:
            acc = sym
        else:
            remaining = sum(tops[idx + 1 :])
            acc = _compose_symbols(acc, sym, target - remaining, ctx)
    return acc if acc is not None else _exact(0, dict(UNIT))


def _op_symbol(op: OperatorExpression, target: float, ctx: _SymbolContext) -> PseudoSymbol:
    result = PseudoSymbol({}, NEG_INF)
    for comp, k in op.terms:
        tops = [_factor_top(f) for f in comp]
        sym = _product_symbol(
            comp, tops, target, ctx, lambda f, tg: _factor_symbol(f, tg, ctx)
        )
        result = result.plus(sym.scaled(k))
    if result.precision < target:
        result.precision = target
        result.coefficients = {k: v for k, v in result.coefficients.items() if k >= target}
    return result


def chain_top(chain: OperatorChain) -> int:
    return sum(_op_top(f) for f in chain.factors)


def chain_symbol(
    chain: OperatorChain,
    target: float,
    rules: Sequence[Rule] = (),
    assumptions: Assumptions = NO_ASSUMPTIONS,
) -> PseudoSymbol:
    """Symbol of a chain, exact for all orders >= target."""
    ctx = _SymbolContext(tuple(rules), assumptions)
    if chain.is_zero:
        return PseudoSymbol({}, target)
    tops = [_op_top(f) for f in chain.factors]
    sym = _product_symbol(
        chain.factors, tops, target, ctx, lambda f, tg: _op_symbol(f, tg, ctx)
    )
    return sym.scaled(chain.coefficient)


# Equality


@dataclass(frozen=True)
class EqualityResult:
    equal: bool
    witness: Expression = ZERO
    order: int | None = None

    def __bool__(self) -> bool:
        return self.equal


def _witness(coef: Coefficient, sigma: SymbolId) -> Expression:
    s = Expression.symbol(sigma)
    return sum_expressions(
        Expression.from_word(l) * s * Expression.from_word(r) * c for (l, r), c in coef.items()
    )


def _has_formal_inverse(chain: OperatorChain) -> bool:
    return any(
        isinstance(f, FormalInverse) for op in chain.factors for comp, _ in op.terms for f in comp
    )


def _symbol_mismatch(
    left: OperatorChain,
    right: OperatorChain,
    constraints: Sequence[Rule],
    assumptions: Assumptions,
    depth: int,
) -> EqualityResult | None:
    """First differing order of the truncated symbols, or None when they agree."""
    top = max(chain_top(left), chain_top(right))
    target = top - depth
    try:
        sym_a = chain_symbol(left, target, constraints, assumptions)
        sym_b = chain_symbol(right, target, constraints, assumptions)
    except UnresolvedInverseError:
        return None
    floor = max(sym_a.precision, sym_b.precision, target)
    orders = sorted(set(sym_a.coefficients) | set(sym_b.coefficients), reverse=True)
    for order in orders:
        if order < floor:
            break
        diff = dict(sym_a.coefficient(order))
        _coef_add(diff, sym_b.coefficient(order), Fraction(-1))
        if diff:
            sigma = fresh_direction(*left.expressions(), *right.expressions())
            return EqualityResult(False, _witness(diff, sigma), order)
    return None


def op_equal(
    a: OperatorExpression | OperatorChain,
    b: OperatorExpression | OperatorChain,
    constraints: Sequence[Rule] = (),
    registry: IntertwinerRegistry | None = None,
    assumptions: Assumptions = NO_ASSUMPTIONS,
    depth: int | None = None,
) -> EqualityResult:
    """Decide a == b modulo the constraints.

    Both sides are rewritten with the registry first. Differing truncated
    symbols settle inequality at once, with the highest differing order and
    a witness in a fresh direction symbol. Otherwise both chains are applied
    to a fresh direction symbol, twisted inverses included, and the
    difference of the normal forms decides; a nonzero difference is the
    witness. A formal inverse that survives rewriting raises
    UnresolvedInverseError.
    """
    depth = get_settings().symbol_depth if depth is None else depth
    left, right = as_chain(a), as_chain(b)
    if registry is not None:
        left = registry.rewrite(left, constraints)
        right = registry.rewrite(right, constraints)
    if left.key == right.key:
        return EqualityResult(True)
    mismatch = _symbol_mismatch(left, right, constraints, assumptions, depth)
    if mismatch is not None:
        logger.debug(f"Operators differ at order {mismatch.order}: {mismatch.witness}")
        return mismatch
    if _has_formal_inverse(left) or _has_formal_inverse(right):
        raise UnresolvedInverseError(
            "Symbols agree but a formal inverse blocks evaluation; register an intertwiner"
        )
    sigma = Expression.symbol(fresh_direction(*left.expressions(), *right.expressions()))
    difference = apply(left, sigma, constraints, assumptions) - apply(
        right, sigma, constraints, assumptions
    )
    if difference.is_zero:
        return EqualityResult(True)
    logger.debug(f"Symbols agree but the operators differ on a direction: {difference}")
    return EqualityResult(False, difference)


# Intertwiners


@dataclass(frozen=True)
class IntertwinerRule:
    rule_id: int
    name: str
    lhs: OperatorChain
    rhs: OperatorChain
    constraints: tuple[Rule, ...] = ()

    @property
    def is_trivial(self) -> bool:
        return self.lhs.key == self.rhs.key

    def applies_under(self, constraints: Sequence[Rule]) -> bool:
        return set(self.constraints) <= set(constraints)


def _find(factors: tuple, pattern: tuple) -> int:
    n = len(pattern)
    for i in range(len(factors) - n + 1):
        if factors[i : i + n] == pattern:
            return i
    return -1


class IntertwinerRegistry:
    """Append-only store of verified chain rewrites lhs -> rhs."""

    def __init__(self) -> None:
        self._rules: list[IntertwinerRule] = []
        self._lock = threading.Lock()

    @property
    def rules(self) -> tuple[IntertwinerRule, ...]:
        return tuple(self._rules)

    def __len__(self) -> int:
        return len(self._rules)

    def _append(
        self, name: str, lhs: OperatorChain, rhs: OperatorChain, constraints: tuple[Rule, ...]
    ) -> int:
        rule_id = len(self._rules)
        self._rules.append(IntertwinerRule(rule_id, name, lhs, rhs, constraints))
        return rule_id

    def register_intertwiner(
        self,
        lhs: OperatorExpression | OperatorChain,
        rhs: OperatorExpression | OperatorChain,
        constraints: Sequence[Rule] = (),
        assumptions: Assumptions = NO_ASSUMPTIONS,
        name: str = "",
    ) -> int:
        """Verify lhs == rhs and store it as a rewrite; returns the rule id.

        Two-factor rules of shape X M = M Y also store the inverted form
        X^-1 M = M Y^-1, and M X = Y M stores M X^-1 = Y^-1 M.
        """
        lhs_chain, rhs_chain = as_chain(lhs), as_chain(rhs)
        rules = tuple(constraints)
        result = op_equal(lhs_chain, rhs_chain, rules, None, assumptions)
        if not result.equal:
            raise InvalidRuleError(
                f"Intertwiner {name or lhs_chain} does not hold: differs at order "
                f"{result.order} by {result.witness}"
            )
        with self._lock:
            rule_id = self._append(name, lhs_chain, rhs_chain, rules)
            for induced in self._induced(lhs_chain, rhs_chain, assumptions):
                self._append(f"{name}:inverse", induced[0], induced[1], rules)
        logger.info(f"Registered intertwiner {name or rule_id}")
        return rule_id

    @staticmethod
    def _induced(
        lhs: OperatorChain, rhs: OperatorChain, assumptions: Assumptions
    ) -> list[tuple[OperatorChain, OperatorChain]]:
        if len(lhs.factors) != 2 or len(rhs.factors) != 2 or lhs.coefficient != rhs.coefficient:
            return []
        p, q = lhs.factors
        r, s = rhs.factors
        out = []
        try:
            if q == r:
                out.append(
                    (OperatorChain.of(op_inverse(p, assumptions), q),
                     OperatorChain.of(q, op_inverse(s, assumptions)))
                )
            if p == s:
                out.append(
                    (OperatorChain.of(p, op_inverse(q, assumptions)),
                     OperatorChain.of(op_inverse(r, assumptions), p))
                )
        except NcChartError as e:
            logger.debug(f"No inverted form for intertwiner: {str(e)}")
            return []
        return [(a, b) for a, b in out if a.factors and a.key != b.key]

    def rewrite(
        self, chain: OperatorChain, constraints: Sequence[Rule] = ()
    ) -> OperatorChain:
        """Apply stored rules to adjacent factors until none matches."""
        bound = get_settings().rewrite_step_bound
        active = [
            r for r in self.rules
            if not r.is_trivial and r.lhs.factors and r.applies_under(constraints)
        ]
        current = chain.normalized()
        for _ in range(bound):
            for rule in active:
                i = _find(current.factors, rule.lhs.factors)
                if i < 0:
                    continue
                n = len(rule.lhs.factors)
                replaced = OperatorChain(
                    current.factors[:i] + rule.rhs.factors + current.factors[i + n :],
                    current.coefficient * rule.rhs.coefficient / rule.lhs.coefficient,
                )
                current = replaced.normalized()
                break
            else:
                return current
        raise NonConfluentError(f"Chain rewriting exceeded {bound} steps")
