"""Free associative differential algebra over the rationals.

Expressions are formal sums of words in non-commuting atoms: derivatives of
symbols, formal inverses and formal integrals. Every constructor returns the
normal form, so structural equality is mathematical equality in the free
algebra.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import cached_property, lru_cache
from typing import Union

import sympy

from ..core.config import get_settings
from ..core.exceptions import NcChartError, NonConfluentError, NotInvertibleError

logger = logging.getLogger(__name__)


class SymbolKind(str, Enum):
    """Role of a symbol in a session."""

    UNKNOWN = "unknown-function"
    CONSTANT = "constant-operator"
    DIRECTION = "generic-direction"


@dataclass(frozen=True)
class SymbolId:
    """A named symbol; names are unique within a session."""

    name: str
    kind: SymbolKind = SymbolKind.UNKNOWN

    @property
    def is_constant(self) -> bool:
        return self.kind == SymbolKind.CONSTANT


@dataclass(frozen=True)
class Deriv:
    """The order-th x-derivative of a symbol."""

    symbol: SymbolId
    order: int = 0

    @cached_property
    def key(self) -> tuple:
        return (0, self.symbol.name, self.order)


@dataclass(frozen=True)
class Inverse:
    """Formal inverse of a declared-invertible expression."""

    inner: Expression

    @cached_property
    def key(self) -> tuple:
        return (1, self.inner.key)


@dataclass(frozen=True)
class Integral:
    """Unresolved solution J of J_x + left*J - J*right = inner."""

    inner: Expression
    left: Expression = field(default_factory=lambda: ZERO)
    right: Expression = field(default_factory=lambda: ZERO)

    @cached_property
    def key(self) -> tuple:
        return (2, self.inner.key, self.left.key, self.right.key)

    @property
    def is_twisted(self) -> bool:
        return not (self.left.is_zero and self.right.is_zero)


Atom = Union[Deriv, Inverse, Integral]
Word = tuple[Atom, ...]


def word_key(word: Word) -> tuple:
    return (len(word), tuple(atom.key for atom in word))


def _cancels(left: Atom, right: Atom) -> bool:
    if isinstance(right, Inverse) and right.inner.single_atom == left:
        return True
    if isinstance(left, Inverse) and left.inner.single_atom == right:
        return True
    return False


def normalize_word(atoms: Iterable[Atom]) -> Word:
    """Cancel adjacent X*inv(X) and inv(X)*X pairs."""
    stack: list[Atom] = []
    for atom in atoms:
        if stack and _cancels(stack[-1], atom):
            stack.pop()
        else:
            stack.append(atom)
    return tuple(stack)


Scalar = Union[int, Fraction]


@dataclass(frozen=True)
class Expression:
    """Normalized formal sum of rational multiples of words."""

    terms: tuple[tuple[Word, Fraction], ...] = ()

    # Construction

    @classmethod
    def from_terms(cls, pairs: Iterable[tuple[Sequence[Atom], Scalar]]) -> Expression:
        collected: dict[Word, Fraction] = {}
        for atoms, coefficient in pairs:
            if coefficient == 0:
                continue
            word = normalize_word(atoms)
            collected[word] = collected.get(word, Fraction(0)) + Fraction(coefficient)
        items = [(w, c) for w, c in collected.items() if c != 0]
        items.sort(key=lambda item: word_key(item[0]))
        return cls(tuple(items))

    @classmethod
    def from_word(cls, word: Sequence[Atom], coefficient: Scalar = 1) -> Expression:
        return cls.from_terms([(word, coefficient)])

    @classmethod
    def atom(cls, atom: Atom) -> Expression:
        return cls(((((atom,)), Fraction(1)),))

    @classmethod
    def symbol(cls, symbol: SymbolId, order: int = 0) -> Expression:
        if symbol.is_constant and order > 0:
            return ZERO
        return cls.atom(Deriv(symbol, order))

    @classmethod
    def scalar(cls, value: Scalar) -> Expression:
        return cls.from_terms([((), value)])

    # Properties

    @cached_property
    def key(self) -> tuple:
        return tuple((word_key(w), c) for w, c in self.terms)

    @cached_property
    def _hash(self) -> int:
        return hash(self.terms)

    def __hash__(self) -> int:
        return self._hash

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def single_atom(self) -> Atom | None:
        """The atom a when self is exactly 1*a."""
        if len(self.terms) == 1:
            word, coefficient = self.terms[0]
            if coefficient == 1 and len(word) == 1:
                return word[0]
        return None

    def monic(self) -> tuple[Fraction, Expression]:
        """Split off the leading coefficient."""
        if self.is_zero:
            return Fraction(0), self
        lead = self.terms[0][1]
        return lead, self.scale(1 / lead)

    def symbols(self) -> set[SymbolId]:
        found: set[SymbolId] = set()
        for word, _ in self.terms:
            for atom in word:
                found |= _atom_symbols(atom)
        return found

    def contains_integral(self) -> bool:
        return any(_atom_has_integral(atom) for word, _ in self.terms for atom in word)

    def atoms(self) -> Iterable[Atom]:
        for word, _ in self.terms:
            yield from word

    # Arithmetic

    def scale(self, factor: Scalar) -> Expression:
        if factor == 0:
            return ZERO
        factor = Fraction(factor)
        return Expression(tuple((w, c * factor) for w, c in self.terms))

    def __add__(self, other: Expression) -> Expression:
        return Expression.from_terms([*self.terms, *other.terms])

    def __sub__(self, other: Expression) -> Expression:
        return self + other.scale(-1)

    def __neg__(self) -> Expression:
        return self.scale(-1)

    def __mul__(self, other: Expression | Scalar) -> Expression:
        if isinstance(other, (int, Fraction)):
            return self.scale(other)
        return Expression.from_terms(
            (w1 + w2, c1 * c2) for w1, c1 in self.terms for w2, c2 in other.terms
        )

    def __rmul__(self, other: Scalar) -> Expression:
        return self.scale(other)

    def __str__(self) -> str:
        from ..utils.printer import format_expression

        return format_expression(self)


ZERO = Expression()
ONE = Expression.scalar(1)


def _atom_symbols(atom: Atom) -> set[SymbolId]:
    if isinstance(atom, Deriv):
        return {atom.symbol}
    if isinstance(atom, Inverse):
        return atom.inner.symbols()
    return atom.inner.symbols() | atom.left.symbols() | atom.right.symbols()


def _atom_has_integral(atom: Atom) -> bool:
    if isinstance(atom, Integral):
        return True
    if isinstance(atom, Inverse):
        return atom.inner.contains_integral()
    return False


def commutator(a: Expression, b: Expression) -> Expression:
    return a * b - b * a


def anticommutator(a: Expression, b: Expression) -> Expression:
    return a * b + b * a


def sum_expressions(parts: Iterable[Expression]) -> Expression:
    return Expression.from_terms(pair for part in parts for pair in part.terms)


def normalize(e: Expression) -> Expression:
    """Re-normalize an expression; idempotent on normalized input."""
    return Expression.from_terms(e.terms)


# Invertibility


@dataclass(frozen=True)
class Assumptions:
    """Declared invertible expressions, stored in monic form."""

    invertible: frozenset[Expression] = frozenset()

    def declare(self, *expressions: Expression) -> Assumptions:
        monic = {e.monic()[1] for e in expressions if not e.is_zero}
        return Assumptions(self.invertible | frozenset(monic))

    def merge(self, other: Assumptions) -> Assumptions:
        return Assumptions(self.invertible | other.invertible)

    def allows(self, e: Expression) -> bool:
        return not e.is_zero and e.monic()[1] in self.invertible


NO_ASSUMPTIONS = Assumptions()


def _invert_atom(atom: Atom, assumptions: Assumptions) -> Expression:
    if isinstance(atom, Inverse):
        return atom.inner
    single = Expression.atom(atom)
    if not assumptions.allows(single):
        raise NotInvertibleError(f"Atom {single} is not declared invertible")
    return Expression.atom(Inverse(single))


def invert(e: Expression, assumptions: Assumptions = NO_ASSUMPTIONS) -> Expression:
    """Two-sided inverse of e under the declared assumptions."""
    if e.is_zero:
        raise NotInvertibleError("Zero is not invertible")
    if len(e.terms) == 1:
        word, coefficient = e.terms[0]
        result = Expression.scalar(1 / coefficient)
        for atom in reversed(word):
            result = result * _invert_atom(atom, assumptions)
        return result
    coefficient, monic = e.monic()
    if monic not in assumptions.invertible:
        raise NotInvertibleError(f"Expression {e} is not declared invertible")
    return Expression.atom(Inverse(monic)).scale(1 / coefficient)


# Differentiation


@lru_cache(maxsize=None)
def _atom_derivative(atom: Atom) -> Expression:
    if isinstance(atom, Deriv):
        if atom.symbol.is_constant:
            return ZERO
        return Expression.atom(Deriv(atom.symbol, atom.order + 1))
    if isinstance(atom, Inverse):
        inv = Expression.atom(atom)
        return -(inv * differentiate(atom.inner) * inv)
    j = Expression.atom(atom)
    return atom.inner - atom.left * j + j * atom.right


def _differentiate_once(e: Expression) -> Expression:
    pairs: list[tuple[Word, Fraction]] = []
    for word, coefficient in e.terms:
        for i, atom in enumerate(word):
            for dword, dcoef in _atom_derivative(atom).terms:
                pairs.append((word[:i] + dword + word[i + 1 :], coefficient * dcoef))
    return Expression.from_terms(pairs)


def differentiate(e: Expression, n: int = 1) -> Expression:
    """n-th x-derivative, extended to inverses and integrals."""
    for _ in range(n):
        e = _differentiate_once(e)
    return e


def twisted_derivative(e: Expression, left: Expression, right: Expression) -> Expression:
    """e_x + left*e - e*right."""
    return differentiate(e) + left * e - e * right


# Substitution


@dataclass(frozen=True)
class Rule:
    """Oriented solved form pattern -> replacement, closed under D."""

    pattern: Deriv
    replacement: Expression

    def matches(self, atom: Atom) -> bool:
        return (
            isinstance(atom, Deriv)
            and atom.symbol == self.pattern.symbol
            and atom.order >= self.pattern.order
        )

    def replacement_for(self, atom: Deriv) -> Expression:
        return _rule_replacement(self, atom.order - self.pattern.order)

    @classmethod
    def from_expressions(cls, pattern: Expression, replacement: Expression) -> Rule:
        atom = pattern.single_atom
        if not isinstance(atom, Deriv):
            raise NcChartError(f"Rule pattern {pattern} must be a symbol derivative")
        return cls(atom, replacement)


@lru_cache(maxsize=None)
def _rule_replacement(rule: Rule, extra: int) -> Expression:
    return differentiate(rule.replacement, extra)


def _substitute_atom(
    atom: Atom, rules: tuple[Rule, ...], assumptions: Assumptions, memo: dict
) -> Expression:
    if atom in memo:
        return memo[atom]
    result: Expression
    if isinstance(atom, Deriv):
        result = Expression.atom(atom)
        for rule in rules:
            if rule.matches(atom):
                result = rule.replacement_for(atom)
                break
    elif isinstance(atom, Inverse):
        inner = _substitute_once(atom.inner, rules, assumptions, memo)
        result = Expression.atom(atom) if inner == atom.inner else invert(inner, assumptions)
    else:
        inner = _substitute_once(atom.inner, rules, assumptions, memo)
        left = _substitute_once(atom.left, rules, assumptions, memo)
        right = _substitute_once(atom.right, rules, assumptions, memo)
        if (inner, left, right) == (atom.inner, atom.left, atom.right):
            result = Expression.atom(atom)
        else:
            result = integrate(inner, left, right, rules, assumptions)
    memo[atom] = result
    return result


def _substitute_once(
    e: Expression, rules: tuple[Rule, ...], assumptions: Assumptions, memo: dict
) -> Expression:
    parts: list[Expression] = []
    for word, coefficient in e.terms:
        product = Expression.scalar(coefficient)
        for atom in word:
            product = product * _substitute_atom(atom, rules, assumptions, memo)
            if product.is_zero:
                break
        parts.append(product)
    return sum_expressions(parts)


def substitute(
    e: Expression,
    rules: Rule | Iterable[Rule],
    assumptions: Assumptions = NO_ASSUMPTIONS,
    depth_bound: int | None = None,
) -> Expression:
    """Reduce e modulo solved forms until nothing changes."""
    rule_tuple = (rules,) if isinstance(rules, Rule) else tuple(rules)
    if not rule_tuple:
        return e
    bound = depth_bound or get_settings().substitution_depth_bound
    current = e
    for _ in range(bound):
        nxt = _substitute_once(current, rule_tuple, assumptions, {})
        if nxt == current:
            return current
        current = nxt
    raise NonConfluentError(f"Substitution did not settle within {bound} rounds")


def schwarzian(
    phi: SymbolId | Expression, assumptions: Assumptions = NO_ASSUMPTIONS
) -> Expression:
    """(phi_x^-1 phi_xx)_x - 1/2 (phi_x^-1 phi_xx)^2."""
    value = Expression.symbol(phi) if isinstance(phi, SymbolId) else phi
    first = differentiate(value)
    t = invert(first, assumptions) * differentiate(first)
    return differentiate(t) - (t * t).scale(Fraction(1, 2))


# Integration
#
# Letters split into graded letters, which carry the leading term of a
# derivative, and passive letters: constants, integrals, letters whose
# derivative is rewritten by a solved form, and inverses built from those.
# Integration by parts works on the last graded letter; a second pass clears
# derivatives of words made of passive letters only.


@dataclass(frozen=True)
class Irreducible:
    """Partial antiderivative plus the part that could not be integrated."""

    partial: Expression
    remainder: Expression


@lru_cache(maxsize=4096)
def _passive(atom: Atom, rules: tuple[Rule, ...]) -> bool:
    if isinstance(atom, Integral):
        return True
    if isinstance(atom, Deriv):
        if atom.symbol.is_constant:
            return True
        return any(
            r.pattern.symbol == atom.symbol and r.pattern.order <= atom.order + 2 for r in rules
        )
    return all(_passive(a, rules) for a in atom.inner.atoms())


def _pivot(word: Word, rules: tuple[Rule, ...] = ()) -> tuple[int, int, str] | None:
    i = len(word) - 1
    while i >= 0 and _passive(word[i], rules):
        i -= 1
    if i < 0:
        return None
    atom = word[i]
    if isinstance(atom, Deriv):
        return (atom.order, i, "deriv") if atom.order >= 1 else None
    if isinstance(atom, Inverse) and i >= 2 and word[i - 2] == atom:
        base = atom.inner.single_atom
        if isinstance(base, Deriv) and word[i - 1] == Deriv(base.symbol, base.order + 1):
            return base.order + 1, i, "inverse"
    return None


def _integrate_step(word: Word, coefficient: Fraction, pivot: tuple[int, int, str]) -> Expression:
    _, i, kind = pivot
    atom = word[i]
    if kind == "deriv":
        assert isinstance(atom, Deriv)
        lowered = Deriv(atom.symbol, atom.order - 1)
        return Expression.from_word(word[:i] + (lowered,) + word[i + 1 :], coefficient)
    return Expression.from_word(word[: i - 2] + (atom,) + word[i + 1 :], -coefficient)


def _axpy(target: dict, source: dict, factor: Fraction) -> None:
    for key, value in source.items():
        updated = target.get(key, Fraction(0)) + factor * value
        if updated == 0:
            target.pop(key, None)
        else:
            target[key] = updated


class _Integrator:
    """Solves F_x + left*F - F*right = e modulo solved forms."""

    def __init__(
        self,
        left: Expression,
        right: Expression,
        rules: tuple[Rule, ...],
        assumptions: Assumptions,
    ):
        self.left = left
        self.right = right
        self.rules = rules
        self.assumptions = assumptions

    def reduce(self, e: Expression) -> Expression:
        return substitute(e, self.rules, self.assumptions) if self.rules else e

    def derivative(self, e: Expression) -> Expression:
        return self.reduce(twisted_derivative(e, self.left, self.right))

    def by_parts(self, work: dict[Word, Fraction]) -> list[Expression]:
        """Greedy integration by parts, highest pivot order first."""
        found: list[Expression] = []
        bound = get_settings().integration_step_bound
        for _ in range(bound):
            best: tuple | None = None
            for word, coefficient in work.items():
                pivot = _pivot(word, self.rules)
                if pivot is None:
                    continue
                rank = (pivot[0], word_key(word))
                if best is None or rank > best[0]:
                    best = (rank, word, coefficient, pivot)
            if best is None:
                return found
            _, word, coefficient, pivot = best
            g = _integrate_step(word, coefficient, pivot)
            found.append(g)
            _axpy(work, dict(self.derivative(g).terms), Fraction(-1))
        raise NonConfluentError(f"Integration by parts did not settle within {bound} steps")

    def _letter_derivatives(self, atom: Atom) -> list[Word]:
        return [w for w, _ in self.reduce(_atom_derivative(atom)).terms if w]

    def _candidates(self, words: Iterable[Word]) -> list[Word]:
        """Passive words whose derivative shares a word with the given ones."""
        words = list(words)
        pool = {a for w in words for a in w if _passive(a, self.rules)}
        derived = {a: self._letter_derivatives(a) for a in pool}
        found: set[Word] = set()
        for word in words:
            for atom, pieces in derived.items():
                for piece in pieces:
                    n = len(piece)
                    for p in range(len(word) - n + 1):
                        if word[p : p + n] == piece:
                            found.add(normalize_word(word[:p] + (atom,) + word[p + n :]))
            for lw, _ in self.left.terms:
                if lw and word[: len(lw)] == lw:
                    found.add(word[len(lw) :])
            for rw, _ in self.right.terms:
                if rw and word[-len(rw) :] == rw:
                    found.add(word[: -len(rw)])
        passive = [w for w in found if w and all(_passive(a, self.rules) for a in w)]
        return sorted(passive, key=word_key)

    def passive_part(self, work: dict[Word, Fraction]) -> dict[Word, Fraction]:
        """Reduce work by derivatives of passive words; returns their combination."""
        basis: dict[Word, tuple[dict, dict]] = {}
        for candidate in self._candidates(work):
            row = dict(self.derivative(Expression.from_word(candidate)).terms)
            combination = {candidate: Fraction(1)}
            while row:
                lead = max(row, key=word_key)
                if lead not in basis:
                    basis[lead] = (row, combination)
                    break
                base_row, base_combination = basis[lead]
                factor = -row[lead] / base_row[lead]
                _axpy(row, base_row, factor)
                _axpy(combination, base_combination, factor)
        primitive: dict[Word, Fraction] = {}
        while True:
            leads = [w for w in work if w in basis]
            if not leads:
                return primitive
            lead = max(leads, key=word_key)
            base_row, base_combination = basis[lead]
            factor = work[lead] / base_row[lead]
            _axpy(work, base_row, -factor)
            _axpy(primitive, base_combination, factor)

    def wrap(self, word: Word, coefficient: Fraction) -> Expression:
        """Integral atom for an irreducible word, constants pulled out when untwisted."""
        i, j = 0, len(word)
        if self.left.is_zero and self.right.is_zero:
            while i < j and _is_constant_letter(word[i]):
                i += 1
            while j > i and _is_constant_letter(word[j - 1]):
                j -= 1
            if i == j:
                i, j = 0, len(word)
        inner = Integral(Expression.from_word(word[i:j]), self.left, self.right)
        return Expression.from_word(word[:i] + (inner,) + word[j:], coefficient)


def _is_constant_letter(atom: Atom) -> bool:
    return isinstance(atom, Deriv) and atom.symbol.is_constant


def antiderivative(
    e: Expression,
    left: Expression | None = None,
    right: Expression | None = None,
    rules: Sequence[Rule] = (),
    assumptions: Assumptions = NO_ASSUMPTIONS,
) -> Expression | Irreducible:
    """Solve F_x + left*F - F*right = e modulo the solved forms.

    Terms are reduced highest pivot order first; whatever is left is then
    matched against derivatives of words without a graded letter. A term
    that neither pass removes is returned in the remainder. No integration
    constant is added.
    """
    integrator = _Integrator(left or ZERO, right or ZERO, tuple(rules), assumptions)
    work = dict(integrator.reduce(e).terms)
    found = integrator.by_parts(work)
    for _ in range(get_settings().integration_step_bound):
        primitive = integrator.passive_part(work) if work else {}
        if not primitive:
            break
        found.append(Expression.from_terms(primitive.items()))
        found.extend(integrator.by_parts(work))
    partial = integrator.reduce(sum_expressions(found))
    remainder = Expression.from_terms(work.items())
    if remainder.is_zero:
        return partial
    return Irreducible(partial, remainder)


def integrate(
    e: Expression,
    left: Expression | None = None,
    right: Expression | None = None,
    rules: Sequence[Rule] = (),
    assumptions: Assumptions = NO_ASSUMPTIONS,
) -> Expression:
    """Antiderivative with any irreducible part wrapped in Integral atoms."""
    integrator = _Integrator(left or ZERO, right or ZERO, tuple(rules), assumptions)
    result = antiderivative(e, integrator.left, integrator.right, integrator.rules, assumptions)
    if isinstance(result, Expression):
        return result
    wrapped = [integrator.wrap(word, c) for word, c in result.remainder.terms]
    return result.partial + sum_expressions(wrapped)


# Frechet derivative


def _direction_expression(direction: SymbolId | Expression) -> Expression:
    if isinstance(direction, SymbolId):
        return Expression.symbol(direction)
    return direction


def frechet_expr(
    e: Expression, u: SymbolId, direction: SymbolId | Expression
) -> Expression:
    """d/de e[u <- u + eps*direction] at eps = 0."""
    d = _direction_expression(direction)
    memo: dict[Atom, Expression] = {}

    def delta_atom(atom: Atom) -> Expression:
        if atom in memo:
            return memo[atom]
        if isinstance(atom, Deriv):
            value = differentiate(d, atom.order) if atom.symbol == u else ZERO
        elif isinstance(atom, Inverse):
            inv = Expression.atom(atom)
            value = -(inv * delta(atom.inner) * inv)
        else:
            j = Expression.atom(atom)
            source = delta(atom.inner) - delta(atom.left) * j + j * delta(atom.right)
            value = ZERO if source.is_zero else integrate(source, atom.left, atom.right)
        memo[atom] = value
        return value

    def delta(expr: Expression) -> Expression:
        pairs: list[tuple[Word, Fraction]] = []
        for word, coefficient in expr.terms:
            for i, atom in enumerate(word):
                for dword, dcoef in delta_atom(atom).terms:
                    pairs.append((word[:i] + dword + word[i + 1 :], coefficient * dcoef))
        return Expression.from_terms(pairs)

    return delta(e)


# Commutative image

X = sympy.Symbol("x")


def abelianize(e: Expression, x: sympy.Symbol = X) -> sympy.Expr:
    """Image of e in the commutative differential ring."""

    def image(atom: Atom) -> sympy.Expr:
        if isinstance(atom, Deriv):
            if atom.symbol.is_constant:
                return sympy.Symbol(atom.symbol.name)
            f = sympy.Function(atom.symbol.name)(x)
            return sympy.diff(f, x, atom.order) if atom.order else f
        if isinstance(atom, Inverse):
            return 1 / abelianize(atom.inner, x)
        if atom.is_twisted and sympy.expand(
            abelianize(atom.left, x) - abelianize(atom.right, x)
        ) != 0:
            raise NcChartError("Twisted integral has no polynomial commutative image")
        return sympy.Integral(abelianize(atom.inner, x), x)

    total = sympy.Integer(0)
    for word, coefficient in e.terms:
        term = sympy.Rational(coefficient.numerator, coefficient.denominator)
        for atom in word:
            term = term * image(atom)
        total += term
    return sympy.expand(total)


