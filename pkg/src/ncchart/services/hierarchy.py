"""Hierarchy flows generated by recursion operators."""

import logging
import threading
import time
from dataclasses import dataclass

from ..core.config import get_settings
from ..core.exceptions import NcChartError, NonlocalFlowError
from ..models.schemas import CheckKind, CheckStatus, VerificationReport
from .catalog import AnyLink, BacklundLink, Catalog, EvolutionEquation
from .ncexpr import Expression, frechet_expr, substitute
from .opalg import apply

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Flow:
    """u_t = rhs, the order-th member of a hierarchy."""

    equation: EvolutionEquation
    order: int
    rhs: Expression

    @property
    def local(self) -> bool:
        return not self.rhs.contains_integral()


def rule_text(rule) -> str:
    return f"{Expression.atom(rule.pattern)} -> {rule.replacement}"


class HierarchyService:
    """Generates flows and checks them against each other and along links."""

    def __init__(self, catalog: Catalog):
        self.catalog = catalog
        self.settings = get_settings()
        self._cache: dict[tuple[str, int], Expression] = {}
        self._lock = threading.Lock()

    def flow_rhs(self, eq: EvolutionEquation, n: int) -> Expression:
        """rhs of the order-n flow written in the unknown alone."""
        key = (eq.name, n)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        value = self._compute(eq, n)
        with self._lock:
            self._cache[key] = value
        return value

    def _compute(self, eq: EvolutionEquation, n: int) -> Expression:
        u = Expression.symbol(eq.unknown)
        if eq.is_induced:
            source = self.catalog.equation(eq.induced_by)
            generator = apply(
                eq.induced_through, self.flow_rhs(source, n), (), eq.assumptions
            )
            return generator * u
        if n == 0:
            return Expression.symbol(eq.unknown, 1)
        if eq.recursion is None:
            if n == 1 and eq.rhs is not None:
                return eq.rhs
            raise NcChartError(f"Equation '{eq.name}' has no recursion operator for order {n}")
        previous = self.flow_rhs(eq, n - 1)
        raised = apply(eq.recursion, previous, eq.aux_rules, eq.assumptions)
        if eq.definition_rules:
            raised = substitute(raised, eq.definition_rules, eq.assumptions)
        return raised

    def flow(self, eq: EvolutionEquation | str, n: int, allow_nonlocal: bool = False) -> Flow:
        """The order-n flow; an unresolved integral is an error unless allowed."""
        if isinstance(eq, str):
            eq = self.catalog.equation(eq)
        bound = self.settings.hierarchy_order_bound
        if n < 0 or n > bound:
            raise NcChartError(f"Flow order {n} outside 0..{bound}")
        started = time.perf_counter()
        result = Flow(eq, n, self.flow_rhs(eq, n))
        logger.debug(
            f"Flow {eq.name}[{n}]: {len(result.rhs.terms)} terms "
            f"in {time.perf_counter() - started:.3f}s"
        )
        if not result.local and not allow_nonlocal:
            raise NonlocalFlowError(f"Flow {eq.name}[{n}] keeps an unresolved integral")
        return result

    def lie_bracket(self, f: Flow, g: Flow) -> Expression:
        """[X_f, X_g] acting on the common unknown."""
        if f.equation.unknown != g.equation.unknown:
            raise NcChartError("Flows belong to different unknowns")
        u = f.equation.unknown
        return frechet_expr(f.rhs, u, g.rhs) - frechet_expr(g.rhs, u, f.rhs)

    def backlund_residual(self, link: BacklundLink, n: int) -> Expression:
        """d/dt of the relation along both order-n flows, reduced on the relation."""
        k = self.flow_rhs(link.source, n)
        g = self.flow_rhs(link.target, n)
        dt = frechet_expr(link.relation, link.source.unknown, k) + frechet_expr(
            link.relation, link.target.unknown, g
        )
        return substitute(dt, link.constraints, link.assumptions)

    def transport_flow(self, link: AnyLink, n: int) -> VerificationReport:
        """Check that the link maps the order-n flow of its source to that of its target."""
        started = time.perf_counter()
        name = f"transport:{link.name}[{n}]"
        try:
            for part in link.links:
                residual = self.backlund_residual(part, n)
                if not residual.is_zero:
                    return VerificationReport(
                        identity=name,
                        kind=CheckKind.TRANSPORT,
                        status=CheckStatus.FAIL,
                        witness=str(residual),
                        order=n,
                        elapsed=time.perf_counter() - started,
                        constraints=[rule_text(r) for r in part.constraints],
                        message=f"link {part.name} does not vanish",
                    )
            return VerificationReport(
                identity=name,
                kind=CheckKind.TRANSPORT,
                status=CheckStatus.PASS,
                order=n,
                elapsed=time.perf_counter() - started,
                constraints=[rule_text(r) for r in link.constraints],
            )
        except NcChartError as e:
            logger.warning(f"Transport check {name} errored: {str(e)}")
            return VerificationReport(
                identity=name,
                kind=CheckKind.TRANSPORT,
                status=CheckStatus.ERROR,
                order=n,
                elapsed=time.perf_counter() - started,
                message=str(e),
            )
