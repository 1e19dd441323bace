"""Verification engine for the chart of equations and links."""

import logging
import re
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from ..core.config import get_settings
from ..core.exceptions import CatalogLoadError, NcChartError
from ..models.schemas import CheckKind, CheckStatus, VerificationReport
from .catalog import AnyLink, BacklundLink, Catalog, EvolutionEquation, load_catalog
from .hierarchy import HierarchyService, rule_text
from .ncexpr import (
    ONE,
    Assumptions,
    Deriv,
    Expression,
    Rule,
    SymbolId,
    SymbolKind,
    differentiate,
    frechet_expr,
    invert,
    schwarzian,
    substitute,
)
from .numeval import NumericService
from .opalg import (
    D_OP,
    OperatorChain,
    apply,
    as_chain,
    factor_trailing_derivative,
    frechet_op,
    linearization,
    op_commutator,
    op_equal,
)

logger = logging.getLogger(__name__)

INVARIANCE_KINDS = ("inversion", "affine", "moebius-left", "moebius-right")
RUN_TARGET = re.compile(r"(?P<kind>transport|backlund):(?P<link>\w+)(?:\[(?P<order>\d+)\])?")

Check = Callable[[], VerificationReport]


def _assumption_texts(assumptions: Assumptions) -> list[str]:
    return sorted(str(e) for e in assumptions.invertible)


class ChartService:
    """Runs flow, link, recursion, invariance and identity checks on a catalog."""

    def __init__(self, catalog: Catalog, hierarchy: HierarchyService | None = None):
        self.catalog = catalog
        self.settings = get_settings()
        self.hierarchy = hierarchy or HierarchyService(catalog)
        self.numeric = NumericService(catalog)

    @classmethod
    def load(cls, path: Path | str | None = None) -> "ChartService":
        """Load a catalog and require every flow to check out."""
        service = cls(load_catalog(path))
        flows = [service.verify_flow(eq, numeric=False) for eq in service.catalog.equations.values()]
        failed = [r for r in flows if not r.passed]
        if failed:
            names = ", ".join(f"{r.identity} ({r.message or r.witness})" for r in failed)
            raise CatalogLoadError(f"Catalog flows failed verification: {names}")
        return service

    # Reports

    def _report(
        self,
        name: str,
        kind: CheckKind,
        started: float,
        witness: Expression | None = None,
        assumptions: Assumptions | None = None,
        constraints: Sequence[Rule] = (),
        **extra,
    ) -> VerificationReport:
        status = CheckStatus.PASS if witness is None or witness.is_zero else CheckStatus.FAIL
        return VerificationReport(
            identity=name,
            kind=kind,
            status=extra.pop("status", status),
            witness=None if witness is None or witness.is_zero else str(witness),
            elapsed=time.perf_counter() - started,
            assumptions=_assumption_texts(assumptions or self.catalog.assumptions),
            constraints=[rule_text(r) for r in constraints],
            **extra,
        )

    def _guarded(self, name: str, kind: CheckKind, check: Check) -> VerificationReport:
        started = time.perf_counter()
        try:
            return check()
        except NcChartError as e:
            logger.warning(f"Check {name} errored: {str(e)}")
            return VerificationReport(
                identity=name,
                kind=kind,
                status=CheckStatus.ERROR,
                elapsed=time.perf_counter() - started,
                message=f"{type(e).__name__}: {str(e)}",
            )

    # Flows and links

    def verify_flow(
        self, eq: EvolutionEquation, numeric: bool = True, seed: int = 0
    ) -> VerificationReport:
        """Recursion operator applied to u_x reproduces the stored rhs.

        Flows with a numeric counterpart are also compared on sampled fields,
        the operator acting factor by factor.
        """
        name = f"flow:{eq.name}"

        def check() -> VerificationReport:
            started = time.perf_counter()
            if eq.is_induced:
                flow = self.hierarchy.flow(eq, 1, allow_nonlocal=True)
                if flow.local:
                    return self._report(name, CheckKind.FLOW, started, message="induced flow is local")
                return self._report(
                    name, CheckKind.FLOW, started, witness=flow.rhs, status=CheckStatus.FAIL,
                    message="induced flow keeps an unresolved integral",
                )
            if eq.recursion is None or eq.rhs is None:
                return self._report(name, CheckKind.FLOW, started, message="no recursion operator")
            u_x = Expression.symbol(eq.unknown, 1)
            generated = apply(eq.recursion, u_x, eq.aux_rules, eq.assumptions)
            stored = substitute(eq.rhs, eq.aux_rules, eq.assumptions)
            witness = generated - stored
            residual = None
            if numeric and witness.is_zero and name in self.numeric.identities:
                residual = self.numeric.residual(name, seed).residual
                if residual >= self.settings.numeric_tolerance:
                    return self._report(
                        name, CheckKind.FLOW, started, status=CheckStatus.FAIL,
                        constraints=eq.aux_rules, residual=residual,
                        message=f"numeric residual {residual:.3e}",
                    )
            return self._report(
                name, CheckKind.FLOW, started, witness=witness, constraints=eq.aux_rules,
                residual=residual,
            )

        return self._guarded(name, CheckKind.FLOW, check)

    def verify_backlund(
        self, link: AnyLink, order: int = 1, numeric: bool = True, seed: int = 0
    ) -> VerificationReport:
        """d/dt of the relation vanishes on the relation along both flows.

        First-order checks of links with a numeric counterpart also evaluate
        it on fields that satisfy the relation.
        """
        name = f"backlund:{link.name}" if order == 1 else f"backlund:{link.name}[{order}]"

        def check() -> VerificationReport:
            started = time.perf_counter()
            for part in link.links:
                residual = self.hierarchy.backlund_residual(part, order)
                if not residual.is_zero:
                    return self._report(
                        name, CheckKind.BACKLUND, started, witness=residual,
                        constraints=part.constraints, order=order,
                        message=f"link {part.name} does not vanish",
                    )
            residual_value = None
            if numeric and order == 1 and name in self.numeric.identities:
                residual_value = self.numeric.residual(name, seed).residual
                if residual_value >= self.settings.numeric_tolerance:
                    return self._report(
                        name, CheckKind.BACKLUND, started, status=CheckStatus.FAIL,
                        constraints=link.constraints, order=order, residual=residual_value,
                        message=f"numeric residual {residual_value:.3e}",
                    )
            return self._report(
                name, CheckKind.BACKLUND, started, constraints=link.constraints, order=order,
                residual=residual_value,
            )

        return self._guarded(name, CheckKind.BACKLUND, check)

    def transformation_operator(self, link: AnyLink) -> OperatorChain:
        """Pi = -B_v^-1 B_u, composed in order for composite links."""
        parts: list[OperatorChain] = []
        for part in link.links:
            b_source = linearization(part.relation, part.source.unknown)
            b_target = factor_trailing_derivative(
                linearization(part.relation, part.target.unknown)
            )
            pi = OperatorChain.of(b_target.inverse(part.assumptions), as_chain(b_source)).scale(-1)
            parts.append(pi)
        pi = OperatorChain.of(*reversed(parts))
        return self.catalog.registry.rewrite(pi, link.constraints)

    def derive_recursion(
        self, link: AnyLink, source_op: OperatorChain | None = None
    ) -> tuple[OperatorChain, VerificationReport]:
        """Pi o R o Pi^-1, compared with the target's recursion operator."""
        name = f"recursion:{link.name}"
        started = time.perf_counter()
        source_op = source_op or link.source.recursion
        if source_op is None:
            raise NcChartError(f"Equation '{link.source.name}' has no recursion operator")
        pi = self.transformation_operator(link)
        derived = OperatorChain.of(pi, source_op, pi.inverse(link.assumptions))
        derived = self.catalog.registry.rewrite(derived, link.constraints)
        target = link.target.recursion
        if target is None:
            report = self._report(
                name, CheckKind.RECURSION, started, status=CheckStatus.ERROR,
                message=f"equation '{link.target.name}' has no closed form to compare",
                details={"derived": str(derived), "pi": str(pi)},
            )
            return derived, report
        result = op_equal(
            derived, target, link.constraints, self.catalog.registry, link.assumptions
        )
        report = self._report(
            name, CheckKind.RECURSION, started,
            witness=None if result.equal else result.witness,
            status=CheckStatus.PASS if result.equal else CheckStatus.FAIL,
            constraints=link.constraints, order=result.order,
            details={"derived": str(derived), "pi": str(pi)},
        )
        return derived, report

    def recursion_report(self, link: AnyLink) -> VerificationReport:
        name = f"recursion:{link.name}"
        return self._guarded(name, CheckKind.RECURSION, lambda: self.derive_recursion(link)[1])

    # Invariance of the Schwarzian equation

    def _schwarzian_equation(self) -> EvolutionEquation:
        return self.catalog.equation("kdvsing")

    def _flow_for(self, symbol: SymbolId, assumptions: Assumptions) -> Expression:
        """The stored phi-flow rewritten for another unknown."""
        eq = self._schwarzian_equation()
        if eq.rhs is None:
            raise NcChartError("Equation 'kdvsing' has no explicit flow")
        rule = Rule(Deriv(eq.unknown, 0), Expression.symbol(symbol))
        return substitute(eq.rhs, [rule], assumptions)

    def _invariance_residual(
        self, psi: Expression, chi: SymbolId, assumptions: Assumptions
    ) -> Expression:
        """psi_t - psi_x {psi; x} when chi moves by its Schwarzian flow."""
        flow = self._flow_for(chi, assumptions)
        psi_t = frechet_expr(psi, chi, flow)
        return psi_t - differentiate(psi) * schwarzian(psi, assumptions)

    def _step_inversion(self) -> Expression:
        chi = SymbolId("chi")
        c = Expression.symbol(chi)
        assumptions = Assumptions().declare(c, differentiate(c))
        return self._invariance_residual(invert(c, assumptions), chi, assumptions)

    def _step_affine(self, left: bool, right: bool, shift: bool = True) -> Expression:
        """psi = P chi Q + R for generic invertible constants P, Q."""
        chi = SymbolId("chi")
        p, q, r = (Expression.symbol(SymbolId(n, SymbolKind.CONSTANT)) for n in ("P", "Q", "R"))
        c = Expression.symbol(chi)
        assumptions = Assumptions().declare(differentiate(c), p, q)
        psi = (p if left else ONE) * c * (q if right else ONE) + (r if shift else Expression())
        return self._invariance_residual(psi, chi, assumptions)

    def verify_invariance(self, kind: str, numeric: bool = True, seed: int = 0) -> VerificationReport:
        """Invariance of phi_t = phi_x {phi; x} under inversion, affine and Moebius maps."""
        name = f"invariance:{kind}"
        if kind not in INVARIANCE_KINDS:
            raise NcChartError(f"Unknown invariance kind '{kind}'")

        def check() -> VerificationReport:
            started = time.perf_counter()
            alternative = self.settings.assumption_profile == "alternative"
            steps: dict[str, Expression] = {}
            if kind == "inversion":
                steps["inversion"] = self._step_inversion()
            elif kind == "affine":
                steps["affine"] = self._step_affine(left=True, right=True)
            else:
                # Moebius maps factor as affine, inversion, affine; the two
                # affine factors are the same one-sided class.
                right_side = kind == "moebius-right"
                steps["affine"] = self._step_affine(left=right_side, right=not right_side)
                steps["inversion"] = self._step_inversion()
            for label, residual in steps.items():
                if not residual.is_zero:
                    return self._report(
                        name, CheckKind.INVARIANCE, started, witness=residual,
                        message=f"step {label} does not vanish",
                    )
            residuals: dict[str, float] = {}
            if numeric and kind.startswith("moebius"):
                targets = ["moebius-right" if kind == "moebius-right" else "moebius-full"]
                if kind == "moebius-left" and not alternative:
                    targets.append("moebius-recombination")
                for target in targets:
                    residuals[target] = self.numeric.residual(target, seed).residual
            worst = max(residuals.values(), default=0.0)
            passed = worst < self.settings.numeric_tolerance
            return self._report(
                name, CheckKind.INVARIANCE, started,
                status=CheckStatus.PASS if passed else CheckStatus.FAIL,
                residual=worst if residuals else None,
                message=None if passed else f"numeric residual {worst:.3e}",
                details={"steps": sorted(steps), "profile": self.settings.assumption_profile,
                         "numeric": residuals},
            )

        return self._guarded(name, CheckKind.INVARIANCE, check)

    # Identities

    def verify_identity(self, name: str) -> VerificationReport:
        """Run the catalog identity called name."""
        decl = self.catalog.identity(name)

        def check() -> VerificationReport:
            started = time.perf_counter()
            given, assumptions = decl.given, decl.assumptions
            registry = self.catalog.registry
            if decl.kind == "opeq":
                result = op_equal(decl.lhs_op, decl.rhs_op, given, registry, assumptions)
                return self._report(
                    name, CheckKind.IDENTITY, started,
                    witness=None if result.equal else result.witness,
                    status=CheckStatus.PASS if result.equal else CheckStatus.FAIL,
                    order=result.order, assumptions=assumptions, constraints=given,
                )
            if decl.kind == "expreq":
                difference = substitute(decl.lhs - decl.rhs, given, assumptions)
                return self._report(
                    name, CheckKind.IDENTITY, started, witness=difference,
                    assumptions=assumptions, constraints=given,
                )
            if decl.kind == "applyeq":
                op = registry.rewrite(decl.lhs_op, given)
                applied = apply(op, decl.lhs, given, assumptions)
                difference = applied - substitute(decl.rhs, given, assumptions)
                return self._report(
                    name, CheckKind.IDENTITY, started, witness=difference,
                    assumptions=assumptions, constraints=given,
                )
            # strongsym: [D, R] = R'[u_x]
            u = decl.unknown
            bracket = op_commutator(D_OP, decl.lhs_op)
            derivative = frechet_op(decl.lhs_op, u, Expression.symbol(u, 1))
            if (bracket - derivative).is_zero:
                return self._report(name, CheckKind.IDENTITY, started, assumptions=assumptions)
            result = op_equal(bracket, derivative, given, registry, assumptions)
            return self._report(
                name, CheckKind.IDENTITY, started,
                witness=None if result.equal else result.witness,
                status=CheckStatus.PASS if result.equal else CheckStatus.FAIL,
                order=result.order, assumptions=assumptions, constraints=given,
            )

        return self._guarded(name, CheckKind.IDENTITY, check)

    # Chart

    def connectivity(self, link_reports: Sequence[VerificationReport] | None = None) -> VerificationReport:
        """Every pair of equations is joined by a path of passing links."""
        started = time.perf_counter()
        links = self.catalog.chart_links()
        if link_reports is None:
            link_reports = [self.verify_backlund(link) for link in links]
        passing = {r.identity.split(":", 1)[1] for r in link_reports if r.passed}
        neighbours: dict[str, set[str]] = {name: set() for name in self.catalog.equations}
        for link in links:
            if link.name in passing:
                neighbours[link.source.name].add(link.target.name)
                neighbours[link.target.name].add(link.source.name)
        names = list(self.catalog.equations)
        reached: set[str] = set()
        frontier = names[:1]
        while frontier:
            current = frontier.pop()
            if current in reached:
                continue
            reached.add(current)
            frontier.extend(neighbours[current] - reached)
        missing = sorted(set(names) - reached)
        return self._report(
            "chart:connectivity", CheckKind.CONNECTIVITY, started,
            status=CheckStatus.FAIL if missing else CheckStatus.PASS,
            message=f"unreachable: {', '.join(missing)}" if missing else None,
            details={"passing_links": sorted(passing)},
        )

    def derivation_links(self) -> list[AnyLink]:
        """Links and composites whose endpoints both carry recursion operators."""
        candidates: list[AnyLink] = [*self.catalog.chart_links(), *self.catalog.composites.values()]
        return [
            link for link in candidates
            if link.source.recursion is not None and link.target.recursion is not None
        ]

    def scheduled(self, target: str, include_numeric: bool = True) -> Check:
        """A check named by a catalog run statement, e.g. transport:M[2] or backlund:B4[0]."""
        match = RUN_TARGET.fullmatch(target)
        if match is None:
            raise NcChartError(f"Cannot schedule '{target}'")
        kind, link_name, order = match["kind"], match["link"], int(match["order"] or 1)
        link = self.catalog.link(link_name)
        if kind == "transport":
            return lambda: self.hierarchy.transport_flow(link, order)
        return lambda: self.verify_backlund(link, order, numeric=include_numeric)

    def check_named(self, name: str, include_numeric: bool = True) -> Check:
        """Resolve a report name (flow:kdv, recursion:M, invariance:affine, ...) to its check."""
        if name in self.catalog.identities:
            return lambda: self.verify_identity(name)
        prefix, _, rest = name.partition(":")
        if prefix in ("backlund", "transport"):
            return self.scheduled(name, include_numeric)
        if prefix == "flow":
            return lambda: self.verify_flow(self.catalog.equation(rest), numeric=include_numeric)
        if prefix == "recursion":
            return lambda: self.recursion_report(self.catalog.link(rest))
        if prefix == "invariance":
            return lambda: self.verify_invariance(rest, numeric=include_numeric)
        if name == "chart:connectivity":
            return lambda: self.connectivity()
        return lambda: self.verify_identity(name)

    def suite(self, include_numeric: bool = True) -> list[Check]:
        """Every check of the catalog except connectivity, in report order."""
        checks: list[Check] = []
        checks += [
            lambda eq=eq: self.verify_flow(eq, numeric=include_numeric)
            for eq in self.catalog.equations.values()
        ]
        checks += [
            lambda link=link: self.verify_backlund(link, numeric=include_numeric)
            for link in self.catalog.links.values()
        ]
        checks += [self.scheduled(target, include_numeric) for target in self.catalog.runs]
        checks += [lambda link=link: self.recursion_report(link) for link in self.derivation_links()]
        checks += [
            lambda kind=kind: self.verify_invariance(kind, numeric=include_numeric)
            for kind in INVARIANCE_KINDS
        ]
        checks += [lambda name=name: self.verify_identity(name) for name in self.catalog.identities]
        return checks

    def run(self, checks: Sequence[Check], max_workers: int | None = None) -> list[VerificationReport]:
        """Run checks, concurrently when allowed; results keep request order."""
        workers = max_workers or self.settings.max_workers
        reports: list[VerificationReport]
        if workers <= 1:
            reports = [check() for check in checks]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                reports = list(pool.map(lambda check: check(), checks))
        for report in reports:
            logger.info(
                f"{report.identity}: {report.status} in {report.elapsed * 1000:.1f} ms"
            )
        return reports

    def full_suite(
        self, include_numeric: bool = True, max_workers: int | None = None
    ) -> list[VerificationReport]:
        """All catalog checks followed by the chart connectivity check."""
        reports = self.run(self.suite(include_numeric), max_workers)
        link_reports = [
            r for r in reports
            if r.kind == CheckKind.BACKLUND.value and "[" not in r.identity
        ]
        reports.append(self.connectivity(link_reports))
        return reports
