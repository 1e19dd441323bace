"""Catalog of equations, links, intertwiners and identities.

A catalog is built from a parsed chart script. Building resolves names and
registers intertwiners; the load-time checks of every flow live in the
chart service.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from ..core.config import get_settings
from ..core.exceptions import CatalogLoadError, NcChartError, UnknownIdentityError
from ..utils.dsl_parser import (
    CompositeDecl,
    EquationDecl,
    IdentityDecl,
    IntertwinerDecl,
    LinkDecl,
    RunDecl,
    Script,
    parse_script,
)
from .ncexpr import NO_ASSUMPTIONS, Assumptions, Deriv, Expression, Rule, SymbolId
from .opalg import IntertwinerRegistry, OperatorChain

logger = logging.getLogger(__name__)


def _merge_rules(*groups: tuple[Rule, ...]) -> tuple[Rule, ...]:
    seen: list[Rule] = []
    for group in groups:
        for rule in group:
            if rule not in seen:
                seen.append(rule)
    return tuple(seen)


@dataclass(frozen=True)
class EvolutionEquation:
    """u_t = rhs(u), possibly generated by a recursion operator.

    Induced equations carry no rhs of their own: their flow is obtained by
    applying induced_through to the flow of induced_by and multiplying by
    the unknown on the right.
    """

    name: str
    unknown: SymbolId
    rhs: Expression | None = None
    recursion: OperatorChain | None = None
    aux_rules: tuple[Rule, ...] = ()
    definitions: tuple[tuple[SymbolId, Expression], ...] = ()
    induced_by: str | None = None
    induced_through: OperatorChain | None = None
    assumptions: Assumptions = NO_ASSUMPTIONS

    @property
    def is_induced(self) -> bool:
        return self.induced_by is not None

    @cached_property
    def definition_rules(self) -> tuple[Rule, ...]:
        return tuple(Rule(Deriv(symbol, 0), value) for symbol, value in self.definitions)


@dataclass(frozen=True)
class BacklundLink:
    """relation(u, v) = 0 between the source and target unknowns."""

    name: str
    relation: Expression
    solve: tuple[Rule, ...]
    source: EvolutionEquation
    target: EvolutionEquation
    optional: bool = False
    assumptions: Assumptions = NO_ASSUMPTIONS

    @property
    def links(self) -> tuple["BacklundLink", ...]:
        return (self,)

    @cached_property
    def constraints(self) -> tuple[Rule, ...]:
        return _merge_rules(self.solve, self.source.aux_rules, self.target.aux_rules)


@dataclass(frozen=True)
class CompositeLink:
    """Links applied in order; the target of each is the source of the next."""

    name: str
    links: tuple[BacklundLink, ...]
    optional: bool = False

    @property
    def source(self) -> EvolutionEquation:
        return self.links[0].source

    @property
    def target(self) -> EvolutionEquation:
        return self.links[-1].target

    @property
    def assumptions(self) -> Assumptions:
        merged = NO_ASSUMPTIONS
        for link in self.links:
            merged = merged.merge(link.assumptions)
        return merged

    @cached_property
    def constraints(self) -> tuple[Rule, ...]:
        return _merge_rules(*(link.constraints for link in self.links))


AnyLink = BacklundLink | CompositeLink


@dataclass
class Catalog:
    """Immutable after load."""

    script: Script
    version: str = "1"
    equations: dict[str, EvolutionEquation] = field(default_factory=dict)
    links: dict[str, BacklundLink] = field(default_factory=dict)
    composites: dict[str, CompositeLink] = field(default_factory=dict)
    identities: dict[str, IdentityDecl] = field(default_factory=dict)
    runs: list[str] = field(default_factory=list)
    registry: IntertwinerRegistry = field(default_factory=IntertwinerRegistry)

    @property
    def assumptions(self) -> Assumptions:
        return self.script.assumptions

    def equation(self, name: str) -> EvolutionEquation:
        if name not in self.equations:
            raise NcChartError(f"Unknown equation '{name}'")
        return self.equations[name]

    def link(self, name: str) -> AnyLink:
        if name in self.links:
            return self.links[name]
        if name in self.composites:
            return self.composites[name]
        raise NcChartError(f"Unknown link '{name}'")

    def identity(self, name: str) -> IdentityDecl:
        if name not in self.identities:
            raise UnknownIdentityError(f"No identity named '{name}'")
        return self.identities[name]

    def symbol(self, name: str) -> SymbolId:
        if name not in self.script.symbols:
            raise NcChartError(f"Unknown symbol '{name}'")
        return self.script.symbols[name]

    def chart_links(self) -> list[AnyLink]:
        """Links that take part in chart paths and derivations."""
        return [link for link in self.links.values() if not link.optional]


def _build_equation(decl: EquationDecl, assumptions: Assumptions) -> EvolutionEquation:
    if decl.rhs is None and decl.induced_by is None:
        raise CatalogLoadError(f"Equation '{decl.name}' has neither rhs nor induced flow")
    return EvolutionEquation(
        name=decl.name,
        unknown=decl.unknown,
        rhs=decl.rhs,
        recursion=decl.recursion,
        aux_rules=decl.aux_rules,
        definitions=decl.definitions,
        induced_by=decl.induced_by,
        induced_through=decl.induced_through,
        assumptions=assumptions,
    )


def build_catalog(script: Script, version: str | None = None) -> Catalog:
    """Resolve names and register intertwiners."""
    catalog = Catalog(script=script, version=version or get_settings().catalog_version)
    assumptions = script.assumptions

    for decl in script.of_type(EquationDecl):
        catalog.equations[decl.name] = _build_equation(decl, assumptions)
    for eq in catalog.equations.values():
        if eq.induced_by is not None and eq.induced_by not in catalog.equations:
            raise CatalogLoadError(f"Equation '{eq.name}' is induced by unknown '{eq.induced_by}'")

    for decl in script.of_type(LinkDecl):
        for end in (decl.source, decl.target):
            if end not in catalog.equations:
                raise CatalogLoadError(f"Link '{decl.name}' refers to unknown equation '{end}'")
        catalog.links[decl.name] = BacklundLink(
            name=decl.name,
            relation=decl.relation,
            solve=decl.solve,
            source=catalog.equations[decl.source],
            target=catalog.equations[decl.target],
            optional=decl.optional,
            assumptions=assumptions,
        )

    for decl in script.of_type(CompositeDecl):
        missing = [name for name in decl.links if name not in catalog.links]
        if missing:
            raise CatalogLoadError(f"Composite '{decl.name}' refers to unknown links {missing}")
        parts = tuple(catalog.links[name] for name in decl.links)
        for first, second in zip(parts, parts[1:]):
            if first.target.name != second.source.name:
                raise CatalogLoadError(
                    f"Composite '{decl.name}': {first.name} ends at {first.target.name} "
                    f"but {second.name} starts at {second.source.name}"
                )
        catalog.composites[decl.name] = CompositeLink(decl.name, parts)

    for decl in script.of_type(IntertwinerDecl):
        try:
            catalog.registry.register_intertwiner(
                decl.lhs, decl.rhs, decl.given, assumptions, name=decl.name
            )
        except NcChartError as e:
            raise CatalogLoadError(f"Intertwiner '{decl.name}' rejected: {str(e)}")

    for decl in script.of_type(IdentityDecl):
        if decl.name in catalog.identities:
            raise CatalogLoadError(f"Duplicate identity '{decl.name}'")
        catalog.identities[decl.name] = decl
    catalog.runs = [decl.target for decl in script.of_type(RunDecl)]

    logger.info(
        f"Built catalog: {len(catalog.equations)} equations, {len(catalog.links)} links, "
        f"{len(catalog.registry)} intertwiner rules, {len(catalog.identities)} identities"
    )
    return catalog


def load_catalog(path: Path | str | None = None) -> Catalog:
    """Parse and build the catalog file at path (the configured one by default)."""
    path = Path(path) if path is not None else get_settings().catalog_path
    try:
        text = path.read_text(encoding="utf-8")
        return build_catalog(parse_script(text))
    except CatalogLoadError:
        raise
    except Exception as e:
        raise CatalogLoadError(f"Failed to load catalog {path}: {str(e)}")
