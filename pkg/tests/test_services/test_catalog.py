"""Tests for catalog loading."""

import pytest

from src.ncchart.core.exceptions import CatalogLoadError, NcChartError, UnknownIdentityError
from src.ncchart.services.catalog import CompositeLink, build_catalog, load_catalog
from src.ncchart.utils.dsl_parser import parse_script

SMALL_CHART = """
symbol U, W: unknown;
operator Phi = D . D + 2*A[U] + A[U'] . Dinv + C[U] . Dinv . C[U] . Dinv;
equation kdv unknown U rhs U''' + 3*{U, U'} recursion Phi;
equation pkdv unknown W rhs W''' + 3*W'*W';
link B1 relation U - W' solve U -> W' source kdv target pkdv;
"""


class TestShippedCatalog:
    """Test the catalog bundled with the package."""

    def test_equations(self, catalog):
        """Test that the whole chart is present."""
        assert set(catalog.equations) == {
            "pkdv", "kdv", "mkdv", "gauge", "amkdv", "kdvsing", "intsoliton"
        }

    def test_links_and_composites(self, catalog):
        """Test links, optional links and composites."""
        assert {"B1", "M", "B2", "B3", "B4", "B5", "B4hat"} == set(catalog.links)
        assert catalog.links["B4hat"].optional
        assert "B4hat" not in [link.name for link in catalog.chart_links()]
        b23 = catalog.link("B23")
        assert isinstance(b23, CompositeLink)
        assert b23.source.name == "mkdv" and b23.target.name == "amkdv"

    def test_induced_equation(self, catalog):
        """Test that the gauge equation is induced by mKdV."""
        gauge = catalog.equation("gauge")
        assert gauge.is_induced and gauge.induced_by == "mkdv"

    def test_intertwiners_registered(self, catalog):
        """Test that every declared intertwiner was verified and stored."""
        names = {rule.name for rule in catalog.registry.rules}
        assert {"gauge-left", "gauge-right", "schwarz-twist"} <= names

    def test_runs(self, catalog):
        """Test the scheduled extra checks."""
        assert "transport:M[2]" in catalog.runs

    def test_unknown_names(self, catalog):
        """Test lookups of undeclared names."""
        with pytest.raises(UnknownIdentityError):
            catalog.identity("no-such-identity")
        with pytest.raises(NcChartError):
            catalog.link("B9")

    def test_link_constraints_merge_aux_rules(self, catalog):
        """Test that a link into kdvsing carries the auxiliary rule of its target."""
        patterns = {str(rule.pattern.symbol.name) for rule in catalog.link("B4").constraints}
        assert "phi" in patterns


class TestBuildCatalog:
    """Test catalog validation."""

    def test_small_chart(self):
        """Test a minimal two-equation chart."""
        catalog = build_catalog(parse_script(SMALL_CHART), version="test")
        assert catalog.version == "test"
        assert catalog.link("B1").target.name == "pkdv"

    def test_unknown_link_end(self):
        """Test that links must join declared equations."""
        text = SMALL_CHART + "link X relation U solve U -> W source kdv target nowhere;\n"
        with pytest.raises(CatalogLoadError):
            build_catalog(parse_script(text))

    def test_broken_composite(self):
        """Test that composite links must join end to start."""
        text = SMALL_CHART + "composite BB = B1, B1;\n"
        with pytest.raises(CatalogLoadError):
            build_catalog(parse_script(text))

    def test_false_intertwiner_rejected(self):
        """Test that an intertwiner that does not hold fails the load."""
        text = SMALL_CHART + 'intertwiner "bad": D . L[U] = L[U] . D;\n'
        with pytest.raises(CatalogLoadError):
            build_catalog(parse_script(text))

    def test_duplicate_identity(self):
        """Test that identity names are unique."""
        text = SMALL_CHART + 'identity "x": opeq D = D;\nidentity "x": opeq D = D;\n'
        with pytest.raises(CatalogLoadError):
            build_catalog(parse_script(text))

    def test_equation_without_flow(self):
        """Test that an equation needs an rhs or an induced flow."""
        with pytest.raises(CatalogLoadError):
            build_catalog(parse_script("symbol U: unknown;\nequation e unknown U;"))

    def test_missing_file(self, tmp_path):
        """Test that load errors are wrapped."""
        with pytest.raises(CatalogLoadError):
            load_catalog(tmp_path / "missing.ncc")

    def test_syntax_error_wrapped(self, tmp_path):
        """Test that a bad script fails with a load error."""
        path = tmp_path / "bad.ncc"
        path.write_text("symbol U unknown;")
        with pytest.raises(CatalogLoadError):
            load_catalog(path)
