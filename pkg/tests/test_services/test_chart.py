"""Tests for the chart verification engine."""

import pytest

from src.ncchart.core.exceptions import NcChartError, UnknownIdentityError
from src.ncchart.models.schemas import CheckKind, CheckStatus, VerificationReport
from src.ncchart.services.chart import INVARIANCE_KINDS, ChartService
from src.ncchart.services.opalg import DINV_OP, op_equal


def _link_report(name: str, status: CheckStatus = CheckStatus.PASS) -> VerificationReport:
    return VerificationReport(identity=f"backlund:{name}", kind=CheckKind.BACKLUND, status=status)


class TestFlowsAndLinks:
    """Test flow and Backlund checks."""

    @pytest.mark.parametrize("name", ["pkdv", "kdv", "mkdv", "amkdv"])
    def test_flow_reproduces_rhs(self, chart_service, catalog, name):
        """Test that each recursion operator generates its stored flow."""
        report = chart_service.verify_flow(catalog.equation(name))
        assert report.passed, report.witness
        assert report.identity == f"flow:{name}"

    @pytest.mark.parametrize("name", ["pkdv", "kdv", "mkdv"])
    def test_flow_numeric_cross_check(self, chart_service, catalog, name):
        """Test that flows with a sampled recursion operator carry a numeric residual."""
        report = chart_service.verify_flow(catalog.equation(name))
        assert report.passed, report.message
        assert report.residual is not None
        assert report.residual < 1e-8

    def test_flow_without_sampled_operator(self, chart_service, catalog):
        """Test that twisted inverses skip the numeric comparison."""
        report = chart_service.verify_flow(catalog.equation("amkdv"))
        assert report.residual is None
        assert "flow:amkdv" not in chart_service.numeric.identities

    def test_induced_flow_is_local(self, chart_service, catalog):
        """Test the gauge equation flow."""
        report = chart_service.verify_flow(catalog.equation("gauge"))
        assert report.passed, report.witness

    @pytest.mark.integration
    @pytest.mark.parametrize("name", ["kdvsing", "intsoliton"])
    def test_singular_flows(self, chart_service, catalog, name):
        """Test the flows written through auxiliary variables."""
        report = chart_service.verify_flow(catalog.equation(name))
        assert report.passed, report.witness

    @pytest.mark.parametrize("name", ["B1", "M"])
    def test_backlund_links(self, chart_service, catalog, name):
        """Test the relation is preserved along the first flows."""
        report = chart_service.verify_backlund(catalog.link(name))
        assert report.passed, report.witness
        assert report.identity == f"backlund:{name}"
        assert report.residual is not None
        assert report.residual < 1e-8

    def test_backlund_without_numeric(self, chart_service, catalog):
        """Test that the numeric part can be switched off."""
        report = chart_service.verify_backlund(catalog.link("B1"), numeric=False)
        assert report.passed
        assert report.residual is None

    def test_order_in_report_name(self, chart_service, catalog):
        """Test that non-default orders are named apart."""
        report = chart_service.verify_backlund(catalog.link("B1"), order=0)
        assert report.identity == "backlund:B1[0]"
        assert report.order == 0

    @pytest.mark.integration
    @pytest.mark.parametrize("name", ["B23", "B4", "B5"])
    def test_lower_chart_links(self, chart_service, catalog, name):
        """Test the gauge and Schwarzian legs of the chart."""
        report = chart_service.verify_backlund(catalog.link(name))
        assert report.passed, report.witness


class TestRecursion:
    """Test transport of recursion operators."""

    def test_transformation_operator_of_potential_link(self, chart_service, catalog):
        """Test that U = W' transforms by D^-1."""
        pi = chart_service.transformation_operator(catalog.link("B1"))
        assert op_equal(pi, DINV_OP)

    def test_potential_recursion(self, chart_service, catalog):
        """Test that D^-1 Phi D gives the potential KdV recursion operator."""
        derived, report = chart_service.derive_recursion(catalog.link("B1"))
        assert report.passed, report.witness
        assert "derived" in report.details and "pi" in report.details
        assert not derived.is_zero

    @pytest.mark.integration
    def test_miura_recursion(self, chart_service, catalog):
        """Test that the Miura map carries Phi to Psi."""
        report = chart_service.recursion_report(catalog.link("M"))
        assert report.passed, report.witness

    def test_missing_source_recursion(self, chart_service, catalog):
        """Test that a link out of an equation without recursion reports an error."""
        link = catalog.link("B3")
        with pytest.raises(NcChartError):
            chart_service.derive_recursion(link)
        report = chart_service.recursion_report(link)
        assert report.status == CheckStatus.ERROR.value
        assert report.kind == CheckKind.RECURSION.value

    def test_derivation_links_have_recursions(self, chart_service):
        """Test that only links between equations with recursions are derived."""
        for link in chart_service.derivation_links():
            assert link.source.recursion is not None
            assert link.target.recursion is not None


class TestInvariance:
    """Test the symmetries of the Schwarzian equation."""

    @pytest.mark.parametrize("kind", ["inversion", "affine"])
    def test_symbolic_steps(self, chart_service, kind):
        """Test inversion and affine invariance symbolically."""
        report = chart_service.verify_invariance(kind, numeric=False)
        assert report.passed, report.witness
        assert report.residual is None

    @pytest.mark.integration
    @pytest.mark.parametrize("kind", ["moebius-left", "moebius-right"])
    def test_moebius(self, chart_service, kind):
        """Test Moebius invariance with its numeric residuals."""
        report = chart_service.verify_invariance(kind)
        assert report.passed, report.message
        assert report.residual is not None
        assert report.details["numeric"]

    @pytest.mark.parametrize("kind", ["moebius-left", "moebius-right"])
    def test_moebius_steps_distinct(self, chart_service, kind):
        """Test that each Moebius factor class is checked once."""
        report = chart_service.verify_invariance(kind, numeric=False)
        assert report.passed, report.witness
        assert report.details["steps"] == ["affine", "inversion"]

    def test_unknown_kind(self, chart_service):
        """Test that unknown invariance kinds are rejected."""
        with pytest.raises(NcChartError):
            chart_service.verify_invariance("projective")

    def test_kinds(self):
        """Test the invariance kinds offered."""
        assert "moebius-left" in INVARIANCE_KINDS


class TestIdentities:
    """Test catalog identities."""

    @pytest.mark.parametrize(
        "name",
        ["strong-symmetry", "inversion-schwarzian", "gauge-flow-generator", "kg-conjugation-d"],
    )
    def test_identity(self, chart_service, name):
        """Test a selection of identities."""
        report = chart_service.verify_identity(name)
        assert report.passed, report.witness or report.message

    def test_unknown_identity(self, chart_service):
        """Test that unknown identity names raise."""
        with pytest.raises(UnknownIdentityError):
            chart_service.verify_identity("no-such-identity")

    @pytest.mark.slow
    @pytest.mark.integration
    @pytest.mark.parametrize(
        "name", ["theorem1-dd-form", "upsilon-corollary-form", "mkdv-operator-forms"]
    )
    def test_operator_forms(self, chart_service, name):
        """Test the factorized and twisted forms of the recursion operators."""
        report = chart_service.verify_identity(name)
        assert report.passed, report.witness or report.message

    @pytest.mark.slow
    @pytest.mark.integration
    def test_all_identities(self, chart_service, catalog):
        """Test every identity in the shipped catalog."""
        failed = [
            report.identity
            for report in (chart_service.verify_identity(name) for name in catalog.identities)
            if not report.passed
        ]
        assert failed == []


class TestChart:
    """Test chart-level checks and scheduling."""

    def test_connectivity_passes(self, chart_service, catalog):
        """Test that passing chart links connect every equation."""
        reports = [_link_report(link.name) for link in catalog.chart_links()]
        report = chart_service.connectivity(reports)
        assert report.passed
        assert report.identity == "chart:connectivity"

    def test_connectivity_fails_on_broken_link(self, chart_service, catalog):
        """Test that a failing link disconnects its end of the chart."""
        reports = [
            _link_report(link.name, CheckStatus.FAIL if link.name == "B5" else CheckStatus.PASS)
            for link in catalog.chart_links()
        ]
        report = chart_service.connectivity(reports)
        assert report.status == CheckStatus.FAIL.value
        assert "intsoliton" in report.message

    def test_scheduled_targets(self, chart_service):
        """Test the run statement targets."""
        report = chart_service.scheduled("backlund:B1[0]")()
        assert report.identity == "backlund:B1[0]"
        with pytest.raises(NcChartError):
            chart_service.scheduled("bogus:B1")

    def test_check_named(self, chart_service):
        """Test resolution of report names to checks."""
        assert chart_service.check_named("flow:kdv")().identity == "flow:kdv"
        assert chart_service.check_named("backlund:M")().identity == "backlund:M"
        assert chart_service.check_named("invariance:affine")().identity == "invariance:affine"

    def test_run_keeps_order(self, chart_service, catalog):
        """Test that concurrent runs report in request order."""
        checks = [
            lambda: chart_service.verify_flow(catalog.equation("kdv")),
            lambda: chart_service.verify_backlund(catalog.link("B1")),
            lambda: chart_service.verify_invariance("affine", numeric=False),
        ]
        reports = chart_service.run(checks, max_workers=3)
        assert [r.identity for r in reports] == ["flow:kdv", "backlund:B1", "invariance:affine"]

    def test_suite_covers_catalog(self, chart_service, catalog):
        """Test that the suite schedules every identity and run."""
        checks = chart_service.suite(include_numeric=False)
        minimum = len(catalog.equations) + len(catalog.links) + len(catalog.identities)
        assert len(checks) >= minimum + len(catalog.runs)

    @pytest.mark.slow
    @pytest.mark.integration
    def test_load_and_full_suite(self):
        """Test the shipped catalog end to end."""
        service = ChartService.load()
        reports = service.full_suite(include_numeric=True, max_workers=2)
        failures = [(r.identity, r.status) for r in reports if not r.passed]
        assert failures == []
        assert reports[-1].identity == "chart:connectivity"
