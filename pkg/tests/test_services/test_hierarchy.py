"""Tests for hierarchy generation and link residuals."""

import pytest
import sympy

from src.ncchart.core.exceptions import NcChartError
from src.ncchart.services.hierarchy import HierarchyService
from src.ncchart.services.ncexpr import Expression, abelianize

x = sympy.Symbol("x")


@pytest.fixture(scope="module")
def hierarchy(catalog):
    return HierarchyService(catalog)


def _u(order: int = 0):
    f = sympy.Function("U")(x)
    return sympy.diff(f, x, order) if order else f


class TestFlows:
    """Test members of the KdV-type hierarchies."""

    def test_order_zero_is_translation(self, hierarchy, catalog):
        """Test that the zeroth flow is u_x."""
        eq = catalog.equation("kdv")
        assert hierarchy.flow(eq, 0).rhs == Expression.symbol(eq.unknown, 1)

    def test_first_flow_matches_rhs(self, hierarchy, catalog):
        """Test that Phi u_x gives the KdV rhs."""
        eq = catalog.equation("kdv")
        assert hierarchy.flow(eq, 1).rhs == eq.rhs

    def test_kdv_fifth_order_commutative_image(self, hierarchy):
        """Test the second KdV flow against the scalar fifth-order KdV."""
        flow = hierarchy.flow("kdv", 2)
        assert flow.local
        expected = _u(5) + 10 * _u() * _u(3) + 20 * _u(1) * _u(2) + 30 * _u() ** 2 * _u(1)
        assert sympy.expand(abelianize(flow.rhs, x) - expected) == 0

    def test_mkdv_first_flow(self, hierarchy, catalog):
        """Test that Psi v_x gives the mKdV rhs."""
        eq = catalog.equation("mkdv")
        assert hierarchy.flow(eq, 1).rhs == eq.rhs

    def test_order_bound(self, hierarchy):
        """Test that orders beyond the configured bound are refused."""
        with pytest.raises(NcChartError):
            hierarchy.flow("kdv", 99)
        with pytest.raises(NcChartError):
            hierarchy.flow("kdv", -1)

    def test_flows_are_cached(self, hierarchy, catalog):
        """Test that repeated requests return the cached object."""
        eq = catalog.equation("kdv")
        assert hierarchy.flow_rhs(eq, 1) is hierarchy.flow_rhs(eq, 1)

    @pytest.mark.parametrize("name", ["kdv", "mkdv"])
    @pytest.mark.parametrize("m, n", [(0, 1), (0, 2), (1, 1)])
    def test_low_flows_commute(self, hierarchy, name, m, n):
        """Test [X_m, X_n] = 0 for the low members."""
        assert hierarchy.lie_bracket(hierarchy.flow(name, m), hierarchy.flow(name, n)).is_zero

    @pytest.mark.slow
    @pytest.mark.parametrize("name", ["kdv", "mkdv"])
    @pytest.mark.parametrize("m, n", [(0, 3), (1, 2), (2, 2)])
    def test_higher_flows_commute(self, hierarchy, name, m, n):
        """Test [X_m, X_n] = 0 up to the seventh-order flows."""
        assert hierarchy.lie_bracket(hierarchy.flow(name, m), hierarchy.flow(name, n)).is_zero

    def test_bracket_needs_common_unknown(self, hierarchy):
        """Test that flows of different unknowns cannot be bracketed."""
        with pytest.raises(NcChartError):
            hierarchy.lie_bracket(hierarchy.flow("kdv", 1), hierarchy.flow("mkdv", 1))


class TestLinks:
    """Test relations along paired flows."""

    @pytest.mark.parametrize("name", ["B1", "M"])
    def test_first_flow_residual_vanishes(self, hierarchy, catalog, name):
        """Test d/dt of the relation along both first flows."""
        assert hierarchy.backlund_residual(catalog.links[name], 1).is_zero

    def test_translation_residual_vanishes(self, hierarchy, catalog):
        """Test that the x-translation flows are linked too."""
        assert hierarchy.backlund_residual(catalog.links["M"], 0).is_zero

    @pytest.mark.slow
    def test_transport_second_flow(self, hierarchy, catalog):
        """Test that the Miura map carries the fifth-order flows."""
        report = hierarchy.transport_flow(catalog.link("M"), 2)
        assert report.passed, report.witness
        assert report.identity == "transport:M[2]"


def _f(name: str, order: int = 0):
    f = sympy.Function(name)(x)
    return sympy.diff(f, x, order) if order else f


class TestAbelianChart:
    """Test the commutative images of the chart equations."""

    def test_kdv_and_potential_kdv(self, catalog):
        """Test the scalar KdV and potential KdV equations."""
        u = _f("U")
        kdv = abelianize(catalog.equation("kdv").rhs, x)
        pkdv = abelianize(catalog.equation("pkdv").rhs, x)
        assert sympy.expand(kdv - (_f("U", 3) + 6 * u * _f("U", 1))) == 0
        assert sympy.expand(pkdv - (_f("W", 3) + 3 * _f("W", 1) ** 2)) == 0

    def test_mkdv_forms_coincide(self, catalog):
        """Test that both mKdV forms collapse to the scalar mKdV equation."""
        mkdv = abelianize(catalog.equation("mkdv").rhs, x)
        amkdv = abelianize(catalog.equation("amkdv").rhs, x)
        amkdv = amkdv.subs(sympy.Function("Vt")(x), sympy.Function("V")(x))
        expected = _f("V", 3) - 6 * _f("V") ** 2 * _f("V", 1)
        assert sympy.expand(mkdv - expected) == 0
        assert sympy.expand(amkdv - expected) == 0

    def test_schwarzian_kdv(self, catalog):
        """Test phi_t = phi_x {phi; x}."""
        image = abelianize(catalog.equation("kdvsing").rhs, x)
        p1, p2, p3 = _f("phi", 1), _f("phi", 2), _f("phi", 3)
        expected = p1 * (p3 / p1 - sympy.Rational(3, 2) * (p2 / p1) ** 2)
        assert sympy.simplify(image - expected) == 0

    def test_integrable_soliton(self, catalog):
        """Test s^2 s_t = s^2 s_xxx - 3 s s_x s_xx + 3/2 s_x^3."""
        image = abelianize(catalog.equation("intsoliton").rhs, x)
        s, s1, s2, s3 = _f("S"), _f("S", 1), _f("S", 2), _f("S", 3)
        expected = s**2 * s3 - 3 * s * s1 * s2 + sympy.Rational(3, 2) * s1**3
        assert sympy.simplify(s**2 * image - expected) == 0

    def test_gauge_links_collapse(self, catalog):
        """Test that with commuting symbols the gauge leg maps V to itself."""
        (rule,) = [r for r in catalog.link("B3").solve if r.pattern.symbol.name == "Vt"]
        assert sympy.simplify(abelianize(rule.replacement, x) - _f("V")) == 0


def _d(f, k: int = 1):
    return sympy.diff(f, x, k) if k else f


def _scalar_kdv(f, n: int):
    """Scalar KdV hierarchy, u_t = u_xxx + 6 u u_x at n = 1."""
    return [
        _d(f),
        _d(f, 3) + 6 * f * _d(f),
        _d(f, 5) + 10 * f * _d(f, 3) + 20 * _d(f) * _d(f, 2) + 30 * f**2 * _d(f),
    ][n]


def _scalar_pkdv(f, n: int):
    """Potential KdV hierarchy, w_t = w_xxx + 3 w_x^2 at n = 1."""
    return [
        _d(f),
        _d(f, 3) + 3 * _d(f) ** 2,
        _d(f, 5) + 10 * _d(f) * _d(f, 3) + 5 * _d(f, 2) ** 2 + 10 * _d(f) ** 3,
    ][n]


def _scalar_mkdv(f, n: int):
    """Scalar mKdV hierarchy, v_t = v_xxx - 6 v^2 v_x at n = 1."""
    return [
        _d(f),
        _d(f, 3) - 6 * f**2 * _d(f),
        _d(f, 5)
        - 10 * f**2 * _d(f, 3)
        - 40 * f * _d(f) * _d(f, 2)
        - 10 * _d(f) ** 3
        + 30 * f**4 * _d(f),
    ][n]


class TestAbelianHierarchies:
    """Test the commutative images of generated flows against the scalar hierarchies."""

    @pytest.mark.parametrize("n", [0, 1, 2])
    @pytest.mark.parametrize(
        "name, unknown, oracle",
        [
            ("kdv", "U", _scalar_kdv),
            ("pkdv", "W", _scalar_pkdv),
            ("mkdv", "V", _scalar_mkdv),
            ("amkdv", "Vt", _scalar_mkdv),
        ],
    )
    def test_polynomial_flows(self, hierarchy, name, unknown, oracle, n):
        """Test the flows of the polynomial equations."""
        flow = hierarchy.flow(name, n)
        assert sympy.expand(abelianize(flow.rhs, x) - oracle(_f(unknown), n)) == 0

    @pytest.mark.slow
    @pytest.mark.integration
    @pytest.mark.parametrize("n", [0, 1, 2])
    def test_schwarzian_flows(self, hierarchy, n):
        """Test phi_t = phi_x F against v = phi_xx / (2 phi_x) moving by scalar mKdV."""
        image = abelianize(hierarchy.flow("kdvsing", n).rhs, x)
        p1 = _f("phi", 1)
        f = image / p1
        v = _f("phi", 2) / (2 * p1)
        moved = _d((_d(f) + 2 * v * f) / 2)
        assert sympy.simplify(moved - _scalar_mkdv(v, n)) == 0

    @pytest.mark.slow
    @pytest.mark.integration
    @pytest.mark.parametrize("n", [0, 1, 2])
    def test_integrable_soliton_flows(self, hierarchy, n):
        """Test that S = phi_x moves by the x-derivative of the Schwarzian flow."""
        phi_flow = abelianize(hierarchy.flow("kdvsing", n).rhs, x)
        phi, s = sympy.Function("phi")(x), sympy.Function("S")(x)
        for k in range(2 * n + 4, 0, -1):
            phi_flow = phi_flow.subs(_d(phi, k), _d(s, k - 1))
        image = abelianize(hierarchy.flow("intsoliton", n).rhs, x)
        assert sympy.simplify(image - _d(phi_flow)) == 0

    @pytest.mark.parametrize("n", [0, 1])
    def test_gauge_flows(self, hierarchy, n):
        """Test that G_t / G is an antiderivative of the mKdV flow when G_x = V G."""
        image = abelianize(hierarchy.flow("gauge", n).rhs, x)
        g, v = _f("G"), _f("V")
        ratio = sympy.diff(image / g, x).subs(_d(g), v * g)
        assert sympy.simplify(ratio - _scalar_mkdv(v, n)) == 0
