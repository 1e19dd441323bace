"""Test configuration and fixtures for ncchart."""

import pytest

from src.ncchart.core.config import DEFAULT_CATALOG, Settings
from src.ncchart.services.catalog import load_catalog
from src.ncchart.services.chart import ChartService
from src.ncchart.services.ncexpr import Assumptions, Expression, SymbolId, SymbolKind
from src.ncchart.utils.dsl_parser import parse_script


class TestSettings(Settings):
    """Test-specific settings."""

    debug: bool = True
    default_grid_points: int = 64
    default_seeds: int = 3


@pytest.fixture
def test_settings():
    """Provide test settings."""
    return TestSettings()


@pytest.fixture(scope="session")
def catalog():
    """The shipped chart catalog."""
    return load_catalog(DEFAULT_CATALOG)


@pytest.fixture(scope="session")
def chart_service(catalog):
    """Chart service over the shipped catalog, without the load-time flow checks."""
    return ChartService(catalog)


@pytest.fixture
def session():
    """A small script session with u, v unknown and a constant c."""
    return parse_script(
        """
        symbol u, v: unknown;
        symbol c: constant;
        invertible u, v + c;
        """
    )


@pytest.fixture
def u():
    return SymbolId("u")


@pytest.fixture
def v():
    return SymbolId("v")


@pytest.fixture
def u_expr(u):
    return Expression.symbol(u)


@pytest.fixture
def v_expr(v):
    return Expression.symbol(v)


@pytest.fixture
def c_expr():
    return Expression.symbol(SymbolId("c", SymbolKind.CONSTANT))


@pytest.fixture
def invertible_u(u_expr):
    return Assumptions().declare(u_expr)
