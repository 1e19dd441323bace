"""Configuration management for ncchart."""

import math
from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings

DEFAULT_CATALOG = Path(__file__).resolve().parent.parent / "data" / "chart.ncc"


class Settings(BaseSettings):
    """Application settings."""

    # Catalog
    catalog_path: Path = Field(
        default=DEFAULT_CATALOG, validation_alias="NC_CHART_CATALOG"
    )
    catalog_version: str = "1"
    assumption_profile: str = "standard"  # or "alternative"

    # Symbolic layer
    substitution_depth_bound: int = 64
    rewrite_step_bound: int = 256
    integration_step_bound: int = 100_000
    symbol_depth: int = 6
    hierarchy_order_bound: int = 3

    # Numeric layer
    numeric_tolerance: float = 1e-8
    hereditary_tolerance: float = 1e-6
    mean_tolerance: float = 1e-10
    scaling_band: float = 0.1
    condition_cap: float = 1e6
    default_grid_points: int = 128
    default_period: float = 2 * math.pi
    default_dim: int = 3
    default_seeds: int = 10
    default_modes: int = 4
    default_amplitude: float = 0.1

    # Application
    app_name: str = "ncchart"
    debug: bool = False
    log_level: str = "INFO"
    log_format: str = "text"  # or "json"
    max_workers: int = 1

    class Config:
        env_file = ".env"
        populate_by_name = True


settings = Settings()


def get_settings() -> Settings:
    """Get application settings."""
    return settings
