"""Pydantic schemas for verification reports and exports."""

from datetime import datetime
from enum import Enum
from typing import Any, Optional

from pydantic import BaseModel, Field

REPORT_SCHEMA_VERSION = "1"


class CheckStatus(str, Enum):
    """Outcome of a single check."""

    PASS = "pass"
    FAIL = "fail"
    ERROR = "error"


class CheckKind(str, Enum):
    """Which engine produced a report."""

    FLOW = "flow"
    BACKLUND = "backlund"
    RECURSION = "recursion"
    INVARIANCE = "invariance"
    IDENTITY = "identity"
    TRANSPORT = "transport"
    CONNECTIVITY = "connectivity"
    NUMERIC = "numeric"


# Base schemas
class BaseSchema(BaseModel):
    """Base schema with common configurations."""

    class Config:
        from_attributes = True
        use_enum_values = True


class VerificationReport(BaseSchema):
    """Result of one symbolic or numeric check."""

    identity: str = Field(..., min_length=1)
    kind: CheckKind
    status: CheckStatus
    witness: Optional[str] = None
    order: Optional[int] = None
    elapsed: float = Field(default=0.0, ge=0.0)
    assumptions: list[str] = Field(default_factory=list)
    constraints: list[str] = Field(default_factory=list)
    gauge: Optional[str] = None
    residual: Optional[float] = None
    message: Optional[str] = None
    details: dict[str, Any] = Field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == CheckStatus.PASS.value


class ReportBundle(BaseSchema):
    """Reports of one CLI run, in request order."""

    schema_version: str = REPORT_SCHEMA_VERSION
    created_at: datetime = Field(default_factory=datetime.now)
    catalog_version: str
    seeds: list[int] = Field(default_factory=list)
    tolerances: dict[str, float] = Field(default_factory=dict)
    reports: list[VerificationReport] = Field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def failures(self) -> list[VerificationReport]:
        return [r for r in self.reports if not r.passed]


class FlowRecord(BaseSchema):
    """One hierarchy member."""

    equation: str
    order: int = Field(..., ge=0)
    rhs: str
    terms: int = Field(..., ge=0)
    local: bool
    latex: Optional[str] = None
    rhs_json: Optional[dict[str, Any]] = None


class ResidualRecord(BaseSchema):
    """One numeric residual sample."""

    identity: str
    seed: int
    dim: int = Field(..., ge=1)
    grid_points: int = Field(..., ge=16)
    residual: float = Field(..., ge=0.0)
    gauge: str = "zero-mean"
