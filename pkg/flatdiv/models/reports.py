"""Output models: theory points, simulation estimates, metric bundles and run manifests."""

from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from flatdiv.models.configs import Variant


class TheoryPoint(BaseModel):
    """One point of an analytic sharpness-diversity curve."""

    model_config = ConfigDict(use_enum_values=True)

    variant: Variant
    rho: float = Field(..., ge=0)
    k: int = Field(..., ge=1)
    diversity: Optional[float] = None
    sharp_lower: Optional[float] = Field(default=None, description="Absent for SharpBalance")
    sharp_upper: Optional[float] = None
    error: Optional[str] = Field(default=None, description="Set when the point failed to evaluate")

    @model_validator(mode='after')
    def validate_bounds(self) -> 'TheoryPoint':
        if self.sharp_lower is not None and self.sharp_upper is not None:
            if self.sharp_lower > self.sharp_upper:
                raise ValueError(f"sharp_lower {self.sharp_lower} exceeds sharp_upper {self.sharp_upper}")
        return self

    @property
    def ok(self) -> bool:
        return self.error is None


class DominanceComparison(BaseModel):
    rho: float
    sharp_upper: float
    sharpbal_diversity: float
    sam_diversity_at_matched_sharpness: float
    margin: float


class DominanceResult(BaseModel):
    """Outcome of comparing two analytic curves at matched sharpness upper bounds."""

    dominates: bool
    strict_points: int = Field(default=0, ge=0)
    comparisons: List[DominanceComparison] = Field(default_factory=list)
    reason: Optional[str] = None


class SimEstimate(BaseModel):
    """Monte-Carlo estimates with standard errors over data draws."""

    diversity_mc: Optional[float] = None
    diversity_se: Optional[float] = Field(default=None, ge=0)
    sharpness_mc: Optional[float] = None
    sharpness_se: Optional[float] = Field(default=None, ge=0)
    n_data_draws: int = Field(..., ge=1)
    n_init_draws: int = Field(default=1, ge=1)

    def merged(self, other: 'SimEstimate') -> 'SimEstimate':
        """Combine diversity fields of one estimate with sharpness fields of another."""
        return SimEstimate(
            diversity_mc=self.diversity_mc if self.diversity_mc is not None else other.diversity_mc,
            diversity_se=self.diversity_se if self.diversity_se is not None else other.diversity_se,
            sharpness_mc=self.sharpness_mc if self.sharpness_mc is not None else other.sharpness_mc,
            sharpness_se=self.sharpness_se if self.sharpness_se is not None else other.sharpness_se,
            n_data_draws=max(self.n_data_draws, other.n_data_draws),
            n_init_draws=max(self.n_init_draws, other.n_init_draws),
        )


VERIFICATION_COLUMNS = [
    "variant", "n_tr", "d_in", "n_te", "S", "k", "eta", "rho", "rho0",
    "diversity_mc", "diversity_se", "diversity_theory",
    "sharp_mc", "sharp_se", "sharp_lower", "sharp_upper", "skipped", "pass",
]


class VerificationRow(BaseModel):
    """One cell of a theorem verification sweep."""

    model_config = ConfigDict(use_enum_values=True)

    variant: Variant
    n_tr: int
    d_in: int
    n_te: int
    S: int
    k: int
    eta: float
    rho: float
    rho0: float
    diversity_mc: Optional[float] = None
    diversity_se: Optional[float] = None
    diversity_theory: Optional[float] = None
    sharp_mc: Optional[float] = None
    sharp_se: Optional[float] = None
    sharp_lower: Optional[float] = None
    sharp_upper: Optional[float] = None
    skipped: bool = False
    passed: bool = False
    error: Optional[str] = None

    def csv_values(self) -> List[Any]:
        values = [getattr(self, name) for name in VERIFICATION_COLUMNS[:-1]]
        return values + [self.passed]


class MetricReport(BaseModel):
    """Named scalar results with provenance."""

    metrics: Dict[str, float] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: int = Field(..., ge=0)
    config_hash: str = ""
    member_count: int = Field(..., ge=1)
    sample_count: int = Field(..., ge=0)
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def to_records(self) -> List[Dict[str, Any]]:
        """One JSON record per metric."""
        return [
            {
                "metric": name,
                "value": value,
                "config": self.config,
                "seed": self.seed,
                "member_count": self.member_count,
                "sample_count": self.sample_count,
            }
            for name, value in self.metrics.items()
        ]


class ErrorReport(BaseModel):
    """Error details written to the manifest of a failed run."""

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "error": "VALIDATION_ERROR",
                "message": "Invalid configuration: curve.rho_grid: List should have at least 1 item",
                "details": {},
                "exit_code": 1,
                "timestamp": "2024-06-15T10:00:00Z"
            }
        }
    )

    error: str = Field(..., description="Error code")
    message: str = Field(..., description="Human-readable error message")
    details: Dict[str, Any] = Field(default_factory=dict)
    exit_code: int = Field(..., ge=0)
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


class ManifestFile(BaseModel):
    path: str
    rows: Optional[int] = Field(default=None, ge=0)
    sha256: str


class RunManifest(BaseModel):
    """Index of everything one run produced."""

    command: str
    config_hash: str
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    tool_version: str
    status: str = "running"
    files: List[ManifestFile] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)
    error: Optional[ErrorReport] = None
