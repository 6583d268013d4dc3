# Pydantic models for configurations and reports

from .configs import (
    PhiParams,
    TheoryConfig,
    QuadSetup,
    VerifySweep,
    SharpnessQuery,
    SyntheticTaskConfig,
    EnsembleConfig,
    TheoryCurveConfig,
    VerifyConfig,
    TrainConfig,
    MeasureConfig,
)
from .reports import (
    TheoryPoint,
    DominanceResult,
    SimEstimate,
    VerificationRow,
    MetricReport,
    RunManifest,
    ErrorReport,
)

__all__ = [
    "PhiParams",
    "TheoryConfig",
    "QuadSetup",
    "VerifySweep",
    "SharpnessQuery",
    "SyntheticTaskConfig",
    "EnsembleConfig",
    "TheoryCurveConfig",
    "VerifyConfig",
    "TrainConfig",
    "MeasureConfig",
    "TheoryPoint",
    "DominanceResult",
    "SimEstimate",
    "VerificationRow",
    "MetricReport",
    "RunManifest",
    "ErrorReport",
]
