"""
Configuration settings for the flatdiv laboratory
"""

import logging
from typing import Optional, Dict, Any
from enum import Enum
from pydantic import Field, field_validator, model_validator
from pydantic_settings import BaseSettings

from flatdiv import __version__
from flatdiv.models.configs import StabilityPolicy


class LogLevel(str, Enum):
    """Supported log levels"""
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class Settings(BaseSettings):
    """Process settings loaded from environment variables with validation"""

    # Logging Configuration
    LOG_LEVEL: LogLevel = Field(
        default=LogLevel.INFO,
        description="Logging level"
    )

    # Output Configuration
    OUTPUT_DIR: str = Field(
        default="results",
        description="Default directory for CSV/JSON/checkpoint outputs"
    )
    TOOL_VERSION: str = Field(
        default=__version__,
        description="Version string recorded in run manifests"
    )

    # Reproducibility
    DEFAULT_SEED: int = Field(
        default=0,
        ge=0,
        lt=2**64,
        description="Master seed used when a run does not set one"
    )

    # Execution
    PARALLELISM: int = Field(
        default=1,
        ge=1,
        le=256,
        description="Default number of worker processes"
    )

    # Numerics
    PHI_ORDER_CAP: int = Field(
        default=64,
        ge=1,
        le=256,
        description="Largest power i accepted by the Wishart-moment functional"
    )
    STABILITY_POLICY: StabilityPolicy = Field(
        default=StabilityPolicy.WARN,
        description="Handling of non-contracting SAM step sizes in the quadratic simulator"
    )

    @field_validator('LOG_LEVEL', mode='before')
    @classmethod
    def validate_log_level(cls, v) -> str:
        """Validate and normalize log level"""
        if isinstance(v, str):
            return v.upper()
        return v

    @field_validator('STABILITY_POLICY', mode='before')
    @classmethod
    def validate_stability_policy(cls, v) -> str:
        """Normalize stability policy"""
        if isinstance(v, str):
            return v.lower()
        return v

    @model_validator(mode='after')
    def validate_parallel_settings(self) -> 'Settings':
        """Warn about settings combinations that give up bit-level reproducibility"""
        if self.PARALLELISM > 1 and self.LOG_LEVEL == LogLevel.DEBUG:
            logging.warning(
                "DEBUG logging with PARALLELISM > 1 interleaves worker output. "
                "Consider PARALLELISM=1 when debugging."
            )
        return self

    def validate_required_settings(self) -> None:
        """Validate that all required settings are present and valid"""
        errors = []

        if not self.OUTPUT_DIR.strip():
            errors.append("OUTPUT_DIR must not be empty")

        if errors:
            raise ValueError(f"Configuration validation failed: {'; '.join(errors)}")

    def get_runtime_config(self) -> Dict[str, Any]:
        """Get the defaults every experiment config starts from"""
        return {
            'master_seed': self.DEFAULT_SEED,
            'output_dir': self.OUTPUT_DIR,
            'parallelism': self.PARALLELISM,
        }

    def get_numerics_config(self) -> Dict[str, Any]:
        """Get numerics-specific configuration"""
        return {
            'phi_order_cap': self.PHI_ORDER_CAP,
            'stability_policy': self.STABILITY_POLICY,
        }

    model_config = {
        "env_file": ".env",
        "case_sensitive": True,
        "validate_assignment": True,
        "use_enum_values": True,
        "env_parse_none_str": "None",
        "extra": "ignore",
    }


def get_settings() -> Settings:
    """Get validated settings instance"""
    settings = Settings()
    settings.validate_required_settings()
    return settings


# Global settings instance - will be initialized when first accessed
settings: Optional[Settings] = None


def get_global_settings() -> Settings:
    """Get or create global settings instance"""
    global settings
    if settings is None:
        settings = get_settings()
    return settings
