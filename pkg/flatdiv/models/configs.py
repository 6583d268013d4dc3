"""Input models: numerical parameters and experiment configurations."""

from enum import Enum
from fractions import Fraction
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StabilityPolicy(str, Enum):
    """What to do when a SAM step size does not contract the quadratic dynamics"""
    ERROR = "error"
    WARN = "warn"
    OFF = "off"


class Variant(str, Enum):
    SAM = "SAM"
    SHARPBALANCE = "SharpBalance"


class SharpnessMethod(str, Enum):
    PGA = "pga"
    TRUST_REGION = "trust_region"


class PgaInit(str, Enum):
    TOP_EIGENVECTOR = "top_eigenvector"
    RANDOM = "random"


class SharpnessNorm(str, Enum):
    L2_ADAPTIVE = "l2_adaptive"
    LINF_ADAPTIVE = "linf_adaptive"
    AVERAGE_CASE = "average_case"


class Optimizer(str, Enum):
    SGD = "sgd"
    SAM = "sam"
    SHARPBALANCE = "sharpbalance"


class Combine(str, Enum):
    PROBABILITIES = "probabilities"
    LOGITS = "logits"


_FROZEN = ConfigDict(frozen=True, extra="forbid")


class PhiParams(BaseModel):
    """Parameters of the Wishart-moment functional phi(i, j)."""

    model_config = _FROZEN

    n_tr: int = Field(..., description="Training rows", ge=1)
    d_in: int = Field(..., description="Feature dimension", ge=1)
    eta: float = Field(..., description="Step size", ge=0)
    rho: float = Field(..., description="SAM radius", ge=0)
    S: int = Field(default=1, description="Number of data partitions", ge=1)

    @model_validator(mode='after')
    def validate_shape(self) -> 'PhiParams':
        if self.n_tr < self.d_in:
            raise ValueError(f"n_tr ({self.n_tr}) must be at least d_in ({self.d_in})")
        if self.n_tr % self.S != 0:
            raise ValueError(f"n_tr ({self.n_tr}) must be divisible by S ({self.S})")
        return self

    @property
    def ratio(self) -> Fraction:
        """Exact aspect ratio q = n_tr / (S * d_in)."""
        return Fraction(self.n_tr, self.S * self.d_in)

    @property
    def q(self) -> float:
        return float(self.ratio)

    def full_data(self) -> 'PhiParams':
        """The same parameters with all rows in one partition."""
        if self.S == 1:
            return self
        return self.model_copy(update={"S": 1})

    def with_rho(self, rho: float) -> 'PhiParams':
        return PhiParams(n_tr=self.n_tr, d_in=self.d_in, eta=self.eta, rho=rho, S=self.S)


class TheoryConfig(BaseModel):
    """Everything the closed-form diversity and sharpness expressions depend on."""

    model_config = _FROZEN

    params: PhiParams
    sigma: float = Field(..., description="Init scale", ge=0)
    theta_star_norm: float = Field(default=1.0, description="Teacher norm", gt=0)
    rho0: float = Field(default=0.5, description="Sharpness measurement radius", ge=0)
    k: int = Field(..., description="SAM iterations", ge=1)

    def with_rho(self, rho: float) -> 'TheoryConfig':
        return self.model_copy(update={"params": self.params.with_rho(rho)})


class QuadSetup(BaseModel):
    """Sizes and hyperparameters of a teacher-student quadratic experiment."""

    model_config = _FROZEN

    n_tr: int = Field(..., ge=1)
    d_in: int = Field(..., ge=1)
    n_te: int = Field(..., ge=1)
    sigma: float = Field(default=1.0, ge=0)
    eta: float = Field(..., ge=0)
    rho: float = Field(default=0.0, ge=0)
    k: int = Field(..., ge=0)
    S: int = Field(default=1, ge=1)
    stability_policy: StabilityPolicy = StabilityPolicy.WARN

    @model_validator(mode='after')
    def validate_partitions(self) -> 'QuadSetup':
        if self.n_tr % self.S != 0:
            raise ValueError(f"n_tr ({self.n_tr}) must be divisible by S ({self.S})")
        return self

    def phi_params(self) -> PhiParams:
        return PhiParams(n_tr=self.n_tr, d_in=self.d_in, eta=self.eta, rho=self.rho, S=self.S)


class PgaOptions(BaseModel):
    model_config = _FROZEN

    step_size: float = Field(default=1.0, gt=0)
    steps: int = Field(default=200, ge=1)
    init: PgaInit = PgaInit.TOP_EIGENVECTOR


class VerifySweep(BaseModel):
    """Grid of quadratic experiments checked against the closed-form results."""

    model_config = _FROZEN

    n_tr: int = Field(default=3000, ge=1)
    d_in: int = Field(default=150, ge=1)
    n_te: int = Field(default=1000, ge=1)
    sigma: float = Field(default=1.0, ge=0)
    theta_star_norm: float = Field(default=1.0, gt=0)
    rho0: float = Field(default=0.5, ge=0)
    n_data: int = Field(default=50, ge=2)
    n_init: int = Field(default=50, ge=2)
    k_values: List[int] = Field(default_factory=lambda: [2], min_length=1)
    eta_values: List[float] = Field(default_factory=lambda: [0.1], min_length=1)
    rho_values: List[float] = Field(default_factory=lambda: [0.4], min_length=1)
    S_values: List[int] = Field(default_factory=lambda: [1], min_length=1)
    method: SharpnessMethod = SharpnessMethod.TRUST_REGION
    pga: PgaOptions = Field(default_factory=PgaOptions)
    diversity_rel_tol: float = Field(default=0.10, gt=0)
    se_multiplier: float = Field(default=2.0, ge=0)
    stability_policy: StabilityPolicy = StabilityPolicy.WARN
    skip_noncontracting: bool = Field(
        default=True, description="Skip cells whose step does not contract at the spectral edge"
    )

    @field_validator('k_values', 'S_values')
    @classmethod
    def validate_positive_ints(cls, v: List[int]) -> List[int]:
        if any(item < 1 for item in v):
            raise ValueError("values must be >= 1")
        return v

    @field_validator('eta_values', 'rho_values')
    @classmethod
    def validate_nonnegative(cls, v: List[float]) -> List[float]:
        if any(item < 0 for item in v):
            raise ValueError("values must be >= 0")
        return v


class SharpnessQuery(BaseModel):
    """How adaptive sharpness is measured on a trained model."""

    model_config = _FROZEN

    rho0: float = Field(default=0.5, ge=0)
    norm: SharpnessNorm = SharpnessNorm.L2_ADAPTIVE
    n_batches: int = Field(default=100, ge=1)
    batch_size: int = Field(default=5, ge=1)
    ascent_steps: int = Field(default=20, ge=1)
    ascent_step_size: Optional[float] = Field(default=None, gt=0)
    mc_samples: int = Field(default=10, ge=1)

    @property
    def step_size(self) -> float:
        if self.ascent_step_size is not None:
            return self.ascent_step_size
        return self.rho0 / 10.0


class SyntheticTaskConfig(BaseModel):
    """Gaussian-blob classification task with a noise-corrupted OOD split."""

    model_config = _FROZEN

    seed: int = Field(default=0, ge=0, lt=2**64)
    n_train: int = Field(default=2000, ge=2)
    n_test: int = Field(default=1000, ge=1)
    d_in: int = Field(default=20, ge=1)
    n_classes: int = Field(default=5, ge=2)
    separation: float = Field(default=3.0, gt=0)
    noise_scale: float = Field(default=1.0, gt=0)
    ood_base_scale: float = Field(default=0.5, gt=0)
    severities: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])

    @field_validator('severities')
    @classmethod
    def validate_severities(cls, v: List[int]) -> List[int]:
        if any(s < 1 or s > 5 for s in v):
            raise ValueError("severities must lie in 1..5")
        return sorted(set(v))


class EnsembleConfig(BaseModel):
    """Members, optimizer and schedule of one ensemble."""

    model_config = _FROZEN

    m: int = Field(default=3, ge=2, description="Member count")
    optimizer: Optimizer = Optimizer.SHARPBALANCE
    rho: float = Field(default=0.2, ge=0)
    k_frac: float = Field(default=0.4, gt=0, lt=1)
    T_d: int = Field(default=10, ge=1, description="Re-selection period in epochs")
    warmup_epochs: int = Field(default=1, ge=0)
    hidden: int = Field(default=64, ge=1)
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.05, gt=0)
    lr_decay_epochs: List[int] = Field(default_factory=list)
    lr_decay_factor: float = Field(default=0.1, gt=0)
    weight_decay: float = Field(default=5e-4, ge=0)
    combine: Combine = Combine.PROBABILITIES
    divergence_threshold: float = Field(default=1e6, gt=0)
    member_seeds: Optional[List[int]] = None

    @model_validator(mode='after')
    def validate_member_seeds(self) -> 'EnsembleConfig':
        if self.member_seeds is not None and len(self.member_seeds) != self.m:
            raise ValueError(f"member_seeds needs {self.m} entries, got {len(self.member_seeds)}")
        return self

    def learning_rate(self, epoch: int) -> float:
        """Step-decayed learning rate for a zero-based epoch."""
        decays = sum(1 for boundary in self.lr_decay_epochs if epoch >= boundary)
        return self.lr * self.lr_decay_factor ** decays


class CommandConfig(BaseModel):
    """Keys shared by every command."""

    model_config = ConfigDict(extra="forbid")

    master_seed: int = Field(default=0, ge=0, lt=2**64)
    output_dir: str = Field(default="results", min_length=1)
    parallelism: int = Field(default=1, ge=1, le=256)


class CurveSection(BaseModel):
    model_config = _FROZEN

    n_tr: int = Field(default=3000, ge=1)
    d_in: int = Field(default=150, ge=1)
    eta: float = Field(default=0.1, ge=0)
    S: int = Field(default=10, ge=1)
    sigma: float = Field(default=1.0, ge=0)
    theta_star_norm: float = Field(default=1.0, gt=0)
    rho0: float = Field(default=0.5, ge=0)
    k: int = Field(default=2, ge=1)
    rho_grid: List[float] = Field(default_factory=lambda: [0.5, 0.45, 0.4, 0.35, 0.3], min_length=1)
    variants: List[Variant] = Field(default_factory=lambda: [Variant.SAM, Variant.SHARPBALANCE], min_length=1)

    @field_validator('rho_grid')
    @classmethod
    def validate_grid(cls, v: List[float]) -> List[float]:
        if any(r < 0 for r in v):
            raise ValueError("rho values must be >= 0")
        return v

    def theory_config(self, S: Optional[int] = None) -> TheoryConfig:
        params = PhiParams(n_tr=self.n_tr, d_in=self.d_in, eta=self.eta, rho=self.rho_grid[0],
                           S=self.S if S is None else S)
        return TheoryConfig(params=params, sigma=self.sigma, theta_star_norm=self.theta_star_norm,
                            rho0=self.rho0, k=self.k)


class TheoryCurveConfig(CommandConfig):
    curve: CurveSection = Field(default_factory=CurveSection)


class VerifyConfig(CommandConfig):
    sweep: VerifySweep = Field(default_factory=VerifySweep)


class TrainConfig(CommandConfig):
    task: SyntheticTaskConfig = Field(default_factory=SyntheticTaskConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    n_ensembles: int = Field(default=1, ge=1)
    rho_sweep: List[float] = Field(default_factory=list)
    compare_optimizers: List[Optimizer] = Field(default_factory=list)
    sharpness: SharpnessQuery = Field(default_factory=SharpnessQuery)
    sharpness_norms: List[SharpnessNorm] = Field(default_factory=lambda: [SharpnessNorm.L2_ADAPTIVE], min_length=1)
    save_checkpoints: bool = True


class MeasureConfig(CommandConfig):
    task: SyntheticTaskConfig = Field(default_factory=SyntheticTaskConfig)
    checkpoints: List[str] = Field(..., min_length=1)
    sharpness: SharpnessQuery = Field(default_factory=SharpnessQuery)
    sharpness_norms: List[SharpnessNorm] = Field(default_factory=lambda: [SharpnessNorm.L2_ADAPTIVE], min_length=1)
    combine: Combine = Combine.PROBABILITIES
