"""
Diversity, sharpness and Fisher-trace metrics for ensembles.

Diversity metrics work on a PredictionSet of member probabilities. Sharpness works on any
model that exposes a flat parameter vector plus a loss oracle that evaluates loss and gradient
at arbitrary parameters on a batch.
"""

import logging
from dataclasses import dataclass
from itertools import combinations, permutations
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from flatdiv.core.error_handler import InvalidParameterError, ShapeMismatchError, UndefinedMetricError
from flatdiv.models.configs import Combine, SharpnessNorm, SharpnessQuery
from flatdiv.services.numkernel import DenseVector, RngStream

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-12
PROBABILITY_TOL = 1e-6


@dataclass(frozen=True)
class PredictionSet:
    """Member probabilities (m, n, c) and integer labels (n,)."""

    member_outputs: np.ndarray
    labels: np.ndarray
    member_logits: Optional[np.ndarray] = None

    def __post_init__(self):
        outputs = np.asarray(self.member_outputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if outputs.ndim != 3:
            raise ShapeMismatchError(f"member_outputs must be (members, samples, classes), got {outputs.shape}")
        m, n, c = outputs.shape
        if c < 2:
            raise ShapeMismatchError(f"need at least 2 classes, got {c}")
        if labels.shape != (n,):
            raise ShapeMismatchError(f"labels shape {labels.shape} does not match {n} samples")
        if not np.allclose(outputs.sum(axis=2), 1.0, atol=PROBABILITY_TOL, rtol=0.0):
            raise InvalidParameterError("member probability rows must sum to 1")
        object.__setattr__(self, "member_outputs", outputs)
        object.__setattr__(self, "labels", labels)

    @property
    def member_count(self) -> int:
        return self.member_outputs.shape[0]

    @property
    def sample_count(self) -> int:
        return self.member_outputs.shape[1]

    def member_predictions(self) -> np.ndarray:
        """Argmax classes (m, n); ties go to the lowest class index."""
        return np.argmax(self.member_outputs, axis=2)

    def member_errors(self) -> np.ndarray:
        return np.mean(self.member_predictions() != self.labels[None, :], axis=1)

    def ensemble_probabilities(self, combine: Combine = Combine.PROBABILITIES) -> np.ndarray:
        if Combine(combine) == Combine.LOGITS:
            if self.member_logits is None:
                raise InvalidParameterError("logit averaging needs member_logits")
            return softmax(np.mean(self.member_logits, axis=0), axis=1)
        return np.mean(self.member_outputs, axis=0)

    def ensemble_error(self, combine: Combine = Combine.PROBABILITIES) -> float:
        predictions = np.argmax(self.ensemble_probabilities(combine), axis=1)
        return float(np.mean(predictions != self.labels))


def _require_members(preds: PredictionSet, metric: str) -> None:
    if preds.member_count < 2:
        raise UndefinedMetricError(f"{metric} needs at least 2 members, got {preds.member_count}")


def variance_diversity(preds: PredictionSet) -> float:
    """Population variance across members, averaged over classes and samples."""
    _require_members(preds, "variance_diversity")
    return float(np.mean(np.var(preds.member_outputs, axis=0)))


def disagreement(p: np.ndarray, q: np.ndarray) -> float:
    """
    Fraction of samples whose argmax class differs between two members.

    Args:
        p: Probabilities (n, c) of the first member
        q: Probabilities (n, c) of the second member

    Returns:
        Disagreement rate in [0, 1]
    """
    p = np.asarray(p)
    q = np.asarray(q)
    if p.shape != q.shape:
        raise ShapeMismatchError(f"member outputs differ in shape: {p.shape} vs {q.shape}")
    return float(np.mean(np.argmax(p, axis=1) != np.argmax(q, axis=1)))


def mean_pairwise_disagreement(preds: PredictionSet) -> float:
    _require_members(preds, "disagreement")
    outputs = preds.member_outputs
    return float(np.mean([disagreement(outputs[i], outputs[j])
                          for i, j in combinations(range(preds.member_count), 2)]))


def der(preds: PredictionSet) -> float:
    """
    Disagreement-error ratio: mean unordered pairwise disagreement over mean member error.

    Raises:
        UndefinedMetricError: members make no errors
    """
    mean_error = float(np.mean(preds.member_errors()))
    if mean_error <= 0:
        raise UndefinedMetricError("DER undefined at zero error")
    return mean_pairwise_disagreement(preds) / mean_error


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Mean over samples of KL(p ‖ q), both floored at 1e-12."""
    p = np.clip(np.atleast_2d(np.asarray(p, dtype=np.float64)), KL_FLOOR, None)
    q = np.clip(np.atleast_2d(np.asarray(q, dtype=np.float64)), KL_FLOOR, None)
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1)))


def kl_diversity(preds: PredictionSet) -> float:
    """KL(f_i ‖ f_j) averaged over ordered member pairs and samples."""
    _require_members(preds, "kl_diversity")
    outputs = preds.member_outputs
    return float(np.mean([kl_divergence(outputs[i], outputs[j])
                          for i, j in permutations(range(preds.member_count), 2)]))


def eir(member_errors: Sequence[float], ensemble_error: float) -> float:
    """
    Ensemble improvement rate (mean member error - ensemble error) / mean member error.

    Raises:
        UndefinedMetricError: mean member error is zero
    """
    mean_error = float(np.mean(member_errors))
    if mean_error <= 0:
        raise UndefinedMetricError("EIR undefined at zero mean member error")
    return (mean_error - ensemble_error) / mean_error


class SampleGradientModel(Protocol):
    def sample_gradient(self, x: np.ndarray, y: Any) -> DenseVector: ...


def fisher_trace(model: SampleGradientModel, x: np.ndarray, y: Any) -> float:
    """Squared ℓ2 norm of the per-example loss gradient."""
    grad = np.asarray(model.sample_gradient(x, y), dtype=np.float64)
    return float(grad @ grad)


def fisher_trace_blocks(model, x: np.ndarray, y: Any) -> Dict[str, float]:
    """Squared gradient norm of each parameter block; sums to fisher_trace."""
    return {name: float(block @ block) for name, block in model.sample_gradient_blocks(x, y).items()}


class ParameterModel(Protocol):
    def flat_params(self) -> DenseVector: ...


class LossOracle(Protocol):
    def sample_batches(self, rng: RngStream, n_batches: int, batch_size: int) -> List[Any]: ...

    def loss_and_grad(self, theta: DenseVector, batch: Any) -> Tuple[float, DenseVector]: ...


@dataclass(frozen=True)
class SharpnessMeasurement:
    value: float
    norm: str
    n_batches: int
    aborted_batches: int


def _worst_case_batch(oracle: LossOracle, theta: DenseVector, scale: DenseVector, batch: Any,
                      query: SharpnessQuery, box: bool) -> Optional[float]:
    base_loss, _ = oracle.loss_and_grad(theta, batch)
    if not np.isfinite(base_loss):
        return None
    delta = np.zeros_like(theta)
    best = 0.0
    for _ in range(query.ascent_steps):
        _, grad = oracle.loss_and_grad(theta + scale * delta, batch)
        if not np.all(np.isfinite(grad)):
            return None
        ascent = scale * grad
        if box:
            delta = np.clip(delta + query.step_size * np.sign(ascent), -query.rho0, query.rho0)
        else:
            ascent_norm = np.linalg.norm(ascent)
            if ascent_norm == 0:
                break
            delta = delta + query.step_size * ascent / ascent_norm
            delta_norm = np.linalg.norm(delta)
            if delta_norm > query.rho0:
                delta *= query.rho0 / delta_norm
        loss, _ = oracle.loss_and_grad(theta + scale * delta, batch)
        if not np.isfinite(loss):
            return None
        best = max(best, loss - base_loss)
    return best


def _average_case_batch(oracle: LossOracle, theta: DenseVector, scale: DenseVector, batch: Any,
                        query: SharpnessQuery, gen: np.random.Generator) -> Optional[float]:
    base_loss, _ = oracle.loss_and_grad(theta, batch)
    if not np.isfinite(base_loss):
        return None
    increases = []
    for _ in range(query.mc_samples):
        noise = query.rho0 * scale * gen.standard_normal(theta.shape[0])
        loss, _ = oracle.loss_and_grad(theta + noise, batch)
        if not np.isfinite(loss):
            return None
        increases.append(loss - base_loss)
    return float(np.mean(increases))


def measure_adaptive_sharpness(
    model: ParameterModel,
    oracle: LossOracle,
    query: SharpnessQuery,
    rng: RngStream,
) -> SharpnessMeasurement:
    """
    Adaptive sharpness with perturbations ε = T_θ δ, T_θ = diag(|θ|).

    Worst-case norms run projected ascent on δ within ‖δ‖₂ <= ρ0 or ‖δ‖∞ <= ρ0 from δ = 0,
    keeping the best loss increase. The average case draws ε ~ N(0, ρ0² T_θ²). The model is
    never modified; perturbed parameters are passed to the oracle.

    Args:
        model: Provides the flat parameter vector θ
        oracle: Batch sampler plus loss/gradient at arbitrary parameters
        query: Radius, norm and batch protocol
        rng: Stream for batches and noise

    Returns:
        SharpnessMeasurement averaged over the batches that finished
    """
    norm = SharpnessNorm(query.norm)
    theta = np.array(model.flat_params(), dtype=np.float64)
    if query.rho0 == 0:
        return SharpnessMeasurement(value=0.0, norm=norm.value, n_batches=query.n_batches, aborted_batches=0)

    scale = np.abs(theta)
    batches = oracle.sample_batches(rng.derive(0), query.n_batches, query.batch_size)
    noise_gen = rng.derive(1).generator()

    values = []
    aborted = 0
    for batch in batches:
        if norm == SharpnessNorm.AVERAGE_CASE:
            value = _average_case_batch(oracle, theta, scale, batch, query, noise_gen)
        else:
            value = _worst_case_batch(oracle, theta, scale, batch, query, box=norm == SharpnessNorm.LINF_ADAPTIVE)
        if value is None:
            aborted += 1
            continue
        values.append(value)

    if aborted:
        logger.warning(
            "Sharpness batches aborted on non-finite loss",
            extra={"context": {"aborted": aborted, "n_batches": len(batches), "norm": norm.value}},
        )
    if not values:
        raise UndefinedMetricError("every sharpness batch aborted on non-finite loss")
    return SharpnessMeasurement(value=float(np.mean(values)), norm=norm.value,
                                n_batches=len(batches), aborted_batches=aborted)


def adaptive_sharpness(model: ParameterModel, oracle: LossOracle, query: SharpnessQuery, rng: RngStream) -> float:
    """Mean adaptive loss increase; see measure_adaptive_sharpness."""
    return measure_adaptive_sharpness(model, oracle, query, rng).value
