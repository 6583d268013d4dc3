"""
Toy ensemble training with SGD, SAM and SharpBalance.

SharpBalance gives every member a sharpness-aware set: the union of the other members'
top-k% samples by per-example Fisher trace. A member takes SAM steps on batches from its
sharpness-aware set and plain SGD steps on batches from the rest of the data.
"""

import logging
import math
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from flatdiv.core.error_handler import (
    DivergenceError,
    InvalidParameterError,
    NonFiniteError,
    UndefinedMetricError,
)
from flatdiv.models.configs import (
    Combine,
    EnsembleConfig,
    Optimizer,
    SharpnessNorm,
    SharpnessQuery,
    SyntheticTaskConfig,
)
from flatdiv.models.reports import MetricReport
from flatdiv.services import metrics
from flatdiv.services.mlp import MlpModel, mlp_forward_backward, mean_loss, per_sample_fisher_traces
from flatdiv.services.numkernel import DenseVector, RngStream

logger = logging.getLogger(__name__)

GRAD_NORM_FLOOR = 1e-12

LossGrad = Callable[[DenseVector], Tuple[float, DenseVector]]


@dataclass(frozen=True)
class SyntheticData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    ood: Dict[int, np.ndarray] = field(default_factory=dict)
    n_classes: int = 2

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]


def generate_task(task: SyntheticTaskConfig) -> SyntheticData:
    """
    Gaussian blobs around random class means, plus noise-corrupted copies of the test inputs.

    Train, test and each OOD severity come from disjoint streams of the task seed; severity s
    adds N(0, (s·ood_base_scale)²) noise.
    """
    stream = RngStream(task.seed)
    centers = stream.derive(0).generator().standard_normal((task.n_classes, task.d_in))
    centers *= task.separation / np.linalg.norm(centers, axis=1, keepdims=True)

    def blobs(gen: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
        labels = gen.integers(0, task.n_classes, size=n)
        inputs = centers[labels] + task.noise_scale * gen.standard_normal((n, task.d_in))
        return inputs, labels

    x_train, y_train = blobs(stream.derive(1).generator(), task.n_train)
    x_test, y_test = blobs(stream.derive(2).generator(), task.n_test)
    ood = {
        s: x_test + s * task.ood_base_scale * stream.derive(3, s).generator().standard_normal(x_test.shape)
        for s in task.severities
    }
    return SyntheticData(x_train=x_train, y_train=y_train, x_test=x_test, y_test=y_test, ood=ood,
                         n_classes=task.n_classes)


def _batch_loss_grad(model: MlpModel, x: np.ndarray, y: np.ndarray) -> LossGrad:
    def loss_grad(theta: DenseVector) -> Tuple[float, DenseVector]:
        result = mlp_forward_backward(model.with_flat_params(theta), x, y)
        return result.loss, result.grad
    return loss_grad


def sgd_update(theta: DenseVector, loss_grad: LossGrad, lr: float, weight_decay: float) -> Tuple[DenseVector, float]:
    loss, grad = loss_grad(theta)
    return theta - lr * (grad + weight_decay * theta), loss


def sam_update(theta: DenseVector, loss_grad: LossGrad, rho: float, lr: float,
               weight_decay: float) -> Tuple[DenseVector, float]:
    """
    Two-pass SAM with the normalized perturbation ε = ρ·g/‖g‖.

    Args:
        theta: Current parameters
        loss_grad: Loss and gradient at arbitrary parameters
        rho: Perturbation radius, >= 0
        lr: Learning rate
        weight_decay: ℓ2 coefficient added to the gradient

    Returns:
        (updated parameters, loss at theta)
    """
    if rho < 0:
        raise InvalidParameterError(f"rho must be >= 0, got {rho}")
    loss, grad = loss_grad(theta)
    grad_norm = np.linalg.norm(grad)
    if rho > 0 and grad_norm >= GRAD_NORM_FLOOR:
        _, grad = loss_grad(theta + rho * grad / grad_norm)
    updated = theta - lr * (grad + weight_decay * theta)
    if not np.all(np.isfinite(updated)):
        raise NonFiniteError("non-finite parameters after SAM update")
    return updated, loss


def sam_train_step(model: MlpModel, x: np.ndarray, y: np.ndarray, rho: float, lr: float,
                   weight_decay: float) -> MlpModel:
    """One SAM step on a batch."""
    theta, _ = sam_update(model.flat_params(), _batch_loss_grad(model, x, y), rho, lr, weight_decay)
    return model.with_flat_params(theta)


def sgd_train_step(model: MlpModel, x: np.ndarray, y: np.ndarray, lr: float, weight_decay: float) -> MlpModel:
    """One plain SGD step on a batch."""
    theta, _ = sgd_update(model.flat_params(), _batch_loss_grad(model, x, y), lr, weight_decay)
    return model.with_flat_params(theta)


@dataclass(frozen=True)
class SharpnessAwareSets:
    """Per-member split of the training indices into SAM and normal sets."""

    sam_indices: Tuple[np.ndarray, ...]
    normal_indices: Tuple[np.ndarray, ...]
    top_indices: Tuple[np.ndarray, ...] = ()
    scores: Optional[np.ndarray] = None

    def validate(self, n: int) -> None:
        everything = np.arange(n)
        for sam, normal in zip(self.sam_indices, self.normal_indices):
            if np.intersect1d(sam, normal).size or not np.array_equal(np.union1d(sam, normal), everything):
                raise InvalidParameterError("sharpness-aware sets must partition the training indices")


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties to the lower index, returned sorted."""
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return np.sort(order[:k])


def select_sharpness_aware_sets(ensemble: Sequence[MlpModel], x: np.ndarray, y: np.ndarray,
                                k_frac: float) -> SharpnessAwareSets:
    """
    Build every member's sharpness-aware set from the others' sharpest samples.

    Args:
        ensemble: Members, at least 2
        x: Training inputs
        y: Training labels
        k_frac: Fraction of samples each member marks as sharp, in (0, 1)

    Returns:
        SharpnessAwareSets with D_SAM^i = ∪_{j≠i} S_j
    """
    m = len(ensemble)
    if m < 2:
        raise InvalidParameterError(f"sharpness-aware selection needs at least 2 members, got {m}")
    if not 0 < k_frac < 1:
        raise InvalidParameterError(f"k_frac must lie in (0, 1), got {k_frac}")
    n = x.shape[0]
    count = min(n, max(1, math.ceil(k_frac * n - 1e-9)))

    scores = np.stack([per_sample_fisher_traces(model, x, y) for model in ensemble])
    tops = tuple(top_k_indices(scores[j], count) for j in range(m))
    everything = np.arange(n)

    sam_sets = []
    normal_sets = []
    for i in range(m):
        union = reduce(np.union1d, [tops[j] for j in range(m) if j != i])
        sam_sets.append(union)
        normal_sets.append(np.setdiff1d(everything, union))

    sets = SharpnessAwareSets(sam_indices=tuple(sam_sets), normal_indices=tuple(normal_sets),
                              top_indices=tops, scores=scores)
    logger.info(
        "Sharpness-aware sets selected",
        extra={"context": {"members": m, "top_count": count,
                           "sam_sizes": [int(s.size) for s in sam_sets]}},
    )
    return sets


@dataclass(frozen=True)
class EpochResult:
    model: MlpModel
    mean_loss: float
    visits: np.ndarray
    sam_batches: int
    normal_batches: int


def _batches(indices: np.ndarray, batch_size: int) -> List[np.ndarray]:
    return [indices[start:start + batch_size] for start in range(0, indices.size, batch_size)]


def run_epoch(model: MlpModel, sam_indices: np.ndarray, normal_indices: np.ndarray, x: np.ndarray,
              y: np.ndarray, config: EnsembleConfig, lr: float, rng: RngStream) -> EpochResult:
    """
    One pass over the union of both index sets in homogeneous minibatches.

    Each set is shuffled and cut into batches; the two batch lists are interleaved by
    fractional position so both objectives are spread over the epoch.
    """
    gen = rng.generator()
    schedule = []
    for order, (kind, indices) in enumerate((("sam", sam_indices), ("normal", normal_indices))):
        if indices.size == 0:
            logger.debug("Empty %s set, objective skipped this epoch", kind)
            continue
        batches = _batches(gen.permutation(indices), config.batch_size)
        for t, batch in enumerate(batches):
            schedule.append(((t + 0.5) / len(batches), order, kind, batch))
    schedule.sort(key=lambda item: (item[0], item[1]))

    theta = model.flat_params()
    losses = []
    visits = np.zeros(x.shape[0], dtype=np.int64)
    for _, _, kind, batch in schedule:
        loss_grad = _batch_loss_grad(model, x[batch], y[batch])
        try:
            if kind == "sam":
                theta, loss = sam_update(theta, loss_grad, config.rho, lr, config.weight_decay)
            else:
                theta, loss = sgd_update(theta, loss_grad, lr, config.weight_decay)
        except NonFiniteError as exc:
            raise DivergenceError(
                f"training diverged after {len(losses)} batches: {exc.message}",
                details={"batches": len(losses), "last_loss": losses[-1] if losses else None, "lr": lr},
            ) from exc
        if loss > config.divergence_threshold:
            raise DivergenceError(
                f"batch loss {loss} exceeds the divergence threshold",
                details={"batches": len(losses), "last_loss": loss, "lr": lr},
            )
        losses.append(loss)
        visits[batch] += 1

    sam_batches = sum(1 for item in schedule if item[2] == "sam")
    return EpochResult(
        model=model.with_flat_params(theta),
        mean_loss=float(np.mean(losses)) if losses else float("nan"),
        visits=visits,
        sam_batches=sam_batches,
        normal_batches=len(schedule) - sam_batches,
    )


def sharpbalance_epoch(member: int, model: MlpModel, sets: SharpnessAwareSets, x: np.ndarray, y: np.ndarray,
                       config: EnsembleConfig, lr: float, rng: RngStream) -> EpochResult:
    """SAM on the member's sharpness-aware set, SGD on its normal set."""
    return run_epoch(model, sets.sam_indices[member], sets.normal_indices[member], x, y, config, lr, rng)


def sam_epoch(model: MlpModel, x: np.ndarray, y: np.ndarray, config: EnsembleConfig, lr: float,
              rng: RngStream) -> EpochResult:
    return run_epoch(model, np.arange(x.shape[0]), np.array([], dtype=np.int64), x, y, config, lr, rng)


def sgd_epoch(model: MlpModel, x: np.ndarray, y: np.ndarray, config: EnsembleConfig, lr: float,
              rng: RngStream) -> EpochResult:
    return run_epoch(model, np.array([], dtype=np.int64), np.arange(x.shape[0]), x, y, config, lr, rng)


def _member_epoch_job(args: Tuple[Any, ...]) -> EpochResult:
    member, model, sets, x, y, config, lr, rng = args
    optimizer = Optimizer(config.optimizer)
    if optimizer == Optimizer.SGD:
        return sgd_epoch(model, x, y, config, lr, rng)
    if optimizer == Optimizer.SHARPBALANCE and sets is not None:
        return sharpbalance_epoch(member, model, sets, x, y, config, lr, rng)
    return sam_epoch(model, x, y, config, lr, rng)


class MlpLossOracle:
    """Loss and gradient of an MLP architecture at arbitrary parameters on index batches."""

    def __init__(self, template: MlpModel, x: np.ndarray, y: np.ndarray):
        self.template = template
        self.x = x
        self.y = y

    def sample_batches(self, rng: RngStream, n_batches: int, batch_size: int) -> List[np.ndarray]:
        gen = rng.generator()
        size = min(batch_size, self.x.shape[0])
        return [gen.choice(self.x.shape[0], size=size, replace=False) for _ in range(n_batches)]

    def loss_and_grad(self, theta: DenseVector, batch: np.ndarray) -> Tuple[float, DenseVector]:
        try:
            result = mlp_forward_backward(self.template.with_flat_params(theta), self.x[batch], self.y[batch])
        except NonFiniteError:
            return float("nan"), np.full_like(theta, np.nan)
        return result.loss, result.grad


@dataclass
class TrainedEnsemble:
    members: List[MlpModel]
    report: MetricReport
    history: List[Dict[str, Any]] = field(default_factory=list)
    selections: int = 0


def member_stream(rng: RngStream, config: EnsembleConfig, member: int) -> RngStream:
    if config.member_seeds is not None:
        return RngStream(master_seed=config.member_seeds[member], stream_id=member)
    return rng.derive(1, member)


def prediction_set(members: Sequence[MlpModel], x: np.ndarray, y: np.ndarray) -> metrics.PredictionSet:
    logits = np.stack([model.logits(x) for model in members])
    probs = np.stack([model.predict_proba(x) for model in members])
    return metrics.PredictionSet(member_outputs=probs, labels=y, member_logits=logits)


def evaluate_ensemble(
    members: Sequence[MlpModel],
    data: SyntheticData,
    combine: Combine,
    query: SharpnessQuery,
    norms: Sequence[SharpnessNorm],
    rng: RngStream,
    seed: int = 0,
    provenance: Optional[Dict[str, Any]] = None,
    config_hash: str = "",
) -> MetricReport:
    """
    Accuracy, OOD accuracy, diversity and sharpness metrics of an ensemble.

    Sharpness is measured on the training set.
    """
    preds = prediction_set(members, data.x_test, data.y_test)
    member_errors = preds.member_errors()
    ensemble_error = preds.ensemble_error(combine)
    values: Dict[str, float] = {
        "id_accuracy": 1.0 - ensemble_error,
        "member_accuracy_mean": float(1.0 - member_errors.mean()),
    }
    undefined = []
    for name, metric in (("disagreement", lambda: metrics.mean_pairwise_disagreement(preds)),
                         ("variance_diversity", lambda: metrics.variance_diversity(preds)),
                         ("kl_diversity", lambda: metrics.kl_diversity(preds)),
                         ("der", lambda: metrics.der(preds)),
                         ("eir", lambda: metrics.eir(member_errors, ensemble_error))):
        try:
            values[name] = metric()
        except UndefinedMetricError as exc:
            undefined.append(f"{name}: {exc.message}")

    for severity, x_ood in sorted(data.ood.items()):
        ood_preds = prediction_set(members, x_ood, data.y_test)
        values[f"ood_accuracy_s{severity}"] = 1.0 - ood_preds.ensemble_error(combine)
        values[f"ood_member_accuracy_mean_s{severity}"] = float(1.0 - ood_preds.member_errors().mean())

    aborted = {}
    for norm_index, norm in enumerate(norms):
        norm = SharpnessNorm(norm)
        norm_query = query.model_copy(update={"norm": norm})
        per_member = []
        for i, model in enumerate(members):
            oracle = MlpLossOracle(model, data.x_train, data.y_train)
            measurement = metrics.measure_adaptive_sharpness(model, oracle, norm_query, rng.derive(2, norm_index, i))
            values[f"sharpness_{norm.value}_member{i}"] = measurement.value
            per_member.append(measurement.value)
            if measurement.aborted_batches:
                aborted[f"{norm.value}_member{i}"] = measurement.aborted_batches
        values[f"sharpness_{norm.value}_mean"] = float(np.mean(per_member))

    values["train_loss_mean"] = float(np.mean([mean_loss(m, data.x_train, data.y_train) for m in members]))

    return MetricReport(
        metrics=values,
        config=provenance or {},
        seed=seed,
        config_hash=config_hash,
        member_count=len(members),
        sample_count=preds.sample_count,
        metadata={
            "variance_convention": "population",
            "der_pairs": "unordered",
            "kl_pairs": "ordered",
            "kl_floor": metrics.KL_FLOOR,
            "combine": Combine(combine).value,
            "sharpness_rho0": query.rho0,
            "sharpness_batches": query.n_batches,
            "sharpness_batch_size": query.batch_size,
            "aborted_sharpness_batches": aborted,
            "undefined_metrics": undefined,
        },
    )


def train_members(
    data: SyntheticData,
    config: EnsembleConfig,
    rng: RngStream,
    executor: Optional[Executor] = None,
) -> Tuple[List[MlpModel], List[Dict[str, Any]], int]:
    """
    Train all members from independent inits.

    SharpBalance recomputes the sharpness-aware sets after the warmup epochs and then every
    T_d epochs; before the first selection members train with SAM on all data. Selection is a
    barrier over the members' current weights.

    Returns:
        (members, per-epoch history, number of selections)

    Raises:
        DivergenceError: a member's epoch loss exceeds the divergence threshold or is not finite
    """
    d_in = data.x_train.shape[1]
    streams = [member_stream(rng, config, i) for i in range(config.m)]
    members = [MlpModel.initialize(streams[i].derive(0), d_in, config.hidden, data.n_classes)
               for i in range(config.m)]
    optimizer = Optimizer(config.optimizer)

    sets: Optional[SharpnessAwareSets] = None
    selections = 0
    history: List[Dict[str, Any]] = []
    for epoch in range(config.epochs):
        lr = config.learning_rate(epoch)
        if (optimizer == Optimizer.SHARPBALANCE and epoch >= config.warmup_epochs
                and (epoch - config.warmup_epochs) % config.T_d == 0):
            sets = select_sharpness_aware_sets(members, data.x_train, data.y_train, config.k_frac)
            sets.validate(data.n_train)
            selections += 1

        jobs = [(i, members[i], sets, data.x_train, data.y_train, config, lr, streams[i].derive(1, epoch))
                for i in range(config.m)]
        try:
            if executor is None:
                results = [_member_epoch_job(job) for job in jobs]
            else:
                results = list(executor.map(_member_epoch_job, jobs))
        except DivergenceError as exc:
            raise DivergenceError(
                f"epoch {epoch}: {exc.message}",
                details={**exc.details, "epoch": epoch, "optimizer": optimizer.value, "rho": config.rho},
            ) from exc

        for i, result in enumerate(results):
            if not np.isfinite(result.mean_loss) or result.mean_loss > config.divergence_threshold:
                raise DivergenceError(
                    f"member {i} diverged at epoch {epoch} (loss {result.mean_loss})",
                    details={"member": i, "epoch": epoch, "loss": result.mean_loss, "lr": lr,
                             "optimizer": optimizer.value, "rho": config.rho},
                )
            history.append({"epoch": epoch, "member": i, "loss": result.mean_loss, "lr": lr,
                            "sam_batches": result.sam_batches, "normal_batches": result.normal_batches})
        members = [result.model for result in results]
        logger.info(
            "Epoch finished",
            extra={"context": {"epoch": epoch, "optimizer": optimizer.value,
                               "losses": [round(r.mean_loss, 6) for r in results]}},
        )
    return members, history, selections


def train_ensemble(
    task: SyntheticTaskConfig,
    config: EnsembleConfig,
    rng: RngStream,
    query: SharpnessQuery = SharpnessQuery(),
    norms: Sequence[SharpnessNorm] = (SharpnessNorm.L2_ADAPTIVE,),
    parallelism: int = 1,
    provenance: Optional[Dict[str, Any]] = None,
    config_hash: str = "",
) -> TrainedEnsemble:
    """
    Train an ensemble on a synthetic task and evaluate it.

    Args:
        task: Data generator settings
        config: Ensemble settings
        rng: Ensemble stream; members and evaluation use disjoint children
        query: Sharpness protocol
        norms: Sharpness variants to report
        parallelism: Worker processes for member epochs
        provenance: Config recorded in the metric report
        config_hash: Hash recorded in the metric report

    Returns:
        TrainedEnsemble with members, metric report and training history
    """
    data = generate_task(task)
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=min(parallelism, config.m)) as pool:
            members, history, selections = train_members(data, config, rng, pool)
    else:
        members, history, selections = train_members(data, config, rng)

    report = evaluate_ensemble(members, data, config.combine, query, norms, rng.derive(2),
                               seed=rng.master_seed, provenance=provenance, config_hash=config_hash)
    report.metadata["selections"] = selections
    report.metadata["optimizer"] = Optimizer(config.optimizer).value
    return TrainedEnsemble(members=members, report=report, history=history, selections=selections)
