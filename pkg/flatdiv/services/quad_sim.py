"""
Teacher-student quadratic simulator for SAM and partition-trained SAM.

Training data A (n_tr × d_in) and test data T (n_te × d_in) have N(0, 1/d_in) entries and
noiseless labels from a teacher θ*. The loss on data X is ½(θ-θ*)ᵀXᵀX(θ-θ*), and unnormalized
SAM iterates θ ← θ - η·M((θ + ρM(θ-θ*)) - θ*). Monte-Carlo estimators reuse one
eigendecomposition per data draw.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from scipy import optimize

from flatdiv.core.error_handler import (
    FlatDivError,
    InvalidParameterError,
    RootBracketError,
    ShapeMismatchError,
    UnstableStepError,
)
from flatdiv.models.configs import (
    PgaInit,
    PgaOptions,
    QuadSetup,
    SharpnessMethod,
    StabilityPolicy,
    TheoryConfig,
    Variant,
    VerifySweep,
)
from flatdiv.models.reports import SimEstimate, VerificationRow
from flatdiv.services import theory
from flatdiv.services.numkernel import (
    DenseMatrix,
    DenseVector,
    RngStream,
    Spectrum,
    as_matrix,
    as_vector,
    gaussian_matrix,
    gram,
)

logger = logging.getLogger(__name__)

# Stream labels inside one data draw
_STREAM_A = 0
_STREAM_T = 1
_STREAM_INIT = 2
_STREAM_SUBSET = 3
_STREAM_PGA = 4
_STREAM_TEACHER = 2**32


@dataclass(frozen=True)
class DataSelector:
    """Which data a loss or step uses: train, test, or one training partition."""

    kind: str = "train"
    index: Optional[int] = None

    @classmethod
    def train(cls) -> 'DataSelector':
        return cls("train")

    @classmethod
    def test(cls) -> 'DataSelector':
        return cls("test")

    @classmethod
    def subset(cls, s: int) -> 'DataSelector':
        return cls("subset", s)


@dataclass(frozen=True)
class QuadProblem:
    """A drawn teacher-student instance with SAM hyperparameters."""

    A: DenseMatrix
    T: DenseMatrix
    theta_star: DenseVector
    sigma: float = 1.0
    eta: float = 0.1
    rho: float = 0.0
    k: int = 1
    S: int = 1
    _grams: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "A", as_matrix(self.A, "A"))
        object.__setattr__(self, "T", as_matrix(self.T, "T"))
        object.__setattr__(self, "theta_star", as_vector(self.theta_star, "theta_star"))
        d_in = self.A.shape[1]
        if self.T.shape[1] != d_in or self.theta_star.shape[0] != d_in:
            raise ShapeMismatchError(
                f"A {self.A.shape}, T {self.T.shape} and theta_star {self.theta_star.shape} disagree on d_in"
            )
        if self.S < 1 or self.A.shape[0] % self.S != 0:
            raise InvalidParameterError(f"n_tr ({self.A.shape[0]}) must be divisible by S ({self.S})")

    @classmethod
    def draw(cls, setup: QuadSetup, theta_star: DenseVector, rng: RngStream) -> 'QuadProblem':
        """Draw fresh A and T for a setup."""
        variance = 1.0 / setup.d_in
        return cls(
            A=gaussian_matrix(rng.derive(_STREAM_A), setup.n_tr, setup.d_in, variance),
            T=gaussian_matrix(rng.derive(_STREAM_T), setup.n_te, setup.d_in, variance),
            theta_star=theta_star,
            sigma=setup.sigma,
            eta=setup.eta,
            rho=setup.rho,
            k=setup.k,
            S=setup.S,
        )

    @property
    def n_tr(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    def data(self, selector: DataSelector) -> DenseMatrix:
        if selector.kind == "train":
            return self.A
        if selector.kind == "test":
            return self.T
        if selector.kind == "subset":
            s = selector.index
            if s is None or not 0 <= s < self.S:
                raise InvalidParameterError(f"subset index {s} outside [0, {self.S})")
            rows = self.n_tr // self.S
            return self.A[s * rows:(s + 1) * rows]
        raise InvalidParameterError(f"unknown data selector {selector.kind!r}")

    def gram(self, selector: DataSelector) -> DenseMatrix:
        key = (selector.kind, selector.index)
        if key not in self._grams:
            self._grams[key] = gram(self.data(selector))
        return self._grams[key]

    def spectrum(self, selector: DataSelector) -> Spectrum:
        key = ("spectrum", selector.kind, selector.index)
        if key not in self._grams:
            self._grams[key] = Spectrum.of(self.gram(selector))
        return self._grams[key]


def iteration_factors(eigvals: DenseVector, eta: float, rho: float) -> DenseVector:
    """Eigenvalues of B = I - ηM - ηρM²."""
    return 1.0 - eta * eigvals - eta * rho * eigvals ** 2


def contraction_amount(top_eigval: float, eta: float, rho: float) -> float:
    """η(λ + ρλ²); SAM contracts every eigen-direction up to λ when this is below 2."""
    return eta * (top_eigval + rho * top_eigval ** 2)


def edge_contraction(setup: QuadSetup) -> float:
    """
    Contraction amount at the upper spectral edge (√q + 1)² of the data a member trains on.

    q is the per-partition aspect ratio n_tr/(S·d_in).
    """
    q = setup.n_tr / (setup.S * setup.d_in)
    return contraction_amount((np.sqrt(q) + 1.0) ** 2, setup.eta, setup.rho)


def check_stability(top_eigval: float, eta: float, rho: float, policy: StabilityPolicy) -> bool:
    """
    Apply the contraction guard η(λmax + ρλmax²) < 2.

    Returns:
        True when the step contracts

    Raises:
        UnstableStepError: policy is "error" and the step does not contract
    """
    policy = StabilityPolicy(policy)
    if policy == StabilityPolicy.OFF:
        return True
    amount = contraction_amount(top_eigval, eta, rho)
    if amount < 2.0:
        return True
    context = {"eta": eta, "rho": rho, "lambda_max": top_eigval, "contraction": amount}
    if policy == StabilityPolicy.ERROR:
        raise UnstableStepError(
            f"eta*(lambda_max + rho*lambda_max^2) = {amount:.4g} >= 2; SAM iterates diverge",
            details=context,
        )
    logger.warning("SAM step does not contract the quadratic dynamics", extra={"context": context})
    return False


def quad_loss(theta: DenseVector, problem: QuadProblem, data: DataSelector = DataSelector()) -> float:
    """½(θ-θ*)ᵀXᵀX(θ-θ*) for the selected data X."""
    delta = as_vector(theta, "theta") - problem.theta_star
    residual = problem.data(data) @ delta
    return 0.5 * float(residual @ residual)


def quad_grad(theta: DenseVector, problem: QuadProblem, data: DataSelector = DataSelector()) -> DenseVector:
    """Gradient M(θ-θ*) of quad_loss."""
    x = problem.data(data)
    return x.T @ (x @ (as_vector(theta, "theta") - problem.theta_star))


def sam_step(theta: DenseVector, problem: QuadProblem, data: DataSelector = DataSelector()) -> DenseVector:
    """
    One unnormalized SAM step θ - η∇f(θ + ρ∇f(θ)).

    Args:
        theta: Current parameters
        problem: Quadratic instance
        data: Data the loss is taken over

    Returns:
        Updated parameters
    """
    m = problem.gram(data)
    delta = as_vector(theta, "theta") - problem.theta_star
    ascent = delta + problem.rho * (m @ delta)
    return theta - problem.eta * (m @ ascent)


def closed_form_theta(
    problem: QuadProblem,
    theta0: DenseVector,
    steps: int,
    data: DataSelector = DataSelector(),
) -> DenseVector:
    """
    θ* + B^steps(θ0 - θ*) through powers of the gram eigenvalues.

    Args:
        problem: Quadratic instance
        theta0: Initial parameters
        steps: Number of SAM steps, >= 0
        data: Data the dynamics run on

    Returns:
        Parameters after `steps` SAM steps
    """
    if steps < 0:
        raise InvalidParameterError(f"steps must be >= 0, got {steps}")
    theta0 = as_vector(theta0, "theta0")
    if steps == 0:
        return theta0.copy()
    spectrum = problem.spectrum(data)
    factors = iteration_factors(spectrum.eigvals, problem.eta, problem.rho) ** steps
    return problem.theta_star + spectrum.apply(factors, theta0 - problem.theta_star)


def draw_teacher(d_in: int, norm: float, rng: RngStream) -> DenseVector:
    """Teacher with isotropic direction and a fixed norm."""
    direction = rng.derive(_STREAM_TEACHER).generator().standard_normal(d_in)
    return norm * direction / np.linalg.norm(direction)


def _mean_and_se(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(arr.size))


def _subset_spectra(problem: QuadProblem) -> List[Spectrum]:
    if problem.S == 1:
        return [problem.spectrum(DataSelector.train())]
    return [problem.spectrum(DataSelector.subset(s)) for s in range(problem.S)]


def _prediction_diversity(problem: QuadProblem, draw_rng: RngStream, n_init: int) -> float:
    d_in = problem.d_in
    inits = draw_rng.derive(_STREAM_INIT).generator().normal(0.0, problem.sigma, size=(n_init, d_in))
    spectra = _subset_spectra(problem)

    if problem.S == 1:
        # trained models differ by B^k applied to init differences; variance is shift invariant
        factors = iteration_factors(spectra[0].eigvals, problem.eta, problem.rho) ** problem.k
        moved = spectra[0].apply(factors, inits - inits[0])
        predictions = moved @ problem.T.T
        return float(np.mean(np.var(predictions, axis=0, ddof=1)))

    assignment = draw_rng.derive(_STREAM_SUBSET).generator().integers(0, problem.S, size=n_init)
    trained = np.empty_like(inits)
    for s, spectrum in enumerate(spectra):
        rows = assignment == s
        if not np.any(rows):
            continue
        factors = iteration_factors(spectrum.eigvals, problem.eta, problem.rho) ** problem.k
        trained[rows] = problem.theta_star + spectrum.apply(factors, inits[rows] - problem.theta_star)

    predictions = (trained - trained[0]) @ problem.T.T
    return float(np.mean(np.var(predictions, axis=0, ddof=1)))


def _stability_guard(problem: QuadProblem, policy: StabilityPolicy) -> bool:
    top = max(spectrum.top for spectrum in _subset_spectra(problem))
    return check_stability(top, problem.eta, problem.rho, policy)


def mc_diversity(
    setup: QuadSetup,
    theta_star: DenseVector,
    n_data: int,
    n_init: int,
    rng: RngStream,
) -> SimEstimate:
    """
    Monte-Carlo prediction diversity of SAM-trained students.

    For each data draw: n_init inits θ0 ~ N(0, σ²I), each trained k steps in closed form
    (on a uniformly drawn partition when S > 1); per-test-row prediction variance over inits,
    averaged over rows.

    Args:
        setup: Sizes and hyperparameters
        theta_star: Teacher, fixed across draws
        n_data: Number of (A, T) draws, >= 2
        n_init: Number of inits per draw, >= 2
        rng: Base stream; draw d uses rng.derive(d)

    Returns:
        SimEstimate with the diversity fields set
    """
    if n_data < 2 or n_init < 2:
        raise InvalidParameterError(f"n_data and n_init must be >= 2, got ({n_data}, {n_init})")
    values = []
    warned = False
    for draw in range(n_data):
        draw_rng = rng.derive(draw)
        problem = QuadProblem.draw(setup, theta_star, draw_rng)
        policy = StabilityPolicy.OFF if warned else setup.stability_policy
        warned = not _stability_guard(problem, policy) or warned
        values.append(_prediction_diversity(problem, draw_rng, n_init))
    mean, se = _mean_and_se(values)
    return SimEstimate(diversity_mc=mean, diversity_se=se, n_data_draws=n_data, n_init_draws=n_init)


def ball_quadratic_value(eigvals: DenseVector, eps_hat: DenseVector, b_hat: DenseVector) -> float:
    """g(ε) = ½εᵀMε - εᵀb in eigen coordinates."""
    return float(0.5 * np.sum(eigvals * eps_hat ** 2) - eps_hat @ b_hat)


def maximize_on_ball_trust_region(
    spectrum: Spectrum,
    b: DenseVector,
    radius: float,
    top_tol: float = 1e-10,
) -> Tuple[DenseVector, float]:
    """
    Exact maximizer of ½εᵀMε - εᵀb over ‖ε‖ <= radius.

    The maximizer lies on the boundary with (λI - M)ε = -b, λ >= λmax. The secular equation
    ‖ε(λ)‖ = radius is solved by bracketed root finding in the eigenbasis. When b has no
    component on the top eigenspace and the remaining solution is inside the ball, a top
    eigenvector component fills the radius.

    Args:
        spectrum: Eigendecomposition of M, descending
        b: Linear term
        radius: Ball radius, >= 0

    Returns:
        (ε, g(ε))

    Raises:
        RootBracketError: the secular equation could not be bracketed
    """
    if radius < 0:
        raise InvalidParameterError(f"radius must be >= 0, got {radius}")
    eigvals = spectrum.eigvals
    if radius == 0:
        return np.zeros_like(b), 0.0

    b_hat = spectrum.eigvecs.T @ b
    top = eigvals[0]
    top_set = eigvals >= top - top_tol * max(1.0, abs(top))
    b_norm = float(np.linalg.norm(b_hat))
    top_norm = float(np.linalg.norm(b_hat[top_set]))

    if top_norm <= 1e-12 * max(b_norm, 1e-300):
        rest = np.zeros_like(b_hat)
        gaps = top - eigvals[~top_set]
        rest[~top_set] = -b_hat[~top_set] / gaps
        rest_norm = float(np.linalg.norm(rest))
        if rest_norm <= radius:
            eps_hat = rest
            eps_hat[np.argmax(top_set)] = np.sqrt(max(radius ** 2 - rest_norm ** 2, 0.0))
            return spectrum.eigvecs @ eps_hat, ball_quadratic_value(eigvals, eps_hat, b_hat)

    def step_norm(lam: float) -> float:
        return float(np.linalg.norm(b_hat / (lam - eigvals)))

    def secular(lam: float) -> float:
        return 1.0 / radius - 1.0 / step_norm(lam)

    tiny = 1e-12 * max(1.0, abs(top))
    lo = top + max(top_norm / (2.0 * radius), tiny)
    hi = top + max(b_norm / radius, 2.0 * tiny)
    try:
        lam = optimize.brentq(secular, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    except ValueError as exc:
        raise RootBracketError(
            f"secular equation not bracketed on [{lo}, {hi}]",
            details={
                "lambda_max": float(top), "lo": lo, "hi": hi,
                "norm_at_lo": step_norm(lo), "norm_at_hi": step_norm(hi), "radius": radius,
            },
        ) from exc

    eps_hat = -b_hat / (lam - eigvals)
    eps_hat *= radius / np.linalg.norm(eps_hat)
    return spectrum.eigvecs @ eps_hat, ball_quadratic_value(eigvals, eps_hat, b_hat)


def maximize_on_ball_pga(
    spectrum: Spectrum,
    b: DenseVector,
    radius: float,
    options: PgaOptions = PgaOptions(),
    rng: Optional[RngStream] = None,
) -> Tuple[DenseVector, float]:
    """
    Projected gradient ascent on ½εᵀMε - εᵀb over ‖ε‖ <= radius.

    Args:
        spectrum: Eigendecomposition of M, descending
        b: Linear term
        radius: Ball radius, >= 0
        options: Step size, step count and start
        rng: Stream for the random start

    Returns:
        (ε, g(ε)) for the best iterate
    """
    if radius < 0:
        raise InvalidParameterError(f"radius must be >= 0, got {radius}")
    eigvals = spectrum.eigvals
    if radius == 0:
        return np.zeros_like(b), 0.0

    b_hat = spectrum.eigvecs.T @ b
    eps_hat = np.zeros_like(b_hat)
    if PgaInit(options.init) == PgaInit.RANDOM:
        if rng is None:
            raise InvalidParameterError("random PGA start needs an rng")
        direction = rng.generator().standard_normal(b_hat.shape[0])
        eps_hat = radius * direction / np.linalg.norm(direction)
    else:
        # g(±r·v) = ½λr² ∓ r·b̂₀
        sign = -1.0 if b_hat[0] > 0 else 1.0
        eps_hat[0] = sign * radius

    best = eps_hat.copy()
    best_value = ball_quadratic_value(eigvals, eps_hat, b_hat)
    for _ in range(options.steps):
        eps_hat = eps_hat + options.step_size * (eigvals * eps_hat - b_hat)
        norm = np.linalg.norm(eps_hat)
        if norm > radius:
            eps_hat *= radius / norm
        value = ball_quadratic_value(eigvals, eps_hat, b_hat)
        if value > best_value:
            best, best_value = eps_hat.copy(), value
    return spectrum.eigvecs @ best, best_value


def sharpness_linear_term(problem: QuadProblem) -> DenseVector:
    """
    b = M·(θ* - w̄) with w̄ the mean trained model over inits.

    For S = 1 this is B^k M θ*; for S > 1 it is M·(1/S)Σ_s B_s^k θ*.
    """
    full = problem.spectrum(DataSelector.train())
    if problem.S == 1:
        factors = iteration_factors(full.eigvals, problem.eta, problem.rho) ** problem.k
        return full.apply(factors * full.eigvals, problem.theta_star)
    residual = np.zeros(problem.d_in)
    for spectrum in _subset_spectra(problem):
        factors = iteration_factors(spectrum.eigvals, problem.eta, problem.rho) ** problem.k
        residual += spectrum.apply(factors, problem.theta_star)
    residual /= problem.S
    return full.apply(full.eigvals, residual)


def problem_sharpness(
    problem: QuadProblem,
    rho0: float,
    method: SharpnessMethod = SharpnessMethod.TRUST_REGION,
    pga: PgaOptions = PgaOptions(),
    rng: Optional[RngStream] = None,
) -> float:
    """Worst-case loss increase of the mean trained model within radius rho0."""
    b = sharpness_linear_term(problem)
    spectrum = problem.spectrum(DataSelector.train())
    if SharpnessMethod(method) == SharpnessMethod.PGA:
        _, value = maximize_on_ball_pga(spectrum, b, rho0, pga, rng)
    else:
        _, value = maximize_on_ball_trust_region(spectrum, b, rho0)
    return value


def mc_sharpness(
    setup: QuadSetup,
    theta_star: DenseVector,
    rho0: float,
    n_data: int,
    method: SharpnessMethod,
    rng: RngStream,
    pga: PgaOptions = PgaOptions(),
) -> SimEstimate:
    """
    Monte-Carlo sharpness of the mean SAM-trained model.

    Args:
        setup: Sizes and hyperparameters
        theta_star: Teacher, fixed across draws
        rho0: Measurement radius, >= 0
        n_data: Number of data draws
        method: pga or trust_region
        rng: Base stream; draw d uses rng.derive(d), matching mc_diversity
        pga: PGA options

    Returns:
        SimEstimate with the sharpness fields set
    """
    if rho0 < 0:
        raise InvalidParameterError(f"rho0 must be >= 0, got {rho0}")
    if n_data < 1:
        raise InvalidParameterError(f"n_data must be >= 1, got {n_data}")
    values = []
    warned = False
    for draw in range(n_data):
        draw_rng = rng.derive(draw)
        problem = QuadProblem.draw(setup, theta_star, draw_rng)
        policy = StabilityPolicy.OFF if warned else setup.stability_policy
        warned = not _stability_guard(problem, policy) or warned
        values.append(problem_sharpness(problem, rho0, method, pga, draw_rng.derive(_STREAM_PGA)))
    mean, se = _mean_and_se(values)
    return SimEstimate(sharpness_mc=mean, sharpness_se=se, n_data_draws=n_data)


@dataclass(frozen=True)
class VerifyCell:
    index: int
    k: int
    eta: float
    rho: float
    S: int


def sweep_cells(sweep: VerifySweep) -> List[VerifyCell]:
    """Cells of a sweep in a fixed order: S, k, eta, rho."""
    cells = []
    for S in sweep.S_values:
        for k in sweep.k_values:
            for eta in sweep.eta_values:
                for rho in sweep.rho_values:
                    cells.append(VerifyCell(index=len(cells), k=k, eta=eta, rho=rho, S=S))
    return cells


def verify_cell(sweep: VerifySweep, cell: VerifyCell, rng: RngStream) -> VerificationRow:
    """Run one sweep cell and compare simulation against theory."""
    variant = Variant.SAM if cell.S == 1 else Variant.SHARPBALANCE
    row = dict(variant=variant, n_tr=sweep.n_tr, d_in=sweep.d_in, n_te=sweep.n_te, S=cell.S,
               k=cell.k, eta=cell.eta, rho=cell.rho, rho0=sweep.rho0)
    context = {"cell": cell.index, "S": cell.S, "k": cell.k, "eta": cell.eta, "rho": cell.rho}
    try:
        setup = QuadSetup(n_tr=sweep.n_tr, d_in=sweep.d_in, n_te=sweep.n_te, sigma=sweep.sigma,
                          eta=cell.eta, rho=cell.rho, k=cell.k, S=cell.S,
                          stability_policy=sweep.stability_policy)
        amount = edge_contraction(setup)
        if sweep.skip_noncontracting and amount >= 2.0:
            logger.info("Verification cell skipped outside the contraction region",
                        extra={"context": {**context, "contraction": amount}})
            return VerificationRow(
                **row, skipped=True,
                error=f"SKIPPED: eta*(lambda_edge + rho*lambda_edge^2) = {amount:.4g} >= 2",
            )
        theta_star = draw_teacher(sweep.d_in, sweep.theta_star_norm, rng)
        cell_rng = rng.derive(cell.index)
        diversity = mc_diversity(setup, theta_star, sweep.n_data, sweep.n_init, cell_rng)
        sharpness = mc_sharpness(setup, theta_star, sweep.rho0, sweep.n_data, sweep.method, cell_rng, sweep.pga)

        cfg = TheoryConfig(params=setup.phi_params(), sigma=sweep.sigma,
                           theta_star_norm=sweep.theta_star_norm, rho0=sweep.rho0, k=cell.k)
        if cell.S == 1:
            diversity_theory = theory.sam_diversity(cfg)
            lower, upper = theory.sam_sharpness_bounds(cfg)
        else:
            diversity_theory = theory.sharpbal_diversity(cfg)
            lower, upper = None, theory.sharpbal_sharpness_upper(cfg)
    except FlatDivError as exc:
        logger.warning("Verification cell failed", extra={"context": {**context, "error": exc.code.value}})
        return VerificationRow(**row, passed=False, error=f"{exc.code.value}: {exc.message}")
    except ValidationError as exc:
        logger.warning("Verification cell rejected", extra={"context": {**context, "error": "VALIDATION_ERROR"}})
        return VerificationRow(**row, passed=False, error=f"VALIDATION_ERROR: {exc.errors()[0]['msg']}")

    slack = sweep.se_multiplier * sharpness.sharpness_se
    sharp_ok = sharpness.sharpness_mc <= upper + slack
    if lower is not None:
        sharp_ok = sharp_ok and sharpness.sharpness_mc >= lower - slack
    diversity_ok = abs(diversity.diversity_mc - diversity_theory) <= sweep.diversity_rel_tol * abs(diversity_theory)
    if diversity_theory == 0:
        diversity_ok = abs(diversity.diversity_mc) <= sweep.se_multiplier * diversity.diversity_se

    result = VerificationRow(
        **row,
        diversity_mc=diversity.diversity_mc, diversity_se=diversity.diversity_se,
        diversity_theory=diversity_theory,
        sharp_mc=sharpness.sharpness_mc, sharp_se=sharpness.sharpness_se,
        sharp_lower=lower, sharp_upper=upper,
        passed=bool(sharp_ok and diversity_ok),
    )
    logger.info("Verification cell finished", extra={"context": {**context, "passed": result.passed}})
    return result


def _verify_cell_job(args: Tuple[VerifySweep, VerifyCell, RngStream]) -> VerificationRow:
    return verify_cell(*args)


def verify_theorems(sweep: VerifySweep, rng: RngStream, parallelism: int = 1) -> List[VerificationRow]:
    """
    Run every cell of a sweep.

    Cells draw from streams keyed by their index, so results do not depend on parallelism.

    Args:
        sweep: Verification grid
        rng: Base stream
        parallelism: Worker processes; 1 runs in-process

    Returns:
        One VerificationRow per cell, in cell order
    """
    cells = sweep_cells(sweep)
    jobs = [(sweep, cell, rng) for cell in cells]
    if parallelism <= 1 or len(cells) == 1:
        return [_verify_cell_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(_verify_cell_job, jobs))
