"""
Closed-form diversity and sharpness bounds for SAM trained on quadratic objectives.

SAM members share the full training set; SharpBalance members each train on one of S equal
partitions. Every quantity reduces to the Wishart-moment functional phi.
"""

import logging
import math
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from flatdiv.core.error_handler import (
    BoundUndefinedError,
    FlatDivError,
    NegativeBoundConstantError,
)
from flatdiv.models.configs import TheoryConfig, Variant
from flatdiv.models.reports import DominanceComparison, DominanceResult, TheoryPoint
from flatdiv.services.combinatorics import phi

logger = logging.getLogger(__name__)


class SharpnessBounds(NamedTuple):
    lower: float
    upper: float


def _spectral_edges(cfg: TheoryConfig) -> tuple:
    q = cfg.params.n_tr / cfg.params.d_in
    return (math.sqrt(q) - 1.0) ** 2, (math.sqrt(q) + 1.0) ** 2


def sam_diversity(cfg: TheoryConfig) -> float:
    """
    Prediction variance of SAM-trained members: phi(2k, 0)·σ².

    Args:
        cfg: Theory configuration (evaluated on the full training set)

    Returns:
        Diversity
    """
    params = cfg.params.full_data()
    return phi(params, 2 * cfg.k, 0) * cfg.sigma ** 2


def sam_sharpness_bounds(cfg: TheoryConfig) -> SharpnessBounds:
    """
    Lower and upper bounds on the expected sharpness of the SAM-trained mean model.

    Args:
        cfg: Theory configuration

    Returns:
        SharpnessBounds(lower, upper); the lower bound is not clamped at zero

    Raises:
        BoundUndefinedError: phi(2k, 2) is not positive
    """
    params = cfg.params.full_data()
    phi_22 = phi(params, 2 * cfg.k, 2)
    if phi_22 <= 0:
        raise BoundUndefinedError(
            "Jensen-gap constant undefined",
            details={"phi_2k_2": phi_22, "k": cfg.k},
        )
    phi_44 = phi(params, 4 * cfg.k, 4)
    norm = cfg.theta_star_norm
    gap = (phi_44 - phi_22 ** 2) / (2.0 * phi_22 ** 1.5 * norm)

    low_edge, high_edge = _spectral_edges(cfg)
    linear = cfg.rho0 * math.sqrt(phi_22) * norm
    lower = cfg.rho0 ** 2 / 2.0 * low_edge + linear - gap
    upper = cfg.rho0 ** 2 / 2.0 * high_edge + linear
    return SharpnessBounds(lower=lower, upper=upper)


def sharpbal_diversity(cfg: TheoryConfig) -> float:
    """
    Prediction variance of members trained on random partitions.

    φ'(2k,0)σ² + ((S-1)/(d_in·S))·(φ'(2k,0) - φ'(k,0)²)·‖θ*‖²

    Args:
        cfg: Theory configuration; params.S is the partition count

    Returns:
        Diversity
    """
    params = cfg.params
    S = params.S
    phi_2k = phi(params, 2 * cfg.k, 0)
    phi_k = phi(params, cfg.k, 0)
    subset_term = (S - 1) / (params.d_in * S) * (phi_2k - phi_k ** 2) * cfg.theta_star_norm ** 2
    return phi_2k * cfg.sigma ** 2 + subset_term


def sharpbal_bound_constant(cfg: TheoryConfig) -> float:
    """The constant C of the partition-trained sharpness upper bound."""
    params = cfg.params
    S = params.S
    k = cfg.k
    r = params.n_tr / (S * params.d_in)

    def p(i: int, j: int) -> float:
        return phi(params, i, j)

    pairs = S * (S - 1)
    triples = pairs * (S - 2)
    quads = triples * (S - 3)

    return (
        S * p(2 * k, 2)
        + 2 * r * pairs * p(2 * k, 1)
        + 2 * pairs * p(k, 2) * p(k, 0)
        + r * (1 + r) * pairs * p(2 * k, 0)
        + 2 * pairs * p(k, 1) ** 2
        + 1.5 * r * (1 + r) * triples * p(k, 0) ** 2
        + 1.5 * r ** 2 * triples * p(2 * k, 0)
        + 3 * r * triples * p(k, 0) * p(k, 1)
        + r ** 2 * quads * p(k, 0) ** 2
    )


def sharpbal_sharpness_upper(cfg: TheoryConfig) -> float:
    """
    Upper bound on the expected sharpness of partition-trained members.

    Args:
        cfg: Theory configuration

    Returns:
        (ρ0²/2)(√(n_tr/d_in)+1)² + (ρ0/S)·√C·‖θ*‖

    Raises:
        NegativeBoundConstantError: C < 0
    """
    constant = sharpbal_bound_constant(cfg)
    if constant < 0:
        raise NegativeBoundConstantError(
            "negative bound constant",
            details={"C": constant, "k": cfg.k, "eta": cfg.params.eta, "rho": cfg.params.rho},
        )
    _, high_edge = _spectral_edges(cfg)
    return (
        cfg.rho0 ** 2 / 2.0 * high_edge
        + cfg.rho0 / cfg.params.S * math.sqrt(constant) * cfg.theta_star_norm
    )


def theory_point(cfg: TheoryConfig, variant: Variant) -> TheoryPoint:
    """Evaluate one curve point, recording failures on the point instead of raising."""
    rho = cfg.params.rho
    try:
        if variant == Variant.SAM:
            bounds = sam_sharpness_bounds(cfg)
            return TheoryPoint(variant=variant, rho=rho, k=cfg.k, diversity=sam_diversity(cfg),
                               sharp_lower=bounds.lower, sharp_upper=bounds.upper)
        return TheoryPoint(variant=variant, rho=rho, k=cfg.k, diversity=sharpbal_diversity(cfg),
                           sharp_upper=sharpbal_sharpness_upper(cfg))
    except FlatDivError as exc:
        logger.warning(
            "Theory point failed",
            extra={"context": {"variant": Variant(variant).value, "rho": rho, "error": exc.code.value}},
        )
        return TheoryPoint(variant=variant, rho=rho, k=cfg.k, error=f"{exc.code.value}: {exc.message}")


def tradeoff_curve(cfg_base: TheoryConfig, rho_grid: Sequence[float], variant: Variant) -> List[TheoryPoint]:
    """
    Analytic sharpness-diversity curve traced by the SAM radius.

    Args:
        cfg_base: Fixed configuration; its rho is replaced by each grid value
        rho_grid: Nonempty list of nonnegative radii
        variant: SAM (S = 1 semantics) or SharpBalance (partitions from cfg_base)

    Returns:
        One TheoryPoint per radius, in grid order
    """
    if len(rho_grid) == 0:
        raise ValueError("rho_grid must not be empty")
    return [theory_point(cfg_base.with_rho(float(rho)), variant) for rho in rho_grid]


def dominance_check(
    sam_curve: Sequence[TheoryPoint],
    sharpbal_curve: Sequence[TheoryPoint],
    tolerance: float = 1e-12,
) -> DominanceResult:
    """
    Check that the SharpBalance curve has at least the SAM diversity at matched sharpness.

    The SAM curve is interpolated piecewise-linearly as diversity over sharpness upper bound.
    SharpBalance points outside the SAM sharpness range are not compared.

    Args:
        sam_curve: Points of the SAM curve
        sharpbal_curve: Points of the SharpBalance curve
        tolerance: Relative slack on the comparison

    Returns:
        DominanceResult with one comparison per matched point
    """
    sam_points = sorted(
        (p for p in sam_curve if p.ok and p.sharp_upper is not None and p.diversity is not None),
        key=lambda p: p.sharp_upper,
    )
    if len(sam_points) < 2:
        return DominanceResult(dominates=False, reason="SAM curve needs at least two valid points")

    xs = np.array([p.sharp_upper for p in sam_points])
    ys = np.array([p.diversity for p in sam_points])
    comparisons = []
    for point in sharpbal_curve:
        if not point.ok or point.sharp_upper is None or point.diversity is None:
            continue
        if point.sharp_upper < xs[0] or point.sharp_upper > xs[-1]:
            continue
        matched = float(np.interp(point.sharp_upper, xs, ys))
        comparisons.append(DominanceComparison(
            rho=point.rho,
            sharp_upper=point.sharp_upper,
            sharpbal_diversity=point.diversity,
            sam_diversity_at_matched_sharpness=matched,
            margin=point.diversity - matched,
        ))

    if not comparisons:
        return DominanceResult(dominates=False, reason="curves do not overlap in sharpness")

    slack = [tolerance * max(1.0, abs(c.sam_diversity_at_matched_sharpness)) for c in comparisons]
    dominates = all(c.margin >= -s for c, s in zip(comparisons, slack))
    strict = sum(1 for c, s in zip(comparisons, slack) if c.margin > s)
    reason: Optional[str] = None
    if dominates and strict == 0:
        dominates = False
        reason = "curves coincide at every matched point"
    return DominanceResult(dominates=dominates, strict_points=strict, comparisons=comparisons, reason=reason)
