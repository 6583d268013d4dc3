"""
Tests for closed-form diversity, sharpness bounds and dominance checks
"""

from unittest.mock import patch

import pytest

from flatdiv.models.configs import PhiParams, TheoryConfig, Variant
from flatdiv.models.reports import TheoryPoint
from flatdiv.services.combinatorics import phi
from flatdiv.services.theory import (
    dominance_check,
    sam_diversity,
    sam_sharpness_bounds,
    sharpbal_diversity,
    sharpbal_sharpness_upper,
    theory_point,
    tradeoff_curve,
)


def make_config(rho=0.1, S=1, sigma=1.0, k=2, eta=0.02, rho0=0.5, n_tr=300, d_in=150):
    params = PhiParams(n_tr=n_tr, d_in=d_in, eta=eta, rho=rho, S=S)
    return TheoryConfig(params=params, sigma=sigma, rho0=rho0, k=k)


class TestSamDiversity:
    """Test SAM prediction variance"""

    def test_zero_init_scale(self):
        assert sam_diversity(make_config(sigma=0.0)) == 0.0

    def test_no_training_keeps_init_variance(self):
        """η = 0 leaves the initialization untouched"""
        assert sam_diversity(make_config(eta=0.0, sigma=2.0)) == pytest.approx(4.0)

    def test_equals_phi(self):
        cfg = make_config(sigma=1.5)
        assert sam_diversity(cfg) == pytest.approx(phi(cfg.params, 4, 0) * 2.25)

    def test_decreases_with_radius(self):
        """In the contracting regime a larger radius shrinks every eigen-direction"""
        values = [sam_diversity(make_config(rho=rho)) for rho in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]]
        assert all(later < earlier for earlier, later in zip(values, values[1:]))

    def test_ignores_partitions(self):
        assert sam_diversity(make_config(S=10, n_tr=3000)) == sam_diversity(make_config(n_tr=3000))


class TestSamSharpnessBounds:
    """Test SAM sharpness bounds"""

    def test_lower_below_upper(self):
        for rho in [0.0, 0.2, 0.5]:
            bounds = sam_sharpness_bounds(make_config(rho=rho))
            assert bounds.lower <= bounds.upper

    def test_zero_radius_measurement(self):
        """With ρ0 = 0 the upper bound vanishes and the lower bound is not clamped"""
        bounds = sam_sharpness_bounds(make_config(rho0=0.0))
        assert bounds.upper == 0.0
        assert bounds.lower <= 0.0

    def test_upper_bound_formula(self):
        cfg = make_config()
        q = cfg.params.n_tr / cfg.params.d_in
        expected = 0.125 * (q ** 0.5 + 1) ** 2 + 0.5 * phi(cfg.params, 4, 2) ** 0.5
        assert sam_sharpness_bounds(cfg).upper == pytest.approx(expected, rel=1e-12)


class TestSharpBalance:
    """Test partition-trained diversity and sharpness"""

    def test_single_partition_matches_sam(self):
        cfg = make_config(S=1)
        assert sharpbal_diversity(cfg) == pytest.approx(sam_diversity(cfg), rel=1e-14)

    def test_subset_term_nonnegative(self):
        cfg = make_config(S=10, n_tr=3000, sigma=0.0)
        assert sharpbal_diversity(cfg) >= 0.0

    def test_subset_term_adds_diversity(self):
        """Partitioning adds the teacher-dependent term to the init term"""
        cfg = make_config(S=10, n_tr=3000)
        init_only = phi(cfg.params, 4, 0)
        assert sharpbal_diversity(cfg) > init_only

    def test_upper_bound_positive(self):
        assert sharpbal_sharpness_upper(make_config(S=10, n_tr=3000)) > 0.0


class TestTheoryPoints:
    """Test curve assembly and failure recording"""

    def test_curve_follows_grid_order(self):
        grid = [0.5, 0.3, 0.1]
        curve = tradeoff_curve(make_config(), grid, Variant.SAM)
        assert [p.rho for p in curve] == grid
        assert all(p.ok for p in curve)

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            tradeoff_curve(make_config(), [], Variant.SAM)

    def test_sharpbalance_has_no_lower_bound(self):
        point = theory_point(make_config(S=10, n_tr=3000), Variant.SHARPBALANCE)
        assert point.sharp_lower is None
        assert point.sharp_upper is not None

    def test_negative_constant_recorded_on_point(self):
        with patch("flatdiv.services.theory.sharpbal_bound_constant", return_value=-1.0):
            point = theory_point(make_config(S=10, n_tr=3000), Variant.SHARPBALANCE)
        assert not point.ok
        assert point.error.startswith("NEGATIVE_BOUND_CONSTANT")
        assert point.diversity is None


class TestDominanceCheck:
    """Test matched-sharpness comparison"""

    @pytest.fixture
    def sam_curve(self):
        return [
            TheoryPoint(variant=Variant.SAM, rho=0.5, k=2, diversity=1.0, sharp_lower=0.5, sharp_upper=1.0),
            TheoryPoint(variant=Variant.SAM, rho=0.3, k=2, diversity=3.0, sharp_lower=2.0, sharp_upper=3.0),
        ]

    def test_dominates(self, sam_curve):
        balanced = [TheoryPoint(variant=Variant.SHARPBALANCE, rho=0.4, k=2, diversity=2.5, sharp_upper=2.0)]
        result = dominance_check(sam_curve, balanced)
        assert result.dominates
        assert result.strict_points == 1
        assert result.comparisons[0].sam_diversity_at_matched_sharpness == pytest.approx(2.0)
        assert result.comparisons[0].margin == pytest.approx(0.5)

    def test_coinciding_curves_do_not_dominate(self, sam_curve):
        balanced = [TheoryPoint(variant=Variant.SHARPBALANCE, rho=0.4, k=2, diversity=2.0, sharp_upper=2.0)]
        result = dominance_check(sam_curve, balanced)
        assert not result.dominates
        assert "coincide" in result.reason

    def test_lower_diversity_fails(self, sam_curve):
        balanced = [TheoryPoint(variant=Variant.SHARPBALANCE, rho=0.4, k=2, diversity=1.5, sharp_upper=2.0)]
        assert not dominance_check(sam_curve, balanced).dominates

    def test_no_overlap(self, sam_curve):
        balanced = [TheoryPoint(variant=Variant.SHARPBALANCE, rho=0.4, k=2, diversity=9.0, sharp_upper=10.0)]
        result = dominance_check(sam_curve, balanced)
        assert not result.dominates
        assert result.comparisons == []

    def test_short_sam_curve(self, sam_curve):
        result = dominance_check(sam_curve[:1], sam_curve)
        assert not result.dominates
        assert "two" in result.reason

    @pytest.mark.parametrize("eta,k", [(0.005, 1), (0.01, 2), (0.02, 4)])
    def test_partitioned_curve_dominates_sam(self, eta, k):
        """Full-scale curves over a radius grid reaching zero overlap in sharpness"""
        grid = [round(0.05 * i, 2) for i in range(21)]
        sam = tradeoff_curve(make_config(S=1, eta=eta, k=k, n_tr=3000), grid, Variant.SAM)
        balanced = tradeoff_curve(make_config(S=10, eta=eta, k=k, n_tr=3000), grid, Variant.SHARPBALANCE)
        result = dominance_check(sam, balanced)
        assert result.dominates, result.reason
        assert result.strict_points == len(result.comparisons) > 0
