"""
Tests for Narayana numbers, multinomial enumeration and phi
"""

import pytest

from flatdiv.core.error_handler import InvalidParameterError, OrderCapError
from flatdiv.models.configs import PhiParams
from flatdiv.services.combinatorics import (
    catalan,
    marchenko_pastur_expectation,
    multinomial,
    narayana,
    phi,
    trinomial_terms,
    wishart_moment,
)


class TestNarayana:
    """Test Narayana numbers"""

    @pytest.mark.parametrize("m,l,expected", [
        (1, 1, 1), (2, 1, 1), (2, 2, 1), (3, 2, 3), (4, 2, 6), (4, 3, 6), (5, 3, 20),
    ])
    def test_known_values(self, m, l, expected):
        assert narayana(m, l) == expected

    def test_rows_sum_to_catalan(self):
        for m in range(1, 13):
            assert sum(narayana(m, l) for l in range(1, m + 1)) == catalan(m)

    def test_symmetry(self):
        for m in range(1, 9):
            for l in range(1, m + 1):
                assert narayana(m, l) == narayana(m, m + 1 - l)

    def test_out_of_range(self):
        with pytest.raises(InvalidParameterError):
            narayana(3, 0)
        with pytest.raises(InvalidParameterError):
            narayana(3, 4)


class TestMultinomial:
    """Test trinomial enumeration"""

    def test_known_value(self):
        assert multinomial(1, 1, 1) == 6
        assert multinomial(2, 0, 0) == 1

    def test_coefficients_sum_to_power_of_three(self):
        for i in range(0, 8):
            assert sum(coeff for *_, coeff in trinomial_terms(i)) == 3 ** i

    def test_term_count(self):
        assert len(list(trinomial_terms(4))) == 15

    def test_rejects_negative(self):
        with pytest.raises(InvalidParameterError):
            multinomial(1, -1)


class TestPhi:
    """Test the Wishart-moment functional"""

    @pytest.fixture
    def params(self):
        return PhiParams(n_tr=300, d_in=150, eta=0.1, rho=0.4)

    def test_zero_order(self, params):
        assert phi(params, 0, 0) == 1.0

    def test_gram_moments(self, params):
        """phi(0, j) is the Wishart moment c_j"""
        q = params.q
        assert phi(params, 0, 1) == pytest.approx(q)
        assert phi(params, 0, 2) == pytest.approx(q + q * q)
        assert wishart_moment(params, 3) == pytest.approx(q + 3 * q ** 2 + q ** 3)

    def test_first_order(self, params):
        q, eta, rho = params.q, params.eta, params.rho
        expected = 1.0 - eta * q - eta * rho * (q * q + q)
        assert phi(params, 1, 0) == pytest.approx(expected, rel=1e-14)

    def test_sgd_second_order(self):
        """With ρ=0, phi(2, 0) = 1 - 2ηc1 + η²c2"""
        params = PhiParams(n_tr=400, d_in=100, eta=0.05, rho=0.0)
        q, eta = params.q, params.eta
        expected = 1.0 - 2 * eta * q + eta ** 2 * (q + q * q)
        assert phi(params, 2, 0) == pytest.approx(expected, rel=1e-14)

    def test_subset_ratio(self):
        """With S > 1 the ratio is n_tr/(S·d_in)"""
        full = PhiParams(n_tr=3000, d_in=150, eta=0.1, rho=0.4)
        subset = PhiParams(n_tr=3000, d_in=150, eta=0.1, rho=0.4, S=10)
        assert subset.q == pytest.approx(2.0)
        assert phi(subset, 0, 1) == pytest.approx(2.0)
        assert phi(full, 0, 1) == pytest.approx(20.0)

    def test_order_cap(self, params):
        with pytest.raises(OrderCapError):
            phi(params, 5, 0, cap=4)

    def test_negative_order(self, params):
        with pytest.raises(InvalidParameterError):
            phi(params, -1, 0)

    @pytest.mark.parametrize("i,j", [(0, 0), (1, 0), (2, 1), (4, 2), (8, 2)])
    def test_matches_limiting_spectrum_quadrature(self, i, j):
        params = PhiParams(n_tr=3000, d_in=150, eta=0.01, rho=0.4, S=10)
        expected = marchenko_pastur_expectation(params, i, j)
        assert phi(params, i, j) == pytest.approx(expected, rel=1e-6, abs=1e-10)

    def test_quadrature_needs_tall_design(self):
        params = PhiParams(n_tr=150, d_in=150, eta=0.1, rho=0.4)
        marchenko_pastur_expectation(params, 1, 0)
        with pytest.raises(InvalidParameterError):
            marchenko_pastur_expectation(PhiParams(n_tr=300, d_in=150, eta=0.1, rho=0.4, S=3), 1, 0)
