"""
Narayana numbers, multinomial enumeration and the Wishart-moment functional phi.

phi(i, j) is the scalar with E[B^i (AᵀA)^j] = phi(i, j) I at leading order, where
B = I - ηAᵀA - ηρ(AᵀA)². It is evaluated in exact rational arithmetic: q = n_tr/(S·d_in) is
rational and η, ρ are binary floats, so every term is an exact Fraction and the alternating
signs of (-η)^(k2+k3) cancel without rounding. The result is rounded once at the end.
"""

import logging
import math
from fractions import Fraction
from functools import lru_cache
from typing import Iterator, Optional, Tuple

import numpy as np
from scipy import integrate

from flatdiv.core.config import get_global_settings
from flatdiv.core.error_handler import InvalidParameterError, NonFiniteError, OrderCapError
from flatdiv.models.configs import PhiParams

logger = logging.getLogger(__name__)


def binomial(n: int, k: int) -> int:
    if k < 0 or k > n:
        return 0
    return math.comb(n, k)


def narayana_exact(m: int, l: int) -> int:
    """N(m, l) = (1/l)·C(m-1, l-1)·C(m, l-1) as an exact integer."""
    if m < 1 or l < 1 or l > m:
        raise InvalidParameterError(f"narayana needs 1 <= l <= m, got m={m}, l={l}")
    return binomial(m - 1, l - 1) * binomial(m, l - 1) // l


def narayana(m: int, l: int) -> float:
    """
    Narayana number N(m, l) as a real.

    Args:
        m: Positive integer
        l: Integer in [1, m]

    Returns:
        N(m, l)

    Raises:
        InvalidParameterError: l outside [1, m]
    """
    return float(narayana_exact(m, l))


def catalan(m: int) -> int:
    if m < 0:
        raise InvalidParameterError(f"catalan needs m >= 0, got {m}")
    return binomial(2 * m, m) // (m + 1)


def multinomial(*ks: int) -> int:
    """(k1 + k2 + ...)! / (k1! k2! ...)"""
    if any(k < 0 for k in ks):
        raise InvalidParameterError(f"multinomial needs nonnegative parts, got {ks}")
    result = 1
    total = 0
    for k in ks:
        total += k
        result *= binomial(total, k)
    return result


def trinomial_terms(i: int) -> Iterator[Tuple[int, int, int, int]]:
    """Yield (k1, k2, k3, coefficient) for every k1 + k2 + k3 = i."""
    for k2 in range(i + 1):
        for k3 in range(i - k2 + 1):
            k1 = i - k2 - k3
            yield k1, k2, k3, multinomial(k1, k2, k3)


@lru_cache(maxsize=4096)
def _wishart_moment_exact(ratio: Fraction, k: int) -> Fraction:
    if k == 0:
        return Fraction(1)
    return sum((ratio ** l * narayana_exact(k, l) for l in range(1, k + 1)), Fraction(0))


def wishart_moment(params: PhiParams, k: int) -> float:
    """
    Leading-order scalar c_k with E[(AᵀA)^k] = c_k I.

    c_0 = 1 and c_k = Σ_{l=1..k} q^l N(k, l) with q = n_tr/(S·d_in).

    Args:
        params: Moment parameters (only the aspect ratio is used)
        k: Nonnegative power

    Returns:
        c_k
    """
    if k < 0:
        raise InvalidParameterError(f"wishart_moment needs k >= 0, got {k}")
    return float(_wishart_moment_exact(params.ratio, k))


@lru_cache(maxsize=16384)
def _phi_exact(ratio: Fraction, eta: float, rho: float, i: int, j: int) -> Fraction:
    neg_eta = -Fraction(eta)
    rho_q = Fraction(rho)
    total = Fraction(1) if j == 0 else Fraction(0)
    for _, k2, k3, coeff in trinomial_terms(i):
        m = k2 + 2 * k3 + j
        if m == 0:
            continue
        if rho_q == 0 and k3 > 0:
            continue
        total += coeff * neg_eta ** (k2 + k3) * rho_q ** k3 * _wishart_moment_exact(ratio, m)
    return total


def phi(params: PhiParams, i: int, j: int, cap: Optional[int] = None) -> float:
    """
    Wishart-moment functional phi(i, j).

    With params.S > 1 this is the subset functional, since the aspect ratio is n_tr/(S·d_in).

    Args:
        params: Moment parameters
        i: Power of the SAM iteration matrix, 0 <= i <= cap
        j: Power of the gram matrix, j >= 0
        cap: Largest accepted i (defaults to the PHI_ORDER_CAP setting)

    Returns:
        phi(i, j)

    Raises:
        OrderCapError: i exceeds the cap
        NonFiniteError: the value does not fit in a float
    """
    if cap is None:
        cap = get_global_settings().PHI_ORDER_CAP
    if i < 0 or j < 0:
        raise InvalidParameterError(f"phi needs i, j >= 0, got ({i}, {j})")
    if i > cap:
        raise OrderCapError(f"phi order i={i} exceeds the cap of {cap}", details={"cap": cap, "i": i})

    exact = _phi_exact(params.ratio, float(params.eta), float(params.rho), i, j)
    try:
        value = float(exact)
    except OverflowError as exc:
        raise NonFiniteError(f"phi({i}, {j}) overflows a float", details=params.model_dump()) from exc
    return value


def marchenko_pastur_expectation(params: PhiParams, i: int, j: int) -> float:
    """
    E[(1 - ηλ - ηρλ²)^i λ^j] under the limiting spectrum of AᵀA.

    Equal to phi(i, j) at leading order; used as an independent quadrature check.
    Requires an aspect ratio q >= 1 so the limiting law has no atom at zero.

    Args:
        params: Moment parameters
        i: Power of the iteration polynomial
        j: Power of λ

    Returns:
        The expectation by adaptive quadrature
    """
    q = params.q
    if q < 1:
        raise InvalidParameterError(f"quadrature check needs q >= 1, got {q}")
    y = 1.0 / q
    lo = (1.0 - np.sqrt(y)) ** 2
    hi = (1.0 + np.sqrt(y)) ** 2
    eta, rho = params.eta, params.rho

    def integrand(x: float) -> float:
        lam = q * x
        density = np.sqrt(max((hi - x) * (x - lo), 0.0)) / (2.0 * np.pi * y * x)
        return (1.0 - eta * lam - eta * rho * lam * lam) ** i * lam ** j * density

    value, _ = integrate.quad(integrand, lo, hi, limit=200, epsabs=1e-13, epsrel=1e-11)
    return float(value)
