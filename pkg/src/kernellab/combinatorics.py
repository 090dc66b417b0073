"""Exact-arithmetic verification of the combinatorial series ingredients.

Everything here runs in big-integer rationals (fractions.Fraction), so
the identity checks carry no floating-point doubt.  The one float-valued
routine, majorant_sum, evaluates the per-term series majorant used by
the perturbation module to pick its truncation index.
"""

from __future__ import annotations

import math
from fractions import Fraction

Rational = Fraction


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    raise TypeError("exact routines accept int or Fraction arguments only")


def triple_sum_lhs(n: int, xi, nu, eta) -> Fraction:
    """Exact triple sum over (m, k, j) of
    C(n-m,k) C(m,j) xi^k nu^j / (k! j!) eta^(n-k-j)."""
    if not 0 <= n <= 60:
        raise ValueError("n must lie in [0, 60]")
    xi, nu, eta = _as_fraction(xi), _as_fraction(nu), _as_fraction(eta)
    total = Fraction(0)
    for m in range(n + 1):
        for k in range(n - m + 1):
            for j in range(m + 1):
                total += (Fraction(math.comb(n - m, k) * math.comb(m, j),
                                   math.factorial(k) * math.factorial(j))
                          * xi ** k * nu ** j * eta ** (n - k - j))
    return total


def triple_sum_rhs(n: int, xi, nu, eta) -> Fraction:
    """Exact single sum over r of C(n+1,r+1) (xi+nu)^r / r! eta^(n-r)."""
    if not 0 <= n <= 60:
        raise ValueError("n must lie in [0, 60]")
    xi, nu, eta = _as_fraction(xi), _as_fraction(nu), _as_fraction(eta)
    total = Fraction(0)
    for r in range(n + 1):
        total += (Fraction(math.comb(n + 1, r + 1), math.factorial(r))
                  * (xi + nu) ** r * eta ** (n - r))
    return total


def vandermonde_check(n: int, r: int, j: int) -> tuple[int, int]:
    """Both sides of sum_{m=j}^{n-r+j} C(m,j) C(n-m,r-j) = C(n+1,r+1)."""
    if not 0 <= j <= r <= n <= 200:
        raise ValueError("need 0 <= j <= r <= n <= 200")
    lhs = sum(math.comb(m, j) * math.comb(n - m, r - j)
              for m in range(j, n - r + j + 1))
    return lhs, math.comb(n + 1, r + 1)


def negbinom_partial(k: int, eta, N: int) -> Fraction:
    """Partial sum sum_{n=k}^{N} C(n,k) eta^(n-k).

    Converges upward to (1-eta)^-(k+1) for 0 <= eta < 1; the caller
    asserts that limit.
    """
    if not 0 <= k <= 30:
        raise ValueError("k must lie in [0, 30]")
    eta = _as_fraction(eta)
    if not 0 <= eta < 1:
        raise ValueError("eta must lie in [0, 1)")
    total = Fraction(0)
    for n in range(k, N + 1):
        total += math.comb(n, k) * eta ** (n - k)
    return total


def majorant_term(n: int, eta: float, beta_tau: float) -> float:
    """Per-term majorant b_n = sum_k C(n,k) (beta*tau)^k eta^(n-k) / k!."""
    total = 0.0
    pw = 1.0  # (beta*tau)^k / k!, updated iteratively to dodge overflow
    for k in range(n + 1):
        total += float(math.comb(n, k)) * pw * eta ** (n - k)
        pw *= beta_tau / (k + 1)
    return total


def majorant_sum(eta: float, beta_tau: float, N: int) -> float:
    """Partial sum of the majorant series, sum_{n=0}^N b_n.

    Monotone increasing in N toward exp(beta*tau/(1-eta)) / (1-eta).
    """
    if not 0.0 <= eta < 1.0:
        raise ValueError("eta must lie in [0, 1)")
    if beta_tau < 0.0:
        raise ValueError("beta_tau must be nonnegative")
    return float(sum(majorant_term(n, eta, beta_tau) for n in range(N + 1)))


def majorant_total(eta: float, beta_tau: float) -> float:
    """Closed-form limit of the majorant series."""
    if not 0.0 <= eta < 1.0:
        raise ValueError("eta must lie in [0, 1)")
    return math.exp(beta_tau / (1.0 - eta)) / (1.0 - eta)
