"""Closed-form bound evaluation and stress tests.

Covers the geometric-exponential upper bound on the perturbed/base
ratio, the n-window comparability bracket, the bridge-exponential lower
bound, and the triple-density ratio

    min(p(s,x,u,z), p(u,z,t,y)) / p(s,x,t,y),

which stays bounded for the stable kernel and diverges along Gaussian
midpoint configurations.  All ratios are formed in log space: the
Gaussian divergence reaches exp(R^2/4) and must never pass through a
naive division.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, perturbation, quadrature
from .potentials import Potential


@dataclass
class BoundReport:
    bound_name: str
    points_tested: int
    worst_margin: float
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def upper_bound_value(eta: float, beta: float, tau: float) -> float:
    """The closed-form majorant of ptilde/p: exp(beta tau/(1-eta))/(1-eta)."""
    if not 0.0 <= eta < 1.0:
        raise ValueError("eta must lie in [0, 1)")
    if beta < 0.0 or tau < 0.0:
        raise ValueError("beta and tau must be nonnegative")
    return math.exp(beta * tau / (1.0 - eta)) / (1.0 - eta)


def comparability_window(eta: float, h: float, n: int):
    """Two-sided bracket for ptilde/p on windows shorter than n*h:
    ((1-eta)^n, exp(n eta/(1-eta))/(1-eta))."""
    if not 0.0 <= eta < 1.0:
        raise ValueError("eta must lie in [0, 1)")
    if n < 1:
        raise ValueError("n must be a positive integer")
    lower = (1.0 - eta) ** n
    upper = math.exp(n * eta / (1.0 - eta)) / (1.0 - eta)
    return lower, upper


def check_upper_bound(kernel, q: Potential, cert, point_grid,
                      config: quadrature.QuadratureConfig | None = None,
                      tol: float = 1e-3) -> BoundReport:
    """Asserts ptilde <= bound * p * (1 + tol) on every grid point.

    point_grid is an iterable of (s, x, t, y); q must be nonnegative and
    certified by cert.
    """
    config = config or quadrature.QuadratureConfig()
    worst = math.inf
    violations = []
    count = 0
    for (s, x, t, y) in point_grid:
        count += 1
        ev = perturbation.perturbed_density(kernel, q, s, x, t, y, cert, config)
        p = kernels.density(kernel, s, x, t, y)
        bound = upper_bound_value(cert.eta, cert.beta, t - s) * p
        margin = bound / ev.value if ev.value > 0 else math.inf
        worst = min(worst, margin)
        if ev.value > bound * (1.0 + tol):
            violations.append((s, tuple(np.atleast_1d(x)), t,
                               tuple(np.atleast_1d(y)), ev.value, bound))
    return BoundReport("series ratio vs geometric-exponential majorant",
                       count, worst, violations)


def lower_bound_check(kernel, q: Potential, s, x, t, y, cert,
                      config: quadrature.QuadratureConfig | None = None):
    """Bridge-exponential lower bound on the perturbed/base ratio.

    Returns (lhs, rhs) with lhs = computed ptilde/p and
    rhs = exp(-bridge integral of the negative part); the caller asserts
    lhs >= rhs within tolerance.  q's negative part must be certified
    relatively bounded (cert covers |q|).
    """
    config = config or quadrature.QuadratureConfig()
    ev = perturbation.perturbed_density(kernel, q, s, x, t, y, cert, config)
    p = kernels.density(kernel, s, x, t, y)
    lhs = ev.value / p
    qminus = q.negative_part()
    res = quadrature.bridge_functional(kernel, qminus, s, x, t, y, config)
    rhs = math.exp(-res.value)
    return lhs, rhs


def three_p_ratio(kernel, s, x, u, z, t, y) -> float:
    """min(p(s,x,u,z), p(u,z,t,y)) / p(s,x,t,y), formed in log space."""
    if not s < u < t:
        raise ValueError("need s < u < t")
    lp1 = kernels.log_density(kernel, s, x, u, z)
    lp2 = kernels.log_density(kernel, u, z, t, y)
    lp3 = kernels.log_density(kernel, s, x, t, y)
    return math.exp(min(lp1, lp2) - lp3)


def log_three_p_ratio(kernel, s, x, u, z, t, y) -> float:
    lp1 = kernels.log_density(kernel, s, x, u, z)
    lp2 = kernels.log_density(kernel, u, z, t, y)
    lp3 = kernels.log_density(kernel, s, x, t, y)
    return min(lp1, lp2) - lp3


@dataclass
class ThreePSurvey:
    kernel_family: str
    samples: int
    max_ratio: float
    argmax: tuple | None
    five_p_violations: int
    gaussian_track: list = field(default_factory=list)


def _sample_stable(rng, alpha, size):
    """Symmetric stable variates at unit scale (polar construction)."""
    theta = rng.uniform(-0.5 * math.pi, 0.5 * math.pi, size)
    w = rng.exponential(1.0, size)
    if alpha == 1.0:
        return np.tan(theta)
    g = (np.sin(alpha * theta) / np.cos(theta) ** (1.0 / alpha)
         * (np.cos((1.0 - alpha) * theta) / w) ** ((1.0 - alpha) / alpha))
    return g


def three_p_survey(kernel, sample_count: int = 100_000, seed: int = 0) -> ThreePSurvey:
    """Empirical triple-density ratio survey.

    Stable kernels: scale-invariant random configurations (times
    log-uniform over three decades, positions from the stable law at the
    matching scale plus a uniform far-field slab); reports the empirical
    maximum and checks the five-density variant

        p1 p2 <= c p3 (p1 + p2),  c = empirical max,

    on the same sample.  Gaussian kernels: walks the midpoint family
    (0,0) -> (1,R) -> (2,2R), doubling R until the ratio passes 1e6; the
    ratio grows like sqrt(2) exp(R^2/4), so no finite constant exists.
    """
    if kernel.family == kernels.GAUSSIAN:
        track = []
        R = 2.0
        ratio = 0.0
        while ratio <= 1e6 and R <= 4096.0:
            x = np.zeros(kernel.d)
            z = np.full(kernel.d, R / math.sqrt(kernel.d))
            y = 2.0 * z
            log_ratio = log_three_p_ratio(kernel, 0.0, x, 1.0, z, 2.0, y)
            ratio = math.exp(min(log_ratio, 700.0))
            track.append((R, ratio, log_ratio))
            R *= 2.0
        return ThreePSurvey(kernel.family, len(track), ratio, None, 0, track)

    if kernel.d != 1:
        raise ValueError("the stable survey is implemented for d = 1")
    alpha = kernel.alpha
    rng = np.random.Generator(np.random.Philox(seed))
    n = sample_count
    tau1 = 10.0 ** rng.uniform(-1.5, 1.5, n)
    frac = rng.uniform(0.05, 0.95, n)
    u = frac * tau1
    t = tau1
    scale_u = u ** (1.0 / alpha)
    scale_t = t ** (1.0 / alpha)
    z = _sample_stable(rng, alpha, n) * scale_u
    y = _sample_stable(rng, alpha, n) * scale_t
    far = rng.uniform(0.0, 1.0, n) < 0.2
    z = np.where(far, rng.uniform(-10.0, 10.0, n) * scale_t, z)

    lp1 = kernels.log_density_tau(kernel, u, z[:, None])
    lp2 = kernels.log_density_tau(kernel, t - u, (y - z)[:, None])
    lp3 = kernels.log_density_tau(kernel, t, y[:, None])
    log_ratio = np.minimum(lp1, lp2) - lp3
    imax = int(np.argmax(log_ratio))
    cmax = float(np.exp(log_ratio[imax]))
    # five-density variant with the surveyed constant
    log_c = log_ratio[imax]
    viol = int(np.sum(lp1 + lp2 > log_c + lp3
                      + np.logaddexp(lp1, lp2) + 1e-12))
    argmax = (0.0, 0.0, float(u[imax]), float(z[imax]),
              float(t[imax]), float(y[imax]))
    return ThreePSurvey(kernel.family, n, cmax, argmax, viol, [])
